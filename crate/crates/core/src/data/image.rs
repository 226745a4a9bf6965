use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Error, Result};

/// RGB raster stored channel-major (`3 × H × W`) with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != 3 * height * width {
            return Err(Error::InvalidShape {
                op: "image",
                msg: format!("{} values cannot form a 3x{height}x{width} raster", data.len()),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("image".into()));
        }
        Ok(Self { height, width, data })
    }

    pub fn black(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; 3 * height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, channel: usize, y: usize, x: usize) -> f64 {
        self.data[(channel * self.height + y) * self.width + x]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        for (c, v) in rgb.into_iter().enumerate() {
            self.data[(c * self.height + y) * self.width + x] = v;
        }
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        [self.get(0, y, x), self.get(1, y, x), self.get(2, y, x)]
    }

    pub fn hflip(&self) -> Image {
        let mut out = self.clone();
        for c in 0..3 {
            for y in 0..self.height {
                let row = (c * self.height + y) * self.width;
                out.data[row..row + self.width].reverse();
            }
        }
        out
    }

    /// Draws a one-pixel rectangle outline given pixel corners.
    pub fn draw_rect(&mut self, corners: [f64; 4], rgb: [f64; 3]) {
        let clamp_x = |v: f64| (v.round().max(0.0) as usize).min(self.width - 1);
        let clamp_y = |v: f64| (v.round().max(0.0) as usize).min(self.height - 1);
        let (x0, y0) = (clamp_x(corners[0]), clamp_y(corners[1]));
        let (x1, y1) = (clamp_x(corners[2] - 1.0), clamp_y(corners[3] - 1.0));
        for x in x0..=x1.max(x0) {
            self.set_pixel(y0, x, rgb);
            self.set_pixel(y1.max(y0), x, rgb);
        }
        for y in y0..=y1.max(y0) {
            self.set_pixel(y, x0, rgb);
            self.set_pixel(y, x1.max(x0), rgb);
        }
    }

    /// Writes an 8-bit RGB PNG. Values `k/255` survive the round trip exactly.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut enc = png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let fmt = |e: png::EncodingError| Error::Format {
            path: path.into(),
            msg: e.to_string(),
        };
        let mut writer = enc.write_header().map_err(fmt)?;
        let mut bytes = Vec::with_capacity(3 * self.height * self.width);
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..3 {
                    bytes.push((self.get(c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
                }
            }
        }
        writer.write_image_data(&bytes).map_err(fmt)?;
        writer.finish().map_err(fmt)
    }

    pub fn load_png(path: &Path) -> Result<Image> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let fmt = |msg: String| Error::Format {
            path: path.into(),
            msg,
        };
        let mut dec = png::Decoder::new(BufReader::new(file));
        dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
        let mut reader = dec.read_info().map_err(|e| fmt(e.to_string()))?;
        let size = reader
            .output_buffer_size()
            .ok_or_else(|| fmt("image too large".into()))?;
        let mut buf = vec![0u8; size];
        let info = reader.next_frame(&mut buf).map_err(|e| fmt(e.to_string()))?;
        let (h, w) = (info.height as usize, info.width as usize);
        let channels = match info.color_type {
            png::ColorType::Grayscale => 1,
            png::ColorType::GrayscaleAlpha => 2,
            png::ColorType::Rgb => 3,
            png::ColorType::Rgba => 4,
            other => return Err(fmt(format!("unsupported color type {other:?}"))),
        };
        let mut img = Image::black(h, w);
        for y in 0..h {
            for x in 0..w {
                let px = &buf[(y * w + x) * channels..];
                let rgb = if channels < 3 {
                    [px[0]; 3]
                } else {
                    [px[0], px[1], px[2]]
                };
                img.set_pixel(y, x, rgb.map(|b| f64::from(b) / 255.0));
            }
        }
        Ok(img)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_exact_for_byte_levels() {
        let mut img = Image::black(4, 5);
        img.set_pixel(1, 2, [1.0, 128.0 / 255.0, 3.0 / 255.0]);
        img.set_pixel(3, 4, [0.2, 0.4, 0.6]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.png");
        img.save_png(&p).unwrap();
        assert_eq!(Image::load_png(&p).unwrap(), img);
    }

    #[test]
    fn hflip_twice_is_identity() {
        let mut img = Image::black(2, 3);
        img.set_pixel(0, 0, [1.0, 0.0, 0.0]);
        let f = img.hflip();
        assert_eq!(f.pixel(0, 2), [1.0, 0.0, 0.0]);
        assert_eq!(f.hflip(), img);
    }

    #[test]
    fn rejects_bad_length() {
        assert!(Image::new(2, 2, vec![0.0; 11]).is_err());
    }
}
