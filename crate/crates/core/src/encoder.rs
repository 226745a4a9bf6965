//! Visual encoder: patch features `v`, pooled local tokens `z` for the
//! language model, and transformer-refined full tokens `c` for the decoder.

use crate::data::Image;
use crate::error::{Error, Result};
use crate::layers::{constant, Linear, SelfBlock};
use crate::model::ModelConfig;
use crate::numerics::{Graph, ParamId, ParamStore, Rng, Tensor, Var};

/// Spatial features with one row per grid cell (row-major over the grid).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImageFeatures {
    pub h: usize,
    pub w: usize,
    /// `(h·w, d)` matrix.
    pub v: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    patch: usize,
    grid: (usize, usize),
    bins: usize,
    pub(crate) patch_embed: Linear,
    pub(crate) local_proj: Linear,
    pub(crate) input_proj: Linear,
    pub(crate) pos_row: ParamId,
    pub(crate) pos_col: ParamId,
    pub(crate) layers: Vec<SelfBlock>,
}

/// Row-major `(p, h·w)` adaptive average pooling matrix. Bin `i` spans rows
/// `⌊i·h/√p⌋ .. ⌊(i+1)·h/√p⌋`, and likewise for columns.
pub fn pooling_matrix(h: usize, w: usize, bins: usize) -> Result<Tensor> {
    let side = (bins as f64).sqrt().round() as usize;
    if bins == 0 || side * side != bins {
        return Err(Error::InvalidBins {
            bins,
            msg: "bin count must be a positive perfect square".into(),
        });
    }
    if side > h.min(w) {
        return Err(Error::InvalidBins {
            bins,
            msg: format!("{side}x{side} bins exceed the {h}x{w} feature map"),
        });
    }
    let mut a = vec![0.0; bins * h * w];
    for by in 0..side {
        let (y0, y1) = (by * h / side, (by + 1) * h / side);
        for bx in 0..side {
            let (x0, x1) = (bx * w / side, (bx + 1) * w / side);
            let weight = 1.0 / ((y1 - y0) * (x1 - x0)) as f64;
            let row = by * side + bx;
            for y in y0..y1 {
                for x in x0..x1 {
                    a[row * h * w + y * w + x] = weight;
                }
            }
        }
    }
    Tensor::new(&[bins, h * w], a)
}

/// One-hot matrices selecting the row and column embedding of each cell.
fn grid_selectors(h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let mut rows = vec![0.0; h * w * h];
    let mut cols = vec![0.0; h * w * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            rows[i * h + y] = 1.0;
            cols[i * w + x] = 1.0;
        }
    }
    (rows, cols)
}

impl Encoder {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        let (h, w) = cfg.grid()?;
        pooling_matrix(h, w, cfg.bins)?;
        let layers = (0..cfg.encoder_layers)
            .map(|i| {
                SelfBlock::new(
                    store,
                    &format!("encoder.layers.{i}"),
                    cfg.d2,
                    cfg.encoder_heads,
                    cfg.encoder_ffn,
                    rng,
                )
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            patch: cfg.patch,
            grid: (h, w),
            bins: cfg.bins,
            patch_embed: Linear::new(store, "encoder.patch", 3 * cfg.patch * cfg.patch, cfg.d, rng)?,
            local_proj: Linear::new(store, "encoder.local", cfg.d, cfg.d1, rng)?,
            input_proj: Linear::new(store, "encoder.input", cfg.d, cfg.d2, rng)?,
            pos_row: store.add_table("encoder.pos_row", &[h, cfg.d2], rng)?,
            pos_col: store.add_table("encoder.pos_col", &[w, cfg.d2], rng)?,
            layers,
        })
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    /// `(h·w, 3·s²)` matrix of flattened patches, channel-major within a patch.
    pub fn patchify(&self, image: &Image) -> Result<Tensor> {
        let s = self.patch;
        let (ih, iw) = (image.height(), image.width());
        if ih % s != 0 || iw % s != 0 {
            return Err(Error::IndivisibleImage {
                height: ih,
                width: iw,
                patch: s,
            });
        }
        let (h, w) = (ih / s, iw / s);
        if (h, w) != self.grid {
            return Err(Error::InvalidShape {
                op: "patchify",
                msg: format!("image gives a {h}x{w} grid, model expects {:?}", self.grid),
            });
        }
        let width = 3 * s * s;
        let mut out = vec![0.0; h * w * width];
        for gy in 0..h {
            for gx in 0..w {
                let row = &mut out[(gy * w + gx) * width..][..width];
                for c in 0..3 {
                    for dy in 0..s {
                        for dx in 0..s {
                            row[(c * s + dy) * s + dx] = image.get(c, gy * s + dy, gx * s + dx);
                        }
                    }
                }
            }
        }
        Tensor::new(&[h * w, width], out)
    }

    /// Linear patch embedding `v = f_φ(x)`.
    pub fn extract_features(&self, g: &mut Graph, image: &Image) -> Result<ImageFeatures> {
        let patches = self.patchify(image)?;
        let x = g.constant(patches);
        self.embed_patches(g, x)
    }

    pub(crate) fn embed_patches(&self, g: &mut Graph, patches: Var) -> Result<ImageFeatures> {
        let v = self.patch_embed.forward(g, patches)?;
        Ok(ImageFeatures {
            h: self.grid.0,
            w: self.grid.1,
            v,
        })
    }

    /// `z = Linear(AvgPool(v))` with `bins` pooled tokens, shape `(bins, d₁)`.
    pub fn local_tokens(&self, g: &mut Graph, feats: &ImageFeatures, bins: usize) -> Result<Var> {
        let pool = pooling_matrix(feats.h, feats.w, bins)?;
        let a = g.constant(pool);
        let pooled = g.matmul(a, feats.v)?;
        self.local_proj.forward(g, pooled)
    }

    /// `c = f_ψ(v)`, shape `(h·w, d₂)`.
    pub fn full_tokens(&self, g: &mut Graph, feats: &ImageFeatures) -> Result<Var> {
        let (h, w) = (feats.h, feats.w);
        let x = self.input_proj.forward(g, feats.v)?;
        let (rs, cs) = grid_selectors(h, w);
        let rsel = constant(g, h * w, h, rs)?;
        let csel = constant(g, h * w, w, cs)?;
        let (pr, pc) = (g.param(self.pos_row), g.param(self.pos_col));
        let pr = g.matmul(rsel, pr)?;
        let pc = g.matmul(csel, pc)?;
        let pos = g.add(pr, pc)?;
        let mut x = g.add(x, pos)?;
        for layer in &self.layers {
            x = layer.forward(g, x, false)?;
        }
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::fdcheck::check_params;

    fn small() -> ModelConfig {
        ModelConfig {
            image_size: 24,
            patch: 6,
            d: 8,
            d1: 8,
            d2: 8,
            bins: 4,
            encoder_layers: 1,
            encoder_heads: 2,
            encoder_ffn: 16,
            ..ModelConfig::default()
        }
    }

    fn random_image(rng: &mut Rng, n: usize) -> Image {
        Image::new(n, n, (0..3 * n * n).map(|_| rng.uniform()).collect()).unwrap()
    }

    #[test]
    fn feature_shape_arithmetic() {
        let cfg = ModelConfig {
            image_size: 64,
            patch: 8,
            d: 32,
            ..ModelConfig::default()
        };
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, &cfg, &mut Rng::new(0)).unwrap();
        let mut g = Graph::with_params(&store);
        let f = enc.extract_features(&mut g, &Image::black(64, 64)).unwrap();
        assert_eq!((f.h, f.w), (8, 8));
        assert_eq!(g.shape(f.v), &[64, 32]);
        let c = enc.full_tokens(&mut g, &f).unwrap();
        assert_eq!(g.shape(c), &[64, cfg.d2]);
        let z = enc.local_tokens(&mut g, &f, 9).unwrap();
        assert_eq!(g.shape(z), &[9, cfg.d1]);
    }

    #[test]
    fn zero_image_zero_bias_gives_zero_features() {
        let cfg = small();
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, &cfg, &mut Rng::new(1)).unwrap();
        let mut g = Graph::with_params(&store);
        let f = enc.extract_features(&mut g, &Image::black(24, 24)).unwrap();
        assert!(g.value(f.v).values().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn indivisible_image_rejected() {
        let cfg = small();
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, &cfg, &mut Rng::new(1)).unwrap();
        let mut g = Graph::with_params(&store);
        assert!(matches!(
            enc.extract_features(&mut g, &Image::black(25, 24)),
            Err(Error::IndivisibleImage { .. })
        ));
    }

    #[test]
    fn single_patch_is_a_direct_linear_map() {
        let cfg = ModelConfig {
            image_size: 6,
            patch: 6,
            d: 5,
            bins: 1,
            ..small()
        };
        let mut store = ParamStore::new();
        let mut rng = Rng::new(2);
        let enc = Encoder::new(&mut store, &cfg, &mut rng).unwrap();
        let img = random_image(&mut rng, 6);
        let mut g = Graph::with_params(&store);
        let f = enc.extract_features(&mut g, &img).unwrap();
        let w = store.value(enc.patch_embed.w);
        let b = store.value(enc.patch_embed.b);
        for j in 0..5 {
            let mut acc = b.values()[j];
            for c in 0..3 {
                for y in 0..6 {
                    for x in 0..6 {
                        acc += img.get(c, y, x) * w.at((c * 6 + y) * 6 + x, j);
                    }
                }
            }
            assert!((g.value(f.v).values()[j] - acc).abs() < 1e-12);
        }
    }

    #[test]
    fn pooling_constant_map() {
        let a = pooling_matrix(8, 8, 9).unwrap();
        let v = Tensor::full(&[64, 3], 2.5);
        let p = crate::numerics::matmul(&a, &v).unwrap();
        assert!(p.values().iter().all(|&x| (x - 2.5).abs() < 1e-12));
    }

    #[test]
    fn pooling_four_by_four_into_four_bins() {
        let mut rng = Rng::new(3);
        let vals: Vec<f64> = (0..16).map(|_| rng.uniform()).collect();
        let a = pooling_matrix(4, 4, 4).unwrap();
        let p = crate::numerics::matmul(&a, &Tensor::new(&[16, 1], vals.clone()).unwrap()).unwrap();
        for by in 0..2 {
            for bx in 0..2 {
                let mut s = 0.0;
                for y in 2 * by..2 * by + 2 {
                    for x in 2 * bx..2 * bx + 2 {
                        s += vals[y * 4 + x];
                    }
                }
                assert!((p.values()[by * 2 + bx] - s / 4.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pooling_preserves_global_mean_when_divisible() {
        let mut rng = Rng::new(4);
        let vals: Vec<f64> = (0..36).map(|_| rng.normal(0.0, 1.0)).collect();
        let a = pooling_matrix(6, 6, 9).unwrap();
        let p = crate::numerics::matmul(&a, &Tensor::new(&[36, 1], vals.clone()).unwrap()).unwrap();
        let mean_bins = p.values().iter().sum::<f64>() / 9.0;
        let mean = vals.iter().sum::<f64>() / 36.0;
        assert!((mean_bins - mean).abs() < 1e-9);
    }

    #[test]
    fn invalid_bins() {
        assert!(matches!(pooling_matrix(8, 8, 8), Err(Error::InvalidBins { .. })));
        assert!(matches!(pooling_matrix(2, 2, 9), Err(Error::InvalidBins { .. })));
        assert!(matches!(pooling_matrix(2, 2, 0), Err(Error::InvalidBins { .. })));
    }

    #[test]
    fn degenerate_block_passes_projection_through() {
        // Zero residual branches and zero positions: output equals the input projection.
        let cfg = small();
        let mut store = ParamStore::new();
        let mut rng = Rng::new(5);
        let enc = Encoder::new(&mut store, &cfg, &mut rng).unwrap();
        for id in [
            enc.layers[0].attn.o.w,
            enc.layers[0].mlp.down.w,
            enc.pos_row,
            enc.pos_col,
        ] {
            store.get_mut(id).tensor.values_mut().fill(0.0);
        }
        let v = store.value(enc.layers[0].attn.v.w).clone();
        assert_eq!(v.shape(), &[8, 8]);
        let img = random_image(&mut rng, 24);
        let mut g = Graph::with_params(&store);
        let f = enc.extract_features(&mut g, &img).unwrap();
        let c = enc.full_tokens(&mut g, &f).unwrap();
        let feats = g.value(f.v).clone();
        let proj = crate::numerics::matmul(&feats, store.value(enc.input_proj.w)).unwrap();
        assert!(g.value(c).max_abs_diff(&proj) < 1e-12);
    }

    #[test]
    fn swapping_patches_swaps_projected_tokens() {
        let cfg = small();
        let mut store = ParamStore::new();
        let mut rng = Rng::new(6);
        let enc = Encoder::new(&mut store, &cfg, &mut rng).unwrap();
        let img = random_image(&mut rng, 24);
        let mut patches = enc.patchify(&img).unwrap();
        let run = |g: &mut Graph, p: Tensor| {
            let x = g.constant(p);
            let f = enc.embed_patches(g, x).unwrap();
            let t = enc.input_proj.forward(g, f.v).unwrap();
            g.value(t).clone()
        };
        let a = run(&mut Graph::with_params(&store), patches.clone());
        let w = patches.shape()[1];
        let (r0, r1) = (patches.row(0).to_vec(), patches.row(5).to_vec());
        patches.values_mut()[..w].copy_from_slice(&r1);
        patches.values_mut()[5 * w..6 * w].copy_from_slice(&r0);
        let b = run(&mut Graph::with_params(&store), patches);
        assert_eq!(a.row(0), b.row(5));
        assert_eq!(a.row(5), b.row(0));
        assert_eq!(a.row(1), b.row(1));
    }

    #[test]
    fn gradient_flows_through_features_and_tokens() {
        let cfg = small();
        let mut store = ParamStore::new();
        let mut rng = Rng::new(7);
        let enc = Encoder::new(&mut store, &cfg, &mut rng).unwrap();
        let img = random_image(&mut rng, 24);
        let target = Tensor::new(&[16, 8], (0..128).map(|_| rng.normal(0.0, 1.0)).collect()).unwrap();
        let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
        let r = check_params(&store, &ids, 3, 1e-6, &mut rng, |g| {
            let f = enc.extract_features(g, &img)?;
            let c = enc.full_tokens(g, &f)?;
            let t = g.constant(target.clone());
            let p = g.mul(c, t)?;
            let z = enc.local_tokens(g, &f, 4)?;
            let a = g.sum(p);
            let b = g.mul(z, z)?;
            let b = g.sum(b);
            g.add(a, b)
        })
        .unwrap();
        assert!(r.max_rel_err < 1e-4, "{r:?}");
    }
}
