//! Bounding boxes, IoU/GIoU and the box regression losses.
//!
//! Boxes are normalized to `[0, 1]` image coordinates. The model predicts in
//! center-size form; overlap computations go through corner form.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoxForm {
    /// `(cx, cy, w, h)`
    CenterSize,
    /// `(x0, y0, x1, y1)`
    Corners,
}

/// Axis-aligned box in one of the two coordinate forms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    form: BoxForm,
    coords: [f64; 4],
}

impl BBox {
    pub fn center_size(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(BoxForm::CenterSize, [cx, cy, w, h])
    }

    pub fn corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        Self::new(BoxForm::Corners, [x0, y0, x1, y1])
    }

    pub fn new(form: BoxForm, coords: [f64; 4]) -> Result<Self> {
        let ok = match form {
            BoxForm::CenterSize => coords[2] >= 0.0 && coords[3] >= 0.0,
            BoxForm::Corners => coords[0] <= coords[2] && coords[1] <= coords[3],
        };
        if !ok || coords.iter().any(|c| !c.is_finite()) {
            return Err(Error::NegativeExtent(coords));
        }
        Ok(Self { form, coords })
    }

    pub fn form(&self) -> BoxForm {
        self.form
    }

    pub fn coords(&self) -> [f64; 4] {
        self.coords
    }

    pub fn convert(&self, target: BoxForm) -> BBox {
        if target == self.form {
            return *self;
        }
        let c = self.coords;
        let coords = match target {
            BoxForm::Corners => [
                c[0] - c[2] / 2.0,
                c[1] - c[3] / 2.0,
                c[0] + c[2] / 2.0,
                c[1] + c[3] / 2.0,
            ],
            BoxForm::CenterSize => [
                (c[0] + c[2]) / 2.0,
                (c[1] + c[3]) / 2.0,
                c[2] - c[0],
                c[3] - c[1],
            ],
        };
        BBox {
            form: target,
            coords,
        }
    }

    pub fn to_corners(&self) -> [f64; 4] {
        self.convert(BoxForm::Corners).coords
    }

    pub fn to_center_size(&self) -> [f64; 4] {
        self.convert(BoxForm::CenterSize).coords
    }

    pub fn area(&self) -> f64 {
        let [x0, y0, x1, y1] = self.to_corners();
        (x1 - x0) * (y1 - y0)
    }

    /// Clamps corners into `[0, 1]`; only used on values leaving the model.
    pub fn clamped(&self) -> BBox {
        let [x0, y0, x1, y1] = self.to_corners().map(|v| v.clamp(0.0, 1.0));
        BBox {
            form: BoxForm::Corners,
            coords: [x0, y0, x1, y1],
        }
        .convert(self.form)
    }

    /// Mirror across the vertical center line of the image.
    pub fn hflip(&self) -> BBox {
        let [x0, y0, x1, y1] = self.to_corners();
        BBox {
            form: BoxForm::Corners,
            coords: [1.0 - x1, y0, 1.0 - x0, y1],
        }
        .convert(self.form)
    }
}

/// IoU or GIoU together with the degeneracy flag.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Overlap {
    pub value: f64,
    /// Set when the union (IoU) or hull (GIoU) has zero area; `value` is 0.
    pub degenerate: bool,
}

struct PairAreas {
    inter: f64,
    union: f64,
    hull: f64,
}

fn pair_areas(a: &BBox, b: &BBox) -> PairAreas {
    let [ax0, ay0, ax1, ay1] = a.to_corners();
    let [bx0, by0, bx1, by1] = b.to_corners();
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    let hull = (ax1.max(bx1) - ax0.min(bx0)) * (ay1.max(by1) - ay0.min(by0));
    PairAreas { inter, union, hull }
}

pub fn overlap(a: &BBox, b: &BBox) -> Overlap {
    let p = pair_areas(a, b);
    if p.union <= 0.0 {
        return Overlap {
            value: 0.0,
            degenerate: true,
        };
    }
    Overlap {
        value: p.inter / p.union,
        degenerate: false,
    }
}

pub fn generalized_overlap(a: &BBox, b: &BBox) -> Overlap {
    let p = pair_areas(a, b);
    if p.union <= 0.0 || p.hull <= 0.0 {
        return Overlap {
            value: 0.0,
            degenerate: true,
        };
    }
    Overlap {
        // The hull contains the union; rounding must not make the penalty negative.
        value: p.inter / p.union - (p.hull - p.union).max(0.0) / p.hull,
        degenerate: false,
    }
}

/// Intersection over union, 0 for a degenerate pair.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    overlap(a, b).value
}

/// `IoU − (hull − union) / hull`, 0 for a degenerate pair.
pub fn giou(a: &BBox, b: &BBox) -> f64 {
    generalized_overlap(a, b).value
}

/// Scalar box losses for one prediction/target pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxLoss {
    /// Mean absolute difference of the four center-size coordinates.
    pub l1: f64,
    /// `1 − GIoU`.
    pub giou: f64,
}

pub fn box_loss(pred: &BBox, gt: &BBox) -> Result<BoxLoss> {
    if pred.form != BoxForm::CenterSize || gt.form != BoxForm::CenterSize {
        return Err(Error::MixedBoxForms(format!(
            "box_loss expects center-size boxes, got {:?} and {:?}",
            pred.form, gt.form
        )));
    }
    let l1 = pred
        .coords
        .iter()
        .zip(&gt.coords)
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / 4.0;
    Ok(BoxLoss {
        l1,
        giou: 1.0 - giou(pred, gt),
    })
}

/// Which box regression terms enter the loss (and the matching cost).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoxLossMode {
    L1,
    Giou,
    #[default]
    Sum,
}

impl BoxLossMode {
    pub fn combine(self, l1: f64, giou: f64) -> f64 {
        match self {
            BoxLossMode::L1 => l1,
            BoxLossMode::Giou => giou,
            BoxLossMode::Sum => l1 + giou,
        }
    }
}

/// Differentiable box losses on the tape.
///
/// `pred` and `target` are `[k, 4]` center-size matrices. Returns
/// `(l1, giou_loss)` as `[k, 1]` columns: per-row mean absolute error and
/// `1 − GIoU`. Non-smooth points (touching edges, coordinate ties) take the
/// max/min tie rule of the tape.
pub fn box_losses_on_graph(g: &mut Graph, pred: Var, target: Var) -> Result<(Var, Var)> {
    let k = g.shape(pred)[0];
    let diff = g.sub(pred, target)?;
    let adiff = g.abs(diff);
    let quarter = g.constant(crate::numerics::Tensor::full(&[4, 1], 0.25));
    let l1 = g.matmul(adiff, quarter)?;

    let to_corners = |g: &mut Graph, b: Var| -> Result<[Var; 4]> {
        let cx = g.slice_cols(b, 0, 1)?;
        let cy = g.slice_cols(b, 1, 2)?;
        let w = g.slice_cols(b, 2, 3)?;
        let h = g.slice_cols(b, 3, 4)?;
        let hw = g.scale(w, 0.5);
        let hh = g.scale(h, 0.5);
        Ok([g.sub(cx, hw)?, g.sub(cy, hh)?, g.add(cx, hw)?, g.add(cy, hh)?])
    };
    let [ax0, ay0, ax1, ay1] = to_corners(g, pred)?;
    let [bx0, by0, bx1, by1] = to_corners(g, target)?;
    let area = |g: &mut Graph, x0, y0, x1, y1| -> Result<Var> {
        let w = g.sub(x1, x0)?;
        let h = g.sub(y1, y0)?;
        g.mul(w, h)
    };
    let area_a = area(g, ax0, ay0, ax1, ay1)?;
    let area_b = area(g, bx0, by0, bx1, by1)?;
    let ix0 = g.maximum(ax0, bx0)?;
    let iy0 = g.maximum(ay0, by0)?;
    let ix1 = g.minimum(ax1, bx1)?;
    let iy1 = g.minimum(ay1, by1)?;
    let iw = g.sub(ix1, ix0)?;
    let ih = g.sub(iy1, iy0)?;
    let iw = g.relu(iw);
    let ih = g.relu(ih);
    let inter = g.mul(iw, ih)?;
    let sum_area = g.add(area_a, area_b)?;
    let union = g.sub(sum_area, inter)?;
    let hx0 = g.minimum(ax0, bx0)?;
    let hy0 = g.minimum(ay0, by0)?;
    let hx1 = g.maximum(ax1, bx1)?;
    let hy1 = g.maximum(ay1, by1)?;
    let hull = area(g, hx0, hy0, hx1, hy1)?;
    let iou = g.div(inter, union)?;
    let gap = g.sub(hull, union)?;
    let penalty = g.div(gap, hull)?;
    let giou = g.sub(iou, penalty)?;
    let neg = g.neg(giou);
    let giou_loss = g.add_scalar(neg, 1.0);
    debug_assert_eq!(g.shape(giou_loss), &[k, 1]);
    Ok((l1, giou_loss))
}
