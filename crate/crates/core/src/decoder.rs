//! Visual decoder: conditional object queries cross-attending to the full
//! visual tokens, followed by match-probability and box heads.

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::layers::{Attn, Linear, Mlp, Norm};
use crate::model::ModelConfig;
use crate::numerics::{Graph, ParamId, ParamStore, Rng, Tensor, Var};

/// Column of the classification head holding the "matched" logit.
pub const MATCHED: usize = 0;
pub const NOT_MATCHED: usize = 1;

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct DecoderLayer {
    pub ln_self: Norm,
    pub self_attn: Option<Attn>,
    pub ln_cross: Norm,
    pub cross: Attn,
    pub ln_ff: Norm,
    pub mlp: Mlp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    pub(crate) queries: ParamId,
    pub(crate) cond: Linear,
    pub(crate) mem_norm: Norm,
    pub(crate) layers: Vec<DecoderLayer>,
    pub(crate) ln_f: Norm,
    pub(crate) cls: Linear,
    pub(crate) box_mlp: Vec<Linear>,
    num_queries: usize,
}

/// Per-layer keys and values of the normalized visual tokens, shared by
/// every condition of one image.
#[derive(Debug, Clone)]
pub struct DecoderMemory {
    kv: Vec<(Var, Var)>,
}

/// Head outputs on the tape.
#[derive(Debug, Clone, Copy)]
pub struct HeadOutput {
    /// `(N, 2)` logits over {matched, not matched}.
    pub cls_logits: Var,
    /// `(N, 4)` center-size boxes in `(0, 1)`.
    pub boxes: Var,
}

/// N scored boxes for one conditioning token.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionOutput {
    /// Softmax rows `[p_matched, p_not_matched]`.
    pub match_probs: Vec<[f64; 2]>,
    pub boxes: Vec<BBox>,
    pub condition: String,
    pub position: usize,
}

impl DetectionOutput {
    pub fn from_heads(g: &Graph, out: &HeadOutput, condition: &str, position: usize) -> Result<Self> {
        let logits = g.value(out.cls_logits);
        let boxes = g.value(out.boxes);
        let n = logits.shape()[0];
        let mut match_probs = Vec::with_capacity(n);
        let mut bs = Vec::with_capacity(n);
        for i in 0..n {
            let l = logits.row(i);
            let mx = l[0].max(l[1]);
            let (a, b) = ((l[0] - mx).exp(), (l[1] - mx).exp());
            match_probs.push([a / (a + b), b / (a + b)]);
            let r = boxes.row(i);
            bs.push(BBox::center_size(r[0], r[1], r[2], r[3])?);
        }
        Ok(Self {
            match_probs,
            boxes: bs,
            condition: condition.to_string(),
            position,
        })
    }

    pub fn p_matched(&self, i: usize) -> f64 {
        self.match_probs[i][MATCHED]
    }

    /// Query with the highest matched probability (lowest index on ties).
    pub fn best(&self) -> usize {
        let mut best = 0;
        for i in 1..self.match_probs.len() {
            if self.p_matched(i) > self.p_matched(best) {
                best = i;
            }
        }
        best
    }
}

impl Decoder {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        let d2 = cfg.d2;
        let layers = (0..cfg.decoder_layers)
            .map(|i| {
                let n = format!("decoder.layers.{i}");
                Ok(DecoderLayer {
                    ln_self: Norm::new(store, &format!("{n}.ln_self"), d2)?,
                    self_attn: if cfg.query_self_attention {
                        Some(Attn::new(store, &format!("{n}.self"), d2, cfg.decoder_heads, rng)?)
                    } else {
                        None
                    },
                    ln_cross: Norm::new(store, &format!("{n}.ln_cross"), d2)?,
                    cross: Attn::new(store, &format!("{n}.cross"), d2, cfg.decoder_heads, rng)?,
                    ln_ff: Norm::new(store, &format!("{n}.ln_ff"), d2)?,
                    mlp: Mlp::new(store, &format!("{n}.mlp"), d2, cfg.decoder_ffn, rng)?,
                })
            })
            .collect::<Result<_>>()?;
        let mut box_mlp = Vec::new();
        for i in 0..cfg.box_layers {
            let out = if i + 1 == cfg.box_layers { 4 } else { d2 };
            box_mlp.push(Linear::new(store, &format!("decoder.box.{i}"), d2, out, rng)?);
        }
        Ok(Self {
            queries: store.add_table("decoder.queries", &[cfg.queries, d2], rng)?,
            cond: Linear::new(store, "decoder.cond", cfg.d1, d2, rng)?,
            mem_norm: Norm::new(store, "decoder.mem_norm", d2)?,
            layers,
            ln_f: Norm::new(store, "decoder.ln_f", d2)?,
            cls: Linear::new(store, "decoder.cls", d2, 2, rng)?,
            box_mlp,
            num_queries: cfg.queries,
        })
    }

    pub fn num_queries(&self) -> usize {
        self.num_queries
    }

    /// Normalizes the full tokens and projects keys/values for every layer.
    pub fn prepare_memory(&self, g: &mut Graph, c: Var) -> Result<DecoderMemory> {
        let mem = self.mem_norm.forward(g, c)?;
        let kv = self
            .layers
            .iter()
            .map(|l| l.cross.memory(g, mem))
            .collect::<Result<_>>()?;
        Ok(DecoderMemory { kv })
    }

    /// `q̄ = q + Linear(Repeat(e))` for a `(1, d₁)` or `(d₁,)` latent.
    pub fn condition_queries(&self, g: &mut Graph, e: Var) -> Result<Var> {
        let d1 = g.value(e).len();
        let e = if g.shape(e).len() == 1 { g.reshape(e, &[1, d1])? } else { e };
        if g.shape(e)[0] != 1 {
            return Err(Error::InvalidShape {
                op: "condition_queries",
                msg: format!("latent must be a single row, got {:?}", g.shape(e)),
            });
        }
        let offset = self.cond.forward(g, e)?;
        let offset = g.repeat_rows(offset, self.num_queries)?;
        let q = g.param(self.queries);
        g.add(q, offset)
    }

    /// Decoder layers: optional query self-attention, cross-attention into the
    /// visual memory, and a feed-forward block, all pre-norm with residuals.
    pub fn cross_attend(&self, g: &mut Graph, memory: &DecoderMemory, qbar: Var) -> Result<Var> {
        let mut x = qbar;
        for (layer, &kv) in self.layers.iter().zip(&memory.kv) {
            if let Some(sa) = &layer.self_attn {
                let h = layer.ln_self.forward(g, x)?;
                let a = sa.self_attend(g, h, false)?;
                x = g.add(x, a)?;
            }
            let h = layer.ln_cross.forward(g, x)?;
            let a = layer.cross.attend(g, h, kv, false)?;
            x = g.add(x, a)?;
            let h = layer.ln_ff.forward(g, x)?;
            let m = layer.mlp.forward(g, h)?;
            x = g.add(x, m)?;
        }
        self.ln_f.forward(g, x)
    }

    pub fn predict_heads(&self, g: &mut Graph, qhat: Var) -> Result<HeadOutput> {
        let cls_logits = self.cls.forward(g, qhat)?;
        let mut h = qhat;
        for (i, lin) in self.box_mlp.iter().enumerate() {
            h = lin.forward(g, h)?;
            if i + 1 < self.box_mlp.len() {
                h = g.relu(h);
            }
        }
        Ok(HeadOutput {
            cls_logits,
            boxes: g.sigmoid(h),
        })
    }

    /// One independent pass per latent; outputs follow the input order.
    pub fn detect_for_conditions(&self, g: &mut Graph, c: Var, latents: &[Var]) -> Result<Vec<HeadOutput>> {
        if latents.is_empty() {
            return Ok(Vec::new());
        }
        let memory = self.prepare_memory(g, c)?;
        latents
            .iter()
            .map(|&e| {
                let qbar = self.condition_queries(g, e)?;
                let qhat = self.cross_attend(g, &memory, qbar)?;
                self.predict_heads(g, qhat)
            })
            .collect()
    }
}

/// Latent vector as a graph constant row.
pub(crate) fn latent_row(g: &mut Graph, e: &Tensor) -> Result<Var> {
    Ok(g.constant(e.reshaped(&[1, e.len()])?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::fdcheck::check_inputs_with;

    fn cfg() -> ModelConfig {
        ModelConfig {
            d1: 8,
            d2: 8,
            queries: 5,
            decoder_layers: 2,
            decoder_heads: 2,
            decoder_ffn: 16,
            ..ModelConfig::default()
        }
    }

    fn rand(rng: &mut Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.normal(0.0, 1.0)).collect()).unwrap()
    }

    #[test]
    fn zero_projection_leaves_queries() {
        let mut store = ParamStore::new();
        let dec = Decoder::new(&mut store, &cfg(), &mut Rng::new(0)).unwrap();
        store.get_mut(dec.cond.w).tensor.values_mut().fill(0.0);
        let mut g = Graph::with_params(&store);
        let e = g.constant(rand(&mut Rng::new(1), &[1, 8]));
        let qbar = dec.condition_queries(&mut g, e).unwrap();
        assert!(g.value(qbar).max_abs_diff(store.value(dec.queries)) < 1e-15);
    }

    #[test]
    fn conditioning_offset_is_shared_by_rows() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(2);
        let dec = Decoder::new(&mut store, &cfg(), &mut rng).unwrap();
        let mut g = Graph::with_params(&store);
        let e = g.constant(rand(&mut rng, &[8]));
        let qbar = dec.condition_queries(&mut g, e).unwrap();
        let q = store.value(dec.queries);
        let qb = g.value(qbar);
        let off0: Vec<f64> = (0..8).map(|j| qb.at(0, j) - q.at(0, j)).collect();
        for i in 1..5 {
            for j in 0..8 {
                assert!((qb.at(i, j) - q.at(i, j) - off0[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn different_latents_give_different_queries() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(3);
        let dec = Decoder::new(&mut store, &cfg(), &mut rng).unwrap();
        let (ea, eb) = (rand(&mut rng, &[1, 8]), rand(&mut rng, &[1, 8]));
        let mut g = Graph::with_params(&store);
        let (va, vb) = (g.constant(ea.clone()), g.constant(eb.clone()));
        let qa = dec.condition_queries(&mut g, va).unwrap();
        let qb = dec.condition_queries(&mut g, vb).unwrap();
        // Matmul oracle for the first row's offset.
        let w = store.value(dec.cond.w);
        let q = store.value(dec.queries);
        for j in 0..8 {
            let off: f64 = (0..8).map(|k| ea.values()[k] * w.at(k, j)).sum();
            assert!((g.value(qa).at(0, j) - q.at(0, j) - off).abs() < 1e-12);
        }
        assert!(g.value(qa).max_abs_diff(g.value(qb)) > 0.0);
    }

    #[test]
    fn latent_width_mismatch_is_an_error() {
        let mut store = ParamStore::new();
        let dec = Decoder::new(&mut store, &cfg(), &mut Rng::new(4)).unwrap();
        let mut g = Graph::with_params(&store);
        let e = g.constant(Tensor::zeros(&[1, 7]));
        assert!(dec.condition_queries(&mut g, e).is_err());
    }

    #[test]
    fn output_shapes_and_ranges() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(5);
        let dec = Decoder::new(&mut store, &cfg(), &mut rng).unwrap();
        let mut g = Graph::with_params(&store);
        let c = g.constant(rand(&mut rng, &[12, 8]));
        let e = g.constant(rand(&mut rng, &[1, 8]));
        let outs = dec.detect_for_conditions(&mut g, c, &[e]).unwrap();
        assert_eq!(g.shape(outs[0].cls_logits), &[5, 2]);
        assert_eq!(g.shape(outs[0].boxes), &[5, 4]);
        let det = DetectionOutput::from_heads(&g, &outs[0], "cup", 3).unwrap();
        for (p, b) in det.match_probs.iter().zip(&det.boxes) {
            assert!((p[0] + p[1] - 1.0).abs() < 1e-12);
            assert!(b.coords().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn single_visual_token_gives_its_value_projection() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(6);
        let dec = Decoder::new(&mut store, &cfg(), &mut rng).unwrap();
        let mut g = Graph::with_params(&store);
        let mem = g.constant(rand(&mut rng, &[1, 8]));
        let x = g.constant(rand(&mut rng, &[5, 8]));
        let attn = &dec.layers[0].cross;
        let kv = attn.memory(&mut g, mem).unwrap();
        let q = attn.q.forward(&mut g, x).unwrap();
        let a = g.attention(q, kv.0, kv.1, attn.heads, false).unwrap();
        let v = g.value(kv.1).row(0).to_vec();
        for i in 0..5 {
            for (x, y) in g.value(a).row(i).iter().zip(&v) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn empty_conditions_give_empty_output() {
        let mut store = ParamStore::new();
        let dec = Decoder::new(&mut store, &cfg(), &mut Rng::new(7)).unwrap();
        let mut g = Graph::with_params(&store);
        let c = g.constant(Tensor::zeros(&[4, 8]));
        assert!(dec.detect_for_conditions(&mut g, c, &[]).unwrap().is_empty());
    }

    #[test]
    fn conditions_are_independent() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(8);
        let dec = Decoder::new(&mut store, &cfg(), &mut rng).unwrap();
        let (ct, ea, eb) = (rand(&mut rng, &[12, 8]), rand(&mut rng, &[1, 8]), rand(&mut rng, &[1, 8]));
        let run = |latents: &[&Tensor]| {
            let mut g = Graph::with_params(&store);
            let c = g.constant(ct.clone());
            let vs: Vec<Var> = latents.iter().map(|t| g.constant((*t).clone())).collect();
            let outs = dec.detect_for_conditions(&mut g, c, &vs).unwrap();
            outs.iter()
                .map(|o| (g.value(o.cls_logits).clone(), g.value(o.boxes).clone()))
                .collect::<Vec<_>>()
        };
        let alone = run(&[&ea]);
        let both = run(&[&eb, &ea]);
        assert_eq!(alone[0], both[1]);
    }

    #[test]
    fn gradients_reach_tokens_and_queries() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(9);
        let dec = Decoder::new(&mut store, &cfg(), &mut rng).unwrap();
        let inputs = [rand(&mut rng, &[6, 8]), rand(&mut rng, &[5, 8])];
        let target = rand(&mut rng, &[5, 4]);
        let r = check_inputs_with(&store, &inputs, 1e-6, |g, v| {
            let mem = dec.prepare_memory(g, v[0])?;
            let qhat = dec.cross_attend(g, &mem, v[1])?;
            let out = dec.predict_heads(g, qhat)?;
            let t = g.constant(target.clone());
            let p = g.mul(out.boxes, t)?;
            let a = g.sum(p);
            let b = g.mul(out.cls_logits, out.cls_logits)?;
            let b = g.sum(b);
            g.add(a, b)
        })
        .unwrap();
        assert!(r.max_rel_err < 1e-4, "{r:?}");
    }
}
