use proptest::prelude::*;

use super::fdcheck::check_inputs;
use super::*;
use super::Rng;
use crate::error::Error;

fn t(shape: &[usize], v: &[f64]) -> Tensor {
    Tensor::new(shape, v.to_vec()).unwrap()
}

fn rand_t(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    t(shape, &(0..n).map(|_| rng.normal(0.0, 1.0)).collect::<Vec<_>>())
}

/// Triple-loop product used as the reference for the gemm-backed op.
fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a.at(i, p) * b.at(p, j);
            }
        }
    }
    out
}

#[test]
fn matmul_identity() {
    let a = t(&[2, 2], &[0.3, -1.2, 4.0, 2.5]);
    assert_eq!(matmul(&Tensor::eye(2), &a).unwrap(), a);
}

#[test]
fn matmul_two_by_two() {
    let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
    let b = t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]);
    let c = matmul(&a, &b).unwrap();
    assert_eq!(naive_matmul(&a, &b), vec![19.0, 22.0, 43.0, 50.0]);
    assert_eq!(c.values(), &[19.0, 22.0, 43.0, 50.0]);
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let a = Tensor::zeros(&[2, 3]);
    let err = matmul(&a, &a).unwrap_err();
    match err {
        Error::ShapeMismatch { lhs, rhs, .. } => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("unexpected {other:?}"),
    }
    assert!(err_text(&Tensor::zeros(&[2, 3])).contains("[2, 3]"));
}

fn err_text(a: &Tensor) -> String {
    matmul(a, a).unwrap_err().to_string()
}

#[test]
fn matmul_random_matches_naive() {
    let mut rng = Rng::new(11);
    for (m, k, n) in [(1, 1, 1), (3, 5, 2), (7, 4, 9), (16, 16, 16)] {
        let a = rand_t(&mut rng, &[m, k]);
        let b = rand_t(&mut rng, &[k, n]);
        let c = matmul(&a, &b).unwrap();
        for (x, y) in c.values().iter().zip(naive_matmul(&a, &b)) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn matmul_broadcasts_leading_axes() {
    let mut rng = Rng::new(5);
    let a = rand_t(&mut rng, &[3, 2, 4]);
    let b = rand_t(&mut rng, &[4, 5]);
    let b3 = b.reshaped(&[1, 4, 5]).unwrap();
    let c = matmul(&a, &b3).unwrap();
    assert_eq!(c.shape(), &[3, 2, 5]);
    for batch in 0..3 {
        let ab = t(&[2, 4], &a.values()[batch * 8..(batch + 1) * 8]);
        let expect = naive_matmul(&ab, &b);
        for (x, y) in c.values()[batch * 10..(batch + 1) * 10].iter().zip(expect) {
            assert!((x - y).abs() < 1e-12);
        }
    }
    let bad = rand_t(&mut rng, &[2, 4, 5]);
    assert!(matmul(&a, &bad).is_err());
}

#[test]
fn softmax_uniform_and_shift_invariant() {
    let s = softmax(&t(&[3], &[0.0, 0.0, 0.0]), 0).unwrap();
    for v in s.values() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let x = t(&[4], &[0.5, -2.0, 3.0, 1.0]);
    let shifted = t(&[4], &[100.5, 98.0, 103.0, 101.0]);
    let (a, b) = (softmax(&x, 0).unwrap(), softmax(&shifted, 0).unwrap());
    assert!(a.max_abs_diff(&b) < 1e-12);
}

#[test]
fn softmax_matches_direct_formula() {
    // exp(k) / (e + e² + e³) evaluated independently of the op.
    let z = 1f64.exp() + 2f64.exp() + 3f64.exp();
    let expect = [1f64.exp() / z, 2f64.exp() / z, 3f64.exp() / z];
    let s = softmax(&t(&[3], &[1.0, 2.0, 3.0]), 0).unwrap();
    for (a, b) in s.values().iter().zip(expect) {
        assert!((a - b).abs() < 1e-15);
    }
    assert!((expect[0] - 0.090_030_573_170_380_46).abs() < 1e-15);
}

#[test]
fn softmax_rejects_bad_axis() {
    assert!(matches!(
        softmax(&Tensor::zeros(&[2, 2]), 2),
        Err(Error::InvalidAxis { axis: 2, rank: 2 })
    ));
}

#[test]
fn softmax_axis_zero_of_matrix() {
    let x = t(&[2, 3], &[1.0, 2.0, 3.0, 3.0, 2.0, 1.0]);
    let s = softmax(&x, 0).unwrap();
    for c in 0..3 {
        assert!((s.at(0, c) + s.at(1, c) - 1.0).abs() < 1e-12);
    }
    assert!((s.at(0, 1) - 0.5).abs() < 1e-12);
}

#[test]
fn attention_single_pair_returns_value() {
    let q = t(&[2, 3], &[1.0, -4.0, 2.0, 0.0, 9.0, 1.0]);
    let k = t(&[1, 3], &[0.2, 0.1, -0.5]);
    let v = t(&[1, 2], &[7.0, -3.0]);
    let o = attention(&q, &k, &v).unwrap();
    assert_eq!(o.values(), &[7.0, -3.0, 7.0, -3.0]);
}

#[test]
fn attention_identical_keys_average_values() {
    let q = t(&[1, 2], &[0.4, -1.1]);
    let k = t(&[2, 2], &[1.0, 2.0, 1.0, 2.0]);
    let v = t(&[2, 2], &[1.0, 10.0, 3.0, -10.0]);
    let o = attention(&q, &k, &v).unwrap();
    assert!((o.values()[0] - 2.0).abs() < 1e-12);
    assert!(o.values()[1].abs() < 1e-12);
}

#[test]
fn attention_matches_softmax_matmul_composition() {
    let mut rng = Rng::new(2);
    let q = rand_t(&mut rng, &[2, 2]);
    let k = rand_t(&mut rng, &[2, 2]);
    let v = rand_t(&mut rng, &[2, 2]);
    let mut kt = Tensor::zeros(&[2, 2]);
    for i in 0..2 {
        for j in 0..2 {
            kt.values_mut()[j * 2 + i] = k.at(i, j);
        }
    }
    let mut scores = matmul(&q, &kt).unwrap();
    scores.values_mut().iter_mut().for_each(|s| *s /= 2f64.sqrt());
    let p = softmax(&scores, 1).unwrap();
    let expect = matmul(&p, &v).unwrap();
    let got = attention(&q, &k, &v).unwrap();
    assert!(got.max_abs_diff(&expect) < 1e-12);
}

#[test]
fn attention_shape_errors() {
    let a = Tensor::zeros(&[2, 3]);
    let b = Tensor::zeros(&[2, 4]);
    assert!(attention(&a, &b, &b).is_err());
    let v = Tensor::zeros(&[3, 3]);
    assert!(attention(&a, &a, &v).is_err());
}

#[test]
fn causal_attention_ignores_future_keys() {
    let mut rng = Rng::new(8);
    let x = rand_t(&mut rng, &[4, 8]);
    let mut y = x.clone();
    for j in 0..8 {
        y.values_mut()[3 * 8 + j] += 5.0;
    }
    let run = |x: &Tensor| {
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let o = g.attention(v, v, v, 2, true).unwrap();
        g.value(o).clone()
    };
    let (a, b) = (run(&x), run(&y));
    assert_eq!(&a.values()[..24], &b.values()[..24]);
    assert_ne!(&a.values()[24..], &b.values()[24..]);
}

#[test]
fn backward_of_sum_is_ones() {
    let mut g = Graph::new();
    let w = g.input(t(&[3], &[1.0, -2.0, 5.0]).with_requires_grad());
    let l = g.sum(w);
    let grads = g.backward(l).unwrap();
    assert_eq!(grads.wrt(w).unwrap(), &[1.0, 1.0, 1.0]);
}

#[test]
fn backward_of_square_sum() {
    let mut g = Graph::new();
    let w = g.input(t(&[2], &[1.0, 2.0]).with_requires_grad());
    let sq = g.mul(w, w).unwrap();
    let l = g.sum(sq);
    let grads = g.backward(l).unwrap();
    assert_eq!(grads.wrt(w).unwrap(), &[2.0, 4.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut g = Graph::new();
    let w = g.input(t(&[2], &[1.0, 2.0]).with_requires_grad());
    assert!(matches!(g.backward(w), Err(Error::NonScalarLoss(_))));
}

#[test]
fn param_gradients_accumulate_into_store() {
    let mut store = ParamStore::new();
    let id = store.add("w", t(&[2], &[3.0, -1.0])).unwrap();
    store.zero_grad();
    for _ in 0..2 {
        let grads = {
            let mut g = Graph::with_params(&store);
            let w = g.param(id);
            let sq = g.mul(w, w).unwrap();
            let l = g.sum(sq);
            g.backward(l).unwrap()
        };
        store.accumulate(&grads);
    }
    assert_eq!(store.value(id).grad().unwrap(), &[12.0, -4.0]);
}

const H: f64 = 1e-6;
const TOL: f64 = 1e-4;

fn assert_fd<F>(inputs: &[Tensor], f: F)
where
    F: Fn(&mut Graph, &[Var]) -> crate::Result<Var>,
{
    let r = check_inputs(inputs, H, f).unwrap();
    assert!(r.max_rel_err < TOL, "max rel err {}", r.max_rel_err);
    assert!(r.checked > 0);
}

/// Weighted sum of the output so every element contributes a distinct slope.
fn project(g: &mut Graph, x: Var, seed: u64) -> crate::Result<Var> {
    let shape = g.shape(x).to_vec();
    let mut rng = Rng::new(seed);
    let w = rand_t(&mut rng, &shape);
    let w = g.constant(w);
    let p = g.mul(x, w)?;
    Ok(g.sum(p))
}

#[test]
fn fd_matmul_and_broadcast() {
    let mut rng = Rng::new(21);
    assert_fd(&[rand_t(&mut rng, &[3, 4]), rand_t(&mut rng, &[4, 2])], |g, v| {
        let c = g.matmul(v[0], v[1])?;
        project(g, c, 1)
    });
    assert_fd(&[rand_t(&mut rng, &[2, 3, 4]), rand_t(&mut rng, &[1, 4, 2])], |g, v| {
        let c = g.matmul(v[0], v[1])?;
        project(g, c, 2)
    });
}

#[test]
fn fd_elementwise_ops() {
    let mut rng = Rng::new(22);
    let a = rand_t(&mut rng, &[3, 3]);
    let mut b = rand_t(&mut rng, &[3, 3]);
    b.values_mut().iter_mut().for_each(|v| *v = v.abs() + 0.5);
    assert_fd(&[a.clone(), b.clone()], |g, v| {
        let s = g.add(v[0], v[1])?;
        let d = g.sub(s, v[1])?;
        let m = g.mul(d, v[1])?;
        let q = g.div(m, v[1])?;
        let q = g.scale(q, 1.7);
        let q = g.add_scalar(q, 0.3);
        project(g, q, 3)
    });
    assert_fd(&[a.clone()], |g, v| {
        let s = g.sigmoid(v[0]);
        let e = g.gelu(s);
        let r = g.abs(e);
        project(g, r, 4)
    });
    // Kinks are avoided: entries are generic, never exactly at 0 or tied.
    assert_fd(&[a.clone(), b.clone()], |g, v| {
        let mx = g.maximum(v[0], v[1])?;
        let mn = g.minimum(v[0], v[1])?;
        let r = g.relu(v[0]);
        let s = g.add(mx, mn)?;
        let s = g.add(s, r)?;
        project(g, s, 5)
    });
}

#[test]
fn fd_reductions_and_plumbing() {
    let mut rng = Rng::new(23);
    let x = rand_t(&mut rng, &[4, 3]);
    let bias = rand_t(&mut rng, &[3]);
    let row = rand_t(&mut rng, &[1, 3]);
    assert_fd(&[x.clone(), bias, row], |g, v| {
        let a = g.add_bias(v[0], v[1])?;
        let sm = g.softmax(a, 1)?;
        let sm0 = g.softmax(a, 0)?;
        let t = g.transpose(sm)?;
        let t = g.transpose(t)?;
        let rep = g.repeat_rows(v[2], 4)?;
        let c = g.concat_rows(&[t, sm0, rep])?;
        let s = g.slice_rows(c, 2, 9)?;
        let s = g.slice_cols(s, 1, 3)?;
        let gth = g.gather_rows(c, &[0, 5, 5, 11])?;
        let r = g.reshape(gth, &[3, 4])?;
        let p1 = project(g, s, 6)?;
        let p2 = project(g, r, 7)?;
        let m = g.mean(r);
        let tot = g.add(p1, p2)?;
        g.add(tot, m)
    });
}

#[test]
fn fd_layer_norm_attention_and_losses() {
    let mut rng = Rng::new(24);
    let x = rand_t(&mut rng, &[5, 8]);
    let gamma = rand_t(&mut rng, &[8]);
    let beta = rand_t(&mut rng, &[8]);
    assert_fd(&[x.clone(), gamma, beta], |g, v| {
        let y = g.layer_norm(v[0], v[1], v[2])?;
        project(g, y, 8)
    });
    let q = rand_t(&mut rng, &[3, 8]);
    let k = rand_t(&mut rng, &[5, 8]);
    let vv = rand_t(&mut rng, &[5, 4]);
    assert_fd(&[q, k, vv], |g, v| {
        let o = g.attention(v[0], v[1], v[2], 2, false)?;
        project(g, o, 9)
    });
    assert_fd(&[x.clone()], |g, v| {
        let o = g.attention(v[0], v[0], v[0], 4, true)?;
        project(g, o, 10)
    });
    assert_fd(&[x.clone()], |g, v| {
        g.cross_entropy(v[0], &[1, 0, 7, 3, 3], &[1.0, 0.1, 0.5, 2.0, 1.0])
    });
    let logits = rand_t(&mut rng, &[6, 1]);
    assert_fd(&[logits], |g, v| {
        g.bce_with_logits(v[0], &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0], &[1.0; 6])
    });
}

#[test]
fn frozen_params_receive_no_gradient() {
    let mut store = ParamStore::new();
    let a = store.add("a", t(&[2], &[1.0, 2.0])).unwrap();
    let b = store.add("b", t(&[2], &[3.0, 4.0])).unwrap();
    store.get_mut(a).frozen = true;
    let mut g = Graph::with_params(&store);
    let (va, vb) = (g.param(a), g.param(b));
    let m = g.mul(va, vb).unwrap();
    let l = g.sum(m);
    let grads = g.backward(l).unwrap();
    assert!(grads.param(a).is_none());
    assert_eq!(grads.param(b).unwrap(), &[1.0, 2.0]);
}

proptest! {
    #[test]
    fn softmax_slices_are_distributions(
        rows in 1usize..5,
        cols in 1usize..7,
        seed in any::<u64>(),
        spread in 0.1f64..50.0,
    ) {
        let mut rng = Rng::new(seed);
        let x = t(&[rows, cols], &(0..rows * cols).map(|_| rng.normal(0.0, spread)).collect::<Vec<_>>());
        for axis in 0..2 {
            let s = softmax(&x, axis).unwrap();
            prop_assert!(s.values().iter().all(|&v| (0.0..=1.0).contains(&v)));
            let (outer, len) = if axis == 1 { (rows, cols) } else { (cols, rows) };
            for o in 0..outer {
                let total: f64 = (0..len)
                    .map(|j| if axis == 1 { s.at(o, j) } else { s.at(j, o) })
                    .sum();
                prop_assert!((total - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn random_composites_pass_fd(seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let x = rand_t(&mut rng, &[3, 4]);
        let w = rand_t(&mut rng, &[4, 4]);
        let r = check_inputs(&[x, w], H, |g, v| {
            let h = g.matmul(v[0], v[1])?;
            let h = g.gelu(h);
            let s = g.softmax(h, 1)?;
            project(g, s, 12)
        }).unwrap();
        prop_assert!(r.max_rel_err < TOL, "rel err {}", r.max_rel_err);
    }
}
