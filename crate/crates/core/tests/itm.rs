mod common;

use common::{layer_norm, matmul, random_tensor, reflect, rng, softmax_rows, transpose};
use fsat_core::itm::{
    context_broadcast, itm_forward, self_attention, window_merge, window_partition, ItmParams,
};
use fsat_core::tensor::{finite_diff_check, GradCheckOptions, Graph, Tensor, Var};
use proptest::prelude::*;

fn randomized_params(c: usize, pre_norm: bool, seed: u64) -> ItmParams<f64> {
    let mut p = ItmParams::<f64>::init(c, pre_norm, &mut rng(seed));
    p.mlp_b1 = random_tensor(&[2 * c], -0.2, 0.2, seed + 1).with_requires_grad(true);
    p.mlp_b2 = random_tensor(&[c], -0.2, 0.2, seed + 2).with_requires_grad(true);
    for (i, n) in [&mut p.norm1, &mut p.norm2]
        .into_iter()
        .flatten()
        .enumerate()
    {
        n.gamma = random_tensor(&[c], 0.5, 1.5, seed + 10 + i as u64).with_requires_grad(true);
        n.beta = random_tensor(&[c], -0.3, 0.3, seed + 20 + i as u64).with_requires_grad(true);
    }
    p
}

/// Whole-block reference: per window, pre-norm attention and MLP residuals,
/// then the context mix, merged back and cropped.
fn itm_oracle(f: &Tensor<f64>, p: &ItmParams<f64>, m: usize) -> Vec<f64> {
    let (n, c, h, w) = f.dims4().unwrap();
    let x = f.data();
    let hid = 2 * c;
    let (rows, cols) = (h.div_ceil(m), w.div_ceil(m));
    let t = m * m;
    let mut out = vec![0.0; x.len()];
    for b in 0..n {
        for wy in 0..rows {
            for wx in 0..cols {
                let mut tok = vec![0.0; t * c];
                for ty in 0..m {
                    for tx in 0..m {
                        let sy = reflect((wy * m + ty) as isize, h);
                        let sx = reflect((wx * m + tx) as isize, w);
                        for ch in 0..c {
                            tok[(ty * m + tx) * c + ch] = x[((b * c + ch) * h + sy) * w + sx];
                        }
                    }
                }
                let h1 = match &p.norm1 {
                    Some(nm) => layer_norm(&tok, c, nm.gamma.data(), nm.beta.data()),
                    None => tok.clone(),
                };
                let q = matmul(&h1, p.wq.data(), t, c, c);
                let k = matmul(&h1, p.wk.data(), t, c, c);
                let v = matmul(&h1, p.wv.data(), t, c, c);
                let mut logits = matmul(&q, &transpose(&k, t, c), t, c, t);
                logits.iter_mut().for_each(|l| *l /= (c as f64).sqrt());
                softmax_rows(&mut logits, t);
                let att = matmul(&logits, &v, t, t, c);
                let x1: Vec<f64> = tok.iter().zip(&att).map(|(a, b)| a + b).collect();
                let h2 = match &p.norm2 {
                    Some(nm) => layer_norm(&x1, c, nm.gamma.data(), nm.beta.data()),
                    None => x1.clone(),
                };
                let mut z = matmul(&h2, p.mlp_w1.data(), t, c, hid);
                for (i, v) in z.iter_mut().enumerate() {
                    *v = (*v + p.mlp_b1.data()[i % hid]).max(0.0);
                }
                let mut y = matmul(&z, p.mlp_w2.data(), t, hid, c);
                for (i, v) in y.iter_mut().enumerate() {
                    *v += p.mlp_b2.data()[i % c];
                }
                let x2: Vec<f64> = x1.iter().zip(&y).map(|(a, b)| a + b).collect();
                let x3 = common::context_broadcast(&x2, c);
                for ty in 0..m {
                    for tx in 0..m {
                        let (yy, xx) = (wy * m + ty, wx * m + tx);
                        if yy >= h || xx >= w {
                            continue;
                        }
                        for ch in 0..c {
                            out[((b * c + ch) * h + yy) * w + xx] = x3[(ty * m + tx) * c + ch];
                        }
                    }
                }
            }
        }
    }
    out
}

fn run_itm(f: &Tensor<f64>, p: &ItmParams<f64>, m: usize) -> Tensor<f64> {
    let mut g = Graph::inference();
    let fv = g.constant(f.clone());
    let vars = p.bind(&mut g, "itm");
    itm_forward(&mut g, &fv, &vars, m).unwrap().to_tensor()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn partition_round_trip_is_bit_exact_on_divisible_shapes() {
    for (shape, m) in [([2, 3, 16, 8], 8), ([1, 5, 12, 12], 4), ([1, 2, 6, 6], 1)] {
        let f = random_tensor(&shape, -3.0, 3.0, 11).cast::<f32>();
        let mut g = Graph::<f32>::inference();
        let fv = g.constant(f.clone());
        let (tokens, grid) = window_partition(&mut g, &fv, m).unwrap();
        assert_eq!(
            tokens.shape(),
            &[shape[0] * (shape[2] / m) * (shape[3] / m), m * m, shape[1]]
        );
        let back = window_merge(&mut g, &tokens, &grid).unwrap();
        assert_eq!(back.data(), f.data());
    }
}

#[test]
fn padded_partition_reflects_then_crops_back() {
    let f = random_tensor(&[1, 2, 5, 7], -1.0, 1.0, 12);
    let mut g = Graph::<f64>::inference();
    let fv = g.constant(f.clone());
    let (tokens, grid) = window_partition(&mut g, &fv, 4).unwrap();
    assert_eq!(grid.padded(), (8, 8));
    assert_eq!(tokens.shape(), &[4, 16, 2]);
    // window (1, 0), token (ty=2, tx=3): padded row 6 mirrors to row 2
    let (ty, tx, ch) = (2, 3, 1);
    let win = 2;
    let expected = f.data()[((ch) * 5 + reflect(6, 5)) * 7 + reflect(tx, 7)];
    assert_eq!(
        tokens.data()[(win * 16 + ty * 4 + tx as usize) * 2 + ch],
        expected
    );
    let back = window_merge(&mut g, &tokens, &grid).unwrap();
    assert_eq!(back.shape(), f.shape());
    assert_eq!(back.data(), f.data());
}

#[test]
fn zero_window_size_is_rejected() {
    let mut g = Graph::<f64>::inference();
    let fv = g.constant(Tensor::zeros(&[1, 1, 4, 4]));
    assert!(window_partition(&mut g, &fv, 0).is_err());
}

#[test]
fn zero_query_key_gives_uniform_attention() {
    let mut p = ItmParams::<f64>::zeros(1, false);
    p.wv = Tensor::new(&[1, 1], vec![1.0]).unwrap();
    let mut g = Graph::inference();
    let vars = p.bind(&mut g, "itm");
    let x = g.constant(Tensor::new(&[1, 2, 1], vec![0.0, 2.0]).unwrap());
    let out = self_attention(&mut g, &x, &vars).unwrap();
    assert_eq!(out.data(), &[1.0, 1.0]);
}

#[test]
fn single_token_attention_is_value_projection() {
    let p = ItmParams::<f64>::init(5, false, &mut rng(4));
    let mut g = Graph::inference();
    let vars = p.bind(&mut g, "itm");
    let xt = random_tensor(&[1, 1, 5], -1.0, 1.0, 5);
    let x = g.constant(xt.clone());
    let out = self_attention(&mut g, &x, &vars).unwrap();
    let expected = matmul(xt.data(), p.wv.data(), 1, 5, 5);
    assert!(max_diff(out.data(), &expected) < 1e-12);
}

#[test]
fn attention_matches_three_matmul_oracle() {
    let (t, c) = (4, 8);
    let p = ItmParams::<f64>::init(c, false, &mut rng(6));
    let xt = random_tensor(&[1, t, c], -2.0, 2.0, 7);
    let mut g = Graph::inference();
    let vars = p.bind(&mut g, "itm");
    let x = g.constant(xt.clone());
    let out = self_attention(&mut g, &x, &vars).unwrap();

    let q = matmul(xt.data(), p.wq.data(), t, c, c);
    let k = matmul(xt.data(), p.wk.data(), t, c, c);
    let v = matmul(xt.data(), p.wv.data(), t, c, c);
    let mut s = matmul(&q, &transpose(&k, t, c), t, c, t);
    s.iter_mut().for_each(|e| *e /= (c as f64).sqrt());
    softmax_rows(&mut s, t);
    let expected = matmul(&s, &v, t, t, c);
    assert!(max_diff(out.data(), &expected) < 1e-6);
}

#[test]
fn context_broadcast_examples() {
    let mut g = Graph::<f64>::inference();
    let x = g.constant(Tensor::new(&[1, 2, 1], vec![0.0, 2.0]).unwrap());
    assert_eq!(context_broadcast(&mut g, &x).unwrap().data(), &[0.5, 1.5]);

    let same = g.constant(Tensor::new(&[1, 3, 2], vec![0.3, -1.0, 0.3, -1.0, 0.3, -1.0]).unwrap());
    let out = context_broadcast(&mut g, &same).unwrap();
    assert!(max_diff(out.data(), same.data()) < 1e-15);
}

#[test]
fn zero_weights_collapse_to_context_broadcast() {
    for pre_norm in [true, false] {
        let p = ItmParams::<f64>::zeros(3, pre_norm);
        let f = random_tensor(&[1, 3, 8, 8], -1.0, 1.0, 8);
        let out = run_itm(&f, &p, 8);
        // single window: tokens are the pixels, so mixing is per channel
        let mut expected = Vec::new();
        for ch in f.data().chunks(64) {
            let mean = ch.iter().sum::<f64>() / 64.0;
            expected.extend(ch.iter().map(|v| 0.5 * v + 0.5 * mean));
        }
        assert!(
            max_diff(out.data(), &expected) < 1e-12,
            "pre_norm={pre_norm}"
        );
    }
}

#[test]
fn output_shape_matches_input() {
    let p = ItmParams::<f32>::init(16, true, &mut rng(9));
    for s in [8, 12, 224] {
        let mut g = Graph::<f32>::inference();
        let vars = p.bind(&mut g, "itm");
        let f = g.constant(Tensor::full(&[1, 16, s, s], 0.25));
        let out = itm_forward(&mut g, &f, &vars, 8).unwrap();
        assert_eq!(out.shape(), &[1, 16, s, s]);
    }
}

#[test]
fn block_matches_scripted_oracle() {
    let p = randomized_params(4, true, 13);
    let f = random_tensor(&[1, 4, 8, 8], -1.0, 1.0, 14);
    assert!(max_diff(run_itm(&f, &p, 8).data(), &itm_oracle(&f, &p, 8)) < 1e-5);

    // several windows, reflect padding, no pre-norm, batch of two
    let p = randomized_params(4, false, 15);
    let f = random_tensor(&[2, 4, 10, 9], -1.0, 1.0, 16);
    assert!(max_diff(run_itm(&f, &p, 4).data(), &itm_oracle(&f, &p, 4)) < 1e-5);
}

#[test]
fn unrecorded_pass_matches_recorded_pass_across_chunks() {
    // 2 x 18 x 17 windows span three inference chunks; edges are padded
    let p = randomized_params(3, true, 21);
    let f = random_tensor(&[2, 3, 70, 66], -1.0, 1.0, 22);
    let mut g = Graph::new();
    let fv = g.leaf(f.clone());
    let vars = p.bind(&mut g, "itm");
    let recorded = itm_forward(&mut g, &fv, &vars, 4).unwrap();
    assert!(recorded.is_tracked());
    assert_eq!(run_itm(&f, &p, 4).data(), recorded.data());
}

fn projected_itm(
    g: &mut Graph<f64>,
    p: &ItmParams<f64>,
    f: &Tensor<f64>,
    weights: &Tensor<f64>,
    m: usize,
) -> fsat_core::Result<Var<f64>> {
    let fv = g.constant(f.clone());
    let vars = p.bind(g, "");
    let out = itm_forward(g, &fv, &vars, m)?;
    let wv = g.constant(weights.clone());
    let prod = g.mul(&out, &wv)?;
    Ok(g.sum(&prod))
}

#[test]
fn gradients_match_finite_differences() {
    let opts = GradCheckOptions {
        fallback_steps: Vec::new(),
        ..Default::default()
    };
    for (shape, m, pre_norm) in [([1, 4, 8, 8], 8, true), ([1, 4, 6, 5], 4, false)] {
        let p = randomized_params(4, pre_norm, 21);
        let f = random_tensor(&shape, -1.0, 1.0, 22);
        let r = random_tensor(&shape, -1.0, 1.0, 23);
        let report = finite_diff_check(|g, p| projected_itm(g, p, &f, &r, m), &p, &opts).unwrap();
        let expected = if pre_norm { 11 } else { 7 };
        assert_eq!(report.tensors.len(), expected);
        assert!(report.passes(1e-5), "{:?}", report.worst());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn broadcast_preserves_column_means(seed in 0u64..10_000, tokens in 1usize..20, d in 1usize..6) {
        let xt = random_tensor(&[1, tokens, d], -5.0, 5.0, seed);
        let mut g = Graph::<f64>::inference();
        let x = g.constant(xt.clone());
        let out = context_broadcast(&mut g, &x).unwrap();
        for j in 0..d {
            let before: f64 = (0..tokens).map(|t| xt.data()[t * d + j]).sum::<f64>() / tokens as f64;
            let after: f64 = (0..tokens).map(|t| out.data()[t * d + j]).sum::<f64>() / tokens as f64;
            prop_assert!((before - after).abs() < 1e-7);
        }
    }

    #[test]
    fn attention_rows_stay_inside_value_hull(seed in 0u64..10_000, t in 1usize..10, c in 1usize..6) {
        let p = ItmParams::<f64>::init(c, false, &mut rng(seed));
        let xt = random_tensor(&[1, t, c], -3.0, 3.0, seed + 1);
        let mut g = Graph::inference();
        let vars = p.bind(&mut g, "itm");
        let x = g.constant(xt.clone());
        let out = self_attention(&mut g, &x, &vars).unwrap();
        let v = matmul(xt.data(), p.wv.data(), t, c, c);
        for j in 0..c {
            let lo = (0..t).map(|i| v[i * c + j]).fold(f64::INFINITY, f64::min);
            let hi = (0..t).map(|i| v[i * c + j]).fold(f64::NEG_INFINITY, f64::max);
            for i in 0..t {
                let o = out.data()[i * c + j];
                prop_assert!(o >= lo - 1e-12 && o <= hi + 1e-12);
            }
        }
    }
}
