mod common;

use common::{conv2d, dct_weight, random_tensor, rng, sigmoid, zigzag};
use fsat_core::dct::FrequencyIndex;
use fsat_core::fsam::{
    frequency_attention, frequency_descriptor, fsam_forward, spatial_attention, spatial_pool,
    FsamParams, GroupSpec,
};
use fsat_core::tensor::{finite_diff_check, GradCheckOptions, Graph, Tensor, Var};
use proptest::prelude::*;

fn randomized_params(c: usize, seed: u64) -> FsamParams<f64> {
    let mut p = FsamParams::<f64>::init(c, &mut rng(seed));
    p.fc_b = random_tensor(&[c], -0.3, 0.3, seed + 1).with_requires_grad(true);
    p.sconv_b = random_tensor(&[1], -0.3, 0.3, seed + 2).with_requires_grad(true);
    p
}

fn descriptor_oracle(
    x: &[f64],
    (n, c, h, w): (usize, usize, usize, usize),
    groups: usize,
) -> Vec<f64> {
    let freqs = zigzag(groups, h, w);
    let width = c / groups;
    let mut out = Vec::with_capacity(n * c);
    for b in 0..n {
        for ch in 0..c {
            let (a, bb) = freqs[ch / width];
            let mut s = 0.0;
            for y in 0..h {
                for xx in 0..w {
                    s += dct_weight(a, bb, h, w, y, xx) * x[((b * c + ch) * h + y) * w + xx];
                }
            }
            out.push(s);
        }
    }
    out
}

fn frequency_oracle(
    x: &[f64],
    dims: (usize, usize, usize, usize),
    p: &FsamParams<f64>,
    groups: usize,
) -> (Vec<f64>, Vec<f64>) {
    let (n, c, h, w) = dims;
    let desc = descriptor_oracle(x, dims, groups);
    let mut att = vec![0.0; n * c];
    for b in 0..n {
        for j in 0..c {
            let mut s = p.fc_b.data()[j];
            for i in 0..c {
                s += desc[b * c + i] * p.fc_w.data()[i * c + j];
            }
            att[b * c + j] = sigmoid(s);
        }
    }
    let out = x
        .iter()
        .enumerate()
        .map(|(i, v)| v * att[i / (h * w)])
        .collect();
    (att, out)
}

fn pool_oracle(x: &[f64], (n, c, h, w): (usize, usize, usize, usize)) -> Vec<f64> {
    let mut out = vec![0.0; n * 2 * h * w];
    for b in 0..n {
        for p in 0..h * w {
            let vals: Vec<f64> = (0..c).map(|ch| x[(b * c + ch) * h * w + p]).collect();
            let mx = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mean = vals.iter().sum::<f64>() / c as f64;
            let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64).sqrt();
            out[(b * 2) * h * w + p] = mx;
            out[(b * 2 + 1) * h * w + p] = sd;
        }
    }
    out
}

fn spatial_oracle(
    x: &[f64],
    dims: (usize, usize, usize, usize),
    p: &FsamParams<f64>,
) -> (Vec<f64>, Vec<f64>) {
    let (n, c, h, w) = dims;
    let pooled = pool_oracle(x, dims);
    let logits = conv2d(
        &pooled,
        (n, 2, h, w),
        p.sconv_w.data(),
        1,
        7,
        p.sconv_b.data(),
        false,
    );
    let att: Vec<f64> = logits.into_iter().map(sigmoid).collect();
    let out = x
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let b = i / (c * h * w);
            v * att[b * h * w + i % (h * w)]
        })
        .collect();
    (att, out)
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn dims(t: &Tensor<f64>) -> (usize, usize, usize, usize) {
    t.dims4().unwrap()
}

#[test]
fn constant_map_descriptor() {
    let (h, w, v) = (6, 5, 0.7);
    let mut g = Graph::<f64>::inference();
    let f = g.constant(Tensor::full(&[1, 4, h, w], v));
    let d = frequency_descriptor(&mut g, &f, &GroupSpec::zigzag(4)).unwrap();
    assert!((d.data()[0] - v * ((h * w) as f64).sqrt()).abs() < 1e-12);
    for &e in &d.data()[1..] {
        assert!(e.abs() < 1e-12);
    }
}

#[test]
fn one_pixel_map_with_a_single_group_returns_values() {
    let mut g = Graph::<f64>::inference();
    let f = g.constant(Tensor::new(&[1, 2, 1, 1], vec![0.4, 0.9]).unwrap());
    let d = frequency_descriptor(&mut g, &f, &GroupSpec::zigzag(1)).unwrap();
    assert!(max_diff(d.data(), &[0.4, 0.9]) < 1e-15);
    assert!(frequency_descriptor(&mut g, &f, &GroupSpec::zigzag(2)).is_err());
}

#[test]
fn descriptor_matches_loop_oracle() {
    let f = random_tensor(&[1, 16, 8, 8], -1.0, 1.0, 31);
    let mut g = Graph::<f64>::inference();
    let fv = g.constant(f.clone());
    for groups in [16, 4, 1] {
        let d = frequency_descriptor(&mut g, &fv, &GroupSpec::zigzag(groups)).unwrap();
        assert!(max_diff(d.data(), &descriptor_oracle(f.data(), dims(&f), groups)) < 1e-5);
    }
}

#[test]
fn all_dc_groups_reduce_to_scaled_average_pooling() {
    let f = random_tensor(&[2, 4, 5, 7], -1.0, 1.0, 32);
    let spec = GroupSpec::with_frequencies(vec![FrequencyIndex::DC; 4]);
    let mut g = Graph::<f64>::inference();
    let fv = g.constant(f.clone());
    let d = frequency_descriptor(&mut g, &fv, &spec).unwrap();
    let hw = 35.0;
    let dc_norm = (1.0f64 / 5.0).sqrt() * (1.0f64 / 7.0).sqrt();
    for (i, plane) in f.data().chunks(35).enumerate() {
        let avg = plane.iter().sum::<f64>() / hw;
        assert!((d.data()[i] - dc_norm * hw * avg).abs() < 1e-9);
    }
}

#[test]
fn zero_parameters_gate_by_half_then_quarter() {
    let p = FsamParams::<f64>::zeros(4);
    let f = random_tensor(&[1, 4, 9, 9], 0.0, 1.0, 33);
    let mut g = Graph::inference();
    let vars = p.bind(&mut g, "fsam");
    let fv = g.constant(f.clone());
    let (att, out) = frequency_attention(&mut g, &fv, &vars, &GroupSpec::zigzag(4)).unwrap();
    assert!(att.data().iter().all(|&a| a == 0.5));
    let half: Vec<f64> = f.data().iter().map(|v| 0.5 * v).collect();
    assert!(max_diff(out.data(), &half) < 1e-15);

    let full = fsam_forward(&mut g, &fv, &vars, &GroupSpec::zigzag(4)).unwrap();
    let quarter: Vec<f64> = f.data().iter().map(|v| 0.25 * v).collect();
    assert!(max_diff(full.data(), &quarter) < 1e-15);
}

#[test]
fn channel_constant_map_gives_flat_spatial_pool() {
    let p = FsamParams::<f64>::zeros(3);
    let mut g = Graph::inference();
    let vars = p.bind(&mut g, "fsam");
    let fv = g.constant(Tensor::full(&[1, 3, 5, 6], 0.8));
    let pooled = spatial_pool(&mut g, &fv).unwrap();
    assert!(pooled.data()[..30].iter().all(|&v| (v - 0.8).abs() < 1e-15));
    assert!(pooled.data()[30..].iter().all(|&v| v.abs() < 1e-15));
    let (att, out) = spatial_attention(&mut g, &fv, &vars).unwrap();
    assert_eq!(att.shape(), &[1, 1, 5, 6]);
    assert!(att.data().iter().all(|&a| a == 0.5));
    assert!(out.data().iter().all(|&v| (v - 0.4).abs() < 1e-15));
}

#[test]
fn spatial_attention_shape_is_independent_of_channels() {
    for c in [1, 2, 7, 16] {
        let p = FsamParams::<f32>::init(c, &mut rng(c as u64));
        let mut g = Graph::inference();
        let vars = p.bind(&mut g, "fsam");
        let fv = g.constant(Tensor::full(&[2, c, 4, 3], 0.1));
        let (att, out) = spatial_attention(&mut g, &fv, &vars).unwrap();
        assert_eq!(att.shape(), &[2, 1, 4, 3]);
        assert_eq!(out.shape(), &[2, c, 4, 3]);
    }
}

#[test]
fn branches_match_scripted_oracles() {
    let c = 16;
    let p = randomized_params(c, 34);
    let mut g = Graph::inference();
    let vars = p.bind(&mut g, "fsam");

    let f = random_tensor(&[2, c, 8, 8], -1.0, 1.0, 35);
    let fv = g.constant(f.clone());
    let (att, out) = frequency_attention(&mut g, &fv, &vars, &GroupSpec::zigzag(16)).unwrap();
    let (att_o, out_o) = frequency_oracle(f.data(), dims(&f), &p, 16);
    assert!(att.data().iter().all(|&a| a > 0.0 && a < 1.0));
    assert!(max_diff(att.data(), &att_o) < 1e-5);
    assert!(max_diff(out.data(), &out_o) < 1e-5);

    let f = random_tensor(&[1, c, 9, 9], -1.0, 1.0, 36);
    let fv = g.constant(f.clone());
    let (att, out) = spatial_attention(&mut g, &fv, &vars).unwrap();
    let (att_o, out_o) = spatial_oracle(f.data(), dims(&f), &p);
    assert!(max_diff(att.data(), &att_o) < 1e-5);
    assert!(max_diff(out.data(), &out_o) < 1e-5);

    let full = fsam_forward(&mut g, &fv, &vars, &GroupSpec::zigzag(16)).unwrap();
    let (_, ff) = frequency_oracle(f.data(), dims(&f), &p, 16);
    let (_, fs) = spatial_oracle(&ff, dims(&f), &p);
    assert_eq!(full.shape(), f.shape());
    assert!(max_diff(full.data(), &fs) < 1e-5);
}

fn projected_fsam(
    g: &mut Graph<f64>,
    p: &FsamParams<f64>,
    f: &Tensor<f64>,
    r: &Tensor<f64>,
) -> fsat_core::Result<Var<f64>> {
    let fv = g.constant(f.clone());
    let vars = p.bind(g, "");
    let out = fsam_forward(g, &fv, &vars, &GroupSpec::zigzag(4))?;
    let rv = g.constant(r.clone());
    let prod = g.mul(&out, &rv)?;
    Ok(g.sum(&prod))
}

#[test]
fn gradients_match_finite_differences() {
    let opts = GradCheckOptions {
        fallback_steps: Vec::new(),
        ..Default::default()
    };
    let p = randomized_params(8, 37);
    let f = random_tensor(&[2, 8, 6, 5], -1.0, 1.0, 38);
    let r = random_tensor(&[2, 8, 6, 5], -1.0, 1.0, 39);
    let report = finite_diff_check(|g, p| projected_fsam(g, p, &f, &r), &p, &opts).unwrap();
    assert_eq!(report.tensors.len(), 4);
    assert!(report.passes(1e-5), "{:?}", report.worst());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn gates_never_amplify(seed in 0u64..10_000) {
        let p = randomized_params(4, seed);
        let f = random_tensor(&[1, 4, 6, 6], -4.0, 4.0, seed + 100);
        let mut g = Graph::inference();
        let vars = p.bind(&mut g, "fsam");
        let fv = g.constant(f.clone());
        let out = fsam_forward(&mut g, &fv, &vars, &GroupSpec::zigzag(4)).unwrap();
        for (o, x) in out.data().iter().zip(f.data()) {
            prop_assert!(o.abs() <= x.abs());
        }
    }

    #[test]
    fn pooling_ignores_channel_order(seed in 0u64..10_000, shift in 1usize..5) {
        let f = random_tensor(&[1, 5, 4, 4], -2.0, 2.0, seed);
        let permuted = Tensor::from_fn(&[1, 5, 4, 4], |i| {
            let (ch, p) = (i / 16, i % 16);
            f.data()[((ch + shift) % 5) * 16 + p]
        });
        let mut g = Graph::<f64>::inference();
        let a = g.constant(f);
        let b = g.constant(permuted);
        let pa = spatial_pool(&mut g, &a).unwrap();
        let pb = spatial_pool(&mut g, &b).unwrap();
        prop_assert!(max_diff(pa.data(), pb.data()) < 1e-12);
    }
}
