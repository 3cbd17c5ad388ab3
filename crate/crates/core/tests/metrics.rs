mod common;

use std::f64::consts::FRAC_PI_2;

use common::{conv2d, rng};
use fsat_core::image::Image;
use fsat_core::metrics::{
    entropy, evaluate_pair, mi_metric, ncie_metric, qabf_metric, quantize, JointHistogram,
    MetricsReport, MetricsRow,
};
use fsat_core::Error;
use proptest::prelude::*;
use rand::Rng;

fn noise(w: usize, h: usize, seed: u64) -> Image {
    let mut r = rng(seed);
    Image::gray(w, h, (0..w * h).map(|_| r.gen::<f32>()).collect()).unwrap()
}

fn texture(w: usize, h: usize, phase: f32) -> Image {
    Image::gray_from_fn(w, h, |x, y| {
        let (x, y) = (x as f32, y as f32);
        0.5 + 0.25 * (0.7 * x + phase).sin() * (0.45 * y).cos() + 0.2 * ((x + 2.0 * y) * 0.13).sin()
    })
}

/// Edge preservation computed pixel by pixel from loop-convolved Sobel maps.
fn qabf_oracle(f: &Image, a: &Image, b: &Image) -> f64 {
    let (w, h) = f.dims();
    let kx = [-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0];
    let ky = [-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0];
    let sobel = |img: &Image| {
        let x = img.to_f64();
        let sx = conv2d(&x, (1, 1, h, w), &kx, 1, 3, &[0.0], true);
        let sy = conv2d(&x, (1, 1, h, w), &ky, 1, 3, &[0.0], true);
        let g: Vec<f64> = sx
            .iter()
            .zip(&sy)
            .map(|(p, q)| (p * p + q * q).sqrt())
            .collect();
        let al: Vec<f64> = sx
            .iter()
            .zip(&sy)
            .map(|(&p, &q)| if p == 0.0 { FRAC_PI_2 } else { (q / p).atan() })
            .collect();
        (g, al)
    };
    let (gf, af) = sobel(f);
    let mut num = 0.0;
    let mut den = 0.0;
    for src in [a, b] {
        let (gs, as_) = sobel(src);
        for i in 0..w * h {
            let gr = if gs[i] == 0.0 || gf[i] == 0.0 {
                0.0
            } else if gs[i] > gf[i] {
                gf[i] / gs[i]
            } else {
                gs[i] / gf[i]
            };
            let ar = 1.0 - (as_[i] - af[i]).abs() / FRAC_PI_2;
            let qg = 0.9994 / (1.0 + (-15.0 * (gr - 0.5)).exp());
            let qa = 0.9879 / (1.0 + (-22.0 * (ar - 0.8)).exp());
            num += qg * qa * gs[i];
            den += gs[i];
        }
    }
    num / den
}

#[test]
fn entropy_examples() {
    assert_eq!(entropy(&Image::constant(9, 7, 1, 0.3)), 0.0);
    let half = Image::gray_from_fn(8, 8, |x, _| if x < 4 { 0.0 } else { 1.0 });
    assert!((entropy(&half) - 1.0).abs() < 1e-12);
    let ramp = Image::gray_from_fn(256, 2, |x, _| x as f32 / 255.0);
    assert!((entropy(&ramp) - 8.0).abs() < 1e-12);
}

#[test]
fn joint_histogram_counts_every_pixel() {
    let a = noise(13, 11, 1);
    let b = noise(13, 11, 2);
    let hist = JointHistogram::of_images(&a, &b).unwrap();
    assert_eq!(hist.total(), 143);
    assert_eq!(hist.marginal_a().iter().sum::<u64>(), 143);
    let q = quantize(a.get(3, 4, 0));
    assert!(hist.marginal_a()[q] >= 1);
}

#[test]
fn mi_of_identical_triple_is_twice_entropy() {
    let a = texture(48, 40, 0.0);
    let mi = mi_metric(&a, &a, &a).unwrap();
    assert!((mi - 2.0 * entropy(&a)).abs() < 1e-9);
}

#[test]
fn mi_against_independent_noise_is_bounded_below_by_entropy() {
    let a = texture(64, 64, 0.3);
    let b = noise(64, 64, 3);
    let h = entropy(&a);
    let mi = mi_metric(&a, &a, &b).unwrap();
    assert!(mi >= h - 1e-9);
    assert!(
        mi < h + 0.5 * h,
        "noise term should stay small: {mi} vs {h}"
    );
}

#[test]
fn ncie_of_identical_triple_is_exactly_one() {
    for img in [
        texture(64, 64, 0.0),
        noise(32, 48, 4),
        Image::constant(16, 16, 1, 0.5),
    ] {
        assert_eq!(ncie_metric(&img, &img, &img).unwrap(), 1.0);
    }
}

#[test]
fn ncie_of_independent_noise_approaches_identity_case() {
    let expected = 1.0 + (1.0f64 / 3.0).ln() / 256f64.ln();
    assert!((expected - 0.8019).abs() < 1e-4);
    let (f, a, b) = (
        noise(1024, 1024, 5),
        noise(1024, 1024, 6),
        noise(1024, 1024, 7),
    );
    let v = ncie_metric(&f, &a, &b).unwrap();
    assert!((v - expected).abs() < 5e-3, "{v}");
}

#[test]
fn qabf_of_identical_textured_triple_matches_oracle() {
    let a = texture(40, 36, 0.0);
    let q = qabf_metric(&a, &a, &a).unwrap();
    assert!(q >= 0.97, "{q}");
    assert!((q - qabf_oracle(&a, &a, &a)).abs() < 1e-12);
}

#[test]
fn qabf_matches_oracle_on_mixed_triples() {
    for seed in 0..6 {
        let a = texture(33, 29, seed as f32);
        let b = noise(33, 29, 100 + seed);
        let f = Image::gray(
            33,
            29,
            a.data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| 0.6 * x + 0.4 * y)
                .collect(),
        )
        .unwrap();
        let q = qabf_metric(&f, &a, &b).unwrap();
        assert!((q - qabf_oracle(&f, &a, &b)).abs() < 1e-6);
        assert!((0.0..=1.0).contains(&q));
    }
}

#[test]
fn qabf_of_flat_fusion_is_near_zero() {
    let a = texture(48, 48, 0.0);
    let b = texture(48, 48, 1.3);
    let f = Image::constant(48, 48, 1, 0.4);
    assert!(qabf_metric(&f, &a, &b).unwrap() < 0.05);
}

#[test]
fn qabf_never_rises_as_fusion_blends_toward_noise() {
    let a = texture(40, 40, 0.0);
    let b = texture(40, 40, 2.0);
    for seed in 0..5 {
        let n = noise(40, 40, 9 + seed);
        let mut last = f64::INFINITY;
        for step in 0..=4 {
            let t = step as f32 / 4.0;
            let f = Image::gray_from_fn(40, 40, |x, y| {
                let src = a.get(x, y, 0).max(b.get(x, y, 0));
                (1.0 - t) * src + t * n.get(x, y, 0)
            });
            let q = qabf_metric(&f, &a, &b).unwrap();
            assert!(q <= last + 1e-12, "seed {seed} step {step}: {q} > {last}");
            last = q;
        }
    }
}

#[test]
fn metrics_reject_mismatched_dims() {
    let a = noise(8, 8, 1);
    let b = noise(8, 9, 2);
    assert!(matches!(
        mi_metric(&a, &a, &b),
        Err(Error::DimensionMismatch { .. })
    ));
    assert!(matches!(
        ncie_metric(&a, &b, &a),
        Err(Error::DimensionMismatch { .. })
    ));
    assert!(matches!(
        qabf_metric(&b, &a, &a),
        Err(Error::DimensionMismatch { .. })
    ));
}

#[test]
fn identical_triple_row() {
    let a = texture(40, 32, 0.5);
    let row = evaluate_pair("p0", &a, &a, &a).unwrap();
    assert_eq!(row.pair, "p0");
    assert!((row.mi - 2.0 * entropy(&a)).abs() < 1e-9);
    assert_eq!(row.ncie, 1.0);
    assert!((row.qabf - qabf_oracle(&a, &a, &a)).abs() < 1e-12);
    assert!((row.ssim - 1.0).abs() < 1e-9);
}

#[test]
fn report_mean_and_csv_round_trip() {
    let mut report = MetricsReport::default();
    report.push(MetricsRow {
        pair: "a".into(),
        mi: 1.0,
        ncie: 0.8,
        qabf: 0.5,
        ssim: 0.7,
        seconds: 0.25,
    });
    report.push(MetricsRow {
        pair: "b".into(),
        mi: 2.0,
        ncie: 0.9,
        qabf: 0.3,
        ssim: 0.9,
        seconds: 0.75,
    });
    let mean = report.mean().unwrap();
    assert!(
        (mean.mi - 1.5).abs() < 1e-9
            && (mean.qabf - 0.4).abs() < 1e-9
            && (mean.seconds - 0.5).abs() < 1e-9
    );

    let mut buf = Vec::new();
    report.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf.clone()).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "pair,mi,ncie,qabf,ssim,seconds");
    assert_eq!(lines[1], "a,1.0000,0.8000,0.5000,0.7000,0.2500");
    assert_eq!(lines[3], "mean,1.5000,0.8500,0.4000,0.8000,0.5000");
    assert_eq!(MetricsReport::read_csv(buf.as_slice()).unwrap(), report);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn mi_is_symmetric(s1 in 0u64..1000, s2 in 0u64..1000, s3 in 0u64..1000) {
        let (f, a, b) = (noise(16, 12, s1), noise(16, 12, s2), noise(16, 12, s3));
        let fa = JointHistogram::of_images(&f, &a).unwrap().mutual_information(2.0);
        let af = JointHistogram::of_images(&a, &f).unwrap().mutual_information(2.0);
        prop_assert!((fa - af).abs() < 1e-9);
        let lhs = mi_metric(&f, &a, &b).unwrap();
        let rhs = mi_metric(&f, &b, &a).unwrap();
        prop_assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn entropy_stays_within_eight_bits(s in 0u64..1000, w in 1usize..40, h in 1usize..40) {
        let e = entropy(&noise(w, h, s));
        prop_assert!((0.0..=8.0 + 1e-12).contains(&e));
    }

    #[test]
    fn qabf_is_a_unit_score(s1 in 0u64..1000, s2 in 0u64..1000, s3 in 0u64..1000) {
        let q = qabf_metric(&noise(12, 12, s1), &noise(12, 12, s2), &noise(12, 12, s3)).unwrap();
        prop_assert!((0.0..=1.0).contains(&q));
    }

    #[test]
    fn ncie_stays_in_unit_interval(s1 in 0u64..1000, s2 in 0u64..1000) {
        let a = noise(16, 16, s1);
        let b = noise(16, 16, s2);
        let v = ncie_metric(&a, &a, &b).unwrap();
        prop_assert!(v > 0.0 && v <= 1.0 + 1e-12);
    }
}
