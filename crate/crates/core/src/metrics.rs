//! Fusion-quality metrics: mutual information, nonlinear correlation
//! information entropy (NCIE), Xydeas-Petrovic edge preservation (Qabf) and
//! SSIM, plus a per-pair report with CSV output.

use std::f64::consts::FRAC_PI_2;
use std::io::{Read, Write};

use nalgebra::{Matrix3, SymmetricEigen};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::losses::ssim_value;

pub const BINS: usize = 256;

/// Round-half-up 8-bit level of a `[0, 1]` value.
pub fn quantize(v: f32) -> usize {
    ((v as f64 * 255.0 + 0.5).floor() as isize).clamp(0, 255) as usize
}

fn entropy_of(counts: &[u64], total: u64, log_base: f64) -> f64 {
    let n = total as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum::<f64>()
        / log_base.ln()
}

/// 256 x 256 co-occurrence counts of two equally sized label maps.
#[derive(Debug, Clone)]
pub struct JointHistogram {
    counts: Vec<u64>,
    total: u64,
}

impl JointHistogram {
    pub fn from_labels(a: &[usize], b: &[usize]) -> Self {
        let mut counts = vec![0u64; BINS * BINS];
        for (&x, &y) in a.iter().zip(b) {
            counts[x * BINS + y] += 1;
        }
        Self {
            counts,
            total: a.len().min(b.len()) as u64,
        }
    }

    /// Histogram of quantized intensities.
    pub fn of_images(a: &Image, b: &Image) -> Result<Self> {
        a.require_same_dims(b)?;
        Ok(Self::from_labels(&labels(a), &labels(b)))
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn count(&self, x: usize, y: usize) -> u64 {
        self.counts[x * BINS + y]
    }

    pub fn marginal_a(&self) -> Vec<u64> {
        self.counts
            .chunks(BINS)
            .map(|row| row.iter().sum())
            .collect()
    }

    pub fn marginal_b(&self) -> Vec<u64> {
        let mut m = vec![0u64; BINS];
        for row in self.counts.chunks(BINS) {
            for (acc, c) in m.iter_mut().zip(row) {
                *acc += c;
            }
        }
        m
    }

    pub fn joint_entropy(&self, log_base: f64) -> f64 {
        entropy_of(&self.counts, self.total, log_base)
    }

    /// `H(A) + H(B) - H(A, B)`.
    pub fn mutual_information(&self, log_base: f64) -> f64 {
        entropy_of(&self.marginal_a(), self.total, log_base)
            + entropy_of(&self.marginal_b(), self.total, log_base)
            - self.joint_entropy(log_base)
    }
}

fn labels(img: &Image) -> Vec<usize> {
    img.data().iter().map(|&v| quantize(v)).collect()
}

fn require_gray_triple(f: &Image, a: &Image, b: &Image) -> Result<()> {
    for img in [f, a, b] {
        img.require_gray()?;
    }
    f.require_same_dims(a)?;
    f.require_same_dims(b)
}

/// Shannon entropy in bits of the 8-bit intensity histogram.
pub fn entropy(img: &Image) -> f64 {
    let mut counts = vec![0u64; BINS];
    for l in labels(img) {
        counts[l] += 1;
    }
    entropy_of(&counts, img.data().len() as u64, 2.0)
}

/// `MI(F, A) + MI(F, B)` in bits.
pub fn mi_metric(f: &Image, a: &Image, b: &Image) -> Result<f64> {
    require_gray_triple(f, a, b)?;
    Ok(JointHistogram::of_images(f, a)?.mutual_information(2.0)
        + JointHistogram::of_images(f, b)?.mutual_information(2.0))
}

/// Equal-frequency bin of every pixel: pixels sorted by value (ties by
/// position) and split into 256 consecutive runs.
pub fn rank_labels(img: &Image) -> Vec<usize> {
    let data = img.data();
    let n = data.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| data[i].total_cmp(&data[j]).then(i.cmp(&j)));
    let mut out = vec![0usize; n];
    for (rank, &i) in order.iter().enumerate() {
        out[i] = rank * BINS / n;
    }
    out
}

/// Nonlinear correlation coefficient over the 256 x 256 rank grid with
/// base-256 entropies; 1 for a signal against itself. Rounding excursions
/// outside the theoretical `[0, 1]` range are clamped.
pub fn ncc(x: &[usize], y: &[usize]) -> f64 {
    JointHistogram::from_labels(x, y)
        .mutual_information(BINS as f64)
        .clamp(0.0, 1.0)
}

/// `1 + sum_i (l_i / 3) log_256 (l_i / 3)` over the eigenvalues `l_i` of the
/// pairwise NCC matrix of (F, A, B).
pub fn ncie_metric(f: &Image, a: &Image, b: &Image) -> Result<f64> {
    require_gray_triple(f, a, b)?;
    let ranks = [rank_labels(f), rank_labels(a), rank_labels(b)];
    let mut r = Matrix3::<f64>::identity();
    for i in 0..3 {
        for j in i + 1..3 {
            let c = ncc(&ranks[i], &ranks[j]);
            r[(i, j)] = c;
            r[(j, i)] = c;
        }
    }
    let eig = SymmetricEigen::new(r);
    let base = (BINS as f64).ln();
    let mut s = 0.0;
    for &l in eig.eigenvalues.iter() {
        let p = l / 3.0;
        if p > 1e-12 {
            s += p * p.ln() / base;
        }
    }
    Ok(1.0 + s)
}

/// Sobel strength and orientation maps (reflect padding).
pub fn sobel_strength_orientation(img: &Image) -> (Vec<f64>, Vec<f64>) {
    let (w, h) = img.dims();
    let data = img.to_f64();
    let at = |x: isize, y: isize| {
        let xi = crate::tensor::pad_index(x, w, crate::tensor::PadMode::Reflect).unwrap_or(0);
        let yi = crate::tensor::pad_index(y, h, crate::tensor::PadMode::Reflect).unwrap_or(0);
        data[yi * w + xi]
    };
    let mut g = vec![0.0; w * h];
    let mut a = vec![0.0; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let sx = (at(x + 1, y - 1) + 2.0 * at(x + 1, y) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2.0 * at(x - 1, y) + at(x - 1, y + 1));
            let sy = (at(x - 1, y + 1) + 2.0 * at(x, y + 1) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2.0 * at(x, y - 1) + at(x + 1, y - 1));
            let i = y as usize * w + x as usize;
            g[i] = (sx * sx + sy * sy).sqrt();
            a[i] = if sx == 0.0 {
                FRAC_PI_2
            } else {
                (sy / sx).atan()
            };
        }
    }
    (g, a)
}

const QG: (f64, f64, f64) = (0.9994, -15.0, 0.5);
const QA: (f64, f64, f64) = (0.9879, -22.0, 0.8);

/// Per-pixel edge preservation of source `s` in the fused image.
fn preservation(gs: &[f64], as_: &[f64], gf: &[f64], af: &[f64]) -> Vec<f64> {
    (0..gs.len())
        .map(|i| {
            let g = if gs[i] == 0.0 || gf[i] == 0.0 {
                0.0
            } else {
                gs[i].min(gf[i]) / gs[i].max(gf[i])
            };
            let a = 1.0 - (as_[i] - af[i]).abs() / FRAC_PI_2;
            let qg = QG.0 / (1.0 + (QG.1 * (g - QG.2)).exp());
            let qa = QA.0 / (1.0 + (QA.1 * (a - QA.2)).exp());
            qg * qa
        })
        .collect()
}

/// Gradient-weighted edge preservation of both sources, in `[0, 1]`.
/// Sources without any edges score 0.
pub fn qabf_metric(f: &Image, a: &Image, b: &Image) -> Result<f64> {
    require_gray_triple(f, a, b)?;
    let (gf, af) = sobel_strength_orientation(f);
    let (ga, aa) = sobel_strength_orientation(a);
    let (gb, ab) = sobel_strength_orientation(b);
    let qa = preservation(&ga, &aa, &gf, &af);
    let qb = preservation(&gb, &ab, &gf, &af);
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..gf.len() {
        num += qa[i] * ga[i] + qb[i] * gb[i];
        den += ga[i] + gb[i];
    }
    Ok(if den > 0.0 { num / den } else { 0.0 })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub pair: String,
    pub mi: f64,
    pub ncie: f64,
    pub qabf: f64,
    pub ssim: f64,
    /// Wall-clock fusion time, 0 when not measured.
    pub seconds: f64,
}

/// All metrics of fused image `f` against sources `a` and `b`; SSIM is
/// taken against their pixelwise maximum.
pub fn evaluate_pair(pair: &str, f: &Image, a: &Image, b: &Image) -> Result<MetricsRow> {
    require_gray_triple(f, a, b)?;
    let max = Image::gray(
        a.width(),
        a.height(),
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| x.max(*y))
            .collect(),
    )?;
    Ok(MetricsRow {
        pair: pair.to_string(),
        mi: mi_metric(f, a, b)?,
        ncie: ncie_metric(f, a, b)?,
        qabf: qabf_metric(f, a, b)?,
        ssim: ssim_value(f, &max)?,
        seconds: 0.0,
    })
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsReport {
    pub rows: Vec<MetricsRow>,
}

const HEADER: [&str; 6] = ["pair", "mi", "ncie", "qabf", "ssim", "seconds"];

impl MetricsReport {
    pub fn push(&mut self, row: MetricsRow) {
        self.rows.push(row);
    }

    /// Column means, labelled `mean`; `None` for an empty report.
    pub fn mean(&self) -> Option<MetricsRow> {
        if self.rows.is_empty() {
            return None;
        }
        let n = self.rows.len() as f64;
        let avg = |f: fn(&MetricsRow) -> f64| self.rows.iter().map(f).sum::<f64>() / n;
        Some(MetricsRow {
            pair: "mean".into(),
            mi: avg(|r| r.mi),
            ncie: avg(|r| r.ncie),
            qabf: avg(|r| r.qabf),
            ssim: avg(|r| r.ssim),
            seconds: avg(|r| r.seconds),
        })
    }

    /// Header, one line per pair and a final `mean` line, four decimals.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(HEADER)?;
        for row in self.rows.iter().chain(self.mean().as_ref()) {
            w.write_record([
                row.pair.clone(),
                format!("{:.4}", row.mi),
                format!("{:.4}", row.ncie),
                format!("{:.4}", row.qabf),
                format!("{:.4}", row.ssim),
                format!("{:.4}", row.seconds),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads rows written by [`MetricsReport::write_csv`], dropping the
    /// `mean` line.
    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        if r.headers()?.iter().ne(HEADER) {
            return Err(Error::Format(format!(
                "unexpected metrics header {:?}",
                r.headers()?
            )));
        }
        let mut report = Self::default();
        for rec in r.records() {
            let rec = rec?;
            let num = |i: usize| -> Result<f64> {
                rec[i]
                    .parse()
                    .map_err(|_| Error::Format(format!("bad number `{}` in metrics row", &rec[i])))
            };
            if &rec[0] == "mean" {
                continue;
            }
            report.push(MetricsRow {
                pair: rec[0].to_string(),
                mi: num(1)?,
                ncie: num(2)?,
                qabf: num(3)?,
                ssim: num(4)?,
                seconds: num(5)?,
            });
        }
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantization_rounds_half_up() {
        assert_eq!(quantize(0.0), 0);
        assert_eq!(quantize(1.0), 255);
        assert_eq!(quantize(0.5), 128);
        assert_eq!(quantize(127.49 / 255.0), 127);
    }

    #[test]
    fn rank_labels_fill_bins_evenly() {
        let img = Image::gray_from_fn(32, 16, |x, y| ((x * 7 + y * 3) % 5) as f32 / 4.0);
        let labels = rank_labels(&img);
        let mut counts = [0usize; BINS];
        for l in labels {
            counts[l] += 1;
        }
        assert!(counts.iter().all(|&c| c == 2));
    }
}
