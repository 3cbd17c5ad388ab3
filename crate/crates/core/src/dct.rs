//! Two-dimensional DCT-II basis grids and per-frequency projections.
//!
//! `f(a,b) = l(a) l(b) sum_h sum_w cos(pi a (h+1/2) / H) cos(pi b (w+1/2) / W) x(h,w)`
//! with `l(0) = sqrt(1/N)` and `l(k) = sqrt(2/N)` otherwise. At `(0,0)` the
//! projection is `sqrt(HW) * mean(x)`, i.e. proportional to global average
//! pooling.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, OnceLock, RwLock};

use crate::error::{Error, Result};

/// Vertical (`a`) and horizontal (`b`) frequency of one DCT component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FrequencyIndex {
    pub a: usize,
    pub b: usize,
}

impl FrequencyIndex {
    pub const DC: FrequencyIndex = FrequencyIndex { a: 0, b: 0 };

    pub fn new(a: usize, b: usize) -> Self {
        Self { a, b }
    }

    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        if self.a >= h || self.b >= w {
            return Err(Error::FrequencyOutOfRange {
                a: self.a,
                b: self.b,
                h,
                w,
            });
        }
        Ok(())
    }
}

/// Orthonormalizing factor for frequency `k` over an axis of length `n`.
pub fn lambda(k: usize, n: usize) -> f64 {
    let n = n as f64;
    if k == 0 {
        (1.0 / n).sqrt()
    } else {
        (2.0 / n).sqrt()
    }
}

/// Unnormalized cosine grid `C[h][w]` for frequency `(a, b)`, row-major `H x W`.
pub fn dct_basis(a: usize, b: usize, h: usize, w: usize) -> Result<Vec<f64>> {
    FrequencyIndex::new(a, b).validate(h, w)?;
    let rows: Vec<f64> = (0..h)
        .map(|y| (PI * a as f64 * (y as f64 + 0.5) / h as f64).cos())
        .collect();
    let cols: Vec<f64> = (0..w)
        .map(|x| (PI * b as f64 * (x as f64 + 0.5) / w as f64).cos())
        .collect();
    let mut grid = Vec::with_capacity(h * w);
    for r in &rows {
        grid.extend(cols.iter().map(|c| r * c));
    }
    Ok(grid)
}

/// Projection of an `H x W` grid onto one normalized DCT component.
pub fn dct_component(x: &[f64], h: usize, w: usize, idx: FrequencyIndex) -> Result<f64> {
    if x.len() != h * w {
        return Err(Error::invalid(
            "dct_component",
            format!("grid has {} values, expected {h}x{w}", x.len()),
        ));
    }
    let weights = DctBasisCache::global().weights(h, w, idx)?;
    Ok(weights.iter().zip(x).map(|(c, v)| c * v).sum())
}

/// Inverse of the full orthonormal transform: rebuilds a grid from all `H*W`
/// coefficients laid out as `coeffs[a * W + b]`.
pub fn dct_inverse(coeffs: &[f64], h: usize, w: usize) -> Result<Vec<f64>> {
    if coeffs.len() != h * w {
        return Err(Error::invalid(
            "dct_inverse",
            format!("{} coefficients for a {h}x{w} grid", coeffs.len()),
        ));
    }
    let cache = DctBasisCache::global();
    let mut out = vec![0.0; h * w];
    for a in 0..h {
        for b in 0..w {
            let f = coeffs[a * w + b];
            let weights = cache.weights(h, w, FrequencyIndex::new(a, b))?;
            out.iter_mut()
                .zip(weights.iter())
                .for_each(|(o, c)| *o += f * c);
        }
    }
    Ok(out)
}

/// First `count` frequencies in zigzag order: ascending `a + b`, then
/// ascending `a`, skipping indices outside `H x W`.
pub fn frequency_index_set(count: usize, h: usize, w: usize) -> Result<Vec<FrequencyIndex>> {
    if count > h * w {
        return Err(Error::TooManyFrequencies {
            count,
            h,
            w,
            available: h * w,
        });
    }
    let mut out = Vec::with_capacity(count);
    'diag: for s in 0..(h + w).saturating_sub(1) {
        for a in 0..=s {
            if out.len() == count {
                break 'diag;
            }
            let b = s - a;
            if a < h && b < w {
                out.push(FrequencyIndex::new(a, b));
            }
        }
    }
    Ok(out)
}

type BasisKey = (usize, usize, usize, usize);

/// Normalized projection grids `l(a) l(b) C^{a,b}` keyed by `(H, W, a, b)`.
/// Safe to share between threads.
#[derive(Debug, Default)]
pub struct DctBasisCache {
    grids: RwLock<HashMap<BasisKey, Arc<Vec<f64>>>>,
}

impl DctBasisCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn global() -> &'static DctBasisCache {
        static CACHE: OnceLock<DctBasisCache> = OnceLock::new();
        CACHE.get_or_init(DctBasisCache::new)
    }

    pub fn weights(&self, h: usize, w: usize, idx: FrequencyIndex) -> Result<Arc<Vec<f64>>> {
        idx.validate(h, w)?;
        let key = (h, w, idx.a, idx.b);
        if let Some(grid) = self.grids.read().expect("basis cache poisoned").get(&key) {
            return Ok(grid.clone());
        }
        let norm = lambda(idx.a, h) * lambda(idx.b, w);
        let grid: Vec<f64> = dct_basis(idx.a, idx.b, h, w)?
            .into_iter()
            .map(|c| c * norm)
            .collect();
        let grid = Arc::new(grid);
        self.grids
            .write()
            .expect("basis cache poisoned")
            .entry(key)
            .or_insert_with(|| grid.clone());
        Ok(grid)
    }

    pub fn len(&self) -> usize {
        self.grids.read().expect("basis cache poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
