//! Training objectives on `N x 1 x H x W` batches: intensity fidelity to
//! both sources, Sobel texture fidelity to the sharper source, and
//! structural similarity to the brighter source.

use crate::error::{Error, Result};
use crate::image::Image;
use crate::tensor::{Graph, PadMode, Real, Tensor, Var};

pub const SOBEL_EPS: f64 = 1e-8;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 1e-4;
pub const SSIM_C2: f64 = 9e-4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 10.0,
            gamma: 100.0,
        }
    }
}

/// Loss values of one evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossReport {
    pub pixel: f64,
    pub texture: f64,
    pub ssim: f64,
    pub total: f64,
}

/// Graph handles to every loss term.
pub struct LossTerms<T> {
    pub pixel: Var<T>,
    pub texture: Var<T>,
    pub ssim: Var<T>,
    pub total: Var<T>,
}

impl<T: Real> LossTerms<T> {
    pub fn report(&self) -> LossReport {
        let v = |x: &Var<T>| x.value().item().to_f64_lossy();
        LossReport {
            pixel: v(&self.pixel),
            texture: v(&self.texture),
            ssim: v(&self.ssim),
            total: v(&self.total),
        }
    }
}

fn planes<T: Real>(op: &'static str, vars: &[&Var<T>]) -> Result<(usize, usize, usize)> {
    let (n, c, h, w) = vars[0].value().dims4()?;
    if c != 1 {
        return Err(Error::invalid(op, format!("expected one channel, got {c}")));
    }
    for v in &vars[1..] {
        let (vn, vc, vh, vw) = v.value().dims4()?;
        if (vh, vw) != (h, w) {
            return Err(Error::DimensionMismatch {
                lhs: (w, h),
                rhs: (vw, vh),
            });
        }
        if (vn, vc) != (n, c) {
            return Err(Error::shape(op, vars[0].shape(), v.shape()));
        }
    }
    Ok((n, h, w))
}

/// Mean over pixels of `(F - VI)^2 + (F - IR)^2`.
pub fn pixel_loss<T: Real>(
    g: &mut Graph<T>,
    f: &Var<T>,
    vi: &Var<T>,
    ir: &Var<T>,
) -> Result<Var<T>> {
    planes("pixel_loss", &[f, vi, ir])?;
    let dv = g.sub(f, vi)?;
    let di = g.sub(f, ir)?;
    let sv = g.mul(&dv, &dv)?;
    let si = g.mul(&di, &di)?;
    let both = g.add(&sv, &si)?;
    Ok(g.mean(&both))
}

fn sobel_kernel<T: Real>(transpose: bool) -> Tensor<T> {
    const GX: [f64; 9] = [-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0];
    Tensor::from_fn(&[1, 1, 3, 3], |i| {
        let (r, c) = (i / 3, i % 3);
        T::lit(if transpose { GX[c * 3 + r] } else { GX[i] })
    })
}

/// Sobel magnitude `sqrt(Gx^2 + Gy^2 + eps)` with reflect padding.
pub fn sobel_gradient<T: Real>(g: &mut Graph<T>, x: &Var<T>) -> Result<Var<T>> {
    planes("sobel_gradient", &[x])?;
    let kx = g.constant(sobel_kernel(false));
    let ky = g.constant(sobel_kernel(true));
    let gx = g.conv2d(x, &kx, None, PadMode::Reflect)?;
    let gy = g.conv2d(x, &ky, None, PadMode::Reflect)?;
    let gx2 = g.mul(&gx, &gx)?;
    let gy2 = g.mul(&gy, &gy)?;
    let s = g.add(&gx2, &gy2)?;
    let s = g.add_scalar(&s, T::lit(SOBEL_EPS));
    Ok(g.sqrt(&s))
}

pub fn max_image<T: Real>(g: &mut Graph<T>, vi: &Var<T>, ir: &Var<T>) -> Result<Var<T>> {
    planes("max_image", &[vi, ir])?;
    g.maximum(vi, ir)
}

/// Per image `||grad F - max(grad VI, grad IR)||_2 / sqrt(HW)`, averaged over
/// the batch.
pub fn texture_loss<T: Real>(
    g: &mut Graph<T>,
    f: &Var<T>,
    vi: &Var<T>,
    ir: &Var<T>,
) -> Result<Var<T>> {
    let (n, h, w) = planes("texture_loss", &[f, vi, ir])?;
    let gf = sobel_gradient(g, f)?;
    let gv = sobel_gradient(g, vi)?;
    let gi = sobel_gradient(g, ir)?;
    let target = g.maximum(&gv, &gi)?;
    let d = g.sub(&gf, &target)?;
    let d2 = g.mul(&d, &d)?;
    let rows = g.reshape(&d2, &[n, h * w])?;
    let ones = g.constant(Tensor::full(&[h * w, 1], T::one()));
    let per_image = g.linear(&rows, &ones, None)?;
    let per_image = g.scale(&per_image, T::one() / T::from_usize(h * w).unwrap());
    let norms = g.sqrt(&per_image);
    Ok(g.mean(&norms))
}

fn gaussian_window<T: Real>() -> Tensor<T> {
    let k = SSIM_WINDOW;
    let r = (k / 2) as f64;
    let g1: Vec<f64> = (0..k)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g1.iter().sum();
    Tensor::from_fn(&[1, 1, k, k], |i| T::lit(g1[i / k] * g1[i % k] / (s * s)))
}

/// Mean local SSIM (11x11 Gaussian window, sigma 1.5, reflect padding).
pub fn ssim<T: Real>(g: &mut Graph<T>, x: &Var<T>, y: &Var<T>) -> Result<Var<T>> {
    planes("ssim", &[x, y])?;
    let win = g.constant(gaussian_window());
    let c1 = T::lit(SSIM_C1);
    let c2 = T::lit(SSIM_C2);
    let two = T::lit(2.0);

    let blur = |g: &mut Graph<T>, v: &Var<T>| g.conv2d(v, &win, None, PadMode::Reflect);
    let mx = blur(g, x)?;
    let my = blur(g, y)?;
    let xx = g.mul(x, x)?;
    let yy = g.mul(y, y)?;
    let xy = g.mul(x, y)?;
    let exx = blur(g, &xx)?;
    let eyy = blur(g, &yy)?;
    let exy = blur(g, &xy)?;

    let mx2 = g.mul(&mx, &mx)?;
    let my2 = g.mul(&my, &my)?;
    let mxy = g.mul(&mx, &my)?;
    let vx = g.sub(&exx, &mx2)?;
    let vy = g.sub(&eyy, &my2)?;
    let cov = g.sub(&exy, &mxy)?;

    let l_num = g.scale(&mxy, two);
    let l_num = g.add_scalar(&l_num, c1);
    let c_num = g.scale(&cov, two);
    let c_num = g.add_scalar(&c_num, c2);
    let l_den = g.add(&mx2, &my2)?;
    let l_den = g.add_scalar(&l_den, c1);
    let c_den = g.add(&vx, &vy)?;
    let c_den = g.add_scalar(&c_den, c2);

    let num = g.mul(&l_num, &c_num)?;
    let den = g.mul(&l_den, &c_den)?;
    let map = g.div(&num, &den)?;
    Ok(g.mean(&map))
}

/// `1 - SSIM(F, max(VI, IR))`.
pub fn ssim_loss<T: Real>(
    g: &mut Graph<T>,
    f: &Var<T>,
    vi: &Var<T>,
    ir: &Var<T>,
) -> Result<Var<T>> {
    let m = max_image(g, vi, ir)?;
    let s = ssim(g, f, &m)?;
    let neg = g.scale(&s, -T::one());
    Ok(g.add_scalar(&neg, T::one()))
}

/// `alpha * pixel + beta * texture + gamma * (1 - SSIM)`.
pub fn total_loss<T: Real>(
    g: &mut Graph<T>,
    f: &Var<T>,
    vi: &Var<T>,
    ir: &Var<T>,
    w: &LossWeights,
) -> Result<LossTerms<T>> {
    let pixel = pixel_loss(g, f, vi, ir)?;
    let texture = texture_loss(g, f, vi, ir)?;
    let ssim = ssim_loss(g, f, vi, ir)?;
    let a = g.scale(&pixel, T::lit(w.alpha));
    let b = g.scale(&texture, T::lit(w.beta));
    let c = g.scale(&ssim, T::lit(w.gamma));
    let ab = g.add(&a, &b)?;
    let total = g.add(&ab, &c)?;
    Ok(LossTerms {
        pixel,
        texture,
        ssim,
        total,
    })
}

/// SSIM between two gray images, evaluated in `f64`.
pub fn ssim_value(x: &Image, y: &Image) -> Result<f64> {
    x.require_same_dims(y)?;
    let mut g = Graph::<f64>::inference();
    let a = g.constant(x.to_tensor()?);
    let b = g.constant(y.to_tensor()?);
    Ok(ssim(&mut g, &a, &b)?.value().item())
}

/// Loss values for one gray triple, evaluated in `f64`.
pub fn loss_report(f: &Image, vi: &Image, ir: &Image, w: &LossWeights) -> Result<LossReport> {
    f.require_same_dims(vi)?;
    f.require_same_dims(ir)?;
    let mut g = Graph::<f64>::inference();
    let fv = g.constant(f.to_tensor()?);
    let vv = g.constant(vi.to_tensor()?);
    let iv = g.constant(ir.to_tensor()?);
    Ok(total_loss(&mut g, &fv, &vv, &iv, w)?.report())
}
