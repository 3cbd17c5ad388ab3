//! Bilinear resampling with pixel-centre alignment (align-corners off).

use crate::error::{Error, Result};
use crate::image::Image;

/// Source sample positions for each output index: `(lo, hi, frac)`.
fn taps(out_len: usize, in_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(in_len - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

pub fn resize_bilinear(img: &Image, out_w: usize, out_h: usize) -> Result<Image> {
    if out_w == 0 || out_h == 0 {
        return Err(Error::invalid(
            "resize_bilinear",
            format!("target size {out_w}x{out_h} has a zero dimension"),
        ));
    }
    if img.dims() == (out_w, out_h) {
        return Ok(img.clone());
    }
    let c = img.channels();
    let xs = taps(out_w, img.width());
    let ys = taps(out_h, img.height());
    let at = |x: usize, y: usize, ch: usize| img.get(x, y, ch) as f64;
    let mut data = Vec::with_capacity(out_w * out_h * c);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            for ch in 0..c {
                let top = at(x0, y0, ch) * (1.0 - fx) + at(x1, y0, ch) * fx;
                let bottom = at(x0, y1, ch) * (1.0 - fx) + at(x1, y1, ch) * fx;
                data.push((top * (1.0 - fy) + bottom * fy) as f32);
            }
        }
    }
    Image::new(out_w, out_h, c, data)
}
