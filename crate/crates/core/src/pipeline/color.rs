//! BT.601 full-range YUV with chroma centred on 0.5.

use crate::error::{Error, Result};
use crate::image::Image;

pub const KR: f64 = 0.299;
pub const KG: f64 = 0.587;
pub const KB: f64 = 0.114;
/// `2 (1 - KB)` and `2 (1 - KR)`.
pub const U_SCALE: f64 = 1.772;
pub const V_SCALE: f64 = 1.402;

pub fn rgb_pixel_to_yuv([r, g, b]: [f64; 3]) -> [f64; 3] {
    let y = KR * r + KG * g + KB * b;
    [y, (b - y) / U_SCALE + 0.5, (r - y) / V_SCALE + 0.5]
}

pub fn yuv_pixel_to_rgb([y, u, v]: [f64; 3]) -> [f64; 3] {
    let r = y + V_SCALE * (v - 0.5);
    let b = y + U_SCALE * (u - 0.5);
    let g = (y - KR * r - KB * b) / KG;
    [r, g, b]
}

/// Splits an RGB image into Y, U and V planes.
pub fn rgb_to_yuv(rgb: &Image) -> Result<(Image, Image, Image)> {
    if rgb.channels() != 3 {
        return Err(Error::ChannelCount {
            expected: 3,
            found: rgb.channels(),
        });
    }
    let n = rgb.width() * rgb.height();
    let mut planes = [
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
    ];
    for px in rgb.data().chunks_exact(3) {
        let yuv = rgb_pixel_to_yuv([px[0] as f64, px[1] as f64, px[2] as f64]);
        for (plane, v) in planes.iter_mut().zip(yuv) {
            plane.push(v as f32);
        }
    }
    let [y, u, v] = planes;
    let (w, h) = rgb.dims();
    Ok((
        Image::gray(w, h, y)?,
        Image::gray(w, h, u)?,
        Image::gray(w, h, v)?,
    ))
}

/// Inverse of [`rgb_to_yuv`], clamped into `[0, 1]`.
pub fn yuv_to_rgb(y: &Image, u: &Image, v: &Image) -> Result<Image> {
    for p in [y, u, v] {
        p.require_gray()?;
        y.require_same_dims(p)?;
    }
    let mut data = Vec::with_capacity(y.data().len() * 3);
    for ((&yy, &uu), &vv) in y.data().iter().zip(u.data()).zip(v.data()) {
        let rgb = yuv_pixel_to_rgb([yy as f64, uu as f64, vv as f64]);
        data.extend(rgb.iter().map(|&c| c as f32));
    }
    Image::new(y.width(), y.height(), 3, data)
}

/// Luma of an RGB image, or the image itself when already gray.
pub fn luma(img: &Image) -> Result<Image> {
    if img.is_gray() {
        return Ok(img.clone());
    }
    Ok(rgb_to_yuv(img)?.0)
}
