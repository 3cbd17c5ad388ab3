//! Image I/O, color routing, datasets, training and benchmarking.

pub mod bench;
pub mod color;
pub mod dataset;
pub mod fixtures;
pub mod netpbm;
pub mod optim;
pub mod resize;
pub mod train;

pub use bench::{bench_runtime, evaluate_dataset, BenchReport, BenchRow};
pub use color::{luma, rgb_to_yuv, yuv_to_rgb};
pub use dataset::{load_pair, DatasetIndex, ImagePair, PairEntry};
pub use netpbm::{load_netpbm, load_pgm, load_ppm, save_netpbm, save_pgm, save_ppm};
pub use optim::{cosine_lr, TrainState};
pub use resize::resize_bilinear;
pub use train::{train_loop, write_trace, StepRecord, TrainConfig, TrainOutcome};

use crate::error::Result;
use crate::image::Image;
use crate::network::{ModelParams, Network};
use crate::tensor::Real;

/// Fused luma with the visible image's original chroma planes.
pub fn fuse_rgb_planes<T: Real>(
    net: &Network<T>,
    params: &ModelParams<T>,
    ir: &Image,
    rgb: &Image,
) -> Result<[Image; 3]> {
    ir.require_gray()?;
    let (y, u, v) = rgb_to_yuv(rgb)?;
    let fused = net.fuse(params, ir, &y)?;
    Ok([fused, u, v])
}

/// Fuses the luma of `rgb` with `ir` and converts back to RGB.
pub fn fuse_rgb_pipeline<T: Real>(
    net: &Network<T>,
    params: &ModelParams<T>,
    ir: &Image,
    rgb: &Image,
) -> Result<Image> {
    let [y, u, v] = fuse_rgb_planes(net, params, ir, rgb)?;
    yuv_to_rgb(&y, &u, &v)
}
