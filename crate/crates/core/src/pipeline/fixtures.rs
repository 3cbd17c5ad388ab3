//! Deterministic synthetic infrared/visible scenes for tests and demos.
//!
//! The visible image carries texture and edges everywhere; the infrared image
//! is smooth and dark except for a few hot targets that are nearly invisible
//! in the visible image.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::netpbm::save_pgm;
use crate::error::Result;
use crate::image::Image;

pub const FIXTURE_SIDE: usize = 64;
pub const TRAIN_PAIRS: usize = 8;
pub const HELDOUT_PAIRS: usize = 4;
/// Held-out scenes use seeds past the training range.
pub const HELDOUT_SEED_OFFSET: u64 = 1000;

struct Target {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    heat: f64,
}

struct Block {
    x0: f64,
    y0: f64,
    x1: f64,
    y1: f64,
    shade: f64,
}

/// `(ir, vi)` for one scene.
pub fn synth_pair(seed: u64, width: usize, height: usize) -> (Image, Image) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (width as f64, height as f64);

    let blocks: Vec<Block> = (0..rng.gen_range(3..6))
        .map(|_| {
            let (x0, y0) = (rng.gen_range(0.0..w * 0.8), rng.gen_range(0.0..h * 0.8));
            Block {
                x0,
                y0,
                x1: x0 + rng.gen_range(w * 0.15..w * 0.5),
                y1: y0 + rng.gen_range(h * 0.15..h * 0.5),
                shade: rng.gen_range(-0.25..0.25),
            }
        })
        .collect();
    let targets: Vec<Target> = (0..rng.gen_range(1..4))
        .map(|_| Target {
            cx: rng.gen_range(w * 0.15..w * 0.85),
            cy: rng.gen_range(h * 0.15..h * 0.85),
            rx: rng.gen_range(w * 0.04..w * 0.1),
            ry: rng.gen_range(h * 0.08..h * 0.18),
            heat: rng.gen_range(0.55..0.7),
        })
        .collect();
    let freq = rng.gen_range(0.25..0.6);
    let angle: f64 = rng.gen_range(0.0..std::f64::consts::PI);
    let (ca, sa) = (angle.cos(), angle.sin());
    let base = rng.gen_range(0.35..0.55);
    let tilt = rng.gen_range(-0.2..0.2);
    let ir_base = rng.gen_range(0.12..0.25);

    let mut ir = Vec::with_capacity(width * height);
    let mut vi = Vec::with_capacity(width * height);
    for y in 0..height {
        for x in 0..width {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut shade = base + tilt * (fx / w - 0.5);
            let mut warmth = 0.0;
            for b in &blocks {
                if fx >= b.x0 && fx < b.x1 && fy >= b.y0 && fy < b.y1 {
                    shade += b.shade;
                    warmth += 0.3 * b.shade.abs();
                }
            }
            let stripes = 0.12 * (freq * (ca * fx + sa * fy)).sin();
            let grain = 0.04 * (1.7 * fx).sin() * (2.3 * fy).cos();
            let mut heat = 0.0f64;
            for t in &targets {
                let d = ((fx - t.cx) / t.rx).powi(2) + ((fy - t.cy) / t.ry).powi(2);
                heat = heat.max(t.heat * (-0.5 * d * d).exp());
            }
            vi.push((shade + stripes + grain) as f32);
            ir.push((ir_base + warmth + 0.05 * (fy / h) + heat) as f32);
        }
    }
    (
        Image::gray(width, height, ir).expect("sizes agree"),
        Image::gray(width, height, vi).expect("sizes agree"),
    )
}

/// Writes `count` pairs as `<dir>/{ir,vi}/scene_XX.pgm`.
pub fn write_corpus(dir: &Path, first_seed: u64, count: usize, side: usize) -> Result<()> {
    fs::create_dir_all(dir.join("ir"))?;
    fs::create_dir_all(dir.join("vi"))?;
    for i in 0..count {
        let (ir, vi) = synth_pair(first_seed + i as u64, side, side);
        let name = format!("scene_{i:02}.pgm");
        save_pgm(&dir.join("ir").join(&name), &ir)?;
        save_pgm(&dir.join("vi").join(&name), &vi)?;
    }
    Ok(())
}

/// The bundled layout: `train/` and `heldout/` under `root`.
pub fn write_fixture_corpus(root: &Path) -> Result<()> {
    write_corpus(&root.join("train"), 0, TRAIN_PAIRS, FIXTURE_SIDE)?;
    write_corpus(
        &root.join("heldout"),
        HELDOUT_SEED_OFFSET,
        HELDOUT_PAIRS,
        FIXTURE_SIDE,
    )
}
