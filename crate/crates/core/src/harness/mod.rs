//! Synthetic segmentation tasks, metrics and the training loop.

pub mod data;
pub mod metrics;
pub mod train;

use std::path::Path;

use crate::error::{DflatError, Result};
use crate::tensor::Tensor;

pub use data::{generate, generate_with_noise, SyntheticSample, Task};
pub use metrics::{cross_entropy, miou, Confusion};
pub use train::{evaluate, held_out_set, train, EvalReport, Optimizer, StepRecord, TrainConfig};

/// Binary PPM (P6) of a class mask using the class palette.
pub fn mask_ppm(mask: &[usize], height: usize, width: usize, classes: usize) -> Result<Vec<u8>> {
    if mask.len() != height * width {
        return Err(DflatError::shape("mask_ppm", &[mask.len()], &[height, width]));
    }
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    for &c in mask {
        out.extend(data::class_color(c, classes).iter().map(|v| to_byte(*v)));
    }
    Ok(out)
}

/// Binary PPM (P6) of an `H×W×3` image with values in `[0, 1]`.
pub fn image_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let &[h, w, 3] = image.dims() else {
        return Err(DflatError::shape("image_ppm", image.dims(), &[0, 0, 3]));
    };
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend(image.data().iter().map(|v| to_byte(*v)));
    Ok(out)
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| DflatError::io(path, e))
}
