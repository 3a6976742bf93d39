//! Seeded synthetic segmentation tasks.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{DflatError, Result};
use crate::tensor::Tensor;

/// Pixel noise added to every generated image.
pub const DEFAULT_NOISE: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Task {
    /// Diagonal bands, one class per band, band index increasing along `i + j`.
    Stripes,
    /// Axis-aligned rectangles, one per foreground class, over background 0.
    Rects,
    /// Pixel checkerboard (classes 0/1 by `(i + j) mod 2`) with one solid
    /// rectangle per remaining class.
    Checker,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Stripes => "stripes",
            Task::Rects => "rects",
            Task::Checker => "checker",
        })
    }
}

impl FromStr for Task {
    type Err = DflatError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stripes" => Ok(Task::Stripes),
            "rects" => Ok(Task::Rects),
            "checker" => Ok(Task::Checker),
            other => Err(DflatError::config(format!("unknown task {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    /// `H×W×3`, values in `[0, 1]`.
    pub image: Tensor,
    /// Row-major class labels.
    pub mask: Vec<usize>,
}

/// Fixed RGB colour of each class: evenly spaced hues.
pub fn class_color(class: usize, classes: usize) -> [f64; 3] {
    let hue = class as f64 / classes as f64;
    hsv_to_rgb(hue, 0.8, 0.9)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h * 6.0) % 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    [r + m, g + m, b + m]
}

/// Width of each diagonal band so that `classes` bands cover `i + j`.
pub fn stripe_width(height: usize, width: usize, classes: usize) -> usize {
    (height + width - 1).div_ceil(classes)
}

pub fn generate(task: Task, n: usize, height: usize, width: usize, classes: usize, seed: u64) -> Result<Vec<SyntheticSample>> {
    generate_with_noise(task, n, height, width, classes, DEFAULT_NOISE, seed)
}

pub fn generate_with_noise(
    task: Task,
    n: usize,
    height: usize,
    width: usize,
    classes: usize,
    noise: f64,
    seed: u64,
) -> Result<Vec<SyntheticSample>> {
    if n == 0 {
        return Err(DflatError::config("need at least one sample"));
    }
    if classes < 2 || height == 0 || width == 0 {
        return Err(DflatError::config("need at least 2 classes and a non-empty image"));
    }
    match task {
        Task::Stripes if classes > height + width - 1 => {
            return Err(DflatError::config(format!(
                "{classes} bands do not fit in {} diagonals",
                height + width - 1
            )))
        }
        Task::Rects | Task::Checker if classes > height * width / 4 => {
            return Err(DflatError::config(format!(
                "{classes} classes do not fit in a {height}x{width} image"
            )))
        }
        _ => {}
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Normal::new(0.0, noise.max(0.0)).map_err(|e| DflatError::config(e.to_string()))?;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let (mask, mut rgb) = match task {
            Task::Stripes => stripes(&mut rng, height, width, classes),
            Task::Rects => rects(&mut rng, height, width, classes, 0),
            Task::Checker => rects(&mut rng, height, width, classes, 2),
        };
        if noise > 0.0 {
            for v in rgb.iter_mut() {
                *v = (*v + dist.sample(&mut rng)).clamp(0.0, 1.0);
            }
        }
        out.push(SyntheticSample {
            image: Tensor::new(vec![height, width, 3], rgb)?,
            mask,
        });
    }
    Ok(out)
}

fn paint(classes: usize, mask: &[usize]) -> Vec<f64> {
    mask.iter().flat_map(|&c| class_color(c, classes)).collect()
}

fn stripes(rng: &mut ChaCha8Rng, height: usize, width: usize, classes: usize) -> (Vec<usize>, Vec<f64>) {
    let band = stripe_width(height, width, classes) as i64;
    let shift = if band >= 2 { rng.gen_range(-(band / 2)..=band / 2) } else { 0 };
    let mut mask = Vec::with_capacity(height * width);
    for i in 0..height {
        for j in 0..width {
            let k = ((i + j) as i64 + shift).div_euclid(band);
            mask.push(k.clamp(0, classes as i64 - 1) as usize);
        }
    }
    let rgb = paint(classes, &mask);
    (mask, rgb)
}

/// Background plus one rectangle for each class from `first_rect` on.
/// With `first_rect == 2` the background is a pixel checkerboard of classes
/// 0 and 1 drawn in black and white.
fn rects(
    rng: &mut ChaCha8Rng,
    height: usize,
    width: usize,
    classes: usize,
    first_rect: usize,
) -> (Vec<usize>, Vec<f64>) {
    let checker = first_rect == 2;
    let mut mask: Vec<usize> = (0..height * width)
        .map(|p| if checker { (p / width + p % width) % 2 } else { 0 })
        .collect();
    let lo_h = (height / 4).max(1);
    let lo_w = (width / 4).max(1);
    for class in first_rect..classes {
        loop {
            let rh = rng.gen_range(lo_h..=(height / 2).max(lo_h));
            let rw = rng.gen_range(lo_w..=(width / 2).max(lo_w));
            let top = rng.gen_range(0..=height - rh);
            let left = rng.gen_range(0..=width - rw);
            // Later rectangles must not swallow an earlier class entirely.
            let mut trial = mask.clone();
            for i in top..top + rh {
                for j in left..left + rw {
                    trial[i * width + j] = class;
                }
            }
            let all_present = (first_rect..class).all(|c| trial.contains(&c));
            if all_present {
                mask = trial;
                break;
            }
        }
    }
    let rgb = mask
        .iter()
        .flat_map(|&c| match (checker, c) {
            (true, 0) => [0.0; 3],
            (true, 1) => [1.0; 3],
            _ => class_color(c, classes),
        })
        .collect();
    (mask, rgb)
}
