//! Synthetic segmentation task: axis-aligned rectangles of class colours on
//! a background, with small additive noise.

use std::sync::Arc;

use rand::Rng;

use crate::error::{invalid, Result};
use crate::tensor::{Scalar, Tensor};

/// Rectangle corners snap to this grid so labels are constant on the
/// 4×4 cells the head predicts.
pub const CELL: usize = 4;

/// Colour of class `c`; class 0 is the background.
pub fn class_colour(c: usize) -> [f64; 3] {
    match c {
        0 => [-0.6, -0.6, -0.6],
        1 => [0.8, -0.4, 0.1],
        2 => [-0.2, 0.7, -0.5],
        _ => {
            let t = c as f64;
            [(1.7 * t).sin(), (2.3 * t + 1.0).sin(), (3.1 * t + 2.0).sin()]
        }
    }
}

/// A batch of `[B, h, w, 3]` images and their `B·h·w` labels.
pub fn rectangle_batch<T: Scalar>(
    rng: &mut impl Rng,
    batch: usize,
    h: usize,
    w: usize,
    classes: usize,
    noise: f64,
) -> Result<(Tensor<T>, Arc<[usize]>)> {
    if batch == 0 || classes < 2 || h < 2 * CELL || w < 2 * CELL || !h.is_multiple_of(CELL) || !w.is_multiple_of(CELL) {
        return Err(invalid(
            "rectangle_batch",
            format!("{batch} images of {h}x{w} with {classes} classes"),
        ));
    }
    let (gh, gw) = (h / CELL, w / CELL);
    let mut labels = vec![0usize; batch * h * w];
    for img in labels.chunks_mut(h * w) {
        let count = rng.gen_range(2..=4);
        for _ in 0..count {
            let class = rng.gen_range(1..classes);
            let rh = rng.gen_range(2..=gh / 2);
            let rw = rng.gen_range(2..=gw / 2);
            let y0 = rng.gen_range(0..=gh - rh) * CELL;
            let x0 = rng.gen_range(0..=gw - rw) * CELL;
            for y in y0..y0 + rh * CELL {
                img[y * w + x0..y * w + x0 + rw * CELL].fill(class);
            }
        }
    }
    let mut data = Vec::with_capacity(labels.len() * 3);
    for &l in &labels {
        let col = class_colour(l);
        for ch in col {
            data.push(T::lit(ch + rng.gen_range(-noise..=noise)));
        }
    }
    Ok((Tensor::new(&[batch, h, w, 3], data)?, labels.into()))
}
