//! The colour / scale / rotation transforms of the rainbow stream.

use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

/// Background colours; the glyph is drawn in the complementary colour.
pub const COLORS: [[f64; 3]; 7] = [
    [1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, 0.0, 1.0],
    [1.0, 1.0, 0.0],
    [0.0, 1.0, 1.0],
    [1.0, 0.0, 1.0],
    [1.0, 1.0, 1.0],
];
pub const NUM_SCALES: usize = 2;
pub const NUM_ROTATIONS: usize = 4;
pub const NUM_TRANSFORMS: usize = COLORS.len() * NUM_SCALES * NUM_ROTATIONS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Transform {
    pub color: usize,
    /// 0 = full size, 1 = half size, centred.
    pub scale: usize,
    /// Number of quarter turns counter-clockwise.
    pub rotation: usize,
}

impl Transform {
    /// The `i`-th transform in colour-major order.
    pub fn from_index(i: usize) -> Self {
        let per_color = NUM_SCALES * NUM_ROTATIONS;
        Self {
            color: i / per_color,
            scale: (i % per_color) / NUM_ROTATIONS,
            rotation: i % NUM_ROTATIONS,
        }
    }

    pub fn index(&self) -> usize {
        (self.color * NUM_SCALES + self.scale) * NUM_ROTATIONS + self.rotation
    }

    /// Maps a square single-channel image of side `n` to a 3-channel image.
    pub fn apply(&self, gray: &[f64], n: usize) -> Vec<f64> {
        let mut img = gray.to_vec();
        if self.scale == 1 {
            img = half_scale(&img, n);
        }
        for _ in 0..self.rotation {
            img = rotate90(&img, n);
        }
        let bg = COLORS[self.color];
        let mut out = Vec::with_capacity(3 * n * n);
        for b in bg {
            out.extend(img.iter().map(|&g| b * (1.0 - g) + (1.0 - b) * g));
        }
        out
    }
}

/// Counter-clockwise quarter turn of a square image.
pub fn rotate90(img: &[f64], n: usize) -> Vec<f64> {
    let mut out = alloc::vec![0.0; n * n];
    for r in 0..n {
        for c in 0..n {
            out[(n - 1 - c) * n + r] = img[r * n + c];
        }
    }
    out
}

/// 2×2 block averages placed in the centre of an otherwise empty image.
pub fn half_scale(img: &[f64], n: usize) -> Vec<f64> {
    let half = n / 2;
    let offset = (n - half) / 2;
    let mut out = alloc::vec![0.0; n * n];
    for r in 0..half {
        for c in 0..half {
            let mut sum = 0.0;
            for (dr, dc) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                let (sr, sc) = (2 * r + dr, 2 * c + dc);
                if sr < n && sc < n {
                    sum += img[sr * n + sc];
                }
            }
            out[(r + offset) * n + c + offset] = sum / 4.0;
        }
    }
    out
}
