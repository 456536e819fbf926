//! Base image datasets and the built-in 8×8 synthetic glyph set.

use alloc::format;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::StreamError;

/// Labeled images stored row-major, channel-major within an image.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseDataset {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub images: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl BaseDataset {
    pub fn new(
        height: usize,
        width: usize,
        channels: usize,
        images: Vec<Vec<f64>>,
        labels: Vec<usize>,
    ) -> Result<Self, StreamError> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(StreamError::Config(format!(
                "image shape {channels}x{height}x{width} has a zero dimension"
            )));
        }
        if images.len() != labels.len() {
            return Err(StreamError::Config(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        let item = height * width * channels;
        if let Some(i) = images.iter().position(|im| im.len() != item) {
            return Err(StreamError::Config(format!(
                "image {i} has {} values, expected {item}",
                images[i].len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            images,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Number of classes, taken as one past the largest label.
    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |&m| m + 1)
    }

    /// Indices of the images of each class.
    pub fn by_class(&self) -> Vec<Vec<usize>> {
        let mut out = alloc::vec![Vec::new(); self.num_classes()];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l].push(i);
        }
        out
    }
}

pub const GLYPH_SIZE: usize = 8;
pub const GLYPH_CLASSES: usize = 10;

// Seven-segment strokes filling the 8×8 grid: (row range, column range).
const SEGMENTS: [((usize, usize), (usize, usize)); 7] = [
    ((0, 0), (0, 7)), // a: top
    ((0, 3), (7, 7)), // b: upper right
    ((4, 7), (7, 7)), // c: lower right
    ((7, 7), (0, 7)), // d: bottom
    ((4, 7), (0, 0)), // e: lower left
    ((0, 3), (0, 0)), // f: upper left
    ((3, 4), (0, 7)), // g: middle, two rows thick
];

const DIGITS: [&[usize]; GLYPH_CLASSES] = [
    &[0, 1, 2, 3, 4, 5],
    &[1, 2],
    &[0, 1, 6, 4, 3],
    &[0, 1, 6, 2, 3],
    &[5, 6, 1, 2],
    &[0, 5, 6, 2, 3],
    &[0, 5, 6, 4, 3, 2],
    &[0, 1, 2],
    &[0, 1, 2, 3, 4, 5, 6],
    &[0, 1, 2, 3, 5, 6],
];

/// Noise-free prototype of a glyph class, values in {0, 1}.
pub fn glyph_prototype(class: usize) -> Vec<f64> {
    let mut img = alloc::vec![0.0; GLYPH_SIZE * GLYPH_SIZE];
    for &s in DIGITS[class] {
        let ((r0, r1), (c0, c1)) = SEGMENTS[s];
        for r in r0..=r1 {
            for c in c0..=c1 {
                img[r * GLYPH_SIZE + c] = 1.0;
            }
        }
    }
    img
}

/// `per_class` noisy instances of each of the ten glyph classes: the
/// prototype scaled by a random stroke intensity plus bounded pixel noise,
/// clipped to [0, 1]. Labels cycle through classes.
pub fn synthetic_glyphs(per_class: usize, seed: u64) -> BaseDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(per_class * GLYPH_CLASSES);
    let mut labels = Vec::with_capacity(per_class * GLYPH_CLASSES);
    for _ in 0..per_class {
        for class in 0..GLYPH_CLASSES {
            let proto = glyph_prototype(class);
            let intensity: f64 = rng.gen_range(0.7..1.0);
            let img = proto
                .iter()
                .map(|&p| (p * intensity + rng.gen_range(-0.1..0.1)).clamp(0.0, 1.0))
                .collect();
            images.push(img);
            labels.push(class);
        }
    }
    BaseDataset {
        height: GLYPH_SIZE,
        width: GLYPH_SIZE,
        channels: 1,
        images,
        labels,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prototypes_are_distinct() {
        for a in 0..GLYPH_CLASSES {
            for b in a + 1..GLYPH_CLASSES {
                assert_ne!(
                    glyph_prototype(a),
                    glyph_prototype(b),
                    "classes {a} and {b}"
                );
            }
        }
    }

    #[test]
    fn glyph_set_is_balanced_bounded_and_seeded() {
        let d = synthetic_glyphs(20, 3);
        assert_eq!(d.len(), 200);
        assert!(d.by_class().iter().all(|c| c.len() == 20));
        assert!(d.images.iter().flatten().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(d, synthetic_glyphs(20, 3));
        assert_ne!(d, synthetic_glyphs(20, 4));
    }

    #[test]
    fn dataset_validation_names_the_bad_image() {
        let err = BaseDataset::new(
            2,
            2,
            1,
            alloc::vec![alloc::vec![0.0; 4], alloc::vec![0.0; 3]],
            alloc::vec![0, 1],
        )
        .unwrap_err();
        assert!(matches!(err, StreamError::Config(m) if m.contains("image 1")));
    }
}
