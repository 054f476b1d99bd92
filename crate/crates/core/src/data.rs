//! Bundled desk-scale datasets.
//!
//! `digits` is the 8×8 handwritten digit set (1797 images, 17 grey levels,
//! 10 classes). `spiral` is a synthetic two-arm spiral for MLP experiments.
//! Both use a fixed train/validation split: every fifth sample is held out.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::tensor::Tensor;

static DIGITS: &[u8] = include_bytes!("../data/digits.bin");
const DIGIT_PIXELS: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetId {
    Digits,
    Spiral,
}

impl fmt::Display for DatasetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetId::Digits => "digits",
            DatasetId::Spiral => "spiral",
        })
    }
}

impl FromStr for DatasetId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "digits" => Ok(DatasetId::Digits),
            "spiral" => Ok(DatasetId::Spiral),
            other => Err(Error::Config(format!("unknown dataset '{other}'"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample input shape (without the batch axis).
    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    pub fn subset(&self, rows: &[usize]) -> Dataset {
        Dataset {
            inputs: self.inputs.select_rows(rows),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            classes: self.classes,
        }
    }

    /// Shuffled mini-batches covering every sample once; the last may be short.
    pub fn shuffled_batches<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Vec<Dataset> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(rng);
        order.chunks(batch_size.max(1)).map(|rows| self.subset(rows)).collect()
    }

    /// In-order mini-batches.
    pub fn batches(&self, batch_size: usize) -> Vec<Dataset> {
        let order: Vec<usize> = (0..self.len()).collect();
        order.chunks(batch_size.max(1)).map(|rows| self.subset(rows)).collect()
    }

    /// `count` disjoint random batches of `batch_size` samples (fewer if the
    /// dataset is too small).
    pub fn sample_batches<R: Rng + ?Sized>(&self, count: usize, batch_size: usize, rng: &mut R) -> Vec<Tensor> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(rng);
        order.chunks(batch_size.max(1)).take(count).map(|rows| self.inputs.select_rows(rows)).collect()
    }
}

#[derive(Clone, Debug)]
pub struct Split {
    pub train: Dataset,
    pub val: Dataset,
}

fn split(all: Dataset) -> Split {
    let (mut tr, mut va) = (Vec::new(), Vec::new());
    for i in 0..all.len() {
        if i % 5 == 4 {
            va.push(i);
        } else {
            tr.push(i);
        }
    }
    Split { train: all.subset(&tr), val: all.subset(&va) }
}

/// 8×8 digits as `[N, 1, 8, 8]`, pixel values scaled to `[0, 1]`.
pub fn digits() -> Split {
    let rows = DIGITS.len() / (DIGIT_PIXELS + 1);
    let mut data = Vec::with_capacity(rows * DIGIT_PIXELS);
    let mut labels = Vec::with_capacity(rows);
    for row in DIGITS.chunks_exact(DIGIT_PIXELS + 1) {
        data.extend(row[..DIGIT_PIXELS].iter().map(|&v| v as f32 / 16.0));
        labels.push(row[DIGIT_PIXELS] as usize);
    }
    let inputs = Tensor::new([rows, 1, 8, 8], data).expect("bundled digits are well-formed");
    split(Dataset { inputs, labels, classes: 10 })
}

/// Two interleaved spiral arms in the plane, `[N, 2]`.
pub fn spiral(per_class: usize) -> Split {
    let mut rng = ChaCha8Rng::seed_from_u64(0x005b_1aa1);
    let mut data = Vec::with_capacity(per_class * 4);
    let mut labels = Vec::with_capacity(per_class * 2);
    for i in 0..per_class {
        for class in 0..2 {
            let t = i as f32 / per_class as f32;
            let r = 0.1 + 0.9 * t;
            let theta = 3.0 * std::f32::consts::PI * t + class as f32 * std::f32::consts::PI;
            let noise: f32 = rng.random_range(-0.04..0.04);
            let noise2: f32 = rng.random_range(-0.04..0.04);
            data.push(r * theta.cos() + noise);
            data.push(r * theta.sin() + noise2);
            labels.push(class);
        }
    }
    let inputs = Tensor::new([per_class * 2, 2], data).expect("sized above");
    split(Dataset { inputs, labels, classes: 2 })
}

pub fn load(id: DatasetId) -> Split {
    match id {
        DatasetId::Digits => digits(),
        DatasetId::Spiral => spiral(500),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digits_split_is_fixed() {
        let s = digits();
        assert_eq!(s.train.len() + s.val.len(), 1797);
        assert_eq!(s.val.len(), 359);
        assert_eq!(s.train.sample_shape(), &[1, 8, 8]);
        assert!(s.train.inputs.max() <= 1.0 && s.train.inputs.min() >= 0.0);
        assert!(s.train.labels.iter().all(|&l| l < 10));
        let again = digits();
        assert_eq!(again.val.labels, s.val.labels);
    }

    #[test]
    fn spiral_is_balanced() {
        let s = spiral(100);
        let ones = s.train.labels.iter().filter(|&&l| l == 1).count();
        assert_eq!(s.train.len(), 160);
        assert_eq!(ones, 80);
    }

    #[test]
    fn batches_cover_everything() {
        let s = spiral(50);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = s.train.shuffled_batches(16, &mut rng);
        assert_eq!(b.iter().map(Dataset::len).sum::<usize>(), s.train.len());
    }
}
