//! In-memory datasets: batching, splitting and flip augmentation.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::heads::Labels;
use crate::synth::SyntheticSpec;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub id: u64,
    /// Row-major 8-bit grayscale.
    pub pixels: Vec<u8>,
    pub labels: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub width: usize,
    pub height: usize,
    pub n_attrs: usize,
    pub samples: Vec<Sample>,
}

/// Reverses every row of a row-major image.
pub fn flip_horizontal<T>(image: &mut [T], width: usize) {
    image.chunks_mut(width).for_each(<[T]>::reverse);
}

/// Flips with probability `p`; returns whether it flipped.
pub fn augment_flip<T, R: Rng + ?Sized>(image: &mut [T], width: usize, p: f64, rng: &mut R) -> bool {
    let flip = rng.random::<f64>() < p;
    if flip {
        flip_horizontal(image, width);
    }
    flip
}

impl Dataset {
    pub fn generate(spec: &SyntheticSpec, count: usize) -> Result<Self> {
        spec.validate()?;
        if count == 0 {
            return Err(Error::Config("sample count must be at least 1".into()));
        }
        let samples = (0..count as u64)
            .map(|id| {
                let (labels, pixels) = spec.sample(id);
                Sample { id, pixels, labels }
            })
            .collect();
        Ok(Self { width: spec.width, height: spec.height, n_attrs: spec.n_attrs(), samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            width: self.width,
            height: self.height,
            n_attrs: self.n_attrs,
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }

    pub fn position_of(&self, id: u64) -> Option<usize> {
        self.samples.iter().position(|s| s.id == id)
    }

    /// Seeded shuffle into `(train, val, test)`. The first two sizes are
    /// rounded from the fractions; test takes the remainder.
    pub fn split(&self, fractions: [f64; 3], seed: u64) -> Result<(Self, Self, Self)> {
        if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions {fractions:?} must be non-negative and sum to 1")));
        }
        let n = self.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_train = libm::round(fractions[0] * n as f64) as usize;
        let n_val = (libm::round(fractions[1] * n as f64) as usize).min(n - n_train);
        let (train, rest) = order.split_at(n_train);
        let (val, test) = rest.split_at(n_val);
        Ok((self.subset(train), self.subset(val), self.subset(test)))
    }

    /// Images as `[batch, channels, H, W]` scaled to `[0, 1]` (grayscale
    /// replicated across channels) and their labels. When `flip` is given,
    /// each image is flipped with the given probability.
    pub fn batch(
        &self,
        indices: &[usize],
        channels: usize,
        mut flip: Option<(&mut ChaCha8Rng, f64)>,
    ) -> Result<(Tensor, Labels)> {
        let plane = self.width * self.height;
        let mut data = Vec::with_capacity(indices.len() * channels * plane);
        let mut labels = Vec::with_capacity(indices.len() * self.n_attrs);
        for &i in indices {
            let s = &self.samples[i];
            let mut img: Vec<f64> = s.pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
            if let Some((rng, p)) = flip.as_mut() {
                augment_flip(&mut img, self.width, *p, &mut **rng);
            }
            for _ in 0..channels {
                data.extend_from_slice(&img);
            }
            labels.extend_from_slice(&s.labels);
        }
        let images = Tensor::new(alloc::vec![indices.len(), channels, self.height, self.width], data)?;
        Ok((images, Labels::new(indices.len(), self.n_attrs, labels)?))
    }
}
