//! Synthetic multi-attribute images with planted, group-localized cues.
//!
//! Every group owns a horizontally centered rectangle. Each attribute of a
//! group draws a texture in one mirror-symmetric slot of that rectangle
//! when positive, so a horizontal flip never changes the labels. Textures
//! repeat across groups: telling attributes apart needs both where and what.
//!
//! Labels come from a Gaussian copula: one standard normal per attribute,
//! mixed pairwise by the listed correlations, thresholded at the quantile
//! that yields each attribute's positive rate.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use libm::{erfc, round, sqrt};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::groups::{AttributeCatalog, Group, GroupAssignment};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Slot {
    /// Outer quarter on both sides.
    Outer,
    /// Between the outer quarter and the center on both sides.
    Inner,
    /// Central quarter.
    Center,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Texture {
    Flat,
    /// Every other row, starting at the region's top row.
    Stripes,
    Checker,
}

impl Texture {
    fn at(self, x: usize, y: usize, top: usize) -> f64 {
        match self {
            Texture::Flat => 1.0,
            Texture::Stripes => (y - top).is_multiple_of(2) as u8 as f64,
            Texture::Checker => (x + y).is_multiple_of(2) as u8 as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRegion {
    pub name: String,
    pub rect: Rect,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttrRule {
    pub name: String,
    /// 0-based index into `groups`.
    pub group: usize,
    pub slot: Slot,
    pub texture: Texture,
    pub positive_rate: f64,
    pub amplitude: f64,
}

/// Pairwise latent correlation between 1-based attributes `u` and `v`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub u: usize,
    pub v: usize,
    pub strength: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub width: usize,
    pub height: usize,
    pub groups: Vec<GroupRegion>,
    pub attributes: Vec<AttrRule>,
    #[serde(default)]
    pub correlations: Vec<Correlation>,
    pub background: f64,
    pub noise: f64,
    pub seed: u64,
}

/// Standard normal quantile by bisection on the CDF.
pub fn normal_quantile(p: f64) -> f64 {
    let cdf = |x: f64| 0.5 * erfc(-x / core::f64::consts::SQRT_2);
    let (mut lo, mut hi) = (-40.0_f64, 40.0_f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if cdf(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

impl SyntheticSpec {
    /// 32x32, four bands of three attributes each, two correlated
    /// cross-group pairs and three rare attributes.
    pub fn desk_default() -> Self {
        let names = ["Hairline", "Eyes", "Nose", "Mouth"];
        let groups = names
            .iter()
            .enumerate()
            .map(|(g, n)| GroupRegion { name: String::from(*n), rect: Rect { x: 4, y: 8 * g + 1, w: 24, h: 6 } })
            .collect();
        let kinds = [(Slot::Outer, Texture::Stripes), (Slot::Inner, Texture::Flat), (Slot::Center, Texture::Checker)];
        let rare = [3, 6, 11];
        let attributes = (0..12)
            .map(|a| {
                let (slot, texture) = kinds[a % 3];
                AttrRule {
                    name: format!("{}_{}", names[a / 3].to_lowercase(), a % 3 + 1),
                    group: a / 3,
                    slot,
                    texture,
                    positive_rate: if rare.contains(&(a + 1)) { 0.1 } else { 0.5 },
                    amplitude: 0.5,
                }
            })
            .collect();
        Self {
            width: 32,
            height: 32,
            groups,
            attributes,
            correlations: vec![Correlation { u: 1, v: 8, strength: 0.9 }, Correlation { u: 5, v: 10, strength: 0.8 }],
            background: 0.2,
            noise: 0.3,
            seed: 7,
        }
    }

    pub fn n_attrs(&self) -> usize {
        self.attributes.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.width == 0 || self.height == 0 {
            return bad("empty image".into());
        }
        for (i, g) in self.groups.iter().enumerate() {
            let r = g.rect;
            if r.w == 0 || r.h == 0 || r.x + r.w > self.width || r.y + r.h > self.height {
                return bad(format!("region `{}` {r:?} outside the {}x{} image", g.name, self.width, self.height));
            }
            for other in &self.groups[..i] {
                let o = other.rect;
                if r.x < o.x + o.w && o.x < r.x + r.w && r.y < o.y + o.h && o.y < r.y + r.h {
                    return bad(format!("regions `{}` and `{}` overlap", other.name, g.name));
                }
            }
        }
        for a in &self.attributes {
            if a.group >= self.groups.len() {
                return bad(format!("attribute `{}` refers to missing group {}", a.name, a.group));
            }
            if !(0.0..=1.0).contains(&a.positive_rate) {
                return bad(format!("attribute `{}` has positive rate {}", a.name, a.positive_rate));
            }
        }
        let n = self.n_attrs();
        let mut targeted = vec![false; n + 1];
        for c in &self.correlations {
            if c.u == 0 || c.v == 0 || c.u > n || c.v > n || c.u == c.v {
                return bad(format!("bad correlation pair ({}, {})", c.u, c.v));
            }
            if !(-1.0..=1.0).contains(&c.strength) {
                return bad(format!("correlation strength {} outside [-1, 1]", c.strength));
            }
            if core::mem::replace(&mut targeted[c.v], true) {
                return bad(format!("attribute {} is the target of two correlations", c.v));
            }
        }
        if self.noise < 0.0 {
            return bad("negative noise".into());
        }
        Ok(())
    }

    /// Regions are mirror images of themselves under a horizontal flip.
    pub fn is_flip_symmetric(&self) -> bool {
        self.groups.iter().all(|g| g.rect.x + g.rect.x + g.rect.w == self.width)
    }

    pub fn group_assignment(&self) -> GroupAssignment {
        let groups = self
            .groups
            .iter()
            .enumerate()
            .map(|(gi, g)| Group {
                name: g.name.clone(),
                attrs: self.attributes.iter().enumerate().filter(|(_, a)| a.group == gi).map(|(i, _)| i + 1).collect(),
            })
            .collect();
        GroupAssignment::from_groups(groups)
    }

    pub fn catalog(&self) -> Result<AttributeCatalog> {
        AttributeCatalog::new(self.attributes.iter().map(|a| a.name.clone()).collect())
    }

    /// Columns of the slot `slot` inside `rect`.
    fn slot_columns(rect: Rect, slot: Slot) -> Vec<usize> {
        let (x0, w) = (rect.x, rect.w);
        let q = w / 4;
        let c = 3 * w / 8;
        let spans: [(usize, usize); 2] = match slot {
            Slot::Outer => [(x0, x0 + q), (x0 + w - q, x0 + w)],
            Slot::Inner => [(x0 + q, x0 + c), (x0 + w - c, x0 + w - q)],
            Slot::Center => [(x0 + c, x0 + w - c), (0, 0)],
        };
        spans.iter().flat_map(|&(a, b)| a..b).collect()
    }

    /// Pixel indices (row-major) where attribute `attr` (0-based) draws.
    pub fn attr_pixels(&self, attr: usize) -> Vec<usize> {
        let rule = &self.attributes[attr];
        let rect = self.groups[rule.group].rect;
        let cols = Self::slot_columns(rect, rule.slot);
        (rect.y..rect.y + rect.h).flat_map(|y| cols.iter().map(move |&x| y * self.width + x)).collect()
    }

    fn thresholds(&self) -> Vec<f64> {
        self.attributes.iter().map(|a| normal_quantile(1.0 - a.positive_rate)).collect()
    }

    /// Labels and 8-bit grayscale pixels of sample `sample_id`, drawn from a
    /// generator seeded with `seed ^ sample_id`.
    pub fn sample(&self, sample_id: u64) -> (Vec<u8>, Vec<u8>) {
        self.sample_with(&self.thresholds(), sample_id)
    }

    fn sample_with(&self, thresholds: &[f64], sample_id: u64) -> (Vec<u8>, Vec<u8>) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ sample_id);
        let labels = self.draw_labels(thresholds, &mut rng);
        let pixels = self.render(&labels, &mut rng);
        (labels, pixels)
    }

    fn draw_labels(&self, thresholds: &[f64], rng: &mut ChaCha8Rng) -> Vec<u8> {
        let mut z: Vec<f64> = (0..self.n_attrs()).map(|_| rng.sample(StandardNormal)).collect();
        for c in &self.correlations {
            let rho = c.strength;
            z[c.v - 1] = rho * z[c.u - 1] + sqrt(1.0 - rho * rho) * z[c.v - 1];
        }
        z.iter()
            .zip(thresholds)
            .zip(&self.attributes)
            .map(|((&zi, &t), a)| match a.positive_rate {
                r if r <= 0.0 => 0,
                r if r >= 1.0 => 1,
                _ => (zi > t) as u8,
            })
            .collect()
    }

    /// Noiseless intensities in `[0, 1]` before noise and quantization.
    pub fn render_clean(&self, labels: &[u8]) -> Vec<f64> {
        let mut img = vec![self.background; self.width * self.height];
        for (a, rule) in self.attributes.iter().enumerate() {
            if labels[a] == 0 {
                continue;
            }
            let top = self.groups[rule.group].rect.y;
            for p in self.attr_pixels(a) {
                let (x, y) = (p % self.width, p / self.width);
                img[p] += rule.amplitude * rule.texture.at(x, y, top);
            }
        }
        img
    }

    fn render(&self, labels: &[u8], rng: &mut ChaCha8Rng) -> Vec<u8> {
        self.render_clean(labels)
            .into_iter()
            .map(|v| {
                let n: f64 = rng.sample(StandardNormal);
                quantize(v + self.noise * n)
            })
            .collect()
    }
}

pub fn quantize(v: f64) -> u8 {
    round(v.clamp(0.0, 1.0) * 255.0) as u8
}
