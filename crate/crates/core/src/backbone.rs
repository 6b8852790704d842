//! Plain multi-block convolutional feature extractor. Each block is
//! `conv_count x (conv3x3 -> batchnorm -> relu)`; the first conv of a
//! downsampling block has stride 2. Outputs of the tapped blocks are the
//! coarse-to-fine shared features handed to group attention.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, Mode};
use crate::params::ParamStore;
use crate::tape::{Padding, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub out_channels: usize,
    pub conv_count: usize,
    /// 1 or 2.
    pub downsample: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub input: InputShape,
    pub blocks: Vec<BlockSpec>,
    /// 1-based block numbers, ascending. The last one is also the final
    /// shared feature used by the base head.
    pub tap_blocks: Vec<usize>,
}

/// Output of one tapped block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureMap {
    /// 1-based block number.
    pub block: usize,
    pub var: Var,
}

impl BackboneConfig {
    /// 3x64x64 input, four stride-2 blocks of 16/32/64/128 channels, taps 3 and 4.
    pub fn desk_64() -> Self {
        Self {
            input: InputShape { channels: 3, height: 64, width: 64 },
            blocks: [16, 32, 64, 128].iter().map(|&c| BlockSpec { out_channels: c, conv_count: 1, downsample: 2 }).collect(),
            tap_blocks: vec![3, 4],
        }
    }

    /// Backbone sized for the 32x32 synthetic benchmark: taps at 8x8 and 4x4.
    pub fn synthetic_32() -> Self {
        Self {
            input: InputShape { channels: 3, height: 32, width: 32 },
            blocks: vec![
                BlockSpec { out_channels: 8, conv_count: 1, downsample: 2 },
                BlockSpec { out_channels: 16, conv_count: 1, downsample: 2 },
                BlockSpec { out_channels: 16, conv_count: 1, downsample: 1 },
                BlockSpec { out_channels: 32, conv_count: 1, downsample: 2 },
            ],
            tap_blocks: vec![3, 4],
        }
    }

    /// Shape-only stand-in for a 224x224 network whose third and fourth
    /// blocks carry 128 and 512 channels at 28x28 and 14x14.
    pub fn reference_224() -> Self {
        Self {
            input: InputShape { channels: 3, height: 224, width: 224 },
            blocks: [64, 64, 128, 512].iter().map(|&c| BlockSpec { out_channels: c, conv_count: 2, downsample: 2 }).collect(),
            tap_blocks: vec![3, 4],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: alloc::string::String| Err(Error::Config(msg));
        if self.blocks.is_empty() {
            return bad("backbone needs at least one block".into());
        }
        if self.input.channels == 0 || self.input.height == 0 || self.input.width == 0 {
            return bad(format!("empty input shape {:?}", self.input));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if b.out_channels == 0 || b.conv_count == 0 || !(b.downsample == 1 || b.downsample == 2) {
                return bad(format!("block {} is invalid: {b:?}", i + 1));
            }
        }
        if self.tap_blocks.is_empty() {
            return bad("tap_blocks is empty".into());
        }
        if self.tap_blocks.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("tap_blocks {:?} must be strictly ascending", self.tap_blocks));
        }
        if self.tap_blocks[0] == 0 || *self.tap_blocks.last().unwrap_or(&0) != self.blocks.len() {
            return bad(format!(
                "tap_blocks {:?} must lie in 1..={} and end at the last block",
                self.tap_blocks,
                self.blocks.len()
            ));
        }
        let factor = self.downsample_factor();
        if !self.input.height.is_multiple_of(factor) || !self.input.width.is_multiple_of(factor) {
            return bad(format!(
                "input {}x{} is not divisible by the total downsample factor {factor}",
                self.input.height, self.input.width
            ));
        }
        Ok(())
    }

    pub fn downsample_factor(&self) -> usize {
        self.blocks.iter().map(|b| b.downsample).product()
    }

    /// Number of tapped blocks.
    pub fn taps(&self) -> usize {
        self.tap_blocks.len()
    }

    /// `(channels, height, width)` of every block output.
    pub fn block_shapes(&self) -> Vec<(usize, usize, usize)> {
        let (mut h, mut w) = (self.input.height, self.input.width);
        self.blocks
            .iter()
            .map(|b| {
                h /= b.downsample;
                w /= b.downsample;
                (b.out_channels, h, w)
            })
            .collect()
    }

    /// `(channels, height, width)` of each tapped feature, in tap order.
    pub fn tap_shapes(&self) -> Vec<(usize, usize, usize)> {
        let all = self.block_shapes();
        self.tap_blocks.iter().map(|&b| all[b - 1]).collect()
    }

    pub fn register(&self, store: &mut ParamStore) -> Result<()> {
        self.validate()?;
        let mut c_in = self.input.channels;
        for (bi, block) in self.blocks.iter().enumerate() {
            for k in 0..block.conv_count {
                let prefix = format!("backbone.block{}.layer{k}", bi + 1);
                nn::register_conv(store, &format!("{prefix}.conv"), c_in, block.out_channels, 3)?;
                nn::register_bn(store, &format!("{prefix}.bn"), block.out_channels)?;
                c_in = block.out_channels;
            }
        }
        Ok(())
    }
}

/// Runs every block and returns the tapped outputs in tap order.
pub fn backbone_forward(
    tape: &mut Tape,
    store: &mut ParamStore,
    config: &BackboneConfig,
    images: Var,
    mode: Mode,
) -> Result<Vec<FeatureMap>> {
    config.validate()?;
    let s = tape.shape(images);
    let expect = [config.input.channels, config.input.height, config.input.width];
    if s.len() != 4 || s[1..] != expect {
        return Err(Error::Dimension {
            op: "backbone",
            detail: format!("images {s:?}, expected [batch, {}, {}, {}]", expect[0], expect[1], expect[2]),
        });
    }
    let mut x = images;
    let mut taps = Vec::with_capacity(config.taps());
    for (bi, block) in config.blocks.iter().enumerate() {
        for k in 0..block.conv_count {
            let prefix = format!("backbone.block{}.layer{k}", bi + 1);
            let stride = if k == 0 { block.downsample } else { 1 };
            x = nn::conv(tape, store, &format!("{prefix}.conv"), x, stride, Padding::Same)?;
            x = nn::batchnorm(tape, store, &format!("{prefix}.bn"), x, mode)?;
            x = tape.relu(x)?;
        }
        if config.tap_blocks.contains(&(bi + 1)) {
            taps.push(FeatureMap { block: bi + 1, var: x });
        }
    }
    Ok(taps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn desk_shapes() {
        assert_eq!(BackboneConfig::desk_64().tap_shapes(), [(64, 8, 8), (128, 4, 4)]);
        assert_eq!(BackboneConfig::synthetic_32().tap_shapes(), [(16, 8, 8), (32, 4, 4)]);
    }

    #[test]
    fn reference_mask_scales() {
        assert_eq!(BackboneConfig::reference_224().tap_shapes(), [(128, 28, 28), (512, 14, 14)]);
    }

    #[test]
    fn rejects_bad_configs() {
        let mut c = BackboneConfig::desk_64();
        c.input.height = 60;
        assert!(c.validate().is_err());
        let mut c = BackboneConfig::desk_64();
        c.tap_blocks = vec![4, 3];
        assert!(c.validate().is_err());
        let mut c = BackboneConfig::desk_64();
        c.tap_blocks = vec![2, 3];
        assert!(c.validate().is_err());
        let mut c = BackboneConfig::desk_64();
        c.tap_blocks.clear();
        assert!(c.validate().is_err());
    }

    #[test]
    fn zeros_batch_is_finite_in_eval() {
        let cfg = BackboneConfig::desk_64();
        let mut store = ParamStore::new(5);
        cfg.register(&mut store).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 3, 64, 64]));
        let taps = backbone_forward(&mut tape, &mut store, &cfg, x, Mode::Eval).unwrap();
        assert_eq!(taps.len(), 2);
        assert_eq!(tape.shape(taps[0].var), &[2, 64, 8, 8]);
        assert_eq!(tape.shape(taps[1].var), &[2, 128, 4, 4]);
        assert!(taps.iter().all(|t| tape.value(t.var).data().iter().all(|v| v.is_finite())));
    }
}
