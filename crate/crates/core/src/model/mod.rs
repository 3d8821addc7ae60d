//! Dense-UNet complex spectral mapping separator with multi-resolution
//! decoder taps, and the frame-level speaker counter built on the same
//! encoder.

mod checkpoint;
mod counter;
mod dense;
mod separator;

pub use checkpoint::{Checkpoint, CheckpointKind, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use counter::{cross_entropy, CounterCache, CounterConfig, SpeakerCounter, COUNT_CLASSES};
pub use dense::{DenseBlock, DenseCache};
pub use separator::{Separator, SeparatorCache, SeparatorOutput};

use std::ops::Range;

use ndarray::{s, Array3, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Real;

/// Number of simultaneously separated speakers.
pub const NUM_SPEAKERS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelProfile {
    /// The full-size separator (~6.9 M parameters).
    Paper,
    /// Desk-scale separator for single-machine experiments.
    Toy,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeparatorConfig {
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub dense_layers_per_block: usize,
    pub channels: usize,
    pub kernel: usize,
    pub input_channels: usize,
    pub output_channels: usize,
}

impl SeparatorConfig {
    pub fn paper() -> Self {
        Self {
            encoder_layers: 5,
            decoder_layers: 4,
            dense_layers_per_block: 5,
            channels: 76,
            kernel: 3,
            input_channels: 15,
            output_channels: 4,
        }
    }

    pub fn toy() -> Self {
        Self {
            encoder_layers: 3,
            decoder_layers: 2,
            dense_layers_per_block: 2,
            channels: 16,
            kernel: 3,
            input_channels: 15,
            output_channels: 4,
        }
    }

    pub fn for_profile(profile: ModelProfile) -> Self {
        match profile {
            ModelProfile::Paper => Self::paper(),
            ModelProfile::Toy => Self::toy(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.decoder_layers == 0 {
            return bad("at least one decoder layer is required".into());
        }
        if self.encoder_layers != self.decoder_layers + 1 {
            return bad(format!(
                "encoder layers ({}) must equal decoder layers ({}) + 1 so the decoder returns to full resolution",
                self.encoder_layers, self.decoder_layers
            ));
        }
        if self.output_channels != 2 * NUM_SPEAKERS {
            return bad(format!(
                "output channels must be {} (real and imaginary per speaker)",
                2 * NUM_SPEAKERS
            ));
        }
        if self.channels < 4 {
            return bad("decoder taps need at least 4 channels to split".into());
        }
        if self.kernel % 2 == 0 || self.dense_layers_per_block == 0 || self.input_channels == 0 {
            return bad("kernel must be odd and blocks non-empty".into());
        }
        Ok(())
    }

    /// Spatial dims must be multiples of this.
    pub fn pad_multiple(&self) -> usize {
        1 << self.decoder_layers
    }

    /// Number of intermediate decoder taps.
    pub fn num_taps(&self) -> usize {
        self.decoder_layers - 1
    }

    /// Downsampling factor of tap `k` (1-based) relative to the full grid.
    pub fn tap_factor(&self, k: usize) -> usize {
        1 << (self.decoder_layers - k)
    }
}

/// The four-way channel partition of a tapped decoder feature map into
/// (speaker 1 real, speaker 1 imaginary, speaker 2 real, speaker 2 imaginary).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecoderFeatureGroups {
    pub ranges: [Range<usize>; 4],
}

impl DecoderFeatureGroups {
    /// Leading groups absorb the remainder when `channels` is not a multiple
    /// of four.
    pub fn split(channels: usize) -> Self {
        let base = channels / 4;
        let rem = channels % 4;
        let mut start = 0;
        let ranges = std::array::from_fn(|i| {
            let len = base + usize::from(i < rem);
            let r = start..start + len;
            start += len;
            r
        });
        Self { ranges }
    }

    pub fn group_of(&self, channel: usize) -> usize {
        self.ranges
            .iter()
            .position(|r| r.contains(&channel))
            .expect("channel inside partition")
    }
}

pub fn padded_len(n: usize, multiple: usize) -> usize {
    n.div_ceil(multiple) * multiple
}

/// Zero-pads the two trailing axes up to multiples of `multiple`.
pub fn pad_features<T: Real>(x: ArrayView3<T>, multiple: usize) -> Array3<T> {
    let (c, h, w) = x.dim();
    let mut out = Array3::zeros((c, padded_len(h, multiple), padded_len(w, multiple)));
    out.slice_mut(s![.., ..h, ..w]).assign(&x);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn groups_partition_channels() {
        for c in 4..40 {
            let g = DecoderFeatureGroups::split(c);
            assert_eq!(g.ranges[0].start, 0);
            assert_eq!(g.ranges[3].end, c);
            for i in 0..3 {
                assert_eq!(g.ranges[i].end, g.ranges[i + 1].start);
            }
            let sizes: Vec<usize> = g.ranges.iter().map(|r| r.len()).collect();
            let (mn, mx) = (*sizes.iter().min().unwrap(), *sizes.iter().max().unwrap());
            assert!(mx - mn <= 1);
            assert!(sizes.windows(2).all(|w| w[0] >= w[1]));
        }
        assert_eq!(DecoderFeatureGroups::split(10).ranges, [0..3, 3..6, 6..8, 8..10]);
    }

    #[test]
    fn config_validation() {
        SeparatorConfig::paper().validate().unwrap();
        SeparatorConfig::toy().validate().unwrap();
        let mut bad = SeparatorConfig::paper();
        bad.encoder_layers = 4;
        assert!(bad.validate().is_err());
        let mut bad = SeparatorConfig::toy();
        bad.output_channels = 6;
        assert!(bad.validate().is_err());
    }
}
