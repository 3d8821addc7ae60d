use ndarray::{Array3, ArrayView3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::dense::{add_into, channel_mean, DenseBlock, DenseCache};
use super::{DecoderFeatureGroups, SeparatorConfig, NUM_SPEAKERS};
use crate::dsp::ComplexSpectrogram;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, DepthwiseDown, DepthwiseUp, Grads, ParamStore, Real};

/// Final full-resolution estimates plus the low-resolution decoder taps.
///
/// `taps[k - 1]` holds the two speaker estimates of decoder layer `k`. The
/// same type carries loss gradients on the way back.
#[derive(Debug, Clone, PartialEq)]
pub struct SeparatorOutput<T = f32> {
    pub estimates: [ComplexSpectrogram<T>; NUM_SPEAKERS],
    pub taps: Vec<[ComplexSpectrogram<T>; NUM_SPEAKERS]>,
}

impl<T: Real> SeparatorOutput<T> {
    pub fn zeros_like(other: &Self) -> Self {
        let z = |s: &ComplexSpectrogram<T>| ComplexSpectrogram::zeros(s.frames(), s.bins());
        Self {
            estimates: [z(&other.estimates[0]), z(&other.estimates[1])],
            taps: other.taps.iter().map(|t| [z(&t[0]), z(&t[1])]).collect(),
        }
    }
}

/// Activations retained by [`Separator::forward_train`].
#[derive(Debug, Clone)]
pub struct SeparatorCache<T> {
    enc: Vec<DenseCache<T>>,
    enc_out: Vec<Array3<T>>,
    dec: Vec<DenseCache<T>>,
    dec_out: Vec<Array3<T>>,
    head_in: Array3<T>,
}

/// Dense-UNet mapping the 15-channel mixture representation to real and
/// imaginary spectrograms of two speakers.
///
/// Encoder: `K_e` dense blocks with a strided 2×2 depthwise downsampler
/// between consecutive blocks. Decoder: `K_d = K_e − 1` dense blocks, each
/// followed by a strided 2×2 depthwise upsampler. Encoder outputs are added
/// to the decoder stream at matching resolution; the full-resolution
/// encoder output joins right before the 1×1 output head. Decoder layers
/// `k < K_d` are tapped after their upsampler.
#[derive(Debug, Clone)]
pub struct Separator<T = f32> {
    pub config: SeparatorConfig,
    pub params: ParamStore<T>,
    encoder: Vec<DenseBlock>,
    downsamplers: Vec<DepthwiseDown>,
    decoder: Vec<DenseBlock>,
    upsamplers: Vec<DepthwiseUp>,
    head: Conv2d,
    output_gain: Option<Vec<T>>,
}

impl<T: Real> Separator<T> {
    pub fn new(config: SeparatorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new();
        let g = config.channels;
        let (l, k) = (config.dense_layers_per_block, config.kernel);
        let mut encoder = Vec::new();
        let mut downsamplers = Vec::new();
        for e in 0..config.encoder_layers {
            let cin = if e == 0 { config.input_channels } else { g };
            encoder.push(DenseBlock::new(&mut ps, &format!("encoder.{e}"), cin, g, l, k, &mut rng));
            if e + 1 < config.encoder_layers {
                downsamplers.push(DepthwiseDown::new(&mut ps, &format!("down.{e}"), g));
            }
        }
        let mut decoder = Vec::new();
        let mut upsamplers = Vec::new();
        for d in 0..config.decoder_layers {
            decoder.push(DenseBlock::new(&mut ps, &format!("decoder.{d}"), g, g, l, k, &mut rng));
            upsamplers.push(DepthwiseUp::new(&mut ps, &format!("up.{d}"), g));
        }
        let head = Conv2d::new(&mut ps, "head", g, config.output_channels, 1, &mut rng);
        // Start from silent outputs.
        ps.get_mut(head.weight_id()).iter_mut().for_each(|v| *v = T::zero());
        Ok(Self {
            config,
            params: ps,
            encoder,
            downsamplers,
            decoder,
            upsamplers,
            head,
            output_gain: None,
        })
    }

    /// Closed-form trainable parameter count for `config`.
    pub fn expected_params(config: &SeparatorConfig) -> usize {
        let g = config.channels;
        let (l, k) = (config.dense_layers_per_block, config.kernel);
        let enc = DenseBlock::num_params(config.input_channels, g, l, k)
            + (config.encoder_layers - 1) * (DenseBlock::num_params(g, g, l, k) + DepthwiseDown::num_params(g));
        let dec = config.decoder_layers * (DenseBlock::num_params(g, g, l, k) + DepthwiseUp::num_params(g));
        enc + dec + Conv2d::num_params(g, config.output_channels, 1)
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn head(&self) -> &Conv2d {
        &self.head
    }

    /// Same network with parameters converted to another scalar type.
    pub fn cast<U: Real>(&self) -> Separator<U> {
        Separator {
            config: self.config.clone(),
            params: self.params.cast(),
            encoder: self.encoder.clone(),
            downsamplers: self.downsamplers.clone(),
            decoder: self.decoder.clone(),
            upsamplers: self.upsamplers.clone(),
            head: self.head.clone(),
            output_gain: self
                .output_gain
                .as_ref()
                .map(|g| g.iter().map(|v| U::of(v.f64())).collect()),
        }
    }

    /// Fixed per-bin gain on every output, so the network works in a
    /// normalized range. Taps use the mean gain of the bins they pool;
    /// bins past the end of `gain` reuse its last entry.
    pub fn set_output_gain(&mut self, gain: Option<Vec<T>>) {
        self.output_gain = gain.filter(|g| !g.is_empty());
    }

    pub fn output_gain(&self) -> Option<&[T]> {
        self.output_gain.as_deref()
    }

    fn apply_gain(&self, out: &mut SeparatorOutput<T>, full_bins: usize) {
        let Some(gain) = &self.output_gain else { return };
        let at = |b: usize| gain[b.min(gain.len() - 1)];
        let scale = |s: &mut ComplexSpectrogram<T>| {
            let bins = s.bins();
            let f = (full_bins / bins).max(1);
            let g: Vec<T> = (0..bins)
                .map(|b| (0..f).fold(T::zero(), |a, i| a + at(b * f + i)) / T::of(f as f64))
                .collect();
            for plane in [&mut s.real, &mut s.imag] {
                for mut row in plane.rows_mut() {
                    row.iter_mut().zip(&g).for_each(|(v, &k)| *v = *v * k);
                }
            }
        };
        out.estimates.iter_mut().for_each(scale);
        out.taps.iter_mut().flatten().for_each(scale);
    }

    fn check_input(&self, x: &ArrayView3<T>) -> Result<()> {
        let (c, h, w) = x.dim();
        if c != self.config.input_channels {
            return Err(Error::Shape(format!(
                "input has {c} channels, separator expects {}",
                self.config.input_channels
            )));
        }
        let m = self.config.pad_multiple();
        for (axis, n) in [("time", h), ("frequency", w)] {
            if n == 0 || n % m != 0 {
                return Err(Error::Shape(format!(
                    "{axis} axis length {n} is not a positive multiple of {m}"
                )));
            }
        }
        Ok(())
    }

    pub fn forward(&self, x: ArrayView3<T>) -> Result<SeparatorOutput<T>> {
        self.forward_train(x).map(|(o, _)| o)
    }

    pub fn forward_train(&self, x: ArrayView3<T>) -> Result<(SeparatorOutput<T>, SeparatorCache<T>)> {
        self.check_input(&x)?;
        let ps = &self.params;
        let ke = self.config.encoder_layers;
        let kd = self.config.decoder_layers;

        let mut enc = Vec::with_capacity(ke);
        let mut enc_out: Vec<Array3<T>> = Vec::with_capacity(ke);
        let mut h = x.to_owned();
        for e in 0..ke {
            let (out, cache) = self.encoder[e].forward(ps, h.view());
            enc.push(cache);
            if e + 1 < ke {
                h = self.downsamplers[e].forward(ps, out.view());
            }
            enc_out.push(out);
        }

        let groups = DecoderFeatureGroups::split(self.config.channels);
        let mut dec = Vec::with_capacity(kd);
        let mut dec_out = Vec::with_capacity(kd);
        let mut taps = Vec::with_capacity(kd - 1);
        let mut stream = enc_out[ke - 1].clone();
        for d in 0..kd {
            let (out, cache) = self.decoder[d].forward(ps, stream.view());
            let up = self.upsamplers[d].forward(ps, out.view());
            dec.push(cache);
            dec_out.push(out);
            if d + 1 < kd {
                taps.push(split_tap(up.view(), &groups));
                stream = up;
                add_into(&mut stream, enc_out[ke - 2 - d].view());
            } else {
                stream = up;
                add_into(&mut stream, enc_out[0].view());
            }
        }
        let head_out = self.head.forward(ps, stream.view());
        let plane = |i: usize| head_out.index_axis(Axis(0), i).to_owned();
        let estimates = [
            ComplexSpectrogram {
                real: plane(0),
                imag: plane(1),
            },
            ComplexSpectrogram {
                real: plane(2),
                imag: plane(3),
            },
        ];
        let mut output = SeparatorOutput { estimates, taps };
        self.apply_gain(&mut output, x.dim().2);
        Ok((
            output,
            SeparatorCache {
                enc,
                enc_out,
                dec,
                dec_out,
                head_in: stream,
            },
        ))
    }

    /// Backpropagates output gradients (same layout as the output) into a
    /// fresh gradient buffer.
    pub fn backward(&self, cache: &SeparatorCache<T>, grad: &SeparatorOutput<T>) -> Result<Grads<T>> {
        let ps = &self.params;
        let ke = self.config.encoder_layers;
        let kd = self.config.decoder_layers;
        if grad.taps.len() != kd - 1 {
            return Err(Error::Shape(format!(
                "{} tap gradients for {} taps",
                grad.taps.len(),
                kd - 1
            )));
        }
        let (_, h, w) = cache.head_in.dim();
        let scaled;
        let grad = if self.output_gain.is_some() {
            let mut g = grad.clone();
            self.apply_gain(&mut g, w);
            scaled = g;
            &scaled
        } else {
            grad
        };
        let mut grads = ps.zero_grads();
        let mut g_head = Array3::<T>::zeros((4, h, w));
        for (s, est) in grad.estimates.iter().enumerate() {
            g_head.index_axis_mut(Axis(0), 2 * s).assign(&est.real);
            g_head.index_axis_mut(Axis(0), 2 * s + 1).assign(&est.imag);
        }
        let g_stream = self
            .head
            .backward(ps, &mut grads, cache.head_in.view(), g_head.view(), true)
            .expect("input grad requested");

        let mut g_enc_out: Vec<Array3<T>> = cache.enc_out.iter().map(|a| Array3::zeros(a.raw_dim())).collect();
        g_enc_out[0] += &g_stream;
        let groups = DecoderFeatureGroups::split(self.config.channels);
        let mut g_up = g_stream;
        for d in (0..kd).rev() {
            if d + 1 < kd {
                add_tap_grad(&mut g_up, &grad.taps[d], &groups);
            }
            let g_out = self.upsamplers[d].backward(ps, &mut grads, cache.dec_out[d].view(), g_up.view());
            let g_in = self.decoder[d]
                .backward(ps, &mut grads, &cache.dec[d], g_out.view(), true)
                .expect("input grad requested");
            if d == 0 {
                g_enc_out[ke - 1] += &g_in;
                g_up = Array3::zeros((0, 0, 0));
            } else {
                g_enc_out[ke - 1 - d] += &g_in;
                g_up = g_in;
            }
        }

        let mut g_next_in: Option<Array3<T>> = None;
        for e in (0..ke).rev() {
            let mut g = std::mem::replace(&mut g_enc_out[e], Array3::zeros((0, 0, 0)));
            if let Some(gn) = g_next_in.take() {
                g += &self.downsamplers[e].backward(ps, &mut grads, cache.enc_out[e].view(), gn.view());
            }
            g_next_in = self.encoder[e].backward(ps, &mut grads, &cache.enc[e], g.view(), e > 0);
        }
        Ok(grads)
    }
}

fn split_tap<T: Real>(x: ArrayView3<T>, groups: &DecoderFeatureGroups) -> [ComplexSpectrogram<T>; 2] {
    let mean = |i: usize| channel_mean(x, groups.ranges[i].start, groups.ranges[i].end);
    [
        ComplexSpectrogram {
            real: mean(0),
            imag: mean(1),
        },
        ComplexSpectrogram {
            real: mean(2),
            imag: mean(3),
        },
    ]
}

fn add_tap_grad<T: Real>(g: &mut Array3<T>, tap: &[ComplexSpectrogram<T>; 2], groups: &DecoderFeatureGroups) {
    let planes = [&tap[0].real, &tap[0].imag, &tap[1].real, &tap[1].imag];
    for (i, r) in groups.ranges.iter().enumerate() {
        let scaled = planes[i] / T::of(r.len() as f64);
        for c in r.clone() {
            let mut ch = g.index_axis_mut(Axis(0), c);
            ch += &scaled;
        }
    }
}
