//! Continuous separation of long recordings: fixed-length overlapping
//! segments are separated independently, their output order is aligned
//! across segment boundaries, and the streams are crossfaded together.
//! A frame-level speaker counter can then fold single-speaker residuals
//! into one stream.

use ndarray::{s, Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::dsp::{
    apply_feature_norm, istft, mixture_features, normalize_mixture, stft, stft_channel, ComplexSpectrogram,
    FeatureStats, StftConfig, Waveform, SAMPLE_RATE,
};
use crate::error::{Error, Result};
use crate::model::{pad_features, Separator, SpeakerCounter, NUM_SPEAKERS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub segment_secs: f64,
    pub shift_secs: f64,
    /// Apply counter-driven residual suppression when a counter is given.
    pub suppress: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            segment_secs: 2.4,
            shift_secs: 1.2,
            suppress: true,
        }
    }
}

impl PipelineConfig {
    fn lengths(&self) -> Result<(usize, usize)> {
        let fs = SAMPLE_RATE as f64;
        let seg = (self.segment_secs * fs).round() as usize;
        let shift = (self.shift_secs * fs).round() as usize;
        if shift == 0 || shift > seg {
            return Err(Error::Config(format!(
                "segment shift {} s must be positive and at most the segment length {} s",
                self.shift_secs, self.segment_secs
            )));
        }
        Ok((seg, shift))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentPlan {
    pub segment_length: usize,
    pub segment_shift: usize,
    /// `(start, end)` sample offsets; the last `end` may run past the
    /// recording, in which case the segment is zero-padded.
    pub boundaries: Vec<(usize, usize)>,
}

impl SegmentPlan {
    /// Fewest segments starting at multiples of `shift` that cover `len`
    /// samples.
    pub fn new(len: usize, segment_length: usize, segment_shift: usize) -> Result<Self> {
        if segment_shift == 0 || segment_shift > segment_length {
            return Err(Error::Config("segment shift must be in 1..=segment length".into()));
        }
        let extra = len.saturating_sub(segment_length);
        let n = 1 + extra.div_ceil(segment_shift);
        Ok(Self {
            segment_length,
            segment_shift,
            boundaries: (0..n)
                .map(|i| (i * segment_shift, i * segment_shift + segment_length))
                .collect(),
        })
    }

    pub fn overlap(&self) -> usize {
        self.segment_length - self.segment_shift
    }

    /// Samples spanned by the segments, including padding.
    pub fn padded_len(&self) -> usize {
        self.boundaries.last().map_or(0, |b| b.1)
    }
}

/// Splits `wave` into plan-length segments, zero-padding the last one.
pub fn segment_stream(wave: &Waveform, segment_length: usize, segment_shift: usize) -> Result<(SegmentPlan, Vec<Waveform>)> {
    let plan = SegmentPlan::new(wave.len(), segment_length, segment_shift)?;
    let segs = plan
        .boundaries
        .iter()
        .map(|&(a, b)| {
            let mut out = Array2::<f32>::zeros((wave.channels(), b - a));
            let end = b.min(wave.len());
            if a < end {
                out.slice_mut(s![.., ..end - a]).assign(&wave.samples().slice(s![.., a..end]));
            }
            Waveform::new(out, SAMPLE_RATE)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((plan, segs))
}

/// Raised-cosine fade-out and fade-in of `n` samples; they sum to one.
pub fn crossfade(n: usize) -> (Vec<f32>, Vec<f32>) {
    let fade_in: Vec<f64> = (0..n)
        .map(|i| (std::f64::consts::FRAC_PI_2 * (i as f64 + 0.5) / n as f64).sin().powi(2))
        .collect();
    (
        fade_in.iter().map(|v| (1.0 - v) as f32).collect(),
        fade_in.iter().map(|&v| v as f32).collect(),
    )
}

/// Crossfaded overlap-add of per-segment signals, cropped to `len`.
pub fn overlap_add(plan: &SegmentPlan, segments: &[Vec<f32>], len: usize) -> Result<Vec<f32>> {
    if segments.len() != plan.boundaries.len() || segments.iter().any(|s| s.len() != plan.segment_length) {
        return Err(Error::InvalidInput("segments do not match the plan".into()));
    }
    let ov = plan.overlap();
    let (fade_out, fade_in) = crossfade(ov);
    let mut out = vec![0f32; plan.padded_len().max(len)];
    let last = segments.len() - 1;
    for (i, (seg, &(a, _))) in segments.iter().zip(&plan.boundaries).enumerate() {
        for (j, &v) in seg.iter().enumerate() {
            let mut w = 1.0;
            if i > 0 && j < ov {
                w *= fade_in[j];
            }
            if i < last && j >= plan.segment_length - ov {
                w *= fade_out[j - (plan.segment_length - ov)];
            }
            out[a + j] += w * v;
        }
    }
    out.truncate(len);
    Ok(out)
}

fn magnitude_l1(a: &[f32], b: &[f32], cfg: &StftConfig) -> Result<f64> {
    let pad = |x: &[f32]| {
        let mut v = x.to_vec();
        v.resize(x.len().max(cfg.frame_length), 0.0);
        ndarray::Array1::from(v)
    };
    let sa = stft_channel(pad(a).view(), cfg)?.magnitude();
    let sb = stft_channel(pad(b).view(), cfg)?.magnitude();
    Ok(sa.iter().zip(sb.iter()).map(|(x, y)| (x - y).abs() as f64).sum())
}

/// Output order for the next segment: `perm[n]` is the next-segment output
/// continuing stream `n`. Chooses the pairing with the smaller total ℓ1
/// distance between STFT magnitudes over the shared region; ties (including
/// all-silent regions) keep the identity.
pub fn stitch(prev: [&[f32]; 2], next: [&[f32]; 2]) -> Result<[usize; 2]> {
    let n = prev[0].len();
    if prev[1].len() != n || next[0].len() != n || next[1].len() != n {
        return Err(Error::InvalidInput("overlap regions differ in length".into()));
    }
    let cfg = StftConfig::default();
    let keep = magnitude_l1(prev[0], next[0], &cfg)? + magnitude_l1(prev[1], next[1], &cfg)?;
    let swap = magnitude_l1(prev[0], next[1], &cfg)? + magnitude_l1(prev[1], next[0], &cfg)?;
    Ok(if swap < keep { [1, 0] } else { [0, 1] })
}

/// Left-to-right fold over per-segment output pairs: each segment's order
/// is aligned to the already stitched previous segment, then both streams
/// are crossfaded together. Returns the streams cropped to `len` and the
/// permutation applied to each segment.
pub fn stitch_segments(plan: &SegmentPlan, outputs: Vec<[Vec<f32>; 2]>, len: usize) -> Result<([Vec<f32>; 2], Vec<[usize; 2]>)> {
    let ov = plan.overlap();
    let seg_len = plan.segment_length;
    let mut per_stream: [Vec<Vec<f32>>; NUM_SPEAKERS] = [Vec::new(), Vec::new()];
    let mut perms = Vec::with_capacity(outputs.len());
    for (i, mut outs) in outputs.into_iter().enumerate() {
        if outs[0].len() != seg_len || outs[1].len() != seg_len {
            return Err(Error::InvalidInput(format!("segment {i} outputs are not {seg_len} samples long")));
        }
        let perm = if i == 0 {
            [0, 1]
        } else {
            let prev: [&[f32]; 2] = [&per_stream[0][i - 1][seg_len - ov..], &per_stream[1][i - 1][seg_len - ov..]];
            stitch(prev, [&outs[0][..ov], &outs[1][..ov]])?
        };
        if perm == [1, 0] {
            outs.swap(0, 1);
        }
        let [a, b] = outs;
        per_stream[0].push(a);
        per_stream[1].push(b);
        perms.push(perm);
    }
    Ok((
        [overlap_add(plan, &per_stream[0], len)?, overlap_add(plan, &per_stream[1], len)?],
        perms,
    ))
}

/// Speaker-count class per frame: plain argmax.
pub fn frame_classes(probs: &Array2<f32>) -> Vec<usize> {
    probs
        .rows()
        .into_iter()
        .map(|r| {
            (0..r.len())
                .max_by(|&a, &b| r[a].total_cmp(&r[b]).then(b.cmp(&a)))
                .unwrap_or(0)
        })
        .collect()
}

/// Frame-wise residual suppression in the STFT domain. Frames counted as
/// one speaker move the sum of both streams into the stream with more
/// energy in that frame and zero the other; frames counted as silent zero
/// both; two-speaker frames are untouched.
pub fn suppress_residual(streams: [&[f32]; 2], probs: &Array2<f32>) -> Result<[Vec<f32>; 2]> {
    let len = streams[0].len();
    if streams[1].len() != len {
        return Err(Error::InvalidInput("streams differ in length".into()));
    }
    let cfg = StftConfig::default();
    let padded = len.max(cfg.frame_length);
    let frames = cfg.frames_for(padded);
    if probs.nrows() != frames || probs.ncols() != 3 {
        return Err(Error::InvalidInput(format!(
            "counter output {:?} does not match {frames} frames × 3 classes",
            probs.dim()
        )));
    }
    let classes = frame_classes(probs);
    if classes.iter().all(|&c| c == 2) {
        return Ok([streams[0].to_vec(), streams[1].to_vec()]);
    }
    let mut specs: Vec<ComplexSpectrogram> = streams
        .iter()
        .map(|s| {
            let mut v = s.to_vec();
            v.resize(padded, 0.0);
            stft_channel(ndarray::Array1::from(v).view(), &cfg)
        })
        .collect::<Result<_>>()?;
    let energy = |s: &ComplexSpectrogram, t: usize| -> f64 {
        s.real
            .row(t)
            .iter()
            .zip(s.imag.row(t))
            .map(|(a, b)| (a * a + b * b) as f64)
            .sum()
    };
    for (t, &c) in classes.iter().enumerate() {
        match c {
            0 => {
                for sp in specs.iter_mut() {
                    sp.real.row_mut(t).fill(0.0);
                    sp.imag.row_mut(t).fill(0.0);
                }
            }
            1 => {
                let (keep, drop) = if energy(&specs[1], t) > energy(&specs[0], t) { (1, 0) } else { (0, 1) };
                let (r, i) = (specs[drop].real.row(t).to_owned(), specs[drop].imag.row(t).to_owned());
                let mut kr = specs[keep].real.row_mut(t);
                kr += &r;
                let mut ki = specs[keep].imag.row_mut(t);
                ki += &i;
                specs[drop].real.row_mut(t).fill(0.0);
                specs[drop].imag.row_mut(t).fill(0.0);
            }
            _ => {}
        }
    }
    Ok([istft(&specs[0], &cfg, len)?, istft(&specs[1], &cfg, len)?])
}

/// Normalized, zero-padded model input for a multichannel waveform.
pub fn model_input(wave: &Waveform, stats: &FeatureStats, multiple: usize) -> Result<Array3<f32>> {
    let specs = stft(wave, &StftConfig::default())?;
    let feats = apply_feature_norm(mixture_features(&specs)?.view(), stats)?;
    Ok(pad_features(feats.view(), multiple))
}

/// Class probabilities per STFT frame for one segment; reduced-rate
/// outputs are repeated back to frame rate.
pub fn counter_frame_probs(counter: &SpeakerCounter<f32>, stats: &FeatureStats, wave: &Waveform) -> Result<Array2<f32>> {
    let frames = StftConfig::default().frames_for(wave.len());
    let x = model_input(wave, stats, counter.config.time_factor())?;
    if x.dim().2 != counter.config.freq_bins {
        return Err(Error::Shape(format!(
            "padded frequency axis {} vs counter's {}",
            x.dim().2,
            counter.config.freq_bins
        )));
    }
    let p = counter.forward(x.view())?;
    let f = counter.config.time_factor();
    Ok(Array2::from_shape_fn((frames, 3), |(t, c)| p[[t / f, c]]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentTrace {
    pub index: usize,
    pub start: usize,
    pub end: usize,
    pub permutation: [usize; 2],
}

#[derive(Debug, Clone)]
pub struct SpeakerStreams {
    pub streams: [Waveform; 2],
    pub trace: Vec<SegmentTrace>,
    /// Counter decision per STFT frame of the recording, when a counter ran.
    pub frame_classes: Option<Vec<usize>>,
}

/// The separated pair of one segment, in model output order, at segment
/// length.
pub fn separate_segment(separator: &Separator<f32>, stats: &FeatureStats, wave: &Waveform) -> Result<[Vec<f32>; 2]> {
    let cfg = StftConfig::default();
    let (frames, bins) = (cfg.frames_for(wave.len()), cfg.bins());
    let x = model_input(wave, stats, separator.config.pad_multiple())?;
    let out = separator.forward(x.view())?;
    let crop = |s: &ComplexSpectrogram<f32>| ComplexSpectrogram {
        real: s.real.slice(s![..frames, ..bins]).to_owned(),
        imag: s.imag.slice(s![..frames, ..bins]).to_owned(),
    };
    Ok([
        istft(&crop(&out.estimates[0]), &cfg, wave.len())?,
        istft(&crop(&out.estimates[1]), &cfg, wave.len())?,
    ])
}

/// Full chain: normalize, segment, separate each segment, align output
/// order across segments, crossfade, then optionally suppress residuals.
/// Streams come back at the input's level and length.
pub fn separate_stream(
    recording: &Waveform,
    separator: &Separator<f32>,
    stats: &FeatureStats,
    counter: Option<(&SpeakerCounter<f32>, &FeatureStats)>,
    cfg: &PipelineConfig,
) -> Result<SpeakerStreams> {
    let (seg_len, shift) = cfg.lengths()?;
    let len = recording.len();
    let plan = SegmentPlan::new(len, seg_len, shift)?;
    let identity_trace = || {
        plan.boundaries
            .iter()
            .enumerate()
            .map(|(index, &(start, end))| SegmentTrace {
                index,
                start,
                end,
                permutation: [0, 1],
            })
            .collect::<Vec<_>>()
    };
    let (normed, scale) = match normalize_mixture(recording) {
        Ok(v) => v,
        Err(Error::DegenerateInput(_)) => {
            return Ok(SpeakerStreams {
                streams: [Waveform::zeros(1, len), Waveform::zeros(1, len)],
                trace: identity_trace(),
                frame_classes: None,
            })
        }
        Err(e) => return Err(e),
    };
    let (plan, segments) = segment_stream(&normed, seg_len, shift)?;
    let stft_cfg = StftConfig::default();
    let total_frames = stft_cfg.frames_for(len.max(stft_cfg.frame_length));
    let mut prob_sum = Array2::<f32>::zeros((total_frames, 3));
    let mut prob_count = vec![0f32; total_frames];
    let mut outputs = Vec::with_capacity(segments.len());
    for (seg, &(start, _)) in segments.iter().zip(&plan.boundaries) {
        outputs.push(separate_segment(separator, stats, seg)?);
        if let Some((c, cstats)) = counter {
            let p = counter_frame_probs(c, cstats, seg)?;
            let off = start / stft_cfg.frame_shift;
            for (t, row) in p.axis_iter(Axis(0)).enumerate() {
                if off + t < total_frames {
                    let mut acc = prob_sum.row_mut(off + t);
                    acc += &row;
                    prob_count[off + t] += 1.0;
                }
            }
        }
    }
    let (mut streams, perms) = stitch_segments(&plan, outputs, len)?;
    let trace = plan
        .boundaries
        .iter()
        .zip(perms)
        .enumerate()
        .map(|(index, (&(start, end), permutation))| SegmentTrace {
            index,
            start,
            end,
            permutation,
        })
        .collect();
    let inv = 1.0 / scale;
    let mut classes = None;
    if counter.is_some() {
        for (mut row, &n) in prob_sum.axis_iter_mut(Axis(0)).zip(&prob_count) {
            if n > 0.0 {
                row.mapv_inplace(|v| v / n);
            }
        }
        classes = Some(frame_classes(&prob_sum));
        if cfg.suppress {
            streams = suppress_residual([&streams[0], &streams[1]], &prob_sum)?;
        }
    }
    let [s0, s1] = streams;
    let wrap = |v: Vec<f32>| Waveform::mono(v.into_iter().map(|x| x * inv).collect());
    Ok(SpeakerStreams {
        streams: [wrap(s0)?, wrap(s1)?],
        trace,
        frame_classes: classes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn plan_arithmetic() {
        let p = SegmentPlan::new(38400, 38400, 19200).unwrap();
        assert_eq!(p.boundaries, vec![(0, 38400)]);
        let p = SegmentPlan::new(96000, 38400, 19200).unwrap();
        let starts: Vec<f64> = p.boundaries.iter().map(|b| b.0 as f64 / 16000.0).collect();
        assert_eq!(starts, vec![0.0, 1.2, 2.4, 3.6]);
        assert_eq!(p.padded_len(), 96000);
        let p = SegmentPlan::new(100000, 38400, 19200).unwrap();
        assert_eq!(p.boundaries.len(), 5);
        assert!(p.padded_len() >= 100000);
        let p = SegmentPlan::new(10, 38400, 19200).unwrap();
        assert_eq!(p.boundaries.len(), 1);
    }

    #[test]
    fn crossfade_reconstructs_a_single_stream() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x: Vec<f32> = (0..100_003).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w = Waveform::mono(x.clone()).unwrap();
        let (plan, segs) = segment_stream(&w, 38400, 19200).unwrap();
        let parts: Vec<Vec<f32>> = segs.iter().map(|s| s.channel(0).to_vec()).collect();
        let y = overlap_add(&plan, &parts, x.len()).unwrap();
        let err = x.iter().zip(&y).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        assert!(err < 1e-6, "{err}");
        let (o, i) = crossfade(1000);
        assert!(o.iter().zip(&i).all(|(a, b)| (a + b - 1.0).abs() < 1e-6));
    }

    #[test]
    fn stitch_finds_identity_and_swap() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a: Vec<f32> = (0..19200).map(|i| (i as f32 * 0.05).sin()).collect();
        let b: Vec<f32> = (0..19200).map(|_| rng.gen_range(-0.5..0.5)).collect();
        assert_eq!(stitch([&a, &b], [&a, &b]).unwrap(), [0, 1]);
        assert_eq!(stitch([&a, &b], [&b, &a]).unwrap(), [1, 0]);
        let z = vec![0f32; 19200];
        assert_eq!(stitch([&z, &z], [&z, &z]).unwrap(), [0, 1]);
        assert!(stitch([&a, &b], [&a, &b[..100]]).is_err());
    }

    fn probs(frames: usize, class: usize) -> Array2<f32> {
        Array2::from_shape_fn((frames, 3), |(_, c)| if c == class { 0.8 } else { 0.1 })
    }

    #[test]
    fn suppression_rules() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a: Vec<f32> = (0..16000).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let r: Vec<f32> = (0..16000).map(|_| rng.gen_range(-0.01..0.01)).collect();
        let frames = StftConfig::default().frames_for(16000);
        let [x, y] = suppress_residual([&a, &r], &probs(frames, 2)).unwrap();
        assert_eq!((x, y), (a.clone(), r.clone()));
        let [x, y] = suppress_residual([&a, &r], &probs(frames, 1)).unwrap();
        assert!(y.iter().all(|v| v.abs() < 1e-6));
        let sum: Vec<f32> = a.iter().zip(&r).map(|(p, q)| p + q).collect();
        assert!(x.iter().zip(&sum).all(|(p, q)| (p - q).abs() < 1e-5));
        let [x, y] = suppress_residual([&a, &r], &probs(frames, 0)).unwrap();
        assert!(x.iter().chain(&y).all(|v| v.abs() < 1e-6));
        assert!(suppress_residual([&a, &r], &probs(frames - 1, 1)).is_err());
    }
    #[test]
    fn separate_stream_contracts() {
        let mut m = crate::model::SeparatorConfig::toy();
        m.channels = 4;
        m.dense_layers_per_block = 1;
        let sep = Separator::<f32>::new(m, 0).unwrap();
        let stats = FeatureStats::identity(15, 257);
        let cfg = PipelineConfig::default();
        let z = separate_stream(&Waveform::zeros(7, 50_000), &sep, &stats, None, &cfg).unwrap();
        assert!(z.streams.iter().all(|s| s.len() == 50_000 && s.energy() == 0.0));
        assert_eq!(z.trace.len(), 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Waveform::new(Array2::from_shape_fn((7, 45_001), |_| rng.gen_range(-0.1..0.1)), SAMPLE_RATE).unwrap();
        let a = separate_stream(&x, &sep, &stats, None, &cfg).unwrap();
        let b = separate_stream(&x, &sep, &stats, None, &cfg).unwrap();
        assert!(a.streams.iter().all(|s| s.len() == 45_001));
        assert_eq!(a.streams[0].samples(), b.streams[0].samples());
        assert_eq!(a.streams[1].samples(), b.streams[1].samples());
    }
}
