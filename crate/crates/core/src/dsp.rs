//! Waveform and spectrogram primitives: framing, STFT/iSTFT with a
//! perfect-reconstruction square-root Hann window pair, mixture variance
//! normalization and global per-bin feature statistics.

use std::f64::consts::PI;
use std::path::Path;

use ndarray::{s, Array2, Array3, ArrayView1, ArrayView3, Axis};
use realfft::num_complex::Complex;
use realfft::RealFftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Real;

pub const SAMPLE_RATE: u32 = 16_000;

/// Multichannel audio, `[channels, time]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Array2<f32>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Array2<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate != SAMPLE_RATE {
            return Err(Error::InvalidInput(format!(
                "sample rate {sample_rate} Hz, expected {SAMPLE_RATE} Hz"
            )));
        }
        if samples.nrows() == 0 {
            return Err(Error::InvalidInput("waveform has no channels".into()));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("waveform contains non-finite samples".into()));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn mono(samples: Vec<f32>) -> Result<Self> {
        let n = samples.len();
        Self::new(
            Array2::from_shape_vec((1, n), samples).expect("row vector"),
            SAMPLE_RATE,
        )
    }

    pub fn from_channels(channels: &[Vec<f32>]) -> Result<Self> {
        let len = channels.first().map_or(0, Vec::len);
        if channels.iter().any(|c| c.len() != len) {
            return Err(Error::InvalidInput("channels differ in length".into()));
        }
        let flat: Vec<f32> = channels.iter().flatten().copied().collect();
        Self::new(
            Array2::from_shape_vec((channels.len(), len), flat).expect("shape"),
            SAMPLE_RATE,
        )
    }

    pub fn zeros(channels: usize, len: usize) -> Self {
        Self {
            samples: Array2::zeros((channels, len)),
            sample_rate: SAMPLE_RATE,
        }
    }

    pub fn samples(&self) -> &Array2<f32> {
        &self.samples
    }

    pub fn samples_mut(&mut self) -> &mut Array2<f32> {
        &mut self.samples
    }

    pub fn into_samples(self) -> Array2<f32> {
        self.samples
    }

    pub fn channel(&self, c: usize) -> ArrayView1<'_, f32> {
        self.samples.row(c)
    }

    pub fn channels(&self) -> usize {
        self.samples.nrows()
    }

    pub fn len(&self) -> usize {
        self.samples.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn duration_secs(&self) -> f64 {
        self.len() as f64 / self.sample_rate as f64
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|&v| (v as f64) * (v as f64)).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WindowKind {
    /// Periodic square-root Hann, used for both analysis and synthesis.
    SqrtHann,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StftConfig {
    pub frame_length: usize,
    pub frame_shift: usize,
    pub window: WindowKind,
}

impl Default for StftConfig {
    /// 32 ms frames with an 8 ms shift at 16 kHz.
    fn default() -> Self {
        Self {
            frame_length: 512,
            frame_shift: 128,
            window: WindowKind::SqrtHann,
        }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frame_shift == 0 || self.frame_length % self.frame_shift != 0 {
            return Err(Error::Config(format!(
                "frame shift {} must divide frame length {}",
                self.frame_shift, self.frame_length
            )));
        }
        if self.frame_length / self.frame_shift < 2 || self.frame_length % 2 != 0 {
            return Err(Error::Config(
                "frame length must be even and at least twice the shift".into(),
            ));
        }
        Ok(())
    }

    pub fn bins(&self) -> usize {
        self.frame_length / 2 + 1
    }

    /// Zeros prepended before framing; half the frame overlap.
    pub fn left_pad(&self) -> usize {
        (self.frame_length - self.frame_shift) / 2
    }

    /// Number of frames for a signal of `len` samples.
    pub fn frames_for(&self, len: usize) -> usize {
        len.div_ceil(self.frame_shift).max(1)
    }

    /// Longest signal an iSTFT of `frames` frames can return.
    pub fn max_samples(&self, frames: usize) -> usize {
        (frames - 1) * self.frame_shift + self.frame_length - self.left_pad()
    }

    pub fn window(&self) -> Vec<f64> {
        let n = self.frame_length as f64;
        match self.window {
            WindowKind::SqrtHann => (0..self.frame_length)
                .map(|i| (0.5 - 0.5 * (2.0 * PI * i as f64 / n).cos()).sqrt())
                .collect(),
        }
    }
}

/// Separate real and imaginary planes, `[frames, bins]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrogram<T = f32> {
    pub real: Array2<T>,
    pub imag: Array2<T>,
}

impl<T: Real> ComplexSpectrogram<T> {
    pub fn new(real: Array2<T>, imag: Array2<T>) -> Result<Self> {
        if real.dim() != imag.dim() {
            return Err(Error::Shape(format!(
                "real plane {:?} vs imaginary plane {:?}",
                real.dim(),
                imag.dim()
            )));
        }
        Ok(Self { real, imag })
    }

    pub fn zeros(frames: usize, bins: usize) -> Self {
        Self {
            real: Array2::zeros((frames, bins)),
            imag: Array2::zeros((frames, bins)),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.real.dim()
    }

    pub fn frames(&self) -> usize {
        self.real.nrows()
    }

    pub fn bins(&self) -> usize {
        self.real.ncols()
    }

    pub fn magnitude(&self) -> Array2<T> {
        let mut m = self.real.mapv(|v| v * v);
        m.zip_mut_with(&self.imag, |a, &b| *a = (*a + b * b).sqrt());
        m
    }

    pub fn is_zero(&self) -> bool {
        self.real.iter().chain(self.imag.iter()).all(|v| *v == T::zero())
    }

    pub fn scaled(&self, c: T) -> Self {
        Self {
            real: &self.real * c,
            imag: &self.imag * c,
        }
    }

    pub fn cast<U: Real>(&self) -> ComplexSpectrogram<U> {
        ComplexSpectrogram {
            real: self.real.mapv(|v| U::of(v.f64())),
            imag: self.imag.mapv(|v| U::of(v.f64())),
        }
    }

    /// Zero-pads (or crops) both axes to `frames × bins`.
    pub fn resized(&self, frames: usize, bins: usize) -> Self {
        let mut out = Self::zeros(frames, bins);
        let f = frames.min(self.frames());
        let b = bins.min(self.bins());
        out.real
            .slice_mut(s![..f, ..b])
            .assign(&self.real.slice(s![..f, ..b]));
        out.imag
            .slice_mut(s![..f, ..b])
            .assign(&self.imag.slice(s![..f, ..b]));
        out
    }

    pub fn frame_range(&self, start: usize, end: usize) -> Self {
        Self {
            real: self.real.slice(s![start..end, ..]).to_owned(),
            imag: self.imag.slice(s![start..end, ..]).to_owned(),
        }
    }
}

fn check_signal(len: usize, cfg: &StftConfig) -> Result<()> {
    cfg.validate()?;
    if len < cfg.frame_length {
        return Err(Error::InvalidInput(format!(
            "signal of {len} samples is shorter than one {}-sample frame",
            cfg.frame_length
        )));
    }
    Ok(())
}

/// STFT of a single channel.
pub fn stft_channel(x: ArrayView1<f32>, cfg: &StftConfig) -> Result<ComplexSpectrogram> {
    check_signal(x.len(), cfg)?;
    let n = cfg.frame_length;
    let hop = cfg.frame_shift;
    let frames = cfg.frames_for(x.len());
    let left = cfg.left_pad();
    let padded_len = (frames - 1) * hop + n;
    let mut padded = vec![0.0f64; padded_len];
    for (i, &v) in x.iter().enumerate() {
        padded[left + i] = v as f64;
    }
    let window = cfg.window();
    let mut planner = RealFftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(n);
    let mut input = fft.make_input_vec();
    let mut output = fft.make_output_vec();
    let bins = cfg.bins();
    let mut spec = ComplexSpectrogram::zeros(frames, bins);
    for t in 0..frames {
        let frame = &padded[t * hop..t * hop + n];
        for ((dst, &v), &w) in input.iter_mut().zip(frame).zip(&window) {
            *dst = v * w;
        }
        fft.process(&mut input, &mut output).expect("fft sizes");
        for (k, c) in output.iter().enumerate() {
            spec.real[[t, k]] = c.re as f32;
            spec.imag[[t, k]] = c.im as f32;
        }
    }
    Ok(spec)
}

/// STFT of every channel of `wave`.
pub fn stft(wave: &Waveform, cfg: &StftConfig) -> Result<Vec<ComplexSpectrogram>> {
    (0..wave.channels())
        .map(|c| stft_channel(wave.channel(c), cfg))
        .collect()
}

/// Weighted overlap-add inverse, normalized by the summed squared window and
/// cropped to `length` samples.
pub fn istft<T: Real>(spec: &ComplexSpectrogram<T>, cfg: &StftConfig, length: usize) -> Result<Vec<f32>> {
    cfg.validate()?;
    let n = cfg.frame_length;
    let hop = cfg.frame_shift;
    let (frames, bins) = spec.shape();
    if bins != cfg.bins() {
        return Err(Error::InvalidInput(format!(
            "spectrogram has {bins} bins, configuration expects {}",
            cfg.bins()
        )));
    }
    if frames == 0 || length > cfg.max_samples(frames) {
        return Err(Error::InvalidInput(format!(
            "{frames} frames cannot produce {length} samples"
        )));
    }
    let window = cfg.window();
    let mut planner = RealFftPlanner::<f64>::new();
    let ifft = planner.plan_fft_inverse(n);
    let mut input = ifft.make_input_vec();
    let mut output = ifft.make_output_vec();
    let total = (frames - 1) * hop + n;
    let mut acc = vec![0.0f64; total];
    let mut env = vec![0.0f64; total];
    for t in 0..frames {
        for (k, c) in input.iter_mut().enumerate() {
            *c = Complex::new(spec.real[[t, k]].f64(), spec.imag[[t, k]].f64());
        }
        // DC and Nyquist bins of a real signal carry no imaginary part.
        input[0].im = 0.0;
        input[bins - 1].im = 0.0;
        ifft.process(&mut input, &mut output).expect("fft sizes");
        for (i, (&v, &w)) in output.iter().zip(&window).enumerate() {
            acc[t * hop + i] += v / n as f64 * w;
            env[t * hop + i] += w * w;
        }
    }
    let left = cfg.left_pad();
    Ok((0..length)
        .map(|i| {
            let e = env[left + i];
            if e > 1e-10 {
                (acc[left + i] / e) as f32
            } else {
                0.0
            }
        })
        .collect())
}

/// Scales a multichannel mixture to unit sample variance, computed jointly
/// over all channels. Returns the applied gain.
pub fn normalize_mixture(wave: &Waveform) -> Result<(Waveform, f32)> {
    let n = wave.samples().len() as f64;
    let mean = wave.samples().iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = wave
        .samples()
        .iter()
        .map(|&v| (v as f64 - mean).powi(2))
        .sum::<f64>()
        / n;
    if !(var > 0.0) {
        return Err(Error::DegenerateInput(
            "mixture has zero variance; no normalization scale exists".into(),
        ));
    }
    let scale = (1.0 / var.sqrt()) as f32;
    let samples = wave.samples().mapv(|v| v * scale);
    Ok((Waveform::new(samples, wave.sample_rate())?, scale))
}

/// Model input layout: real parts of all mics, imaginary parts of all mics,
/// then the magnitude of the first mic. `[2·mics + 1, frames, bins]`.
pub fn mixture_features(specs: &[ComplexSpectrogram]) -> Result<Array3<f32>> {
    let first = specs
        .first()
        .ok_or_else(|| Error::InvalidInput("no channels".into()))?;
    let (t, f) = first.shape();
    if specs.iter().any(|s| s.shape() != (t, f)) {
        return Err(Error::Shape("channel spectrograms differ in shape".into()));
    }
    let m = specs.len();
    let mut feats = Array3::<f32>::zeros((2 * m + 1, t, f));
    for (i, s) in specs.iter().enumerate() {
        feats.index_axis_mut(Axis(0), i).assign(&s.real);
        feats.index_axis_mut(Axis(0), m + i).assign(&s.imag);
    }
    feats.index_axis_mut(Axis(0), 2 * m).assign(&first.magnitude());
    Ok(feats)
}

/// Global per-channel, per-frequency feature statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStats {
    pub mean: Array2<f32>,
    pub variance: Array2<f32>,
}

impl FeatureStats {
    pub fn identity(channels: usize, bins: usize) -> Self {
        Self {
            mean: Array2::zeros((channels, bins)),
            variance: Array2::ones((channels, bins)),
        }
    }

    /// Per-bin RMS of the first microphone's real and imaginary channels.
    pub fn reference_scale(&self) -> Vec<f32> {
        let m = (self.channels() - 1) / 2;
        let v = &self.variance;
        (0..self.bins())
            .map(|b| ((v[[0, b]] + v[[m, b]]) / 2.0).max(f32::MIN_POSITIVE).sqrt())
            .collect()
    }

    pub fn channels(&self) -> usize {
        self.mean.nrows()
    }

    pub fn bins(&self) -> usize {
        self.mean.ncols()
    }
}

/// Streaming accumulator of per-(channel, bin) moments over many examples.
#[derive(Debug, Clone)]
pub struct StatsAccumulator {
    count: Array2<f64>,
    sum: Array2<f64>,
    sum_sq: Array2<f64>,
}

impl StatsAccumulator {
    pub fn new(channels: usize, bins: usize) -> Self {
        Self {
            count: Array2::zeros((channels, bins)),
            sum: Array2::zeros((channels, bins)),
            sum_sq: Array2::zeros((channels, bins)),
        }
    }

    pub fn push(&mut self, features: ArrayView3<f32>) -> Result<()> {
        let (c, _, f) = features.dim();
        if (c, f) != self.sum.dim() {
            return Err(Error::Shape(format!(
                "features [{c}, _, {f}] vs accumulator {:?}",
                self.sum.dim()
            )));
        }
        for ch in 0..c {
            for frame in features.index_axis(Axis(0), ch).outer_iter() {
                for (k, &v) in frame.iter().enumerate() {
                    let v = v as f64;
                    self.count[[ch, k]] += 1.0;
                    self.sum[[ch, k]] += v;
                    self.sum_sq[[ch, k]] += v * v;
                }
            }
        }
        Ok(())
    }

    pub fn finish(&self) -> Result<FeatureStats> {
        if self.count.iter().any(|&n| n == 0.0) {
            return Err(Error::DegenerateInput("no frames accumulated".into()));
        }
        let mean = &self.sum / &self.count;
        let mut variance = &self.sum_sq / &self.count - &mean * &mean;
        variance.mapv_inplace(|v| v.max(1e-10));
        Ok(FeatureStats {
            mean: mean.mapv(|v| v as f32),
            variance: variance.mapv(|v| v as f32),
        })
    }
}

/// `(x − mean) / sqrt(variance)` per channel and frequency bin.
pub fn apply_feature_norm(features: ArrayView3<f32>, stats: &FeatureStats) -> Result<Array3<f32>> {
    let (c, t, f) = features.dim();
    if (c, f) != stats.mean.dim() {
        return Err(Error::InvalidInput(format!(
            "features [{c}, {t}, {f}] do not match statistics {:?}",
            stats.mean.dim()
        )));
    }
    let mut out = features.to_owned();
    for ch in 0..c {
        let mean = stats.mean.row(ch);
        let inv: Vec<f32> = stats.variance.row(ch).iter().map(|v| 1.0 / v.sqrt()).collect();
        for mut frame in out.index_axis_mut(Axis(0), ch).outer_iter_mut() {
            for (k, v) in frame.iter_mut().enumerate() {
                *v = (*v - mean[k]) * inv[k];
            }
        }
    }
    Ok(out)
}

pub fn read_wav(path: &Path) -> Result<Waveform> {
    let wav_err = |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    };
    let mut reader = hound::WavReader::open(path).map_err(wav_err)?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    let interleaved: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .collect::<std::result::Result<_, _>>()
            .map_err(wav_err)?,
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(wav_err)?,
        (fmt, bits) => {
            return Err(Error::InvalidInput(format!(
                "{}: unsupported sample format {fmt:?}/{bits} bit",
                path.display()
            )))
        }
    };
    let len = interleaved.len() / channels.max(1);
    let samples = Array2::from_shape_vec((len, channels), interleaved)
        .map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))?
        .reversed_axes()
        .as_standard_layout()
        .to_owned();
    Waveform::new(samples, spec.sample_rate)
        .map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))
}

/// Writes 32-bit float interleaved PCM.
pub fn write_wav(path: &Path, wave: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: wave.channels() as u16,
        sample_rate: wave.sample_rate(),
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let wav_err = |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(wav_err)?;
    for t in 0..wave.len() {
        for c in 0..wave.channels() {
            writer.write_sample(wave.samples()[[c, t]]).map_err(wav_err)?;
        }
    }
    writer.finalize().map_err(wav_err)
}
