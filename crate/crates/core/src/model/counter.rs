use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dense::{DenseBlock, DenseCache};
use super::SeparatorConfig;
use crate::error::{Error, Result};
use crate::nn::{constant, BiLstm, BiLstmCache, DepthwiseDown, Grads, ParamId, ParamStore, Real};

/// Speaker-count classes: zero, one or two active speakers.
pub const COUNT_CLASSES: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CounterConfig {
    /// Only the encoder fields are used.
    pub encoder: SeparatorConfig,
    pub recurrent_layers: usize,
    pub hidden: usize,
    pub classes: usize,
    /// Padded frequency axis length the recurrent input size is built for.
    pub freq_bins: usize,
}

impl CounterConfig {
    pub fn new(encoder: SeparatorConfig, hidden: usize, freq_bins: usize) -> Self {
        Self {
            encoder,
            recurrent_layers: 2,
            hidden,
            classes: COUNT_CLASSES,
            freq_bins,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.classes != COUNT_CLASSES || self.recurrent_layers == 0 || self.hidden == 0 {
            return Err(Error::Config("counter needs 3 classes and non-empty recurrent layers".into()));
        }
        if self.freq_bins % self.time_factor() != 0 {
            return Err(Error::Config(format!(
                "counter frequency bins {} not a multiple of {}",
                self.freq_bins,
                self.time_factor()
            )));
        }
        Ok(())
    }

    /// Encoder downsampling factor; also the frame-rate reduction.
    pub fn time_factor(&self) -> usize {
        1 << (self.encoder.encoder_layers - 1)
    }
}

/// Frame-level speaker counter: separator encoder, stacked bidirectional
/// LSTMs over the reduced frame sequence, and a softmax classifier.
#[derive(Debug, Clone)]
pub struct SpeakerCounter<T = f32> {
    pub config: CounterConfig,
    pub params: ParamStore<T>,
    encoder: Vec<DenseBlock>,
    downsamplers: Vec<DepthwiseDown>,
    recurrent: Vec<BiLstm>,
    out_weight: ParamId,
    out_bias: ParamId,
}

#[derive(Debug, Clone)]
pub struct CounterCache<T> {
    enc: Vec<DenseCache<T>>,
    enc_out: Vec<Array3<T>>,
    rnn: Vec<BiLstmCache<T>>,
    rnn_out: Array2<T>,
    enc_dim: (usize, usize, usize),
    pub probs: Array2<T>,
}

impl<T: Real> SpeakerCounter<T> {
    pub fn new(config: CounterConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new();
        let e = &config.encoder;
        let g = e.channels;
        let mut encoder = Vec::new();
        let mut downsamplers = Vec::new();
        for i in 0..e.encoder_layers {
            let cin = if i == 0 { e.input_channels } else { g };
            encoder.push(DenseBlock::new(
                &mut ps,
                &format!("encoder.{i}"),
                cin,
                g,
                e.dense_layers_per_block,
                e.kernel,
                &mut rng,
            ));
            if i + 1 < e.encoder_layers {
                downsamplers.push(DepthwiseDown::new(&mut ps, &format!("down.{i}"), g));
            }
        }
        let mut input = g * config.freq_bins / config.time_factor();
        let mut recurrent = Vec::new();
        for r in 0..config.recurrent_layers {
            let layer = BiLstm::new(&mut ps, &format!("blstm.{r}"), input, config.hidden, &mut rng);
            input = layer.output_size();
            recurrent.push(layer);
        }
        let bound = 1.0 / (input as f64).sqrt();
        let out_weight = ps.register("classifier.weight", &[config.classes, input], || {
            rng.gen_range(-bound..bound)
        });
        let out_bias = ps.register("classifier.bias", &[config.classes], constant(0.0));
        Ok(Self {
            config,
            params: ps,
            encoder,
            downsamplers,
            recurrent,
            out_weight,
            out_bias,
        })
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    fn check_input(&self, x: &ArrayView3<T>) -> Result<()> {
        let (c, h, w) = x.dim();
        let e = &self.config.encoder;
        if c != e.input_channels {
            return Err(Error::Shape(format!("input has {c} channels, counter expects {}", e.input_channels)));
        }
        let m = self.config.time_factor();
        if h == 0 || h % m != 0 {
            return Err(Error::Shape(format!("time axis length {h} is not a positive multiple of {m}")));
        }
        if w != self.config.freq_bins {
            return Err(Error::Shape(format!(
                "frequency axis length {w}, counter built for {}",
                self.config.freq_bins
            )));
        }
        Ok(())
    }

    /// Class probabilities per reduced-rate frame, `[frames / factor, 3]`.
    pub fn forward(&self, x: ArrayView3<T>) -> Result<Array2<T>> {
        self.forward_train(x).map(|c| c.probs)
    }

    pub fn forward_train(&self, x: ArrayView3<T>) -> Result<CounterCache<T>> {
        self.check_input(&x)?;
        let ps = &self.params;
        let mut enc = Vec::new();
        let mut enc_out = Vec::new();
        let mut h = x.to_owned();
        let n = self.encoder.len();
        for i in 0..n {
            let (out, cache) = self.encoder[i].forward(ps, h.view());
            enc.push(cache);
            if i + 1 < n {
                h = self.downsamplers[i].forward(ps, out.view());
            }
            enc_out.push(out);
        }
        let top = enc_out.last().expect("non-empty encoder");
        let enc_dim = top.dim();
        let (c, t, f) = enc_dim;
        // [c, t, f] -> [t, c·f]
        let seq = top
            .view()
            .permuted_axes([1, 0, 2])
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((t, c * f))
            .expect("sequence layout");
        let mut rnn = Vec::new();
        let mut s = seq;
        for layer in &self.recurrent {
            let (y, cache) = layer.forward(ps, s.view());
            rnn.push(cache);
            s = y;
        }
        let logits = self.classify(s.view());
        let probs = softmax_rows(logits);
        Ok(CounterCache {
            enc,
            enc_out,
            rnn,
            rnn_out: s,
            enc_dim,
            probs,
        })
    }

    fn classify(&self, s: ArrayView2<T>) -> Array2<T> {
        let k = self.config.classes;
        let w = ArrayView2::from_shape((k, s.ncols()), self.params.get(self.out_weight)).unwrap();
        let b = self.params.get(self.out_bias);
        let mut logits = Array2::from_shape_fn((s.nrows(), k), |(_, j)| b[j]);
        general_mat_mul(T::one(), &s, &w.t(), T::one(), &mut logits);
        logits
    }

    /// Backpropagates a gradient w.r.t. the pre-softmax logits.
    pub fn backward(&self, cache: &CounterCache<T>, grad_logits: ArrayView2<T>) -> Grads<T> {
        let ps = &self.params;
        let mut grads = ps.zero_grads();
        let k = self.config.classes;
        let d = cache.rnn_out.ncols();
        {
            let mut gw = grads.view2_mut(self.out_weight, k, d);
            general_mat_mul(T::one(), &grad_logits.t(), &cache.rnn_out, T::one(), &mut gw);
        }
        {
            let mut gb = grads.view1_mut(self.out_bias);
            gb += &grad_logits.sum_axis(Axis(0));
        }
        let w = ArrayView2::from_shape((k, d), ps.get(self.out_weight)).unwrap();
        let mut g = grad_logits.dot(&w);
        for (layer, c) in self.recurrent.iter().zip(&cache.rnn).rev() {
            g = layer.backward(ps, &mut grads, c, g.view());
        }
        let (c, t, f) = cache.enc_dim;
        let mut g_enc = g
            .into_shape_with_order((t, c, f))
            .expect("sequence layout")
            .permuted_axes([1, 0, 2])
            .as_standard_layout()
            .into_owned();
        let n = self.encoder.len();
        for i in (0..n).rev() {
            let gin = self.encoder[i].backward(ps, &mut grads, &cache.enc[i], g_enc.view(), i > 0);
            if let Some(gin) = gin {
                g_enc = self.downsamplers[i - 1].backward(ps, &mut grads, cache.enc_out[i - 1].view(), gin.view());
            }
        }
        grads
    }
}

pub(crate) fn softmax_rows<T: Real>(mut logits: Array2<T>) -> Array2<T> {
    for mut row in logits.axis_iter_mut(Axis(0)) {
        let m = row.fold(T::neg_infinity(), |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    logits
}

/// Mean cross-entropy over frames and its gradient w.r.t. the logits.
pub fn cross_entropy<T: Real>(probs: ArrayView2<T>, labels: &[usize]) -> Result<(f64, Array2<T>)> {
    if probs.nrows() != labels.len() {
        return Err(Error::Shape(format!("{} frames vs {} labels", probs.nrows(), labels.len())));
    }
    let n = T::of(labels.len().max(1) as f64);
    let mut grad = probs.to_owned();
    let mut loss = 0.0;
    for (t, &y) in labels.iter().enumerate() {
        loss -= probs[[t, y]].f64().max(1e-12).ln();
        grad[[t, y]] = grad[[t, y]] - T::one();
    }
    grad.mapv_inplace(|v| v / n);
    Ok((loss / labels.len().max(1) as f64, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> CounterConfig {
        let mut e = SeparatorConfig::toy();
        e.channels = 4;
        e.dense_layers_per_block = 1;
        CounterConfig::new(e, 3, 8)
    }

    #[test]
    fn rows_sum_to_one() {
        let m = SpeakerCounter::<f32>::new(tiny(), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Array3::from_shape_fn((15, 16, 8), |_| rng.gen_range(-2.0..2.0));
        let p = m.forward(x.view()).unwrap();
        assert_eq!(p.dim(), (4, 3));
        for row in p.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-6);
        }
        assert!(m.forward(Array3::zeros((15, 16, 12)).view()).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let m = SpeakerCounter::<f64>::new(tiny(), 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Array3::from_shape_fn((15, 8, 8), |_| rng.gen_range(-1.0..1.0));
        let labels = [0usize, 2];
        let cache = m.forward_train(x.view()).unwrap();
        let (_, gl) = cross_entropy(cache.probs.view(), &labels).unwrap();
        let grads = m.backward(&cache, gl.view());
        let loss = |mm: &SpeakerCounter<f64>| {
            let p = mm.forward(x.view()).unwrap();
            cross_entropy(p.view(), &labels).unwrap().0
        };
        let eps = 1e-6;
        for _ in 0..60 {
            let i = rng.gen_range(0..m.num_params());
            let mut mp = m.clone();
            mp.params.values_mut()[i] += eps;
            let up = loss(&mp);
            mp.params.values_mut()[i] -= 2.0 * eps;
            let fd = (up - loss(&mp)) / (2.0 * eps);
            let an = grads.values()[i];
            assert!((fd - an).abs() <= 1e-6 * (1.0 + an.abs()), "param {i}: {fd} vs {an}");
        }
    }
}
