use ndarray::{Array3, ArrayView3};

use super::{constant, Grads, ParamId, ParamStore, Real};

/// Strided 2×2 depthwise convolution that halves both spatial axes.
#[derive(Debug, Clone)]
pub struct DepthwiseDown {
    pub channels: usize,
    weight: ParamId,
    bias: ParamId,
}

/// Strided 2×2 depthwise transposed convolution that doubles both spatial
/// axes.
#[derive(Debug, Clone)]
pub struct DepthwiseUp {
    pub channels: usize,
    weight: ParamId,
    bias: ParamId,
}

impl DepthwiseDown {
    /// Initialised as 2×2 average pooling.
    pub fn new<T: Real>(ps: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        let weight = ps.register(format!("{name}.weight"), &[channels, 1, 2, 2], constant(0.25));
        let bias = ps.register(format!("{name}.bias"), &[channels], constant(0.0));
        Self {
            channels,
            weight,
            bias,
        }
    }

    pub fn num_params(channels: usize) -> usize {
        5 * channels
    }

    pub fn forward<T: Real>(&self, ps: &ParamStore<T>, x: ArrayView3<T>) -> Array3<T> {
        let (c, h, w) = x.dim();
        assert_eq!(c, self.channels);
        assert!(h % 2 == 0 && w % 2 == 0, "downsampler needs even dims");
        let wt = ps.get(self.weight);
        let b = ps.get(self.bias);
        Array3::from_shape_fn((c, h / 2, w / 2), |(ch, i, j)| {
            let k = &wt[ch * 4..ch * 4 + 4];
            b[ch] + k[0] * x[[ch, 2 * i, 2 * j]]
                + k[1] * x[[ch, 2 * i, 2 * j + 1]]
                + k[2] * x[[ch, 2 * i + 1, 2 * j]]
                + k[3] * x[[ch, 2 * i + 1, 2 * j + 1]]
        })
    }

    pub fn backward<T: Real>(
        &self,
        ps: &ParamStore<T>,
        grads: &mut Grads<T>,
        x: ArrayView3<T>,
        gout: ArrayView3<T>,
    ) -> Array3<T> {
        let (c, h, w) = x.dim();
        let wt = ps.get(self.weight);
        let mut gx = Array3::<T>::zeros((c, h, w));
        let mut gw = vec![T::zero(); 4 * c];
        let mut gb = vec![T::zero(); c];
        for ch in 0..c {
            for i in 0..h / 2 {
                for j in 0..w / 2 {
                    let g = gout[[ch, i, j]];
                    gb[ch] = gb[ch] + g;
                    for (t, (di, dj)) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
                        let (y, xx) = (2 * i + di, 2 * j + dj);
                        gw[ch * 4 + t] = gw[ch * 4 + t] + g * x[[ch, y, xx]];
                        gx[[ch, y, xx]] = g * wt[ch * 4 + t];
                    }
                }
            }
        }
        accumulate(grads.get_mut(self.weight), &gw);
        accumulate(grads.get_mut(self.bias), &gb);
        gx
    }
}

impl DepthwiseUp {
    /// Initialised as nearest-neighbour upsampling.
    pub fn new<T: Real>(ps: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        let weight = ps.register(format!("{name}.weight"), &[channels, 1, 2, 2], constant(1.0));
        let bias = ps.register(format!("{name}.bias"), &[channels], constant(0.0));
        Self {
            channels,
            weight,
            bias,
        }
    }

    pub fn num_params(channels: usize) -> usize {
        5 * channels
    }

    pub fn forward<T: Real>(&self, ps: &ParamStore<T>, x: ArrayView3<T>) -> Array3<T> {
        let (c, h, w) = x.dim();
        assert_eq!(c, self.channels);
        let wt = ps.get(self.weight);
        let b = ps.get(self.bias);
        Array3::from_shape_fn((c, 2 * h, 2 * w), |(ch, y, xx)| {
            let t = (y % 2) * 2 + xx % 2;
            b[ch] + wt[ch * 4 + t] * x[[ch, y / 2, xx / 2]]
        })
    }

    pub fn backward<T: Real>(
        &self,
        ps: &ParamStore<T>,
        grads: &mut Grads<T>,
        x: ArrayView3<T>,
        gout: ArrayView3<T>,
    ) -> Array3<T> {
        let (c, h, w) = x.dim();
        let wt = ps.get(self.weight);
        let mut gx = Array3::<T>::zeros((c, h, w));
        let mut gw = vec![T::zero(); 4 * c];
        let mut gb = vec![T::zero(); c];
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let xv = x[[ch, i, j]];
                    let mut acc = T::zero();
                    for (t, (di, dj)) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
                        let g = gout[[ch, 2 * i + di, 2 * j + dj]];
                        gb[ch] = gb[ch] + g;
                        gw[ch * 4 + t] = gw[ch * 4 + t] + g * xv;
                        acc = acc + g * wt[ch * 4 + t];
                    }
                    gx[[ch, i, j]] = acc;
                }
            }
        }
        accumulate(grads.get_mut(self.weight), &gw);
        accumulate(grads.get_mut(self.bias), &gb);
        gx
    }
}

fn accumulate<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = *d + *s;
    }
}
