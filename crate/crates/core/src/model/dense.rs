use ndarray::{s, Array3, ArrayView3, Axis};
use rand::Rng;

use crate::nn::{elu_backward, elu_inplace, ChannelNorm, Conv2d, Grads, NormCache, ParamStore, Real};

/// Densely connected block: layer `j` sees the block input concatenated with
/// the outputs of layers `0..j`. Each layer is conv → channel norm → ELU and
/// the block output is the last layer's output.
#[derive(Debug, Clone)]
pub struct DenseBlock {
    pub in_channels: usize,
    pub growth: usize,
    convs: Vec<Conv2d>,
    norms: Vec<ChannelNorm>,
}

#[derive(Debug, Clone)]
pub struct DenseCache<T> {
    /// Input followed by every layer's activated output, channel-stacked.
    buffer: Array3<T>,
    norms: Vec<NormCache<T>>,
}

impl DenseBlock {
    pub fn new<T: Real, R: Rng>(
        ps: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        growth: usize,
        layers: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Self {
        let mut convs = Vec::with_capacity(layers);
        let mut norms = Vec::with_capacity(layers);
        for j in 0..layers {
            let cin = in_channels + j * growth;
            convs.push(Conv2d::new(ps, &format!("{name}.{j}.conv"), cin, growth, kernel, rng));
            norms.push(ChannelNorm::new(ps, &format!("{name}.{j}.norm"), growth));
        }
        Self {
            in_channels,
            growth,
            convs,
            norms,
        }
    }

    pub fn num_params(in_channels: usize, growth: usize, layers: usize, kernel: usize) -> usize {
        (0..layers)
            .map(|j| {
                Conv2d::num_params(in_channels + j * growth, growth, kernel)
                    + ChannelNorm::num_params(growth)
            })
            .sum()
    }

    pub fn layers(&self) -> usize {
        self.convs.len()
    }

    fn total_channels(&self) -> usize {
        self.in_channels + self.layers() * self.growth
    }

    pub fn forward<T: Real>(&self, ps: &ParamStore<T>, x: ArrayView3<T>) -> (Array3<T>, DenseCache<T>) {
        let (c, h, w) = x.dim();
        assert_eq!(c, self.in_channels, "dense block input channels");
        let mut buffer = Array3::<T>::zeros((self.total_channels(), h, w));
        buffer.slice_mut(s![..c, .., ..]).assign(&x);
        let mut norms = Vec::with_capacity(self.layers());
        for (j, (conv, norm)) in self.convs.iter().zip(&self.norms).enumerate() {
            let start = c + j * self.growth;
            let z = conv.forward(ps, buffer.slice(s![..start, .., ..]));
            let (mut y, nc) = norm.forward(ps, z);
            elu_inplace(&mut y);
            buffer
                .slice_mut(s![start..start + self.growth, .., ..])
                .assign(&y);
            norms.push(nc);
        }
        let out_start = self.total_channels() - self.growth;
        let out = buffer.slice(s![out_start.., .., ..]).to_owned();
        (out, DenseCache { buffer, norms })
    }

    /// Returns the gradient w.r.t. the block input when `input_grad` is set.
    pub fn backward<T: Real>(
        &self,
        ps: &ParamStore<T>,
        grads: &mut Grads<T>,
        cache: &DenseCache<T>,
        gout: ArrayView3<T>,
        input_grad: bool,
    ) -> Option<Array3<T>> {
        let c = self.in_channels;
        let mut gbuf = Array3::<T>::zeros(cache.buffer.raw_dim());
        let out_start = self.total_channels() - self.growth;
        gbuf.slice_mut(s![out_start.., .., ..]).assign(&gout);
        for j in (0..self.layers()).rev() {
            let start = c + j * self.growth;
            let mut g = gbuf
                .slice(s![start..start + self.growth, .., ..])
                .to_owned();
            elu_backward(cache.buffer.slice(s![start..start + self.growth, .., ..]), &mut g);
            let gz = self.norms[j].backward(ps, grads, &cache.norms[j], g.view());
            let need = input_grad || j > 0;
            if let Some(gx) = self.convs[j].backward(
                ps,
                grads,
                cache.buffer.slice(s![..start, .., ..]),
                gz.view(),
                need,
            ) {
                let mut prefix = gbuf.slice_mut(s![..start, .., ..]);
                prefix += &gx;
            } else {
                // only the first layer may skip its input gradient
                debug_assert_eq!(j, 0);
            }
        }
        input_grad.then(|| gbuf.slice(s![..c, .., ..]).to_owned())
    }
}

/// Adds `b` into `a` along the channel axis; both must share a shape.
pub(crate) fn add_into<T: Real>(a: &mut Array3<T>, b: ArrayView3<T>) {
    assert_eq!(a.dim(), b.dim(), "skip connection shapes");
    *a += &b;
}

pub(crate) fn channel_mean<T: Real>(x: ArrayView3<T>, start: usize, end: usize) -> ndarray::Array2<T> {
    let n = T::of((end - start) as f64);
    x.slice(s![start..end, .., ..]).sum_axis(Axis(0)) / n
}
