use ndarray::{Array1, Array3, ArrayView3, Axis};

use super::{constant, Grads, ParamId, ParamStore, Real};

const EPS: f64 = 1e-5;

/// Per-channel normalization over the spatial plane of one example, followed
/// by a learned per-channel affine map.
#[derive(Debug, Clone)]
pub struct ChannelNorm {
    pub channels: usize,
    gamma: ParamId,
    beta: ParamId,
}

/// Values kept from the forward pass.
#[derive(Debug, Clone)]
pub struct NormCache<T> {
    normalized: Array3<T>,
    inv_std: Array1<T>,
}

impl ChannelNorm {
    pub fn new<T: Real>(ps: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        let gamma = ps.register(format!("{name}.gamma"), &[channels], constant(1.0));
        let beta = ps.register(format!("{name}.beta"), &[channels], constant(0.0));
        Self {
            channels,
            gamma,
            beta,
        }
    }

    pub fn num_params(channels: usize) -> usize {
        2 * channels
    }

    pub fn forward<T: Real>(&self, ps: &ParamStore<T>, x: Array3<T>) -> (Array3<T>, NormCache<T>) {
        let (c, h, w) = x.dim();
        assert_eq!(c, self.channels);
        let n = T::of((h * w) as f64);
        let gamma = ps.get(self.gamma);
        let beta = ps.get(self.beta);
        let mut normalized = x;
        let mut inv_std = Array1::<T>::zeros(c);
        let mut out = Array3::<T>::zeros((c, h, w));
        for (ch, (mut plane, mut o)) in normalized
            .axis_iter_mut(Axis(0))
            .zip(out.axis_iter_mut(Axis(0)))
            .enumerate()
        {
            let mean = plane.sum() / n;
            let var = plane.fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / n;
            let is = T::one() / (var + T::of(EPS)).sqrt();
            inv_std[ch] = is;
            plane.mapv_inplace(|v| (v - mean) * is);
            ndarray::Zip::from(&mut o)
                .and(&plane)
                .for_each(|o, &v| *o = gamma[ch] * v + beta[ch]);
        }
        (
            out,
            NormCache {
                normalized,
                inv_std,
            },
        )
    }

    pub fn backward<T: Real>(
        &self,
        ps: &ParamStore<T>,
        grads: &mut Grads<T>,
        cache: &NormCache<T>,
        gout: ArrayView3<T>,
    ) -> Array3<T> {
        let (c, h, w) = gout.dim();
        let n = T::of((h * w) as f64);
        let gamma = ps.get(self.gamma).to_vec();
        let mut gx = Array3::<T>::zeros((c, h, w));
        let mut ggamma = vec![T::zero(); c];
        let mut gbeta = vec![T::zero(); c];
        for ch in 0..c {
            let g = gout.index_axis(Axis(0), ch);
            let xh = cache.normalized.index_axis(Axis(0), ch);
            let sum_g = g.sum();
            let sum_gx = ndarray::Zip::from(&g)
                .and(&xh)
                .fold(T::zero(), |a, &gv, &xv| a + gv * xv);
            gbeta[ch] = sum_g;
            ggamma[ch] = sum_gx;
            let scale = gamma[ch] * cache.inv_std[ch];
            let mg = sum_g / n;
            let mgx = sum_gx / n;
            ndarray::Zip::from(gx.index_axis_mut(Axis(0), ch))
                .and(&g)
                .and(&xh)
                .for_each(|o, &gv, &xv| *o = scale * (gv - mg - xv * mgx));
        }
        for (d, s) in grads.get_mut(self.gamma).iter_mut().zip(&ggamma) {
            *d = *d + *s;
        }
        for (d, s) in grads.get_mut(self.beta).iter_mut().zip(&gbeta) {
            *d = *d + *s;
        }
        gx
    }
}
