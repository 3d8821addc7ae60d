use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Axis};
use rand::Rng;

use super::{constant, normal, Grads, ParamId, ParamStore, Real};

/// Square-kernel 2-D convolution with stride 1, "same" zero padding and bias.
///
/// Feature maps are `[channels, height, width]`; the kernel is stored as
/// `[out, in, k, k]` and applied as one GEMM over an im2col matrix.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    weight: ParamId,
    bias: ParamId,
}

impl Conv2d {
    pub fn new<T: Real, R: Rng>(
        ps: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Self {
        assert!(kernel % 2 == 1, "odd kernels only");
        let fan_in = (in_channels * kernel * kernel) as f64;
        let weight = ps.register(
            format!("{name}.weight"),
            &[out_channels, in_channels, kernel, kernel],
            normal(rng, (2.0 / fan_in).sqrt()),
        );
        let bias = ps.register(format!("{name}.bias"), &[out_channels], constant(0.0));
        Self {
            in_channels,
            out_channels,
            kernel,
            weight,
            bias,
        }
    }

    pub fn num_params(in_channels: usize, out_channels: usize, kernel: usize) -> usize {
        in_channels * out_channels * kernel * kernel + out_channels
    }

    pub fn weight_id(&self) -> ParamId {
        self.weight
    }

    pub fn bias_id(&self) -> ParamId {
        self.bias
    }

    fn weight_view<'a, T: Real>(&self, ps: &'a ParamStore<T>) -> ArrayView2<'a, T> {
        let k2 = self.in_channels * self.kernel * self.kernel;
        ArrayView2::from_shape((self.out_channels, k2), ps.get(self.weight)).expect("weight shape")
    }

    pub fn forward<T: Real>(&self, ps: &ParamStore<T>, x: ArrayView3<T>) -> Array3<T> {
        let (c, h, w) = x.dim();
        assert_eq!(c, self.in_channels, "conv input channels");
        let wmat = self.weight_view(ps);
        let bias = ps.get(self.bias);
        let mut out = Array2::<T>::zeros((self.out_channels, h * w));
        for (o, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
            row.fill(bias[o]);
        }
        if self.kernel == 1 {
            let xs = x.as_standard_layout();
            let xm = xs.view().into_shape_with_order((c, h * w)).expect("contiguous");
            general_mat_mul(T::one(), &wmat, &xm, T::one(), &mut out);
        } else {
            let cols = im2col(x, self.kernel);
            general_mat_mul(T::one(), &wmat, &cols, T::one(), &mut out);
        }
        out.into_shape_with_order((self.out_channels, h, w))
            .expect("output shape")
    }

    /// Accumulates parameter gradients and returns the input gradient when
    /// `input_grad` is set.
    pub fn backward<T: Real>(
        &self,
        ps: &ParamStore<T>,
        grads: &mut Grads<T>,
        x: ArrayView3<T>,
        gout: ArrayView3<T>,
        input_grad: bool,
    ) -> Option<Array3<T>> {
        let (c, h, w) = x.dim();
        let k2 = c * self.kernel * self.kernel;
        let gs = gout.as_standard_layout();
        let gm = gs
            .view()
            .into_shape_with_order((self.out_channels, h * w))
            .expect("grad shape");

        {
            let mut gb = grads.view1_mut(self.bias);
            for (o, row) in gm.axis_iter(Axis(0)).enumerate() {
                gb[o] = gb[o] + row.sum();
            }
        }

        let cols_owned;
        let xs;
        let cols: ArrayView2<T> = if self.kernel == 1 {
            xs = x.as_standard_layout();
            xs.view().into_shape_with_order((c, h * w)).expect("contiguous")
        } else {
            cols_owned = im2col(x, self.kernel);
            cols_owned.view()
        };
        {
            let mut gw = grads.view2_mut(self.weight, self.out_channels, k2);
            general_mat_mul(T::one(), &gm, &cols.t(), T::one(), &mut gw);
        }
        if !input_grad {
            return None;
        }
        let wmat = self.weight_view(ps);
        let mut gcols = Array2::<T>::zeros((k2, h * w));
        general_mat_mul(T::one(), &wmat.t(), &gm, T::zero(), &mut gcols);
        if self.kernel == 1 {
            Some(gcols.into_shape_with_order((c, h, w)).expect("shape"))
        } else {
            Some(col2im(gcols.view(), c, h, w, self.kernel))
        }
    }
}

/// Unfolds `k×k` zero-padded neighbourhoods into rows `(c, ky, kx)` of a
/// `[c·k·k, h·w]` matrix.
fn im2col<T: Real>(x: ArrayView3<T>, k: usize) -> Array2<T> {
    let (c, h, w) = x.dim();
    let pad = (k / 2) as isize;
    let xs = x.as_standard_layout();
    let src = xs.as_slice().expect("standard layout");
    let mut cols = Array2::<T>::zeros((c * k * k, h * w));
    let dst = cols.as_slice_mut().expect("standard layout");
    let hw = h * w;
    for ch in 0..c {
        let plane = &src[ch * hw..(ch + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let out = &mut dst[row * hw..(row + 1) * hw];
                let dx = kx as isize - pad;
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                if x0 >= x1 {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let sy = sy as usize;
                    let sx0 = (x0 as isize + dx) as usize;
                    out[y * w + x0..y * w + x1]
                        .copy_from_slice(&plane[sy * w + sx0..sy * w + sx0 + (x1 - x0)]);
                }
            }
        }
    }
    cols
}

fn col2im<T: Real>(cols: ArrayView2<T>, c: usize, h: usize, w: usize, k: usize) -> Array3<T> {
    let pad = (k / 2) as isize;
    let hw = h * w;
    let cs = cols.as_standard_layout();
    let src = cs.as_slice().expect("standard layout");
    let mut x = Array3::<T>::zeros((c, h, w));
    let dst = x.as_slice_mut().expect("standard layout");
    for ch in 0..c {
        let plane = &mut dst[ch * hw..(ch + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let g = &src[row * hw..(row + 1) * hw];
                let dx = kx as isize - pad;
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                if x0 >= x1 {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let sy = sy as usize;
                    let sx0 = (x0 as isize + dx) as usize;
                    let d = &mut plane[sy * w + sx0..sy * w + sx0 + (x1 - x0)];
                    for (dv, &gv) in d.iter_mut().zip(&g[y * w + x0..y * w + x1]) {
                        *dv = *dv + gv;
                    }
                }
            }
        }
    }
    x
}
