use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;

use super::{constant, Grads, ParamId, ParamStore, Real};

/// Single-direction LSTM over a `[time, features]` sequence.
/// Gate order is input, forget, cell, output.
#[derive(Debug, Clone)]
pub struct Lstm {
    pub input_size: usize,
    pub hidden: usize,
    w_ih: ParamId,
    w_hh: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone)]
pub struct LstmCache<T> {
    input: Array2<T>,
    gates: Array2<T>,
    cells: Array2<T>,
    hiddens: Array2<T>,
}

impl Lstm {
    pub fn new<T: Real, R: Rng>(
        ps: &mut ParamStore<T>,
        name: &str,
        input_size: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let mut uniform = || rng.gen_range(-bound..bound);
        let w_ih = ps.register(format!("{name}.w_ih"), &[4 * hidden, input_size], &mut uniform);
        let w_hh = ps.register(format!("{name}.w_hh"), &[4 * hidden, hidden], &mut uniform);
        let bias = ps.register(format!("{name}.bias"), &[4 * hidden], constant(0.0));
        // forget gate starts open
        for b in &mut ps.get_mut(bias)[hidden..2 * hidden] {
            *b = T::one();
        }
        Self {
            input_size,
            hidden,
            w_ih,
            w_hh,
            bias,
        }
    }

    pub fn num_params(input_size: usize, hidden: usize) -> usize {
        4 * hidden * (input_size + hidden + 1)
    }

    pub fn forward<T: Real>(&self, ps: &ParamStore<T>, x: ArrayView2<T>) -> (Array2<T>, LstmCache<T>) {
        let (steps, n_in) = x.dim();
        assert_eq!(n_in, self.input_size, "lstm input size");
        let h = self.hidden;
        let w_ih = ArrayView2::from_shape((4 * h, n_in), ps.get(self.w_ih)).unwrap();
        let w_hh = ArrayView2::from_shape((4 * h, h), ps.get(self.w_hh)).unwrap();
        let bias = ps.get(self.bias);
        let mut pre = Array2::<T>::zeros((steps, 4 * h));
        for mut row in pre.axis_iter_mut(Axis(0)) {
            row.assign(&ArrayView2::from_shape((1, 4 * h), bias).unwrap().row(0));
        }
        general_mat_mul(T::one(), &x, &w_ih.t(), T::one(), &mut pre);

        let mut gates = Array2::<T>::zeros((steps, 4 * h));
        let mut cells = Array2::<T>::zeros((steps, h));
        let mut hiddens = Array2::<T>::zeros((steps, h));
        let mut h_prev = Array1::<T>::zeros(h);
        let mut c_prev = Array1::<T>::zeros(h);
        for t in 0..steps {
            let mut z = pre.row(t).to_owned();
            z += &w_hh.dot(&h_prev);
            for j in 0..h {
                let i = sigmoid(z[j]);
                let f = sigmoid(z[h + j]);
                let g = z[2 * h + j].tanh();
                let o = sigmoid(z[3 * h + j]);
                let c = f * c_prev[j] + i * g;
                let hv = o * c.tanh();
                gates[[t, j]] = i;
                gates[[t, h + j]] = f;
                gates[[t, 2 * h + j]] = g;
                gates[[t, 3 * h + j]] = o;
                cells[[t, j]] = c;
                hiddens[[t, j]] = hv;
            }
            h_prev = hiddens.row(t).to_owned();
            c_prev = cells.row(t).to_owned();
        }
        (
            hiddens.clone(),
            LstmCache {
                input: x.to_owned(),
                gates,
                cells,
                hiddens,
            },
        )
    }

    pub fn backward<T: Real>(
        &self,
        ps: &ParamStore<T>,
        grads: &mut Grads<T>,
        cache: &LstmCache<T>,
        gout: ArrayView2<T>,
    ) -> Array2<T> {
        let (steps, n_in) = cache.input.dim();
        let h = self.hidden;
        let w_ih = ArrayView2::from_shape((4 * h, n_in), ps.get(self.w_ih)).unwrap();
        let w_hh = ArrayView2::from_shape((4 * h, h), ps.get(self.w_hh)).unwrap();
        let mut dz = Array2::<T>::zeros((steps, 4 * h));
        let mut dh_next = Array1::<T>::zeros(h);
        let mut dc_next = Array1::<T>::zeros(h);
        for t in (0..steps).rev() {
            for j in 0..h {
                let i = cache.gates[[t, j]];
                let f = cache.gates[[t, h + j]];
                let g = cache.gates[[t, 2 * h + j]];
                let o = cache.gates[[t, 3 * h + j]];
                let c = cache.cells[[t, j]];
                let c_prev = if t > 0 { cache.cells[[t - 1, j]] } else { T::zero() };
                let tc = c.tanh();
                let dh = gout[[t, j]] + dh_next[j];
                let d_o = dh * tc;
                let dc = dh * o * (T::one() - tc * tc) + dc_next[j];
                dz[[t, j]] = dc * g * i * (T::one() - i);
                dz[[t, h + j]] = dc * c_prev * f * (T::one() - f);
                dz[[t, 2 * h + j]] = dc * i * (T::one() - g * g);
                dz[[t, 3 * h + j]] = d_o * o * (T::one() - o);
                dc_next[j] = dc * f;
            }
            dh_next = w_hh.t().dot(&dz.row(t));
        }
        {
            // dW_hh += Σ_t dz_t ⊗ h_{t-1}
            let mut gw = grads.view2_mut(self.w_hh, 4 * h, h);
            if steps > 1 {
                let dz_tail = dz.slice(s![1.., ..]);
                let h_head = cache.hiddens.slice(s![..steps - 1, ..]);
                general_mat_mul(T::one(), &dz_tail.t(), &h_head, T::one(), &mut gw);
            }
        }
        {
            let mut gw = grads.view2_mut(self.w_ih, 4 * h, n_in);
            general_mat_mul(T::one(), &dz.t(), &cache.input, T::one(), &mut gw);
        }
        {
            let mut gb = grads.view1_mut(self.bias);
            gb += &dz.sum_axis(Axis(0));
        }
        let mut dx = Array2::<T>::zeros((steps, n_in));
        general_mat_mul(T::one(), &dz, &w_ih, T::zero(), &mut dx);
        dx
    }
}

fn sigmoid<T: Real>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

/// Bidirectional LSTM; the output concatenates forward and backward hidden
/// states per step.
#[derive(Debug, Clone)]
pub struct BiLstm {
    pub forward_dir: Lstm,
    pub backward_dir: Lstm,
}

#[derive(Debug, Clone)]
pub struct BiLstmCache<T> {
    fwd: LstmCache<T>,
    bwd: LstmCache<T>,
}

impl BiLstm {
    pub fn new<T: Real, R: Rng>(
        ps: &mut ParamStore<T>,
        name: &str,
        input_size: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            forward_dir: Lstm::new(ps, &format!("{name}.fwd"), input_size, hidden, rng),
            backward_dir: Lstm::new(ps, &format!("{name}.bwd"), input_size, hidden, rng),
        }
    }

    pub fn num_params(input_size: usize, hidden: usize) -> usize {
        2 * Lstm::num_params(input_size, hidden)
    }

    pub fn output_size(&self) -> usize {
        2 * self.forward_dir.hidden
    }

    pub fn forward<T: Real>(&self, ps: &ParamStore<T>, x: ArrayView2<T>) -> (Array2<T>, BiLstmCache<T>) {
        let h = self.forward_dir.hidden;
        let (yf, fwd) = self.forward_dir.forward(ps, x);
        let xr = x.slice(s![..;-1, ..]);
        let (yb, bwd) = self.backward_dir.forward(ps, xr);
        let steps = x.nrows();
        let mut y = Array2::<T>::zeros((steps, 2 * h));
        y.slice_mut(s![.., ..h]).assign(&yf);
        y.slice_mut(s![.., h..]).assign(&yb.slice(s![..;-1, ..]));
        (y, BiLstmCache { fwd, bwd })
    }

    pub fn backward<T: Real>(
        &self,
        ps: &ParamStore<T>,
        grads: &mut Grads<T>,
        cache: &BiLstmCache<T>,
        gout: ArrayView2<T>,
    ) -> Array2<T> {
        let h = self.forward_dir.hidden;
        let dxf = self
            .forward_dir
            .backward(ps, grads, &cache.fwd, gout.slice(s![.., ..h]));
        let gb = gout.slice(s![..;-1, h..]);
        let dxb = self.backward_dir.backward(ps, grads, &cache.bwd, gb);
        dxf + &dxb.slice(s![..;-1, ..])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bilstm_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut ps = ParamStore::<f64>::new();
        let net = BiLstm::new(&mut ps, "l", 3, 2, &mut rng);
        assert_eq!(ps.len(), BiLstm::num_params(3, 2));
        let x = Array2::from_shape_fn((5, 3), |_| rng.gen_range(-1.0..1.0));
        let proj = Array2::from_shape_fn((5, 4), |_| rng.gen_range(-1.0..1.0));
        let loss = |p: &ParamStore<f64>, x: &Array2<f64>| (net.forward(p, x.view()).0 * &proj).sum();
        let (_, cache) = net.forward(&ps, x.view());
        let mut grads = ps.zero_grads();
        let gx = net.backward(&ps, &mut grads, &cache, proj.view());
        let eps = 1e-6;
        for i in 0..ps.len() {
            let mut p = ps.clone();
            p.values_mut()[i] += eps;
            let up = loss(&p, &x);
            p.values_mut()[i] -= 2.0 * eps;
            let fd = (up - loss(&p, &x)) / (2.0 * eps);
            assert!((fd - grads.values()[i]).abs() < 1e-7, "param {i}: {fd} vs {}", grads.values()[i]);
        }
        for idx in [(0, 0), (2, 1), (4, 2)] {
            let mut xp = x.clone();
            xp[idx] += eps;
            let up = loss(&ps, &xp);
            xp[idx] -= 2.0 * eps;
            let fd = (up - loss(&ps, &xp)) / (2.0 * eps);
            assert!((fd - gx[idx]).abs() < 1e-7);
        }
    }
}
