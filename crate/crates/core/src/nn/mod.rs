//! Minimal explicit-backward layers for small convolutional and recurrent
//! networks.
//!
//! Every layer is generic over [`Real`] so the same graph runs in `f32` for
//! training and in `f64` for finite-difference gradient checks. Parameters
//! live in one flat [`ParamStore`]; layers only hold [`ParamId`] handles into
//! it, which keeps optimizers, checkpoints and gradient checks trivial.

mod adam;
mod conv;
mod lstm;
mod norm;
mod sampler;

pub use adam::{Adam, AdamConfig};
pub use conv::Conv2d;
pub use lstm::{BiLstm, BiLstmCache, Lstm, LstmCache};
pub use norm::{ChannelNorm, NormCache};
pub use sampler::{DepthwiseDown, DepthwiseUp};

use std::fmt::Debug;
use std::iter::Sum;

use ndarray::{Array3, ArrayView3, ArrayViewMut1, ArrayViewMut2, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Floating point scalar usable by the layers.
pub trait Real:
    LinalgScalar
    + Float
    + FromPrimitive
    + ToPrimitive
    + ScalarOperand
    + Sum
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + Default
    + Debug
    + Send
    + Sync
    + 'static
{
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("representable")
    }

    fn f64(self) -> f64 {
        self.to_f64().expect("finite")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Handle to one named tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamEntry {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Flat parameter storage with named, shaped sub-ranges.
#[derive(Debug, Clone)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry>,
    values: Vec<T>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Registers a tensor and fills it from `init`.
    pub fn register(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        mut init: impl FnMut() -> f64,
    ) -> ParamId {
        let entry = ParamEntry {
            name: name.into(),
            shape: shape.to_vec(),
            offset: self.values.len(),
        };
        let n = entry.numel();
        self.values.extend((0..n).map(|_| T::of(init())));
        self.entries.push(entry);
        ParamId(self.entries.len() - 1)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn get(&self, id: ParamId) -> &[T] {
        let e = &self.entries[id.0];
        &self.values[e.offset..e.offset + e.numel()]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [T] {
        let e = &self.entries[id.0];
        let (o, n) = (e.offset, e.numel());
        &mut self.values[o..o + n]
    }

    /// Converts every value to another scalar type, keeping the layout.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self.entries.clone(),
            values: self.values.iter().map(|v| U::of(v.f64())).collect(),
        }
    }

    pub fn zero_grads(&self) -> Grads<T> {
        Grads {
            values: vec![T::zero(); self.values.len()],
            entries: self.entries.clone(),
        }
    }
}

/// Gradient buffer laid out exactly like its [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Grads<T> {
    entries: Vec<ParamEntry>,
    values: Vec<T>,
}

impl<T: Real> Grads<T> {
    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn get(&self, id: ParamId) -> &[T] {
        let e = &self.entries[id.0];
        &self.values[e.offset..e.offset + e.numel()]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [T] {
        let e = &self.entries[id.0];
        let (o, n) = (e.offset, e.numel());
        &mut self.values[o..o + n]
    }

    pub fn view1_mut(&mut self, id: ParamId) -> ArrayViewMut1<'_, T> {
        ArrayViewMut1::from(self.get_mut(id))
    }

    pub fn view2_mut(&mut self, id: ParamId, rows: usize, cols: usize) -> ArrayViewMut2<'_, T> {
        ArrayViewMut2::from_shape((rows, cols), self.get_mut(id)).expect("param shape")
    }

    pub fn add_assign(&mut self, other: &Grads<T>) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a = *a + *b;
        }
    }

    pub fn scale(&mut self, s: T) {
        self.values.iter_mut().for_each(|v| *v = *v * s);
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Parameter initializers driven by a caller-owned RNG.
pub(crate) fn normal<R: Rng>(rng: &mut R, std: f64) -> impl FnMut() -> f64 + '_ {
    move || {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    }
}

pub(crate) fn constant(v: f64) -> impl FnMut() -> f64 {
    move || v
}

/// Exponential linear unit, in place.
pub fn elu_inplace<T: Real>(x: &mut Array3<T>) {
    x.mapv_inplace(|v| if v > T::zero() { v } else { v.exp() - T::one() });
}

/// Backward of ELU given its *output* `y`.
pub fn elu_backward<T: Real>(y: ArrayView3<T>, gout: &mut Array3<T>) {
    ndarray::Zip::from(gout).and(&y).for_each(|g, &v| {
        if v <= T::zero() {
            *g = *g * (v + T::one());
        }
    });
}
