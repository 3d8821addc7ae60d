//! Training criteria on complex spectrograms: the base real/imaginary/
//! magnitude ℓ1 loss, permutation-invariant and location-based speaker
//! assignment, and the multi-resolution decoder loss with pooled targets.
//!
//! Every ℓ1 term is a mean over the time-frequency bins of its grid; speaker
//! terms are summed. All accumulation happens in `f64`.

use itertools::Itertools;
use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::dsp::{stft_channel, ComplexSpectrogram, StftConfig, Waveform};
use crate::error::{Error, Result};
use crate::model::SeparatorOutput;
use crate::nn::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AssignmentKind {
    PitArgmin,
    Azimuth,
    Distance,
    /// Fewer than all speakers active: active ones first, zero targets after.
    SingleActive,
}

/// `order[n]` is the reference index supervising output `n`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub order: Vec<usize>,
    pub kind: AssignmentKind,
}

impl Assignment {
    pub fn new(order: Vec<usize>, kind: AssignmentKind) -> Result<Self> {
        let mut seen = vec![false; order.len()];
        for &o in &order {
            if o >= order.len() || std::mem::replace(&mut seen[o], true) {
                return Err(Error::InvalidInput(format!("{order:?} is not a permutation")));
            }
        }
        Ok(Self { order, kind })
    }

    pub fn identity(n: usize, kind: AssignmentKind) -> Self {
        Self {
            order: (0..n).collect(),
            kind,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.order.iter().enumerate().all(|(i, &o)| i == o)
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct BaseComponents {
    pub real_l1: f64,
    pub imag_l1: f64,
    pub mag_l1: f64,
}

impl BaseComponents {
    pub fn total(&self) -> f64 {
        self.real_l1 + self.imag_l1 + self.mag_l1
    }

    fn add(&mut self, o: &BaseComponents) {
        self.real_l1 += o.real_l1;
        self.imag_l1 += o.imag_l1;
        self.mag_l1 += o.mag_l1;
    }
}

/// Loss value with its decomposition.
///
/// `base_components` decomposes `final_term`. `orders` records the
/// assignment order each term (final first, then taps) was evaluated with.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub final_term: f64,
    pub tap_terms: Vec<f64>,
    pub base_components: BaseComponents,
    pub evaluations: usize,
    pub orders: Vec<Vec<usize>>,
}

fn check_same_shape<T: Real>(a: &ComplexSpectrogram<T>, b: &ComplexSpectrogram<T>) -> Result<()> {
    if a.shape() != b.shape() || a.imag.dim() != b.imag.dim() || a.real.dim() != a.imag.dim() {
        return Err(Error::InvalidInput(format!(
            "estimate {:?} and reference {:?} differ in shape",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Core evaluation; optionally accumulates `weight · ∂loss/∂est` into `grad`.
fn base_eval<T: Real>(
    est: &ComplexSpectrogram<T>,
    reference: &ComplexSpectrogram<T>,
    grad: Option<(&mut ComplexSpectrogram<T>, f64)>,
) -> Result<BaseComponents> {
    check_same_shape(est, reference)?;
    let n = (est.frames() * est.bins()).max(1) as f64;
    let (mut sr, mut si, mut sm) = (0.0, 0.0, 0.0);
    let terms = |er: T, ei: T, rr: T, ri: T| {
        let (er, ei, rr, ri) = (er.f64(), ei.f64(), rr.f64(), ri.f64());
        let me = er.hypot(ei);
        (er - rr, ei - ri, me - rr.hypot(ri), er, ei, me)
    };
    let zip = Zip::from(&est.real)
        .and(&est.imag)
        .and(&reference.real)
        .and(&reference.imag);
    match grad {
        None => zip.for_each(|&er, &ei, &rr, &ri| {
            let (dr, di, dm, ..) = terms(er, ei, rr, ri);
            sr += dr.abs();
            si += di.abs();
            sm += dm.abs();
        }),
        Some((g, weight)) => {
            check_same_shape(est, g)?;
            let w = weight / n;
            zip.and(&mut g.real).and(&mut g.imag).for_each(|&er, &ei, &rr, &ri, gr, gi| {
                let (dr, di, dm, er, ei, me) = terms(er, ei, rr, ri);
                sr += dr.abs();
                si += di.abs();
                sm += dm.abs();
                // d|e|/de is undefined at the origin; take 0 there.
                let (ur, ui) = if me > 0.0 { (er / me, ei / me) } else { (0.0, 0.0) };
                let sm_ = sign(dm);
                *gr += T::of(w * (sign(dr) + sm_ * ur));
                *gi += T::of(w * (sign(di) + sm_ * ui));
            });
        }
    }
    Ok(BaseComponents {
        real_l1: sr / n,
        imag_l1: si / n,
        mag_l1: sm / n,
    })
}

/// Mean ℓ1 of real parts + mean ℓ1 of imaginary parts + mean ℓ1 of
/// magnitudes.
pub fn base_loss<T: Real>(est: &ComplexSpectrogram<T>, reference: &ComplexSpectrogram<T>) -> Result<(f64, BaseComponents)> {
    let c = base_eval(est, reference, None)?;
    Ok((c.total(), c))
}

fn check_counts<T>(est: &[ComplexSpectrogram<T>], refs: &[ComplexSpectrogram<T>]) -> Result<()> {
    if est.is_empty() || est.len() != refs.len() {
        return Err(Error::InvalidInput(format!(
            "{} estimates vs {} references",
            est.len(),
            refs.len()
        )));
    }
    Ok(())
}

/// Σₙ base_loss(est[n], refs[order[n]]).
fn assigned_sum<T: Real>(
    est: &[ComplexSpectrogram<T>],
    refs: &[ComplexSpectrogram<T>],
    order: &[usize],
    mut grad: Option<(&mut [ComplexSpectrogram<T>], f64)>,
) -> Result<BaseComponents> {
    let mut total = BaseComponents::default();
    for (n, &r) in order.iter().enumerate() {
        let g = grad.as_mut().map(|(g, w)| (&mut g[n], *w));
        total.add(&base_eval(&est[n], &refs[r], g)?);
    }
    Ok(total)
}

/// Minimum over all output↔reference permutations. Each permutation is
/// scored from scratch, so `evaluations = N!·N`. Ties resolve to the
/// lexicographically first permutation (identity first).
pub fn pit_loss<T: Real>(
    est: &[ComplexSpectrogram<T>],
    refs: &[ComplexSpectrogram<T>],
) -> Result<(f64, Assignment, LossBreakdown)> {
    check_counts(est, refs)?;
    let n = est.len();
    let mut evaluations = 0;
    let mut best: Option<(f64, Vec<usize>, BaseComponents)> = None;
    for perm in (0..n).permutations(n) {
        let c = assigned_sum(est, refs, &perm, None)?;
        evaluations += n;
        if best.as_ref().map_or(true, |(b, ..)| c.total() < *b) {
            best = Some((c.total(), perm, c));
        }
    }
    let (loss, order, components) = best.expect("at least one permutation");
    let breakdown = LossBreakdown {
        total: loss,
        final_term: loss,
        tap_terms: Vec::new(),
        base_components: components,
        evaluations,
        orders: vec![order.clone()],
    };
    Ok((loss, Assignment::new(order, AssignmentKind::PitArgmin)?, breakdown))
}

/// Loss under a fixed assignment; `evaluations = N`.
pub fn lbt_loss<T: Real>(
    est: &[ComplexSpectrogram<T>],
    refs: &[ComplexSpectrogram<T>],
    assign: &Assignment,
) -> Result<(f64, LossBreakdown)> {
    check_counts(est, refs)?;
    check_assignment(assign, est.len())?;
    let c = assigned_sum(est, refs, &assign.order, None)?;
    let breakdown = LossBreakdown {
        total: c.total(),
        final_term: c.total(),
        tap_terms: Vec::new(),
        base_components: c,
        evaluations: est.len(),
        orders: vec![assign.order.clone()],
    };
    Ok((c.total(), breakdown))
}

fn check_assignment(assign: &Assignment, n: usize) -> Result<()> {
    if assign.len() != n {
        return Err(Error::InvalidInput(format!(
            "assignment covers {} outputs, have {n}",
            assign.len()
        )));
    }
    Assignment::new(assign.order.clone(), assign.kind).map(|_| ())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SortKey {
    Azimuth,
    Distance,
}

/// Where a speaker sits relative to the array center.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpeakerLocation {
    pub azimuth_deg: f64,
    pub distance_m: f64,
}

/// Location-based ordering: active speakers in ascending azimuth (or
/// distance) order, then inactive speakers (whose targets are zero) in
/// index order. Equal keys keep index order.
pub fn lbt_assignment(locations: &[SpeakerLocation], key: SortKey, active: &[bool]) -> Result<Assignment> {
    if locations.len() != active.len() || locations.is_empty() {
        return Err(Error::InvalidInput(format!(
            "{} speaker locations vs {} activity flags",
            locations.len(),
            active.len()
        )));
    }
    let value = |i: usize| match key {
        SortKey::Azimuth => locations[i].azimuth_deg,
        SortKey::Distance => locations[i].distance_m,
    };
    if (0..locations.len()).any(|i| !value(i).is_finite()) {
        return Err(Error::InvalidInput("non-finite speaker location".into()));
    }
    let mut order: Vec<usize> = (0..locations.len()).filter(|&i| active[i]).collect();
    order.sort_by(|&a, &b| value(a).total_cmp(&value(b)));
    order.extend((0..locations.len()).filter(|&i| !active[i]));
    let kind = if active.iter().all(|&a| a) {
        match key {
            SortKey::Azimuth => AssignmentKind::Azimuth,
            SortKey::Distance => AssignmentKind::Distance,
        }
    } else {
        AssignmentKind::SingleActive
    };
    Assignment::new(order, kind)
}

fn pool2<T: Real>(x: &Array2<T>) -> Array2<T> {
    let (h, w) = x.dim();
    let q = T::of(0.25);
    Array2::from_shape_fn((h / 2, w / 2), |(i, j)| {
        (x[[2 * i, 2 * j]] + x[[2 * i, 2 * j + 1]] + x[[2 * i + 1, 2 * j]] + x[[2 * i + 1, 2 * j + 1]]) * q
    })
}

/// 2×2 stride-2 average pooling applied `times` times, independently to the
/// real and imaginary planes.
pub fn pool_target<T: Real>(spec: &ComplexSpectrogram<T>, times: usize) -> Result<ComplexSpectrogram<T>> {
    let m = 1usize << times;
    let (h, w) = spec.shape();
    if h % m != 0 || w % m != 0 {
        return Err(Error::InvalidInput(format!(
            "spectrogram {h}×{w} not divisible by {m} for {times}-fold pooling"
        )));
    }
    let mut out = spec.clone();
    for _ in 0..times {
        out = ComplexSpectrogram {
            real: pool2(&out.real),
            imag: pool2(&out.imag),
        };
    }
    Ok(out)
}

/// How the speaker assignment of a training example is chosen.
#[derive(Debug, Clone, PartialEq)]
pub enum AssignmentRule {
    /// PIT argmin on the final full-resolution estimates.
    Pit,
    Fixed(Assignment),
}

/// Full-resolution term plus, when `multiresolution` is set, one term per
/// decoder tap against targets pooled to the tap's grid. One assignment is
/// used for every term. Returns the gradient with respect to every output
/// when `want_grad` is set (taps get zero gradient without
/// multiresolution).
pub fn criterion_loss<T: Real>(
    output: &SeparatorOutput<T>,
    refs: &[ComplexSpectrogram<T>],
    rule: &AssignmentRule,
    multiresolution: bool,
    want_grad: bool,
) -> Result<(LossBreakdown, Assignment, Option<SeparatorOutput<T>>)> {
    check_counts(&output.estimates, refs)?;
    let (assign, pit_evals) = match rule {
        AssignmentRule::Pit => {
            let (_, a, b) = pit_loss(&output.estimates, refs)?;
            (a, b.evaluations)
        }
        AssignmentRule::Fixed(a) => {
            check_assignment(a, refs.len())?;
            (a.clone(), 0)
        }
    };
    let mut grad = want_grad.then(|| SeparatorOutput::zeros_like(output));
    let fin = assigned_sum(
        &output.estimates,
        refs,
        &assign.order,
        grad.as_mut().map(|g| (&mut g.estimates[..], 1.0)),
    )?;
    let mut bd = LossBreakdown {
        total: fin.total(),
        final_term: fin.total(),
        tap_terms: Vec::new(),
        base_components: fin,
        evaluations: refs.len(),
        orders: vec![assign.order.clone()],
    };
    if multiresolution {
        let kd = output.taps.len() + 1;
        for (k0, tap) in output.taps.iter().enumerate() {
            let times = kd - (k0 + 1);
            let pooled = refs.iter().map(|r| pool_target(r, times)).collect::<Result<Vec<_>>>()?;
            for (n, p) in pooled.iter().enumerate() {
                if tap[n].shape() != p.shape() {
                    return Err(Error::InvalidInput(format!(
                        "decoder tap {} has shape {:?}, pooled target {:?}",
                        k0 + 1,
                        tap[n].shape(),
                        p.shape()
                    )));
                }
            }
            let c = assigned_sum(
                tap,
                &pooled,
                &assign.order,
                grad.as_mut().map(|g| (&mut g.taps[k0][..], 1.0)),
            )?;
            bd.tap_terms.push(c.total());
            bd.total += c.total();
            bd.evaluations += refs.len();
            bd.orders.push(assign.order.clone());
        }
    }
    bd.evaluations += pit_evals;
    Ok((bd, assign, grad))
}

/// Multi-resolution loss under a given assignment. `refs` live on the
/// padded full-resolution grid; the number of taps defines `K_d − 1`.
pub fn multires_loss<T: Real>(
    output: &SeparatorOutput<T>,
    refs: &[ComplexSpectrogram<T>],
    assign: &Assignment,
) -> Result<LossBreakdown> {
    criterion_loss(output, refs, &AssignmentRule::Fixed(assign.clone()), true, false).map(|(b, ..)| b)
}

/// Per-segment training targets at the reference microphone.
#[derive(Debug, Clone)]
pub struct SegmentTargets {
    pub specs: Vec<ComplexSpectrogram>,
    pub active: Vec<bool>,
}

impl SegmentTargets {
    /// Number of active speakers: 0, 1 or 2.
    pub fn active_count(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }
}

/// Spectrograms of the scaled references over `window` (zero-padded past
/// their end). A speaker with no active hop inside the window gets an
/// all-zero target. `activity` holds one flag per frame shift.
pub fn make_segment_targets(
    references: &[Waveform],
    activity: &[Vec<bool>],
    window: std::ops::Range<usize>,
    scale: f32,
    cfg: &StftConfig,
) -> Result<SegmentTargets> {
    if references.len() != activity.len() {
        return Err(Error::InvalidInput("one activity track per reference required".into()));
    }
    let len = window.len();
    let frames = cfg.frames_for(len);
    let hops = window.start / cfg.frame_shift..window.end.div_ceil(cfg.frame_shift);
    let mut specs = Vec::with_capacity(references.len());
    let mut active = Vec::with_capacity(references.len());
    for (r, act) in references.iter().zip(activity) {
        let on = act.get(hops.start.min(act.len())..hops.end.min(act.len())).is_some_and(|a| a.iter().any(|&b| b));
        active.push(on);
        if !on || len == 0 {
            specs.push(ComplexSpectrogram::zeros(frames, cfg.bins()));
            continue;
        }
        let x = r.channel(0);
        let mut seg = ndarray::Array1::<f32>::zeros(len);
        for (i, v) in seg.iter_mut().enumerate() {
            if let Some(&s) = x.get(window.start + i) {
                *v = s * scale;
            }
        }
        specs.push(stft_channel(seg.view(), cfg)?);
    }
    Ok(SegmentTargets { specs, active })
}
