//! Shoebox image-source room impulse responses and FFT convolution.

use realfft::num_complex::Complex;
use realfft::RealFftPlanner;

use super::{Point, RoomSpec, SPEED_OF_SOUND};
use crate::dsp::SAMPLE_RATE;
use crate::error::{Error, Result};

/// Direction-averaged estimate of the wall amplitude reflection
/// coefficient for `room.t60`.
///
/// An image at distance `r` in direction `u` has undergone about
/// `r·Σ|uᵢ|/Lᵢ` reflections and image density cancels spherical spreading,
/// so the late energy envelope is `⟨β^(2ct·g(u))⟩` over directions with
/// `g(u) = Σ|uᵢ|/Lᵢ`. Grazing directions make this decay more slowly than
/// Sabine or Eyring predict; `β` is chosen so the −5..−25 dB fit of its
/// backward integral meets `t60`.
pub fn reflection_coefficient(room: &RoomSpec) -> f64 {
    let dims = room.dims();
    let n = 1024;
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    let g: Vec<f64> = (0..n)
        .map(|i| {
            let z = 1.0 - (i as f64 + 0.5) * 2.0 / n as f64;
            let r = (1.0 - z * z).sqrt();
            let phi = golden * i as f64;
            (r * phi.cos()).abs() / dims[0] + (r * phi.sin()).abs() / dims[1] + z.abs() / dims[2]
        })
        .collect();
    // Backward integral of exp(−τ·g) is exp(−τ·g)/g.
    let edc = |tau: f64| g.iter().map(|&gi| (-tau * gi).exp() / gi).sum::<f64>();
    let e0 = edc(0.0);
    let gmean = g.iter().sum::<f64>() / n as f64;
    let step = 0.02 / gmean;
    let mut fit = LineFit::default();
    let mut tau = 0.0;
    loop {
        let db = 10.0 * (edc(tau) / e0).log10();
        if db < -25.0 {
            break;
        }
        if db <= -5.0 {
            fit.push(tau, db);
        }
        tau += step;
    }
    // With τ = a·t the fitted T60 is (−60/slope)/a.
    let a = (-60.0 / fit.slope()) / room.t60;
    (-a / (2.0 * SPEED_OF_SOUND)).exp()
}

#[derive(Default)]
struct LineFit {
    sx: f64,
    sy: f64,
    sxx: f64,
    sxy: f64,
    n: f64,
}

impl LineFit {
    fn push(&mut self, x: f64, y: f64) {
        self.sx += x;
        self.sy += y;
        self.sxx += x * x;
        self.sxy += x * y;
        self.n += 1.0;
    }

    fn slope(&self) -> f64 {
        (self.n * self.sxy - self.sx * self.sy) / (self.n * self.sxx - self.sx * self.sx)
    }
}

/// Reflection order beyond which every image is at least 60 dB below the
/// direct path.
pub fn default_max_order(room: &RoomSpec) -> usize {
    let beta = reflection_coefficient(room);
    if beta <= 0.0 {
        return 0;
    }
    ((1e-3f64).ln() / beta.ln()).ceil() as usize
}

/// Impulse-response length in samples: direct delay plus one T60.
fn rir_len(room: &RoomSpec, direct: f64) -> usize {
    ((direct / SPEED_OF_SOUND + room.t60) * SAMPLE_RATE as f64).ceil() as usize + 1
}

fn check_inside(room: &RoomSpec, p: &Point, what: &str) -> Result<()> {
    let dims = room.dims();
    if (0..3).any(|a| !(p[a] > 0.0 && p[a] < dims[a])) {
        return Err(Error::InvalidGeometry(format!(
            "{what} at {p:?} is not strictly inside the {}×{}×{} m room",
            dims[0], dims[1], dims[2]
        )));
    }
    Ok(())
}

/// Image coordinates along one axis: (position, number of wall bounces).
fn axis_images(src: f64, len: f64, reach: f64, max_order: usize) -> Vec<(f64, usize)> {
    let nmax = (reach / (2.0 * len)).ceil() as i64 + 1;
    let mut out = Vec::new();
    for n in -nmax..=nmax {
        for u in 0..2i64 {
            let pos = (1 - 2 * u) as f64 * src + 2.0 * n as f64 * len;
            let bounces = ((n - u).unsigned_abs() + n.unsigned_abs()) as usize;
            if bounces <= max_order {
                out.push((pos, bounces));
            }
        }
    }
    out
}

/// `(delay sample, distance, bounces)` of every image inside the response
/// window.
fn images(room: &RoomSpec, src: &Point, mic: &Point, max_order: usize) -> (usize, Vec<(usize, f64, i32)>) {
    let dims = room.dims();
    let fs = SAMPLE_RATE as f64;
    let len = rir_len(room, dist(src, mic));
    let reach = (len - 1) as f64 / fs * SPEED_OF_SOUND;
    let ax: Vec<Vec<(f64, usize)>> = (0..3).map(|a| axis_images(src[a], dims[a], reach, max_order)).collect();
    let reach2 = reach * reach;
    let mut out = Vec::new();
    for &(x, bx) in &ax[0] {
        let dx2 = (x - mic[0]).powi(2);
        if dx2 > reach2 {
            continue;
        }
        for &(y, by) in &ax[1] {
            let dxy2 = dx2 + (y - mic[1]).powi(2);
            if dxy2 > reach2 || bx + by > max_order {
                continue;
            }
            for &(z, bz) in &ax[2] {
                let b = bx + by + bz;
                let d2 = dxy2 + (z - mic[2]).powi(2);
                if d2 > reach2 || b > max_order {
                    continue;
                }
                let d = d2.sqrt();
                let k = (d / SPEED_OF_SOUND * fs).round() as usize;
                if k < len {
                    out.push((k, d, b as i32));
                }
            }
        }
    }
    (len, out)
}

/// Impulse responses from `src` to each microphone.
///
/// Every image with at most `max_order` reflections and a delay inside the
/// response window (direct delay plus T60) contributes `β^bounces / (4π d)`
/// at the nearest sample of its delay, followed by a 100 Hz high-pass that
/// leaves the first (direct) tap untouched. `max_order = 0` yields the
/// unfiltered direct path only.
pub fn image_rirs(room: &RoomSpec, src: &Point, mics: &[Point], max_order: usize) -> Result<Vec<Vec<f32>>> {
    room.validate()?;
    check_inside(room, src, "source")?;
    for mic in mics {
        check_inside(room, mic, "microphone")?;
    }
    let beta = reflection_coefficient(room);
    let out = mics
        .iter()
        .map(|mic| {
            let (len, imgs) = images(room, src, mic, max_order);
            let mut h = vec![0f64; len];
            for (k, d, b) in imgs {
                h[k] += beta.powi(b) / (4.0 * std::f64::consts::PI * d);
            }
            if max_order > 0 {
                highpass(&mut h);
            }
            h.into_iter().map(|v| v as f32).collect()
        })
        .collect();
    Ok(out)
}

/// Allen–Berkley 100 Hz high-pass. Rounded delays of all-positive images
/// add coherently and build up a spurious low-frequency tail.
fn highpass(h: &mut [f64]) {
    let w = std::f64::consts::TAU * 100.0 / SAMPLE_RATE as f64;
    let r1 = (-w).exp();
    let b1 = 2.0 * r1 * w.cos();
    let b2 = -r1 * r1;
    let a1 = -(1.0 + r1);
    let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
    for v in h.iter_mut() {
        let x0 = *v;
        let y0 = b1 * y1 + b2 * y2 + x0 + a1 * x1 + r1 * x2;
        x2 = x1;
        x1 = x0;
        y2 = y1;
        y1 = y0;
        *v = y0;
    }
}

pub fn image_rir(room: &RoomSpec, src: &Point, mic: &Point, max_order: usize) -> Result<Vec<f32>> {
    Ok(image_rirs(room, src, std::slice::from_ref(mic), max_order)?.remove(0))
}

pub(crate) fn dist(a: &Point, b: &Point) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Full linear convolution of `x` with each filter, sharing one forward
/// transform of `x`.
pub fn convolve_many(x: &[f32], filters: &[Vec<f32>]) -> Vec<Vec<f32>> {
    let hmax = filters.iter().map(Vec::len).max().unwrap_or(0);
    if x.is_empty() || hmax == 0 {
        return filters.iter().map(|_| Vec::new()).collect();
    }
    let n = (x.len() + hmax - 1).next_power_of_two();
    let mut planner = RealFftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let spectrum = |v: &[f32]| {
        let mut buf = vec![0f64; n];
        for (b, &s) in buf.iter_mut().zip(v) {
            *b = s as f64;
        }
        let mut spec = fwd.make_output_vec();
        fwd.process(&mut buf, &mut spec).expect("fft length");
        spec
    };
    let xs = spectrum(x);
    filters
        .iter()
        .map(|h| {
            if h.is_empty() {
                return Vec::new();
            }
            let hs = spectrum(h);
            let mut prod: Vec<Complex<f64>> = xs.iter().zip(&hs).map(|(a, b)| a * b).collect();
            // Imaginary parts of DC and Nyquist must be exactly zero.
            prod[0].im = 0.0;
            prod[n / 2].im = 0.0;
            let mut time = inv.make_output_vec();
            inv.process(&mut prod, &mut time).expect("fft length");
            let scale = 1.0 / n as f64;
            time[..x.len() + h.len() - 1].iter().map(|v| (v * scale) as f32).collect()
        })
        .collect()
}
