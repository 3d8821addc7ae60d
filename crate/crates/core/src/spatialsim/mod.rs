//! Simulated two-speaker recordings from a 7-channel circular array in
//! random shoebox rooms.
//!
//! Coordinates are meters with the origin in a room corner; azimuths are
//! degrees counter-clockwise from the +x axis around the array center.

mod corpus;
mod dataset;
mod meeting;
mod rir;

pub use corpus::{Corpus, CorpusSource, SyntheticVoice};
pub use dataset::{
    build_dataset, build_meetings, load_manifest, DatasetConfig, LoadedExample, ManifestRecord, MeetingConfig,
};
pub use meeting::{simulate_meeting, Meeting};
pub use rir::{convolve_many, default_max_order, image_rir, image_rirs, reflection_coefficient};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dsp::{StftConfig, Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::losses::SpeakerLocation;

pub const SPEED_OF_SOUND: f64 = 343.0;
pub const NUM_MICS: usize = 7;

pub type Point = [f64; 3];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoomSpec {
    pub length: f64,
    pub width: f64,
    pub height: f64,
    pub t60: f64,
}

impl RoomSpec {
    pub fn dims(&self) -> [f64; 3] {
        [self.length, self.width, self.height]
    }

    pub fn volume(&self) -> f64 {
        self.length * self.width * self.height
    }

    pub fn surface(&self) -> f64 {
        2.0 * (self.length * self.width + self.length * self.height + self.width * self.height)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims().iter().any(|&d| !(d.is_finite() && d > 0.0)) || !(self.t60.is_finite() && self.t60 > 0.0) {
            return Err(Error::InvalidGeometry(format!("invalid room {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayGeometry {
    pub center: Point,
    /// Microphone 0 sits at the center; 1..=6 on the circle at 0°, 60°, ...
    pub mic_positions: Vec<Point>,
}

impl ArrayGeometry {
    pub fn circular(center: Point, radius: f64) -> Self {
        let mut mic_positions = vec![center];
        for k in 0..6 {
            let a = (k as f64 * 60.0).to_radians();
            mic_positions.push([center[0] + radius * a.cos(), center[1] + radius * a.sin(), center[2]]);
        }
        Self { center, mic_positions }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpeakerPlacement {
    pub azimuth_deg: f64,
    /// Horizontal distance from the array center.
    pub distance_m: f64,
    pub height_m: f64,
}

impl SpeakerPlacement {
    pub fn position(&self, array_center: &Point) -> Point {
        let a = self.azimuth_deg.to_radians();
        [
            array_center[0] + self.distance_m * a.cos(),
            array_center[1] + self.distance_m * a.sin(),
            self.height_m,
        ]
    }

    pub fn location(&self) -> SpeakerLocation {
        SpeakerLocation {
            azimuth_deg: self.azimuth_deg,
            distance_m: self.distance_m,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub room: RoomSpec,
    pub array: ArrayGeometry,
    pub speakers: Vec<SpeakerPlacement>,
    pub noise_snr: f64,
    pub seed: u64,
}

impl SceneSpec {
    pub fn locations(&self) -> Vec<SpeakerLocation> {
        self.speakers.iter().map(SpeakerPlacement::location).collect()
    }

    pub fn speaker_position(&self, i: usize) -> Point {
        self.speakers[i].position(&self.array.center)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub length: (f64, f64),
    pub width: (f64, f64),
    pub height: (f64, f64),
    pub t60: (f64, f64),
    pub snr_db: (f64, f64),
    pub array_radius: f64,
    pub array_height: f64,
    pub speaker_height: (f64, f64),
    pub min_distance: f64,
    pub wall_margin: f64,
    /// Minimum difference between the two speakers' array distances.
    pub min_distance_gap: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            length: (5.0, 10.0),
            width: (5.0, 10.0),
            height: (3.0, 4.0),
            t60: (0.2, 0.6),
            snr_db: (10.0, 30.0),
            array_radius: 0.0425,
            array_height: 1.0,
            speaker_height: (1.2, 2.0),
            min_distance: 0.5,
            wall_margin: 0.1,
            min_distance_gap: 0.05,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let ranges = [
            ("length", self.length),
            ("width", self.width),
            ("height", self.height),
            ("t60", self.t60),
            ("snr_db", self.snr_db),
            ("speaker_height", self.speaker_height),
        ];
        for (name, (lo, hi)) in ranges {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::Config(format!("{name} range ({lo}, {hi}) is empty")));
            }
        }
        if self.length.0 <= 0.0 || self.width.0 <= 0.0 || self.t60.0 <= 0.0 {
            return Err(Error::Config("room dimensions and t60 must be positive".into()));
        }
        let m = self.wall_margin;
        if self.speaker_height.0 < m || self.speaker_height.1 > self.height.0 - m {
            return Err(Error::Config("speaker heights do not fit inside the room".into()));
        }
        if self.array_height <= 0.0 || self.array_height >= self.height.0 {
            return Err(Error::Config("array height outside the room".into()));
        }
        let reach = self.length.0.min(self.width.0) / 2.0 - m;
        if self.array_radius <= 0.0 || self.array_radius >= reach {
            return Err(Error::Config("array radius must be positive and fit inside the room".into()));
        }
        if self.min_distance < 0.0 || self.min_distance_gap < 0.0 || m < 0.0 {
            return Err(Error::Config("distances and margins must be non-negative".into()));
        }
        Ok(())
    }
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

/// Largest horizontal distance along `azimuth` keeping the wall margin.
fn max_distance(room: &RoomSpec, azimuth_deg: f64, margin: f64) -> f64 {
    let a = azimuth_deg.to_radians();
    let (c, s) = (a.cos().abs(), a.sin().abs());
    let lim = |half: f64, proj: f64| if proj < 1e-12 { f64::INFINITY } else { (half - margin) / proj };
    lim(room.length / 2.0, c).min(lim(room.width / 2.0, s))
}

const MAX_ATTEMPTS: usize = 1000;

/// Deterministic random scene: room, centered array and two speakers on
/// the integer-degree azimuth grid.
pub fn sample_scene(seed: u64, cfg: &SceneConfig) -> Result<SceneSpec> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let room = RoomSpec {
        length: uniform(&mut rng, cfg.length),
        width: uniform(&mut rng, cfg.width),
        height: uniform(&mut rng, cfg.height),
        t60: uniform(&mut rng, cfg.t60),
    };
    let center = [room.length / 2.0, room.width / 2.0, cfg.array_height];
    let mut speakers: Vec<SpeakerPlacement> = Vec::with_capacity(2);
    let mut attempts = 0;
    while speakers.len() < 2 {
        attempts += 1;
        if attempts > MAX_ATTEMPTS {
            return Err(Error::Config(format!(
                "no valid speaker placement after {MAX_ATTEMPTS} attempts; widen the room or relax the distance limits"
            )));
        }
        let azimuth_deg = rng.gen_range(-179..=180) as f64;
        let dmax = max_distance(&room, azimuth_deg, cfg.wall_margin);
        if dmax < cfg.min_distance {
            continue;
        }
        let distance_m = uniform(&mut rng, (cfg.min_distance, dmax));
        let height_m = uniform(&mut rng, cfg.speaker_height);
        if let Some(first) = speakers.first() {
            if first.azimuth_deg == azimuth_deg || (first.distance_m - distance_m).abs() < cfg.min_distance_gap {
                continue;
            }
        }
        speakers.push(SpeakerPlacement {
            azimuth_deg,
            distance_m,
            height_m,
        });
    }
    Ok(SceneSpec {
        room,
        array: ArrayGeometry::circular(center, cfg.array_radius),
        speakers,
        noise_snr: uniform(&mut rng, cfg.snr_db),
        seed,
    })
}

/// Reverberant images at every microphone and the direct-path image at
/// microphone 0. Both are cropped to the input length, so callers that
/// want the reverberant tail should pad the input with zeros.
pub fn render_source(utterance: &Waveform, scene: &SceneSpec, speaker_index: usize) -> Result<(Waveform, Waveform)> {
    if speaker_index >= scene.speakers.len() {
        return Err(Error::InvalidInput(format!(
            "speaker index {speaker_index} outside 0..{}",
            scene.speakers.len()
        )));
    }
    if utterance.channels() != 1 {
        return Err(Error::InvalidInput("source utterance must be mono".into()));
    }
    let src = scene.speaker_position(speaker_index);
    let mut filters = image_rirs(&scene.room, &src, &scene.array.mic_positions, default_max_order(&scene.room))?;
    filters.push(image_rir(&scene.room, &src, &scene.array.mic_positions[0], 0)?);
    let x = utterance.channel(0).to_vec();
    let n = x.len();
    let mut ys = convolve_many(&x, &filters);
    let direct = ys.pop().expect("direct filter");
    let crop = |mut v: Vec<f32>| {
        v.resize(n, 0.0);
        v
    };
    let reverberant = Waveform::from_channels(&ys.into_iter().map(crop).collect::<Vec<_>>())?;
    Ok((reverberant, Waveform::mono(crop(direct))?))
}

/// One simulated recording with everything needed for supervision and
/// checks.
#[derive(Debug, Clone)]
pub struct MixtureExample {
    /// Un-normalized, `[7, time]`.
    pub mixture: Waveform,
    /// Direct-path images at microphone 0.
    pub references: [Waveform; 2],
    pub reverberant: [Waveform; 2],
    /// Exactly what was added on top of the reverberant speech.
    pub noise: Waveform,
    /// Per STFT frame: the placed dry source has nonzero samples in the
    /// frame's hop `[t·shift, (t+1)·shift)`.
    pub activity: [Vec<bool>; 2],
    pub scene: SceneSpec,
    pub overlap_ratio: f64,
    pub snr_db: f64,
}

pub(crate) fn activity_of(x: &[f32], shift: usize) -> Vec<bool> {
    x.chunks(shift).map(|c| c.iter().any(|&v| v != 0.0)).collect()
}

fn mean_power(x: ndarray::ArrayView1<f32>) -> f64 {
    x.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / x.len().max(1) as f64
}

/// Renders two already time-placed dry sources (equal length) through the
/// scene and adds white noise at the scene's SNR relative to the summed
/// reverberant speech at microphone 0.
pub(crate) fn render_scene(placed: [&[f32]; 2], scene: &SceneSpec, snr_db: f64, rng: &mut impl Rng) -> Result<MixtureExample> {
    let n = placed[0].len();
    if placed[1].len() != n {
        return Err(Error::InvalidInput("placed sources differ in length".into()));
    }
    let (rev_a, dir_a) = render_source(&Waveform::mono(placed[0].to_vec())?, scene, 0)?;
    let (rev_b, dir_b) = render_source(&Waveform::mono(placed[1].to_vec())?, scene, 1)?;
    let speech = rev_a.samples() + rev_b.samples();
    let p_speech = mean_power(speech.row(0));
    if p_speech <= 0.0 {
        return Err(Error::DegenerateInput("rendered speech is silent at the reference microphone".into()));
    }
    let mut noise = Array2::<f32>::zeros((NUM_MICS, n));
    noise.mapv_inplace(|_| {
        let v: f64 = StandardNormal.sample(rng);
        v as f32
    });
    let p_noise = mean_power(noise.row(0));
    let gain = (p_speech / (p_noise * 10f64.powf(snr_db / 10.0))).sqrt() as f32;
    noise.mapv_inplace(|v| v * gain);
    let mixture = &speech + &noise;
    // Store the noise as actually realized in f32 arithmetic.
    let noise = &mixture - &speech;
    let shift = StftConfig::default().frame_shift;
    Ok(MixtureExample {
        mixture: Waveform::new(mixture, SAMPLE_RATE)?,
        references: [dir_a, dir_b],
        reverberant: [rev_a, rev_b],
        noise: Waveform::new(noise, SAMPLE_RATE)?,
        activity: [activity_of(placed[0], shift), activity_of(placed[1], shift)],
        scene: scene.clone(),
        overlap_ratio: 0.0,
        snr_db,
    })
}

/// Mixes two utterances into a `len`-sample recording where the span
/// covered by both is `overlap_ratio · len` (rounded to the frame shift).
///
/// Utterance `a` starts at 0 and `b` ends at `len`; the split of the
/// non-overlapped time between them is drawn from the scene seed. Each
/// utterance is cropped at a random offset to its span.
pub fn mix_segment(
    utt_a: &Waveform,
    utt_b: &Waveform,
    scene: &SceneSpec,
    overlap_ratio: f64,
    snr_db: f64,
    len: usize,
) -> Result<MixtureExample> {
    if !(0.0..1.0).contains(&overlap_ratio) {
        return Err(Error::InvalidInput(format!("overlap ratio {overlap_ratio} outside [0, 1)")));
    }
    if !(10.0..=30.0).contains(&snr_db) {
        return Err(Error::InvalidInput(format!("SNR {snr_db} dB outside [10, 30]")));
    }
    let shift = StftConfig::default().frame_shift;
    if len == 0 || len % shift != 0 {
        return Err(Error::InvalidInput(format!("mixture length {len} must be a positive multiple of {shift}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(scene.seed ^ 0x6d69_785f_7365_6764);
    let hops = len / shift;
    let o = (overlap_ratio * hops as f64).round() as usize;
    let free = hops - o;
    let u = rng.gen_range(0.25..=0.75);
    let na = (u * free as f64).round() as usize;
    let na = if free >= 2 { na.clamp(1, free - 1) } else { free };
    let la = o + na;
    let lb = hops + o - la;
    let (la, lb) = (la * shift, lb * shift);
    let crop = |w: &Waveform, need: usize, rng: &mut ChaCha8Rng| -> Result<Vec<f32>> {
        if w.channels() != 1 {
            return Err(Error::InvalidInput("source utterance must be mono".into()));
        }
        if w.len() < need {
            return Err(Error::InvalidInput(format!(
                "utterance of {} samples cannot fill a {need}-sample span",
                w.len()
            )));
        }
        let off = rng.gen_range(0..=w.len() - need);
        Ok(w.channel(0).slice(ndarray::s![off..off + need]).to_vec())
    };
    let a = crop(utt_a, la, &mut rng)?;
    let b = crop(utt_b, lb, &mut rng)?;
    let mut pa = vec![0f32; len];
    pa[..la].copy_from_slice(&a);
    let mut pb = vec![0f32; len];
    pb[len - lb..].copy_from_slice(&b);
    let mut ex = render_scene([&pa, &pb], scene, snr_db, &mut rng)?;
    ex.overlap_ratio = overlap_ratio;
    Ok(ex)
}
