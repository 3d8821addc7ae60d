//! Source utterances: either a directory of per-speaker WAV files or a
//! procedural corpus of voiced syllables separated by silent pauses.

use std::f64::consts::TAU;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::{read_wav, Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum CorpusSource {
    Synthetic { speakers: usize, seed: u64 },
    /// One sub-directory per speaker, each holding mono 16 kHz WAV files.
    Wav { dir: PathBuf },
}

impl Default for CorpusSource {
    fn default() -> Self {
        CorpusSource::Synthetic { speakers: 40, seed: 1 }
    }
}

/// Speaker-specific parameters of the procedural voice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticVoice {
    pub f0: f64,
    /// Vocal-tract scaling applied to the vowel formant table.
    pub tract: f64,
    /// Spectral tilt in dB per octave above 200 Hz.
    pub tilt_db: f64,
}

const VOWELS: [[f64; 3]; 6] = [
    [730.0, 1090.0, 2440.0],
    [530.0, 1840.0, 2480.0],
    [270.0, 2290.0, 3010.0],
    [570.0, 840.0, 2410.0],
    [300.0, 870.0, 2240.0],
    [660.0, 1720.0, 2410.0],
];

impl SyntheticVoice {
    pub fn sample(rng: &mut impl Rng) -> Self {
        let female = rng.gen_bool(0.5);
        Self {
            f0: if female { rng.gen_range(165.0..255.0) } else { rng.gen_range(85.0..155.0) },
            tract: if female { rng.gen_range(1.05..1.2) } else { rng.gen_range(0.88..1.02) },
            tilt_db: rng.gen_range(-9.0..-5.0),
        }
    }

    fn envelope(&self, f: f64, formants: &[f64; 3]) -> f64 {
        let mut g = 0.0;
        for (i, &fc) in formants.iter().enumerate() {
            let fc = fc * self.tract;
            let bw = 60.0 + 40.0 * i as f64;
            g += 1.0 / (1.0 + ((f - fc) / bw).powi(2)) / (1.0 + i as f64);
        }
        let octaves = (f / 200.0).max(1.0).log2();
        (g + 0.02) * 10f64.powf(self.tilt_db * octaves / 20.0)
    }

    /// An utterance of at least `min_len` samples: voiced syllables with
    /// gliding pitch and occasional fricative onsets, separated by pauses of
    /// exact digital silence. Leading and trailing samples are nonzero.
    pub fn utterance(&self, rng: &mut impl Rng, min_len: usize) -> Vec<f32> {
        let fs = SAMPLE_RATE as f64;
        let mut out: Vec<f64> = Vec::with_capacity(min_len + 8000);
        loop {
            let dur = (rng.gen_range(0.12..0.35) * fs) as usize;
            let formants = VOWELS[rng.gen_range(0..VOWELS.len())];
            let next = VOWELS[rng.gen_range(0..VOWELS.len())];
            let f0a = self.f0 * rng.gen_range(0.85..1.15);
            let f0b = self.f0 * rng.gen_range(0.85..1.15);
            let fric = rng.gen_bool(0.3);
            let fric_len = (0.04 * fs) as usize;
            let mut phase = 0.0;
            let mut amps: Vec<f64> = Vec::new();
            for n in 0..dur {
                let t = n as f64 / dur as f64;
                let f0 = f0a + (f0b - f0a) * t;
                phase += TAU * f0 / fs;
                // Harmonic amplitudes are refreshed every 5 ms.
                if n % 80 == 0 {
                    let mix: [f64; 3] = std::array::from_fn(|i| formants[i] + (next[i] - formants[i]) * t * 0.5);
                    let count = (5000.0 / f0) as usize;
                    amps = (1..=count).map(|h| self.envelope(h as f64 * f0, &mix)).collect();
                }
                let mut v = 0.0;
                for (h, a) in amps.iter().enumerate() {
                    v += a * ((h + 1) as f64 * phase).sin();
                }
                let amp = (std::f64::consts::PI * t).sin().max(0.02);
                v *= amp;
                if fric && n < fric_len {
                    v += 0.3 * rng.gen_range(-1.0..1.0) * (1.0 - n as f64 / fric_len as f64);
                }
                out.push(if v == 0.0 { 1e-6 } else { v });
            }
            if out.len() >= min_len {
                break;
            }
            if rng.gen_bool(0.35) {
                let pause = (rng.gen_range(0.06..0.3) * fs) as usize;
                out.extend(std::iter::repeat(0.0).take(pause));
            }
        }
        let rms = (out.iter().map(|v| v * v).sum::<f64>() / out.len() as f64).sqrt();
        out.iter().map(|v| (0.1 * v / rms) as f32).collect()
    }
}

#[derive(Debug, Clone)]
enum Speakers {
    Synthetic(Vec<SyntheticVoice>),
    Wav(Vec<Vec<PathBuf>>),
}

/// A set of speakers to draw source utterances from.
#[derive(Debug, Clone)]
pub struct Corpus {
    speakers: Speakers,
}

impl Corpus {
    pub fn open(source: &CorpusSource) -> Result<Self> {
        match source {
            CorpusSource::Synthetic { speakers, seed } => Self::synthetic(*speakers, *seed),
            CorpusSource::Wav { dir } => Self::from_dir(dir),
        }
    }

    pub fn synthetic(speakers: usize, seed: u64) -> Result<Self> {
        if speakers < 2 {
            return Err(Error::Config("the corpus needs at least two speakers".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            speakers: Speakers::Synthetic((0..speakers).map(|_| SyntheticVoice::sample(&mut rng)).collect()),
        })
    }

    /// Scans `dir/<speaker>/*.wav` and checks every file is a readable mono
    /// 16 kHz WAV; all offending files are reported together.
    pub fn from_dir(dir: &Path) -> Result<Self> {
        let mut speakers = Vec::new();
        let mut bad = Vec::new();
        let mut subdirs: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        subdirs.sort();
        for sd in subdirs {
            let mut files: Vec<PathBuf> = std::fs::read_dir(&sd)
                .map_err(|e| Error::io(&sd, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
                .collect();
            files.sort();
            for f in &files {
                let ok = hound::WavReader::open(f)
                    .map(|r| r.spec().channels == 1 && r.spec().sample_rate == SAMPLE_RATE)
                    .unwrap_or(false);
                if !ok {
                    bad.push(f.clone());
                }
            }
            if !files.is_empty() {
                speakers.push(files);
            }
        }
        if !bad.is_empty() {
            return Err(Error::UnreadableFiles(bad));
        }
        if speakers.len() < 2 {
            return Err(Error::Config(format!(
                "{} holds {} speaker directories with WAV files; need at least two",
                dir.display(),
                speakers.len()
            )));
        }
        Ok(Self {
            speakers: Speakers::Wav(speakers),
        })
    }

    pub fn num_speakers(&self) -> usize {
        match &self.speakers {
            Speakers::Synthetic(v) => v.len(),
            Speakers::Wav(v) => v.len(),
        }
    }

    /// A random utterance of `speaker` with at least `min_len` samples.
    /// WAV utterances of one speaker are concatenated when single files are
    /// too short.
    pub fn utterance(&self, speaker: usize, rng: &mut impl Rng, min_len: usize) -> Result<Waveform> {
        match &self.speakers {
            Speakers::Synthetic(v) => {
                let voice = v
                    .get(speaker)
                    .ok_or_else(|| Error::InvalidInput(format!("no speaker {speaker}")))?;
                Waveform::mono(voice.utterance(rng, min_len))
            }
            Speakers::Wav(v) => {
                let files = v
                    .get(speaker)
                    .ok_or_else(|| Error::InvalidInput(format!("no speaker {speaker}")))?;
                let mut out = Vec::new();
                let mut guard = 0;
                while out.len() < min_len.max(1) {
                    let w = read_wav(&files[rng.gen_range(0..files.len())])?;
                    out.extend(w.channel(0).iter());
                    guard += 1;
                    if guard > 10_000 {
                        return Err(Error::InvalidInput(format!("speaker {speaker} has only silent files")));
                    }
                }
                Waveform::mono(out)
            }
        }
    }
}
