//! Long two-speaker sessions for continuous evaluation.

use rand::Rng;

use super::{render_scene, Corpus, MixtureExample, SceneSpec};
use crate::dsp::SAMPLE_RATE;
use crate::error::{Error, Result};

/// A simulated session; `example.references` are the per-speaker
/// direct-path streams over the whole recording.
#[derive(Debug, Clone)]
pub struct Meeting {
    pub example: MixtureExample,
    /// Sample spans `(speaker, start, end)` of each turn.
    pub turns: Vec<(usize, usize, usize)>,
}

/// Alternating turns of two speakers. With `overlap_ratio > 0` each turn
/// starts before the previous one ends so that overlapped time is about
/// `overlap_ratio` of the speech time; with 0 turns are separated by short
/// silences of 0.1–0.5 s.
pub fn simulate_meeting(
    corpus: &Corpus,
    speakers: [usize; 2],
    scene: &SceneSpec,
    overlap_ratio: f64,
    turns: usize,
    rng: &mut impl Rng,
) -> Result<Meeting> {
    if !(0.0..1.0).contains(&overlap_ratio) {
        return Err(Error::InvalidInput(format!("overlap ratio {overlap_ratio} outside [0, 1)")));
    }
    if turns < 2 {
        return Err(Error::InvalidInput("a meeting needs at least two turns".into()));
    }
    let fs = SAMPLE_RATE as f64;
    let lead = (0.3 * fs) as usize;
    let c = overlap_ratio / (1.0 + overlap_ratio);
    let mut utts = Vec::with_capacity(turns);
    let first = rng.gen_range(0..2);
    for i in 0..turns {
        let who = (first + i) % 2;
        let min_len = (rng.gen_range(1.5..3.5) * fs) as usize;
        let u = corpus.utterance(speakers[who], rng, min_len)?;
        utts.push((who, u.channel(0).to_vec()));
    }
    let mut spans = Vec::with_capacity(turns);
    let mut cursor = lead;
    let mut prev_len = 0usize;
    for (i, (who, u)) in utts.iter().enumerate() {
        let start = if i == 0 {
            lead
        } else if overlap_ratio > 0.0 {
            let o = ((c * u.len() as f64) as usize).min((0.9 * prev_len as f64) as usize);
            cursor - o
        } else {
            cursor + (rng.gen_range(0.1..0.5) * fs) as usize
        };
        spans.push((*who, start, start + u.len()));
        cursor = cursor.max(start + u.len());
        prev_len = u.len();
    }
    let len = cursor + (0.5 * fs) as usize;
    let mut placed = [vec![0f32; len], vec![0f32; len]];
    for ((who, start, end), (_, u)) in spans.iter().zip(&utts) {
        for (dst, &v) in placed[*who][*start..*end].iter_mut().zip(u) {
            *dst += v;
        }
    }
    let mut example = render_scene([&placed[0], &placed[1]], scene, scene.noise_snr, rng)?;
    example.overlap_ratio = overlap_ratio;
    Ok(Meeting { example, turns: spans })
}
