//! On-disk datasets: WAV files plus a JSON-lines manifest.

use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{mix_segment, sample_scene, simulate_meeting, Corpus, CorpusSource, MixtureExample, SceneConfig};
use crate::dsp::{read_wav, write_wav, StftConfig, Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::losses::SpeakerLocation;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub count: usize,
    pub seed: u64,
    pub duration_secs: f64,
    pub overlap_ratios: Vec<f64>,
    /// Relative frequency of each overlap ratio; realized exactly up to
    /// rounding.
    pub overlap_weights: Vec<f64>,
    /// Half-open range of corpus speaker indices to draw from.
    pub speakers: Option<(usize, usize)>,
    pub scene: SceneConfig,
    pub corpus: CorpusSource,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            count: 2000,
            seed: 0,
            duration_secs: 2.4,
            overlap_ratios: vec![0.0, 0.1, 0.2, 0.3, 0.4],
            overlap_weights: vec![1.0; 5],
            speakers: None,
            scene: SceneConfig::default(),
            corpus: CorpusSource::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MeetingConfig {
    pub count: usize,
    pub seed: u64,
    pub overlap_ratios: Vec<f64>,
    /// Inclusive range of turns per meeting.
    pub turns: (usize, usize),
    pub speakers: Option<(usize, usize)>,
    pub scene: SceneConfig,
    pub corpus: CorpusSource,
}

impl Default for MeetingConfig {
    fn default() -> Self {
        Self {
            count: 10,
            seed: 0,
            overlap_ratios: vec![0.0, 0.1, 0.2, 0.3, 0.4],
            turns: (8, 10),
            speakers: None,
            scene: SceneConfig::default(),
            corpus: CorpusSource::default(),
        }
    }
}

/// One manifest line. Paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub mixture_path: String,
    pub ref_paths: [String; 2],
    pub azimuth_deg: [f64; 2],
    pub distance_m: [f64; 2],
    pub overlap_ratio: f64,
    pub t60: f64,
    pub snr_db: f64,
    pub seed: u64,
    pub room: [f64; 3],
    /// Per STFT frame, `1` where the speaker's source is active.
    pub activity: [String; 2],
}

/// A manifest record with its audio loaded.
#[derive(Debug, Clone)]
pub struct LoadedExample {
    pub id: String,
    pub mixture: Waveform,
    pub references: [Waveform; 2],
    pub activity: [Vec<bool>; 2],
    pub locations: [SpeakerLocation; 2],
    pub overlap_ratio: f64,
}

fn encode_activity(a: &[bool]) -> String {
    a.iter().map(|&b| if b { '1' } else { '0' }).collect()
}

fn decode_activity(s: &str) -> Result<Vec<bool>> {
    s.chars()
        .map(|c| match c {
            '1' => Ok(true),
            '0' => Ok(false),
            _ => Err(Error::InvalidInput(format!("bad activity character {c:?}"))),
        })
        .collect()
}

impl ManifestRecord {
    pub fn load(&self, base: &Path) -> Result<LoadedExample> {
        let mixture = read_wav(&base.join(&self.mixture_path))?;
        let references = [
            read_wav(&base.join(&self.ref_paths[0]))?,
            read_wav(&base.join(&self.ref_paths[1]))?,
        ];
        for r in &references {
            if r.channels() != 1 || r.len() != mixture.len() {
                return Err(Error::InvalidInput(format!(
                    "{}: references must be mono and as long as the mixture",
                    self.id
                )));
            }
        }
        let loc = |i: usize| SpeakerLocation {
            azimuth_deg: self.azimuth_deg[i],
            distance_m: self.distance_m[i],
        };
        Ok(LoadedExample {
            id: self.id.clone(),
            mixture,
            references,
            activity: [decode_activity(&self.activity[0])?, decode_activity(&self.activity[1])?],
            locations: [loc(0), loc(1)],
            overlap_ratio: self.overlap_ratio,
        })
    }

    /// Condition label used in evaluation breakdowns.
    pub fn condition(&self) -> String {
        condition_label(self.overlap_ratio)
    }
}

pub(crate) fn condition_label(overlap_ratio: f64) -> String {
    if overlap_ratio == 0.0 {
        "0S".into()
    } else {
        format!("OV{:.0}", overlap_ratio * 100.0)
    }
}

pub fn load_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in std::io::BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Per-example seed derived from the master seed.
pub(crate) fn example_seed(master: u64, i: usize) -> u64 {
    splitmix(master ^ splitmix(i as u64))
}

/// Exactly `count` labels with proportions given by `weights` (largest
/// remainder rounding), shuffled.
fn stratified(count: usize, weights: &[f64], rng: &mut impl Rng) -> Result<Vec<usize>> {
    let total: f64 = weights.iter().sum();
    if weights.is_empty() || weights.iter().any(|&w| !(w >= 0.0)) || total <= 0.0 {
        return Err(Error::Config("overlap weights must be non-negative with a positive sum".into()));
    }
    let exact: Vec<f64> = weights.iter().map(|w| w / total * count as f64).collect();
    let mut n: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut rem: Vec<usize> = (0..weights.len()).collect();
    rem.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())));
    let short = count - n.iter().sum::<usize>();
    for &i in rem.iter().take(short) {
        n[i] += 1;
    }
    let mut labels: Vec<usize> = n.iter().enumerate().flat_map(|(i, &k)| std::iter::repeat(i).take(k)).collect();
    labels.shuffle(rng);
    Ok(labels)
}

fn speaker_pool(corpus: &Corpus, range: Option<(usize, usize)>) -> Result<Vec<usize>> {
    let (lo, hi) = range.unwrap_or((0, corpus.num_speakers()));
    if hi > corpus.num_speakers() || hi < lo + 2 {
        return Err(Error::Config(format!(
            "speaker range {lo}..{hi} must hold two speakers of the {}",
            corpus.num_speakers()
        )));
    }
    Ok((lo..hi).collect())
}

fn write_example(dir: &Path, id: &str, ex: &MixtureExample, seed: u64) -> Result<ManifestRecord> {
    let rel = |suffix: &str| format!("wav/{id}_{suffix}.wav");
    write_wav(&dir.join(rel("mix")), &ex.mixture)?;
    write_wav(&dir.join(rel("s1")), &ex.references[0])?;
    write_wav(&dir.join(rel("s2")), &ex.references[1])?;
    let sp = &ex.scene.speakers;
    Ok(ManifestRecord {
        id: id.to_string(),
        mixture_path: rel("mix"),
        ref_paths: [rel("s1"), rel("s2")],
        azimuth_deg: [sp[0].azimuth_deg, sp[1].azimuth_deg],
        distance_m: [sp[0].distance_m, sp[1].distance_m],
        overlap_ratio: ex.overlap_ratio,
        t60: ex.scene.room.t60,
        snr_db: ex.snr_db,
        seed,
        room: ex.scene.room.dims(),
        activity: [encode_activity(&ex.activity[0]), encode_activity(&ex.activity[1])],
    })
}

fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Simulates `cfg.count` fixed-length mixtures into `out_dir` and returns
/// the path of `out_dir/manifest.jsonl`. Output is a pure function of the
/// configuration.
pub fn build_dataset(out_dir: &Path, cfg: &DatasetConfig) -> Result<PathBuf> {
    if cfg.overlap_ratios.len() != cfg.overlap_weights.len() {
        return Err(Error::Config("overlap_ratios and overlap_weights differ in length".into()));
    }
    let shift = StftConfig::default().frame_shift;
    let len = ((cfg.duration_secs * SAMPLE_RATE as f64 / shift as f64).round() as usize) * shift;
    if len == 0 {
        return Err(Error::Config("duration too short".into()));
    }
    let corpus = Corpus::open(&cfg.corpus)?;
    let pool = speaker_pool(&corpus, cfg.speakers)?;
    let mut master = ChaCha8Rng::seed_from_u64(cfg.seed);
    let labels = stratified(cfg.count, &cfg.overlap_weights, &mut master)?;
    std::fs::create_dir_all(out_dir.join("wav")).map_err(|e| Error::io(out_dir, e))?;
    let mut records = Vec::with_capacity(cfg.count);
    for (i, &label) in labels.iter().enumerate() {
        let seed = example_seed(cfg.seed, i);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scene = sample_scene(rng.gen(), &cfg.scene)?;
        let pair: Vec<usize> = pool.choose_multiple(&mut rng, 2).copied().collect();
        let ua = corpus.utterance(pair[0], &mut rng, len)?;
        let ub = corpus.utterance(pair[1], &mut rng, len)?;
        let ex = mix_segment(&ua, &ub, &scene, cfg.overlap_ratios[label], scene.noise_snr, len)?;
        records.push(write_example(out_dir, &format!("{i:06}"), &ex, seed)?);
    }
    let path = out_dir.join("manifest.jsonl");
    write_manifest(&path, &records)?;
    Ok(path)
}

/// Simulates long sessions for continuous evaluation; the overlap ratios
/// cycle over the meetings.
pub fn build_meetings(out_dir: &Path, cfg: &MeetingConfig) -> Result<PathBuf> {
    if cfg.overlap_ratios.is_empty() || cfg.turns.0 < 2 || cfg.turns.1 < cfg.turns.0 {
        return Err(Error::Config("meetings need overlap ratios and at least two turns".into()));
    }
    let corpus = Corpus::open(&cfg.corpus)?;
    let pool = speaker_pool(&corpus, cfg.speakers)?;
    std::fs::create_dir_all(out_dir.join("wav")).map_err(|e| Error::io(out_dir, e))?;
    let mut records = Vec::with_capacity(cfg.count);
    for i in 0..cfg.count {
        let seed = example_seed(cfg.seed, i);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scene = sample_scene(rng.gen(), &cfg.scene)?;
        let pair: Vec<usize> = pool.choose_multiple(&mut rng, 2).copied().collect();
        let turns = rng.gen_range(cfg.turns.0..=cfg.turns.1);
        let ratio = cfg.overlap_ratios[i % cfg.overlap_ratios.len()];
        let m = simulate_meeting(&corpus, [pair[0], pair[1]], &scene, ratio, turns, &mut rng)?;
        records.push(write_example(out_dir, &format!("meeting{i:04}"), &m.example, seed)?);
    }
    let path = out_dir.join("manifest.jsonl");
    write_manifest(&path, &records)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(count: usize) -> DatasetConfig {
        DatasetConfig {
            count,
            seed: 9,
            duration_secs: 0.8,
            corpus: CorpusSource::Synthetic { speakers: 4, seed: 2 },
            ..DatasetConfig::default()
        }
    }

    #[test]
    fn manifest_is_complete_and_reproducible() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let m1 = build_dataset(d1.path(), &small(10)).unwrap();
        let m2 = build_dataset(d2.path(), &small(10)).unwrap();
        let recs = load_manifest(&m1).unwrap();
        assert_eq!(recs.len(), 10);
        for r in &recs {
            assert!(d1.path().join(&r.mixture_path).exists());
            for p in &r.ref_paths {
                assert!(d1.path().join(p).exists());
            }
            let ex = r.load(d1.path()).unwrap();
            assert_eq!(ex.mixture.channels(), 7);
            assert_eq!(ex.activity[0].len(), 100);
        }
        assert_eq!(std::fs::read(&m1).unwrap(), std::fs::read(&m2).unwrap());
    }

    #[test]
    fn stratified_counts_follow_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let labels = stratified(2000, &[1.0, 1.0, 2.0, 1.0, 0.0], &mut rng).unwrap();
        let count = |k| labels.iter().filter(|&&l| l == k).count();
        assert_eq!([count(0), count(1), count(2), count(3), count(4)], [400, 400, 800, 400, 0]);
        assert!(stratified(10, &[0.0], &mut rng).is_err());
    }

    #[test]
    fn activity_round_trips() {
        let a = vec![true, false, false, true];
        assert_eq!(decode_activity(&encode_activity(&a)).unwrap(), a);
        assert!(decode_activity("01x").is_err());
        assert_eq!(condition_label(0.0), "0S");
        assert_eq!(condition_label(0.3), "OV30");
    }
}
