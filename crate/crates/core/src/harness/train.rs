use std::collections::HashMap;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::log::JsonLog;
use crate::dsp::{
    apply_feature_norm, mixture_features, normalize_mixture, stft, ComplexSpectrogram, FeatureStats, StatsAccumulator,
    StftConfig,
};
use crate::error::{Error, Result};
use crate::losses::{criterion_loss, lbt_assignment, make_segment_targets, AssignmentRule, LossBreakdown, SortKey};
use crate::model::{
    cross_entropy, pad_features, padded_len, Checkpoint, CounterConfig, ModelProfile, Separator, SeparatorConfig,
    SpeakerCounter, NUM_SPEAKERS,
};
use crate::nn::{Adam, AdamConfig, Grads, ParamStore};
use crate::pipeline::counter_frame_probs;
use crate::spatialsim::{load_manifest, LoadedExample, ManifestRecord};
use crate::spatialsim::NUM_MICS;
use crate::losses::SpeakerLocation;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Criterion {
    Pit,
    LbtAzimuth,
    LbtDistance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Separator,
    Counter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub task: Task,
    pub criterion: Criterion,
    pub multiresolution: bool,
    pub profile: ModelProfile,
    /// Replaces the profile's separator (or counter encoder) layout.
    pub model: Option<SeparatorConfig>,
    /// Recurrent hidden size of the counter.
    pub counter_hidden: usize,
    pub batch_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    /// Learning-rate factor applied after `plateau_patience` validations
    /// without improvement.
    pub lr_decay: f64,
    pub plateau_patience: usize,
    pub validate_every: usize,
    pub clip_norm: Option<f64>,
    pub seed: u64,
    pub train_manifest: PathBuf,
    pub valid_manifest: Option<PathBuf>,
    /// Use only the first `limit` training records.
    pub limit: Option<usize>,
    pub valid_limit: Option<usize>,
    /// Records used for feature statistics (all when unset).
    pub stats_limit: Option<usize>,
    /// Prepared examples kept in memory.
    pub cache_examples: usize,
    pub checkpoint: Option<PathBuf>,
    pub log: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            task: Task::Separator,
            criterion: Criterion::LbtAzimuth,
            multiresolution: true,
            profile: ModelProfile::Toy,
            model: None,
            counter_hidden: 32,
            batch_size: 4,
            steps: 1000,
            learning_rate: 1e-3,
            lr_decay: 0.5,
            plateau_patience: 2,
            validate_every: 100,
            clip_norm: Some(5.0),
            seed: 0,
            train_manifest: PathBuf::from("data/train/manifest.jsonl"),
            valid_manifest: None,
            limit: None,
            valid_limit: None,
            stats_limit: None,
            cache_examples: 64,
            checkpoint: None,
            log: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.steps == 0 {
            return Err(Error::Config("batch_size and steps must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config("learning_rate must be positive and lr_decay in (0, 1]".into()));
        }
        if self.counter_hidden == 0 {
            return Err(Error::Config("counter_hidden must be positive".into()));
        }
        Ok(())
    }

    pub fn separator_config(&self) -> SeparatorConfig {
        self.model.clone().unwrap_or_else(|| SeparatorConfig::for_profile(self.profile))
    }

    pub fn counter_config(&self) -> CounterConfig {
        let enc = self.separator_config();
        let tmp = CounterConfig::new(enc.clone(), self.counter_hidden, 0);
        CounterConfig::new(enc, self.counter_hidden, padded_len(StftConfig::default().bins(), tmp.time_factor()))
    }
}

/// One training example in model layout.
#[derive(Debug, Clone)]
pub struct PreparedExample {
    /// Normalized, padded features `[15, T_pad, F_pad]`.
    pub input: Array3<f32>,
    /// Scaled reference spectrograms on the padded grid.
    pub targets: Vec<ComplexSpectrogram>,
    pub active: Vec<bool>,
    pub locations: [SpeakerLocation; NUM_SPEAKERS],
    /// Active-speaker count per STFT frame (unpadded).
    pub labels: Vec<usize>,
}

/// Active-speaker count per frame over `frames` frames; activity is one
/// flag per frame shift.
pub fn count_labels(activity: &[Vec<bool>], start_frame: usize, frames: usize) -> Vec<usize> {
    (0..frames)
        .map(|t| activity.iter().filter(|a| a.get(start_frame + t).copied().unwrap_or(false)).count())
        .collect()
}

/// Majority vote over groups of `factor` labels; labels beyond the input
/// count as 0 up to `padded` frames. Ties go to the larger count.
pub fn majority_pool(labels: &[usize], factor: usize, padded: usize) -> Vec<usize> {
    (0..padded / factor)
        .map(|g| {
            let mut votes = [0usize; 3];
            for t in g * factor..(g + 1) * factor {
                votes[labels.get(t).copied().unwrap_or(0).min(2)] += 1;
            }
            (0..3).max_by_key(|&c| votes[c]).unwrap_or(0)
        })
        .collect()
}

fn raw_features(ex: &LoadedExample) -> Result<(Array3<f32>, f32)> {
    if ex.mixture.channels() != NUM_MICS {
        return Err(Error::InvalidInput(format!(
            "{}: expected a {NUM_MICS}-channel mixture, found {}",
            ex.id,
            ex.mixture.channels()
        )));
    }
    let (normed, scale) = normalize_mixture(&ex.mixture)?;
    Ok((mixture_features(&stft(&normed, &StftConfig::default())?)?, scale))
}

pub fn prepare_example(ex: &LoadedExample, stats: &FeatureStats, multiple: usize) -> Result<PreparedExample> {
    let cfg = StftConfig::default();
    let (feats, scale) = raw_features(ex)?;
    let input = pad_features(apply_feature_norm(feats.view(), stats)?.view(), multiple);
    let (_, tp, fp) = input.dim();
    let t = make_segment_targets(&ex.references, &ex.activity, 0..ex.mixture.len(), scale, &cfg)?;
    Ok(PreparedExample {
        input,
        targets: t.specs.iter().map(|s| s.resized(tp, fp)).collect(),
        active: t.active,
        locations: ex.locations,
        labels: count_labels(&ex.activity, 0, cfg.frames_for(ex.mixture.len())),
    })
}

/// Per-(channel, bin) moments of unnormalized features over the records.
pub fn compute_feature_stats(records: &[ManifestRecord], base: &Path) -> Result<FeatureStats> {
    let cfg = StftConfig::default();
    let mut acc = StatsAccumulator::new(2 * NUM_MICS + 1, cfg.bins());
    for r in records {
        let (f, _) = raw_features(&r.load(base)?)?;
        acc.push(f.view())?;
    }
    acc.finish()
}

enum Model {
    Separator(Separator<f32>),
    Counter(SpeakerCounter<f32>),
}

impl Model {
    fn params(&self) -> &ParamStore<f32> {
        match self {
            Model::Separator(m) => &m.params,
            Model::Counter(m) => &m.params,
        }
    }

    fn params_mut(&mut self) -> &mut ParamStore<f32> {
        match self {
            Model::Separator(m) => &mut m.params,
            Model::Counter(m) => &mut m.params,
        }
    }

    fn pad_multiple(&self) -> usize {
        match self {
            Model::Separator(m) => m.config.pad_multiple(),
            Model::Counter(m) => m.config.time_factor(),
        }
    }

    /// Loss of one example and, when asked, its parameter gradient.
    fn example(&self, ex: &PreparedExample, cfg: &TrainConfig, grad: bool) -> Result<(f64, Option<LossBreakdown>, Option<Grads<f32>>)> {
        match self {
            Model::Separator(m) => {
                let rule = match cfg.criterion {
                    Criterion::Pit => AssignmentRule::Pit,
                    Criterion::LbtAzimuth => {
                        AssignmentRule::Fixed(lbt_assignment(&ex.locations, SortKey::Azimuth, &ex.active)?)
                    }
                    Criterion::LbtDistance => {
                        AssignmentRule::Fixed(lbt_assignment(&ex.locations, SortKey::Distance, &ex.active)?)
                    }
                };
                let (out, cache) = m.forward_train(ex.input.view())?;
                let (bd, _, g) = criterion_loss(&out, &ex.targets, &rule, cfg.multiresolution, grad)?;
                let grads = match g {
                    Some(g) if bd.total.is_finite() => Some(m.backward(&cache, &g)?),
                    _ => None,
                };
                Ok((bd.total, Some(bd), grads))
            }
            Model::Counter(m) => {
                let cache = m.forward_train(ex.input.view())?;
                let f = m.config.time_factor();
                let labels = majority_pool(&ex.labels, f, ex.input.dim().1);
                let (loss, g) = cross_entropy(cache.probs.view(), &labels)?;
                let grads = (grad && loss.is_finite()).then(|| m.backward(&cache, g.view()));
                Ok((loss, None, grads))
            }
        }
    }

    fn checkpoint(&self, stats: &FeatureStats, seed: u64, extra: serde_json::Value) -> Checkpoint {
        match self {
            Model::Separator(m) => Checkpoint::from_separator(m, stats.clone(), seed, extra),
            Model::Counter(m) => Checkpoint::from_counter(m, stats.clone(), seed, extra),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// Mean batch loss per step.
    pub losses: Vec<f64>,
    pub valid_losses: Vec<(usize, f64)>,
    pub final_train_loss: f64,
    pub final_valid_loss: Option<f64>,
}

struct ExampleSource {
    records: Vec<ManifestRecord>,
    base: PathBuf,
    cache: HashMap<usize, PreparedExample>,
    capacity: usize,
}

impl ExampleSource {
    fn open(manifest: &Path, limit: Option<usize>, capacity: usize) -> Result<Self> {
        let mut records = load_manifest(manifest)?;
        if let Some(l) = limit {
            records.truncate(l);
        }
        if records.is_empty() {
            return Err(Error::Config(format!("{} holds no examples", manifest.display())));
        }
        Ok(Self {
            records,
            base: manifest.parent().unwrap_or(Path::new(".")).to_path_buf(),
            cache: HashMap::new(),
            capacity,
        })
    }

    fn get(&mut self, i: usize, stats: &FeatureStats, multiple: usize) -> Result<PreparedExample> {
        if let Some(p) = self.cache.get(&i) {
            return Ok(p.clone());
        }
        let p = prepare_example(&self.records[i].load(&self.base)?, stats, multiple)?;
        if self.cache.len() < self.capacity {
            self.cache.insert(i, p.clone());
        }
        Ok(p)
    }
}

fn mean_loss(model: &Model, src: &mut ExampleSource, stats: &FeatureStats, cfg: &TrainConfig) -> Result<f64> {
    let mut total = 0.0;
    for i in 0..src.records.len() {
        let ex = src.get(i, stats, model.pad_multiple())?;
        total += model.example(&ex, cfg, false)?.0;
    }
    Ok(total / src.records.len() as f64)
}

fn save(ck: &Checkpoint, cfg: &TrainConfig) -> Result<()> {
    match &cfg.checkpoint {
        Some(p) => ck.save(p),
        None => Ok(()),
    }
}

/// Trains a separator or speaker counter with Adam. Batches are drawn from
/// per-epoch shuffles of the training manifest; gradients are averaged over
/// the batch. With a validation manifest (otherwise the running training
/// loss) checked every `validate_every` steps, the rate is multiplied by
/// `lr_decay` after `plateau_patience` checks without improvement. A
/// non-finite loss aborts with the last finite parameters saved.
pub fn train(cfg: &TrainConfig, log: &mut JsonLog) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut src = ExampleSource::open(&cfg.train_manifest, cfg.limit, cfg.cache_examples)?;
    let mut valid = match &cfg.valid_manifest {
        Some(p) => Some(ExampleSource::open(p, cfg.valid_limit, cfg.cache_examples)?),
        None => None,
    };
    let stats_n = cfg.stats_limit.unwrap_or(src.records.len()).min(src.records.len());
    let stats = compute_feature_stats(&src.records[..stats_n.max(1)], &src.base)?;
    let mut model = match cfg.task {
        Task::Separator => {
            let mut sep = Separator::new(cfg.separator_config(), cfg.seed)?;
            sep.set_output_gain(Some(stats.reference_scale()));
            Model::Separator(sep)
        }
        Task::Counter => Model::Counter(SpeakerCounter::new(cfg.counter_config(), cfg.seed)?),
    };
    let multiple = model.pad_multiple();
    log.record(json!({
        "event": "start",
        "task": cfg.task,
        "criterion": cfg.criterion,
        "multiresolution": cfg.multiresolution,
        "params": model.params().len(),
        "examples": src.records.len(),
        "seed": cfg.seed,
    }));
    let mut adam = Adam::new(
        AdamConfig {
            learning_rate: cfg.learning_rate,
            clip_norm: cfg.clip_norm,
            ..AdamConfig::default()
        },
        model.params().len(),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7261_696e);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut valid_losses = Vec::new();
    let mut best = f64::INFINITY;
    let mut stale = 0;
    let mut lr = cfg.learning_rate;
    let mut since_check = Vec::new();
    let extra = |losses: &[f64], valid: Option<f64>, steps: usize| {
        json!({
            "train_config": cfg,
            "steps": steps,
            "final_train_loss": losses.last(),
            "final_valid_loss": valid,
            "loss_curve": losses,
        })
    };
    for step in 1..=cfg.steps {
        let mut grads = model.params().zero_grads();
        let mut batch_loss = 0.0;
        let mut taps: Vec<f64> = Vec::new();
        for _ in 0..cfg.batch_size {
            if cursor == order.len() {
                order = (0..src.records.len()).collect();
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let idx = order[cursor];
            cursor += 1;
            let ex = src.get(idx, &stats, multiple)?;
            let (loss, bd, g) = model.example(&ex, cfg, true)?;
            if !loss.is_finite() {
                let ck = model.checkpoint(&stats, cfg.seed, extra(&losses, None, step - 1));
                save(&ck, cfg)?;
                log.record(json!({"event": "diverged", "step": step, "example": src.records[idx].id}));
                return Err(Error::Diverged {
                    step,
                    reason: format!("non-finite loss on {}", src.records[idx].id),
                });
            }
            batch_loss += loss;
            if let Some(bd) = bd {
                if taps.is_empty() {
                    taps = vec![0.0; bd.tap_terms.len()];
                }
                for (a, b) in taps.iter_mut().zip(&bd.tap_terms) {
                    *a += b;
                }
            }
            if let Some(g) = g {
                grads.add_assign(&g);
            }
        }
        let b = cfg.batch_size as f64;
        grads.scale(1.0 / b as f32);
        let before = model.params().clone();
        let norm = adam.step(model.params_mut(), &grads);
        if !norm.is_finite() || model.params().values().iter().any(|v| !v.is_finite()) {
            *model.params_mut() = before;
            let ck = model.checkpoint(&stats, cfg.seed, extra(&losses, None, step - 1));
            save(&ck, cfg)?;
            log.record(json!({"event": "diverged", "step": step, "grad_norm": norm}));
            return Err(Error::Diverged {
                step,
                reason: "non-finite gradient".into(),
            });
        }
        let loss = batch_loss / b;
        losses.push(loss);
        since_check.push(loss);
        log.record(json!({
            "event": "step",
            "step": step,
            "loss": loss,
            "tap_terms": taps.iter().map(|t| t / b).collect::<Vec<_>>(),
            "grad_norm": norm,
            "lr": lr,
        }));
        if cfg.validate_every > 0 && (step % cfg.validate_every == 0 || step == cfg.steps) {
            let v = match valid.as_mut() {
                Some(vs) => mean_loss(&model, vs, &stats, cfg)?,
                None => since_check.iter().sum::<f64>() / since_check.len() as f64,
            };
            since_check.clear();
            valid_losses.push((step, v));
            if v < best {
                best = v;
                stale = 0;
            } else {
                stale += 1;
                if stale >= cfg.plateau_patience.max(1) {
                    lr *= cfg.lr_decay;
                    adam.set_learning_rate(lr);
                    stale = 0;
                }
            }
            log.record(json!({"event": "validate", "step": step, "loss": v, "lr": lr, "held_out": valid.is_some()}));
        }
    }
    let final_valid = valid.is_some().then(|| valid_losses.last().map(|v| v.1)).flatten();
    let ck = model.checkpoint(&stats, cfg.seed, extra(&losses, final_valid, cfg.steps));
    save(&ck, cfg)?;
    log.record(json!({"event": "done", "steps": cfg.steps, "final_train_loss": losses.last(), "final_valid_loss": final_valid}));
    Ok(TrainOutcome {
        checkpoint: ck,
        final_train_loss: *losses.last().unwrap_or(&f64::NAN),
        losses,
        valid_losses,
        final_valid_loss: final_valid,
    })
}

/// Frame accuracy of the counter on a manifest, at STFT frame rate.
pub fn counter_accuracy(counter: &SpeakerCounter<f32>, stats: &FeatureStats, manifest: &Path, limit: Option<usize>) -> Result<f64> {
    let mut records = load_manifest(manifest)?;
    if let Some(l) = limit {
        records.truncate(l);
    }
    let base = manifest.parent().unwrap_or(Path::new("."));
    let (mut hit, mut total) = (0usize, 0usize);
    for r in &records {
        let ex = r.load(base)?;
        let (normed, _) = normalize_mixture(&ex.mixture)?;
        let p: Array2<f32> = counter_frame_probs(counter, stats, &normed)?;
        let labels = count_labels(&ex.activity, 0, p.nrows());
        for (row, &y) in p.rows().into_iter().zip(&labels) {
            let pred = (0..3).max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a))).unwrap_or(0);
            hit += usize::from(pred == y);
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::Config(format!("{} holds no frames", manifest.display())));
    }
    Ok(hit as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spatialsim::{build_dataset, DatasetConfig};

    #[test]
    fn label_pooling() {
        let act = vec![vec![true, true, false, false, true], vec![false, true, false, true, true]];
        assert_eq!(count_labels(&act, 0, 6), vec![1, 2, 0, 1, 2, 0]);
        assert_eq!(majority_pool(&[1, 2, 2, 0, 0, 0, 0, 1], 4, 8), vec![2, 0]);
        // 2-2 tie goes to the larger count; padding counts as silence.
        assert_eq!(majority_pool(&[1, 1, 2, 2, 1], 4, 8), vec![2, 0]);
    }

    fn tiny_dataset(dir: &Path, n: usize) -> PathBuf {
        let cfg = DatasetConfig {
            count: n,
            seed: 3,
            duration_secs: 0.6,
            ..DatasetConfig::default()
        };
        build_dataset(dir, &cfg).unwrap()
    }

    fn tiny_model() -> SeparatorConfig {
        let mut m = SeparatorConfig::toy();
        m.channels = 4;
        m.dense_layers_per_block = 1;
        m
    }

    #[test]
    fn training_is_deterministic_and_logs() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = tiny_dataset(dir.path(), 3);
        let cfg = TrainConfig {
            model: Some(tiny_model()),
            batch_size: 2,
            steps: 3,
            validate_every: 2,
            train_manifest: manifest,
            checkpoint: Some(dir.path().join("m.ckpt")),
            log: None,
            ..TrainConfig::default()
        };
        let logp = dir.path().join("log.jsonl");
        let a = train(&cfg, &mut JsonLog::new(Some(&logp), false).unwrap()).unwrap();
        let b = train(&cfg, &mut JsonLog::silent()).unwrap();
        assert_eq!(a.losses, b.losses);
        assert!(a.losses.iter().all(|l| l.is_finite()));
        let lines = std::fs::read_to_string(&logp).unwrap();
        let events: Vec<serde_json::Value> = lines.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(events.iter().filter(|e| e["event"] == "step").count(), 3);
        let ck = Checkpoint::load(&dir.path().join("m.ckpt")).unwrap();
        assert_eq!(ck.separator().unwrap().params.values(), a.checkpoint.separator().unwrap().params.values());
        let stored = ck.extra["final_train_loss"].as_f64().unwrap();
        assert!((stored - a.losses.last().unwrap()).abs() < 1e-12);
    }

    #[test]
    fn counter_task_trains() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = tiny_dataset(dir.path(), 2);
        let cfg = TrainConfig {
            task: Task::Counter,
            model: Some(tiny_model()),
            counter_hidden: 4,
            batch_size: 1,
            steps: 2,
            train_manifest: manifest.clone(),
            ..TrainConfig::default()
        };
        let out = train(&cfg, &mut JsonLog::silent()).unwrap();
        let c = out.checkpoint.counter().unwrap();
        let acc = counter_accuracy(&c, &out.checkpoint.stats, &manifest, None).unwrap();
        assert!((0.0..=1.0).contains(&acc));
    }

    #[test]
    fn bad_settings_are_config_errors() {
        let cfg = TrainConfig {
            steps: 0,
            ..TrainConfig::default()
        };
        assert!(matches!(train(&cfg, &mut JsonLog::silent()), Err(Error::Config(_))));
    }
}
