use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::best_assignment;
use crate::dsp::{FeatureStats, Waveform};
use crate::error::{Error, Result};
use crate::model::{Separator, SpeakerCounter};
use crate::pipeline::{separate_stream, PipelineConfig};
use crate::spatialsim::{load_manifest, LoadedExample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    /// Pre-segmented mixtures, one segment each.
    Utterance,
    /// Long recordings through the full segment-and-stitch chain.
    Continuous,
}

/// What produces the two output streams.
pub enum Estimator<'a> {
    Model {
        separator: &'a Separator<f32>,
        stats: &'a FeatureStats,
        counter: Option<(&'a SpeakerCounter<f32>, &'a FeatureStats)>,
        pipeline: PipelineConfig,
    },
    /// Reference-microphone mixture as both outputs.
    Unprocessed,
    /// The references themselves.
    Oracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub mode: EvalMode,
    pub limit: Option<usize>,
    /// Restrict to these condition labels; each must occur in the manifest.
    pub conditions: Option<Vec<String>>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            mode: EvalMode::Utterance,
            limit: None,
            conditions: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleScore {
    pub id: String,
    pub condition: String,
    /// Mean over speakers with a defined score.
    pub si_snr: f64,
    pub per_speaker: Vec<Option<f64>>,
    /// Reference index paired with each output.
    pub order: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConditionStats {
    pub count: usize,
    pub mean: f64,
    pub std: f64,
}

impl ConditionStats {
    fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self { count: 0, mean: f64::NAN, std: f64::NAN };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        Self { count: n, mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: EvalMode,
    pub overall: ConditionStats,
    /// Keyed by condition label (`0S`, `OV10`, …).
    pub conditions: BTreeMap<String, ConditionStats>,
    pub examples: Vec<ExampleScore>,
    /// Number of SI-SNR values computed.
    pub evaluations: usize,
    /// Training loss per step, when known.
    pub loss_curve: Vec<f64>,
}

impl EvalReport {
    /// Aggregates stored per-example scores; the result depends only on
    /// the scores and their order.
    pub fn from_scores(mode: EvalMode, examples: Vec<ExampleScore>, loss_curve: Vec<f64>) -> Self {
        let mut by: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for e in &examples {
            by.entry(e.condition.clone()).or_default().push(e.si_snr);
        }
        let all: Vec<f64> = examples.iter().map(|e| e.si_snr).collect();
        Self {
            mode,
            overall: ConditionStats::of(&all),
            conditions: by.iter().map(|(k, v)| (k.clone(), ConditionStats::of(v))).collect(),
            evaluations: examples.iter().map(|e| e.per_speaker.iter().flatten().count()).sum(),
            examples,
            loss_curve,
        }
    }

    /// Mean SI-SNR over the examples of the listed conditions.
    pub fn mean_over(&self, conditions: &[&str]) -> Option<f64> {
        let v: Vec<f64> = self
            .examples
            .iter()
            .filter(|e| conditions.contains(&e.condition.as_str()))
            .map(|e| e.si_snr)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

fn outputs(est: &Estimator, ex: &LoadedExample) -> Result<[Vec<f32>; 2]> {
    match est {
        Estimator::Model {
            separator,
            stats,
            counter,
            pipeline,
        } => {
            let s = separate_stream(&ex.mixture, separator, stats, *counter, pipeline)?;
            let [a, b] = s.streams;
            Ok([a.channel(0).to_vec(), b.channel(0).to_vec()])
        }
        Estimator::Unprocessed => {
            let m = ex.mixture.channel(0).to_vec();
            Ok([m.clone(), m])
        }
        Estimator::Oracle => Ok([ex.references[0].channel(0).to_vec(), ex.references[1].channel(0).to_vec()]),
    }
}

/// Scores one recording with the best output-to-reference assignment over
/// its whole length.
pub fn score_example(est: &Estimator, ex: &LoadedExample, condition: String) -> Result<ExampleScore> {
    let outs = outputs(est, ex)?;
    let refs: Vec<&[f32]> = ex
        .references
        .iter()
        .map(|r: &Waveform| r.samples().as_slice().expect("contiguous"))
        .collect();
    let (order, per_speaker) = best_assignment(&[&outs[0], &outs[1]], &refs)?;
    let defined: Vec<f64> = per_speaker.iter().flatten().copied().collect();
    Ok(ExampleScore {
        id: ex.id.clone(),
        condition,
        si_snr: defined.iter().sum::<f64>() / defined.len() as f64,
        per_speaker,
        order,
    })
}

/// SI-SNR evaluation over a manifest. Utterance mode requires every
/// mixture to fit in one segment; continuous mode runs the segment and
/// stitch chain over whole recordings.
pub fn evaluate(est: &Estimator, manifest: &Path, cfg: &EvalConfig, loss_curve: Vec<f64>) -> Result<EvalReport> {
    let mut records = load_manifest(manifest)?;
    if let Some(wanted) = &cfg.conditions {
        for c in wanted {
            if !records.iter().any(|r| &r.condition() == c) {
                return Err(Error::Config(format!("condition {c} does not occur in {}", manifest.display())));
            }
        }
        records.retain(|r| wanted.contains(&r.condition()));
    }
    if let Some(l) = cfg.limit {
        records.truncate(l);
    }
    if records.is_empty() {
        return Err(Error::Config(format!("{} holds no examples", manifest.display())));
    }
    let seg = match est {
        Estimator::Model { pipeline, .. } => pipeline.segment_secs,
        _ => PipelineConfig::default().segment_secs,
    };
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut scores = Vec::with_capacity(records.len());
    for r in &records {
        let ex = r.load(base)?;
        if cfg.mode == EvalMode::Utterance && ex.mixture.duration_secs() > seg + 1e-9 {
            return Err(Error::Config(format!(
                "{} lasts {:.2} s; utterance mode expects pre-segmented mixtures of at most {seg} s",
                r.id,
                ex.mixture.duration_secs()
            )));
        }
        scores.push(score_example(est, &ex, r.condition())?);
    }
    Ok(EvalReport::from_scores(cfg.mode, scores, loss_curve))
}
