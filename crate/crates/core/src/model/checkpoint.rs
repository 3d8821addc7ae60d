//! Checkpoint container.
//!
//! A checkpoint is a single safetensors file. Every trainable tensor is
//! stored as little-endian `f32` under `param.<name>`; the global feature
//! statistics live under `stats.mean` and `stats.variance`
//! (`[input_channels, bins]`). The string metadata map carries:
//!
//! | key       | value                                              |
//! |-----------|----------------------------------------------------|
//! | `format`  | `lbt-css-checkpoint`                               |
//! | `version` | `1`                                                |
//! | `kind`    | `separator` or `counter`                           |
//! | `config`  | JSON of the model configuration                    |
//! | `seed`    | training seed (decimal)                            |
//! | `extra`   | free-form JSON (training summary, criterion, ...)  |

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use ndarray::Array2;
use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use super::{CounterConfig, Separator, SeparatorConfig, SpeakerCounter};
use crate::dsp::FeatureStats;
use crate::error::{Error, Result};
use crate::nn::ParamStore;

pub const CHECKPOINT_FORMAT: &str = "lbt-css-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    Separator,
    Counter,
}

impl CheckpointKind {
    fn as_str(self) -> &'static str {
        match self {
            CheckpointKind::Separator => "separator",
            CheckpointKind::Counter => "counter",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub config: serde_json::Value,
    pub seed: u64,
    pub stats: FeatureStats,
    pub extra: serde_json::Value,
    tensors: BTreeMap<String, (Vec<usize>, Vec<f32>)>,
}

fn collect(ps: &ParamStore<f32>) -> BTreeMap<String, (Vec<usize>, Vec<f32>)> {
    ps.entries()
        .iter()
        .map(|e| {
            let v = ps.values()[e.offset..e.offset + e.numel()].to_vec();
            (e.name.clone(), (e.shape.clone(), v))
        })
        .collect()
}

impl Checkpoint {
    pub fn from_separator(model: &Separator<f32>, stats: FeatureStats, seed: u64, extra: serde_json::Value) -> Self {
        Self {
            kind: CheckpointKind::Separator,
            config: serde_json::to_value(&model.config).expect("config serializes"),
            seed,
            stats,
            extra,
            tensors: collect(&model.params),
        }
    }

    pub fn from_counter(model: &SpeakerCounter<f32>, stats: FeatureStats, seed: u64, extra: serde_json::Value) -> Self {
        Self {
            kind: CheckpointKind::Counter,
            config: serde_json::to_value(&model.config).expect("config serializes"),
            seed,
            stats,
            extra,
            tensors: collect(&model.params),
        }
    }

    pub fn num_params(&self) -> usize {
        self.tensors.values().map(|(_, v)| v.len()).sum()
    }

    fn restore(&self, ps: &mut ParamStore<f32>) -> Result<()> {
        if ps.entries().len() != self.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors, model expects {}",
                self.tensors.len(),
                ps.entries().len()
            )));
        }
        for e in ps.entries().to_vec() {
            let (shape, values) = self
                .tensors
                .get(&e.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {}", e.name)))?;
            if shape != &e.shape {
                return Err(Error::Checkpoint(format!(
                    "tensor {} has shape {shape:?}, model expects {:?}",
                    e.name, e.shape
                )));
            }
            ps.values_mut()[e.offset..e.offset + e.numel()].copy_from_slice(values);
        }
        Ok(())
    }

    fn expect_kind(&self, kind: CheckpointKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Checkpoint(format!(
                "expected a {} checkpoint, found {}",
                kind.as_str(),
                self.kind.as_str()
            )));
        }
        Ok(())
    }

    pub fn separator_config(&self) -> Result<SeparatorConfig> {
        self.expect_kind(CheckpointKind::Separator)?;
        serde_json::from_value(self.config.clone())
            .map_err(|e| Error::Checkpoint(format!("bad separator config: {e}")))
    }

    pub fn separator(&self) -> Result<Separator<f32>> {
        let cfg = self.separator_config()?;
        let mut model = Separator::new(cfg, self.seed)?;
        self.restore(&mut model.params)?;
        self.check_stats(model.config.input_channels)?;
        model.set_output_gain(Some(self.stats.reference_scale()));
        Ok(model)
    }

    pub fn counter(&self) -> Result<SpeakerCounter<f32>> {
        self.expect_kind(CheckpointKind::Counter)?;
        let cfg: CounterConfig = serde_json::from_value(self.config.clone())
            .map_err(|e| Error::Checkpoint(format!("bad counter config: {e}")))?;
        let mut model = SpeakerCounter::new(cfg, self.seed)?;
        self.restore(&mut model.params)?;
        self.check_stats(model.config.encoder.input_channels)?;
        Ok(model)
    }

    fn check_stats(&self, channels: usize) -> Result<()> {
        if self.stats.channels() != channels {
            return Err(Error::Checkpoint(format!(
                "feature statistics cover {} channels, model takes {channels}",
                self.stats.channels()
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let to_bytes = |v: &[f32]| v.iter().flat_map(|x| x.to_le_bytes()).collect::<Vec<u8>>();
        let mut owned: Vec<(String, Vec<usize>, Vec<u8>)> = self
            .tensors
            .iter()
            .map(|(k, (shape, v))| (format!("param.{k}"), shape.clone(), to_bytes(v)))
            .collect();
        let stat_shape = vec![self.stats.channels(), self.stats.bins()];
        owned.push((
            "stats.mean".into(),
            stat_shape.clone(),
            to_bytes(self.stats.mean.as_standard_layout().as_slice().unwrap()),
        ));
        owned.push((
            "stats.variance".into(),
            stat_shape,
            to_bytes(self.stats.variance.as_standard_layout().as_slice().unwrap()),
        ));
        let views = owned
            .iter()
            .map(|(k, shape, bytes)| {
                TensorView::new(Dtype::F32, shape.clone(), bytes)
                    .map(|v| (k.clone(), v))
                    .map_err(|e| Error::Checkpoint(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        let meta: HashMap<String, String> = [
            ("format", CHECKPOINT_FORMAT.to_string()),
            ("version", CHECKPOINT_VERSION.to_string()),
            ("kind", self.kind.as_str().to_string()),
            ("config", self.config.to_string()),
            ("seed", self.seed.to_string()),
            ("extra", self.extra.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        let bytes = safetensors::serialize(views, &Some(meta)).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |m: String| Error::Checkpoint(format!("{}: {m}", path.display()));
        let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| bad(e.to_string()))?;
        let meta = header
            .metadata()
            .clone()
            .ok_or_else(|| bad("missing metadata".into()))?;
        let field = |k: &str| meta.get(k).cloned().ok_or_else(|| bad(format!("missing metadata field {k}")));
        if field("format")? != CHECKPOINT_FORMAT {
            return Err(bad("not a separation checkpoint".into()));
        }
        let version: u32 = field("version")?.parse().map_err(|_| bad("bad version".into()))?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let kind = match field("kind")?.as_str() {
            "separator" => CheckpointKind::Separator,
            "counter" => CheckpointKind::Counter,
            other => return Err(bad(format!("unknown kind {other}"))),
        };
        let config = serde_json::from_str(&field("config")?)?;
        let extra = serde_json::from_str(&field("extra")?)?;
        let seed = field("seed")?.parse().map_err(|_| bad("bad seed".into()))?;
        let st = SafeTensors::deserialize(&bytes).map_err(|e| bad(e.to_string()))?;
        let read = |name: &str| -> Result<(Vec<usize>, Vec<f32>)> {
            let t = st.tensor(name).map_err(|e| bad(e.to_string()))?;
            if t.dtype() != Dtype::F32 {
                return Err(bad(format!("{name} is not f32")));
            }
            let v = t
                .data()
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            Ok((t.shape().to_vec(), v))
        };
        let mut tensors = BTreeMap::new();
        for name in st.names() {
            if let Some(p) = name.strip_prefix("param.") {
                tensors.insert(p.to_string(), read(name)?);
            }
        }
        let to_arr = |(shape, v): (Vec<usize>, Vec<f32>)| -> Result<Array2<f32>> {
            if shape.len() != 2 {
                return Err(bad("statistics must be 2-D".into()));
            }
            Array2::from_shape_vec((shape[0], shape[1]), v).map_err(|e| bad(e.to_string()))
        };
        let stats = FeatureStats {
            mean: to_arr(read("stats.mean")?)?,
            variance: to_arr(read("stats.variance")?)?,
        };
        Ok(Self {
            kind,
            config,
            seed,
            stats,
            extra,
            tensors,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separator_round_trip_and_kind_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.safetensors");
        let mut model = Separator::<f32>::new(SeparatorConfig::toy(), 5).unwrap();
        model.params.values_mut()[3] = 42.0;
        let stats = FeatureStats::identity(15, 257);
        let ck = Checkpoint::from_separator(&model, stats, 5, serde_json::json!({"criterion": "pit"}));
        ck.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded, ck);
        let m2 = loaded.separator().unwrap();
        assert_eq!(m2.params.values(), model.params.values());
        assert!(loaded.counter().is_err());
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let model = Separator::<f32>::new(SeparatorConfig::toy(), 1).unwrap();
        let mut ck = Checkpoint::from_separator(&model, FeatureStats::identity(15, 257), 1, serde_json::Value::Null);
        let mut cfg = SeparatorConfig::toy();
        cfg.channels = 12;
        ck.config = serde_json::to_value(cfg).unwrap();
        let err = ck.separator().unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)), "{err}");
    }
}
