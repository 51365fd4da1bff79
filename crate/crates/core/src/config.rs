//! Every tunable of a run, read from `key=value` files and serialized into
//! checkpoints and logs.

use std::path::PathBuf;
use std::str::FromStr;

use crate::backbone::BackboneConfig;
use crate::correlation::AblationMode;
use crate::data::DatasetConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::checkpoint::Metadata;
use crate::train::schedule::{LearningRates, StageEpochs, StageKind, StageSchedule};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub lr: LearningRates,
    pub epochs: StageEpochs,
    /// Enables the optional second CGL stage.
    pub cgl_again: bool,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub seed: u64,
    pub mode: AblationMode,
    /// Generator settings for `gen-data`, keys prefixed `dataset.`.
    pub dataset: DatasetConfig,
    pub grad_batch: usize,
    pub grad_eps: f64,
    pub grad_seed: u64,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let schedule = StageSchedule::default();
        RunConfig {
            model: ModelConfig::default(),
            lr: LearningRates::default(),
            epochs: StageEpochs::default(),
            cgl_again: false,
            batch_size: schedule.batch_size,
            weight_decay: schedule.weight_decay,
            seed: 7,
            mode: AblationMode::Full,
            dataset: DatasetConfig::default(),
            grad_batch: 2,
            grad_eps: 1e-4,
            grad_seed: 0,
            data: None,
            out: None,
            checkpoint: None,
        }
    }
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {v:?} for {key}")))
}

fn list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|x| num(key, x)).collect()
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v.trim() {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean {v:?} for {key}"))),
    }
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim();
        let value = value.trim();
        if let Some(k) = key.strip_prefix("dataset.") {
            return self.dataset.set(k, value);
        }
        if let Some(stage) = key.strip_prefix("epochs.") {
            let kind: StageKind = stage.parse()?;
            self.epochs.set(kind, num(key, value)?);
            return Ok(());
        }
        let b = &mut self.model.backbone;
        match key {
            "image_side" => b.input_size = num(key, value)?,
            "stage_channels" => b.stage_channels = list(key, value)?,
            "downsample" => {
                b.downsample = value.split(',').map(|x| flag(key, x)).collect::<Result<_>>()?;
            }
            "kernel_size" => b.kernel_size = num(key, value)?,
            "regions" => self.model.regions = num(key, value)?,
            "cgl_hidden" => self.model.cgl_hidden = num(key, value)?,
            "key_dim" => self.model.key_dim = num(key, value)?,
            "lr.backbone_pretrain" => self.lr.backbone_pretrain = num(key, value)?,
            "lr.head" => self.lr.head = num(key, value)?,
            "lr.backbone" => self.lr.backbone = num(key, value)?,
            "lr.cgl" => self.lr.cgl = num(key, value)?,
            "lr.gcn" => self.lr.gcn = num(key, value)?,
            "cgl_again" => self.cgl_again = flag(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "mode" => self.mode = value.parse().map_err(|e: Error| Error::Config(e.to_string()))?,
            "grad_batch" => self.grad_batch = num(key, value)?,
            "grad_eps" => self.grad_eps = num(key, value)?,
            "grad_seed" => self.grad_seed = num(key, value)?,
            "data" => self.data = Some(value.into()),
            "out" => self.out = Some(value.into()),
            "checkpoint" => self.checkpoint = Some(value.into()),
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Applies `key=value` lines; `#` starts a comment line.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {line:?}", i + 1)))?;
            self.set(k, v).map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        c.apply_text(text)?;
        Ok(c)
    }

    /// Model, schedule and run keys, without paths or generator settings.
    pub fn entries(&self) -> Vec<(String, String)> {
        let b = &self.model.backbone;
        let mut e = vec![
            ("image_side".to_string(), b.input_size.to_string()),
            ("stage_channels".into(), join(&b.stage_channels)),
            ("downsample".into(), join(&b.downsample)),
            ("kernel_size".into(), b.kernel_size.to_string()),
            ("regions".into(), self.model.regions.to_string()),
            ("cgl_hidden".into(), self.model.cgl_hidden.to_string()),
            ("key_dim".into(), self.model.key_dim.to_string()),
            ("lr.backbone_pretrain".into(), self.lr.backbone_pretrain.to_string()),
            ("lr.head".into(), self.lr.head.to_string()),
            ("lr.backbone".into(), self.lr.backbone.to_string()),
            ("lr.cgl".into(), self.lr.cgl.to_string()),
            ("lr.gcn".into(), self.lr.gcn.to_string()),
        ];
        for kind in StageKind::ALL {
            e.push((format!("epochs.{kind}"), self.epochs.get(kind).to_string()));
        }
        e.extend([
            ("cgl_again".into(), self.cgl_again.to_string()),
            ("batch_size".into(), self.batch_size.to_string()),
            ("weight_decay".into(), self.weight_decay.to_string()),
            ("seed".into(), self.seed.to_string()),
            ("mode".into(), self.mode.to_string()),
        ]);
        e
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// Checkpoint metadata: every run key plus the derived dimensions.
    pub fn metadata(&self, stage_reached: Option<StageKind>) -> Metadata {
        let mut m: Metadata = self.entries().into_iter().collect();
        m.insert("N".into(), self.model.regions.to_string());
        m.insert("C".into(), self.model.channels().to_string());
        m.insert("H".into(), self.model.side().to_string());
        m.insert("W".into(), self.model.side().to_string());
        m.insert("d_k".into(), self.model.key_dim.to_string());
        m.insert("stage".into(), stage_reached.map_or("none", StageKind::name).to_string());
        m
    }

    /// Rebuilds a config from checkpoint metadata, ignoring derived keys.
    pub fn from_metadata(meta: &Metadata) -> Result<Self> {
        let mut c = RunConfig::default();
        for (k, v) in meta {
            if matches!(k.as_str(), "N" | "C" | "H" | "W" | "d_k" | "stage") {
                continue;
            }
            c.set(k, v)?;
        }
        Ok(c)
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        self.model.validate()?;
        Ok(self.model.clone())
    }

    pub fn schedule(&self) -> Result<StageSchedule> {
        let mut s = StageSchedule::new(&self.lr, &self.epochs, self.cgl_again);
        s.batch_size = self.batch_size;
        s.weight_decay = self.weight_decay;
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.schedule()?;
        self.dataset.validate()?;
        if self.grad_batch == 0 || !(self.grad_eps > 0.0) {
            return Err(Error::Config("grad-check batch and step must be positive".into()));
        }
        Ok(())
    }

    pub fn backbone(&self) -> &BackboneConfig {
        &self.model.backbone
    }
}
