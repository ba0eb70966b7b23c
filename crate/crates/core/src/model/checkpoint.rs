use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{build_model, ModelConfig, SegmentationModel};
use crate::error::{Error, Result};
use crate::ingest::Normalization;
use crate::types::{Archive, ArrayData, ClipSpec};

const KIND: &str = "checkpoint";
const PARAM_PREFIX: &str = "param/";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageTag {
    Pretrained,
    Finetuned,
}

/// One line of a training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub stage: String,
    pub loss: f64,
    /// Optimizer steps taken this epoch.
    #[serde(default)]
    pub batches: usize,
    pub val_dsc: Option<f64>,
    /// Seconds since the run started; zero in deterministic mode.
    pub wall_time: f64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: ModelConfig,
    #[serde(default = "one")]
    period: usize,
    stage: StageTag,
    normalization: Normalization,
    history: Vec<EpochSummary>,
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: SegmentationModel,
    /// Clip stride used in training; evaluation windows reuse it.
    pub period: usize,
    pub stage: StageTag,
    pub normalization: Normalization,
    pub history: Vec<EpochSummary>,
}

impl Checkpoint {
    pub fn to_archive(&self) -> Result<Archive> {
        let manifest = Manifest {
            config: self.model.config().clone(),
            period: self.period,
            stage: self.stage,
            normalization: self.normalization,
            history: self.history.clone(),
        };
        let mut a = Archive::new();
        a.push_text("kind", KIND);
        a.push_text(
            "manifest",
            serde_json::to_string(&manifest).map_err(|e| Error::Format(e.to_string()))?,
        );
        for (_, p) in self.model.params().iter() {
            a.push(format!("{PARAM_PREFIX}{}", p.name), p.shape.clone(), ArrayData::F64(p.data.clone()))?;
        }
        Ok(a)
    }

    /// Rebuild from the stored configuration, then fill parameters by name.
    /// Chunks for parameters the current architecture lacks are ignored.
    pub fn from_archive(a: &Archive) -> Result<Self> {
        if a.text("kind")? != KIND {
            return Err(Error::Format("archive is not a checkpoint".into()));
        }
        let m: Manifest = serde_json::from_str(a.text("manifest")?).map_err(|e| Error::Format(format!("manifest: {e}")))?;
        let mut model = build_model(m.config)?;
        for p in model.params_mut().iter_mut() {
            let key = format!("{PARAM_PREFIX}{}", p.name);
            let (dims, data) = a.f64s(&key)?;
            if dims != p.shape.as_slice() {
                return Err(Error::config(
                    p.name.clone(),
                    format!("stored shape {dims:?} does not match {:?}", p.shape),
                ));
            }
            p.data.copy_from_slice(data);
        }
        if !model.params().all_finite() {
            return Err(Error::NonFinite("checkpoint parameters".into()));
        }
        Ok(Self {
            model,
            period: m.period.max(1),
            stage: m.stage,
            normalization: m.normalization,
            history: m.history,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive()?.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::read(path)?)
    }

    pub fn clip_spec(&self) -> Result<ClipSpec> {
        ClipSpec::new(self.model.config().frames, self.period)
    }
}
