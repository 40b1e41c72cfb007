//! Run descriptions (JSON) and per-input reports.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diag::RunDiag;
use crate::error::{Error, Result};
use crate::reduce::ReductionConfig;
use crate::vit::{self, ModelConfig, ModelWeights};

/// Everything needed to reproduce a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    pub model: ModelConfig,
    pub reduction: ReductionConfig,
    #[serde(default)]
    pub weights: Option<PathBuf>,
    #[serde(default)]
    pub inputs: Vec<PathBuf>,
    #[serde(default)]
    pub out: Option<PathBuf>,
    pub seed: u64,
    /// Ground-truth class per input file name, for accuracy reporting.
    #[serde(default)]
    pub labels: BTreeMap<String, usize>,
}

impl RunSpec {
    pub fn parse(json: &str) -> Result<Self> {
        let spec: RunSpec = serde_json::from_str(json).map_err(|e| Error::Config(format!("run spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.reduction.validate(self.model.depth)
    }

    /// Inputs in sorted path order.
    pub fn sorted_inputs(&self) -> Vec<PathBuf> {
        let mut v = self.inputs.clone();
        v.sort();
        v
    }

    /// Label for an input, looked up by file name.
    pub fn label_for(&self, input: &Path) -> Option<usize> {
        let name = input.file_name()?.to_str()?;
        self.labels.get(name).copied()
    }

    /// Loads the configured weights, or initializes them from the seed.
    pub fn weights(&self) -> Result<ModelWeights> {
        match &self.weights {
            Some(p) => {
                let w = vit::load_weights(p)?;
                if w.config != self.model {
                    return Err(Error::Config(format!(
                        "weights in {} were built for a different model config",
                        p.display()
                    )));
                }
                Ok(w)
            }
            None => vit::init_random(&self.model, self.seed),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub input: String,
    pub prediction: usize,
    pub label: Option<usize>,
    pub logits: Vec<f32>,
    pub diag: RunDiag,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Classifies one input file and packages the result.
pub fn run_input(spec: &RunSpec, weights: &ModelWeights, input: &Path) -> Result<RunReport> {
    let image = vit::load_image(input)?;
    let (logits, diag) = vit::classify(weights, &image, &spec.reduction)?;
    Ok(RunReport {
        input: input.display().to_string(),
        prediction: vit::argmax(&logits),
        label: spec.label_for(input),
        logits: logits.into_data(),
        diag,
    })
}
