//! Model files: a small self-describing JSON document.
//!
//! Floats are written in shortest round-trip form and parsed exactly, so a
//! save/load cycle reproduces every logit bit for bit.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{LinearSoftmaxDraftModel, TabularMarkovModel, Token, Vocab};

pub const FORMAT_TAG: &str = "gto-lab-model";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Row-major probability table.
    Tabular,
    /// Row-major logits.
    LinearSoftmax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    kind: ModelKind,
    vocab: usize,
    order: usize,
    pad: Token,
    #[serde(default)]
    steps: u64,
    values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum AnyModel {
    Tabular(TabularMarkovModel),
    Draft(LinearSoftmaxDraftModel),
}

impl AnyModel {
    pub fn kind(&self) -> ModelKind {
        match self {
            AnyModel::Tabular(_) => ModelKind::Tabular,
            AnyModel::Draft(_) => ModelKind::LinearSoftmax,
        }
    }

    pub fn into_tabular(self) -> Result<TabularMarkovModel> {
        match self {
            AnyModel::Tabular(m) => Ok(m),
            AnyModel::Draft(_) => Err(Error::Format("expected a tabular model, found linear_softmax".into())),
        }
    }

    pub fn into_draft(self) -> Result<LinearSoftmaxDraftModel> {
        match self {
            AnyModel::Draft(m) => Ok(m),
            AnyModel::Tabular(_) => Err(Error::Format("expected a linear_softmax model, found tabular".into())),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let file = match self {
            AnyModel::Tabular(m) => {
                let w = m.window();
                ModelFile {
                    format: FORMAT_TAG.into(),
                    version: FORMAT_VERSION,
                    kind: ModelKind::Tabular,
                    vocab: w.vocab.size(),
                    order: w.order,
                    pad: w.pad,
                    steps: 0,
                    values: m.table().to_vec(),
                }
            }
            AnyModel::Draft(m) => {
                let w = m.window();
                ModelFile {
                    format: FORMAT_TAG.into(),
                    version: FORMAT_VERSION,
                    kind: ModelKind::LinearSoftmax,
                    vocab: w.vocab.size(),
                    order: w.order,
                    pad: w.pad,
                    steps: m.steps(),
                    values: m.logits().to_vec(),
                }
            }
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text)?;
        if file.format != FORMAT_TAG {
            return Err(Error::Format(format!("unknown format tag {:?}", file.format)));
        }
        if file.version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported version {}", file.version)));
        }
        let vocab = Vocab::new(file.vocab)?;
        vocab.check(file.pad)?;
        Ok(match file.kind {
            ModelKind::Tabular => AnyModel::Tabular(TabularMarkovModel::new(vocab, file.order, file.pad, file.values)?),
            ModelKind::LinearSoftmax => {
                let mut m = LinearSoftmaxDraftModel::from_logits(vocab, file.order, file.pad, file.values)?;
                m.set_steps(file.steps);
                AnyModel::Draft(m)
            }
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

impl From<TabularMarkovModel> for AnyModel {
    fn from(m: TabularMarkovModel) -> Self {
        AnyModel::Tabular(m)
    }
}

impl From<LinearSoftmaxDraftModel> for AnyModel {
    fn from(m: LinearSoftmaxDraftModel) -> Self {
        AnyModel::Draft(m)
    }
}
