//! Multimodal samples, on-disk datasets and the synthetic corpus.

mod batch;
mod io;
mod synthetic;

pub use batch::{batch_indices, BatchIter};
pub use io::{load_dataset, read_records, write_dataset, write_records, DatasetManifest, RecordFormat, SplitFiles};
pub use synthetic::{generate_synthetic, SyntheticConfig};

use crate::error::{Error, Result};
use crate::model::{InputWidths, Modality};
use crate::tensor::Tensor;

pub const LABEL_MIN: f32 = -3.0;
pub const LABEL_MAX: f32 = 3.0;

/// One clip: three unaligned feature sequences and a sentiment score.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub text: Tensor,
    pub visual: Tensor,
    pub acoustic: Tensor,
    pub label: f32,
}

impl Sample {
    pub fn new(id: impl Into<String>, text: Tensor, visual: Tensor, acoustic: Tensor, label: f32) -> Result<Self> {
        let s = Self {
            id: id.into(),
            text,
            visual,
            acoustic,
            label,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(LABEL_MIN..=LABEL_MAX).contains(&self.label) {
            return Err(Error::LabelOutOfRange {
                id: self.id.clone(),
                label: self.label,
            });
        }
        for m in Modality::ALL {
            let t = self.features(m);
            match t.dims() {
                [rows, cols] if *rows > 0 && *cols > 0 => {}
                dims => {
                    return Err(Error::Contract(format!(
                        "sample {:?}: {m} sequence has shape {dims:?}, expected non-empty T×d",
                        self.id
                    )))
                }
            }
        }
        Ok(())
    }

    pub fn features(&self, m: Modality) -> &Tensor {
        match m {
            Modality::Text => &self.text,
            Modality::Visual => &self.visual,
            Modality::Acoustic => &self.acoustic,
        }
    }

    pub fn width(&self, m: Modality) -> usize {
        self.features(m).dims()[1]
    }

    pub fn len(&self, m: Modality) -> usize {
        self.features(m).dims()[0]
    }

    pub fn check_widths(&self, widths: InputWidths) -> Result<()> {
        for m in Modality::ALL {
            let found = self.width(m);
            let expected = widths.get(m);
            if found != expected {
                return Err(Error::WidthMismatch {
                    id: self.id.clone(),
                    modality: m.name(),
                    expected,
                    found,
                });
            }
        }
        Ok(())
    }
}

/// Train, validation and test splits sharing one set of feature widths.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub widths: InputWidths,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Dataset {
    pub fn labels(samples: &[Sample]) -> Vec<f32> {
        samples.iter().map(|s| s.label).collect()
    }
}
