//! Model file: a serialized velocity field plus, optionally, the target
//! mixture it was trained on.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{KpeError, Result};
use crate::fields::{ConstantField, GaussianOtField, MixtureFlowField, VelocityField};
use crate::mathcore::Matrix;
use crate::mixture::{GaussianMixture, MixtureComponent, MixtureSpec};
use crate::training::MlpField;

use super::io::{read_json, write_json};
use super::{SCHEMA_VERSION, TOOL_VERSION};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum FieldSpec {
    Constant { value: Vec<f64> },
    /// Displacement interpolation N(0, I) → N(mu, sigma).
    GaussianOt { mu: Vec<f64>, sigma: Matrix },
    /// N(0, I) → N(0, sigma² I).
    Scaling { dim: usize, sigma: f64 },
    /// Exact marginal field towards a Gaussian mixture.
    MixtureFlow { mixture: MixtureSpec },
    Mlp(MlpField),
}

impl PartialEq for FieldSpec {
    fn eq(&self, other: &Self) -> bool {
        serde_json::to_value(self).ok() == serde_json::to_value(other).ok()
    }
}

impl FieldSpec {
    pub fn build(&self) -> Result<Box<dyn VelocityField>> {
        Ok(match self {
            FieldSpec::Constant { value } => Box::new(ConstantField::new(value.clone())?),
            FieldSpec::GaussianOt { mu, sigma } => Box::new(GaussianOtField::new(mu.clone(), sigma.clone())?),
            FieldSpec::Scaling { dim, sigma } => Box::new(GaussianOtField::scaling(*dim, *sigma)?),
            FieldSpec::MixtureFlow { mixture } => {
                Box::new(MixtureFlowField::new(GaussianMixture::new(mixture.clone())?)?)
            }
            FieldSpec::Mlp(f) => Box::new(f.clone()),
        })
    }

    /// ½ W₂² between N(0, I) and the target, for the Gaussian oracles.
    pub fn expected_kpe(&self) -> Result<Option<f64>> {
        Ok(match self {
            FieldSpec::GaussianOt { mu, sigma } => {
                Some(GaussianOtField::new(mu.clone(), sigma.clone())?.expected_kpe())
            }
            FieldSpec::Scaling { dim, sigma } => Some(GaussianOtField::scaling(*dim, *sigma)?.expected_kpe()),
            _ => None,
        })
    }

    /// The terminal distribution, when the field defines it exactly.
    pub fn target(&self) -> Option<MixtureSpec> {
        let single = |mean: Vec<f64>, cov: Matrix| MixtureSpec {
            components: vec![MixtureComponent {
                label: 0,
                weight: 1.0,
                mean,
                cov,
            }],
        };
        match self {
            FieldSpec::GaussianOt { mu, sigma } => Some(single(mu.clone(), sigma.clone())),
            FieldSpec::Scaling { dim, sigma } => {
                Some(single(vec![0.0; *dim], Matrix::identity(*dim).scale(sigma * sigma)))
            }
            FieldSpec::MixtureFlow { mixture } => Some(mixture.clone()),
            FieldSpec::Constant { .. } | FieldSpec::Mlp(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub schema_version: u32,
    pub tool_version: String,
    pub field: FieldSpec,
    /// Distribution the field was trained towards, if known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<MixtureSpec>,
}

impl ModelFile {
    pub fn new(field: FieldSpec, target: Option<MixtureSpec>) -> Self {
        ModelFile {
            schema_version: SCHEMA_VERSION,
            tool_version: TOOL_VERSION.to_string(),
            field,
            target,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m: ModelFile = read_json(path)?;
        if m.schema_version != SCHEMA_VERSION {
            return Err(KpeError::Schema(format!(
                "{} has schema version {}, this tool reads version {SCHEMA_VERSION}",
                path.display(),
                m.schema_version
            )));
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    /// Explicit target, else the one implied by an oracle field.
    pub fn resolved_target(&self) -> Option<MixtureSpec> {
        self.target.clone().or_else(|| self.field.target())
    }
}
