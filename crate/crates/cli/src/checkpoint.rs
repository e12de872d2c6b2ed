//! Self-describing binary checkpoints.
//!
//! Layout: magic `OCDACKP1`, `u32` version, `u64` header length, the JSON
//! header, then parameters, first and second Adam moments as little-endian
//! `f64` arrays of the layout length.

use std::path::Path;
use std::sync::Arc;

use ocda_core::diffcore::{GradientVector, Layout, NormStatistics, ParameterVector};
use ocda_core::meta::{HyperParams, TrainState};
use ocda_core::models::ModelSpec;
use ocda_core::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::config::Method;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"OCDACKP1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub method: Method,
    pub normal_class: Option<usize>,
    pub seed: u64,
    pub config_hash: String,
    pub architecture_hash: String,
    pub model: ModelSpec,
    pub layout: Layout,
    pub hyper: HyperParams,
    pub iteration: usize,
    pub best_iteration: usize,
    /// Running batch-norm statistics of a standard-learning model.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub norm_statistics: Option<NormStatistics>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    /// Best-validation parameters.
    pub params: ParameterVector,
    /// Optimizer state at the end of training.
    pub state: TrainState,
}

fn push_f64s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("checkpoint header serializes");
        let n = self.params.len();
        let mut out = Vec::with_capacity(20 + header.len() + 24 * n);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        push_f64s(&mut out, self.params.values());
        push_f64s(&mut out, self.state.first_moment.values());
        push_f64s(&mut out, self.state.second_moment.values());
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let fail = |offset: usize, msg: String| Error::Format {
            path: path.to_path_buf(),
            offset: Some(offset as u64),
            message: msg,
        };
        if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(fail(0, "not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(fail(8, format!("unsupported checkpoint version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = 20usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| fail(12, format!("header length {header_len} exceeds file")))?;
        let header: CheckpointHeader = serde_json::from_slice(&bytes[20..body])
            .map_err(|e| fail(20, format!("invalid header: {e}")))?;
        let layout = Arc::new(header.layout.clone());
        let n = layout.len();
        if header.model.layout() != *layout {
            return Err(fail(20, "layout does not match the model".into()));
        }
        if bytes.len() != body + 24 * n {
            return Err(fail(
                body,
                format!(
                    "expected {} payload bytes for {n} parameters, found {}",
                    24 * n,
                    bytes.len() - body
                ),
            ));
        }
        let read = |k: usize| -> Vec<f64> {
            bytes[body + 8 * n * k..body + 8 * n * (k + 1)]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect()
        };
        let params = ParameterVector::new(layout.clone(), read(0))?;
        let state = TrainState {
            params: params.clone(),
            first_moment: GradientVector::new(layout.clone(), read(1))?,
            second_moment: GradientVector::new(layout, read(2))?,
            iteration: header.iteration,
            best_validation_loss: f64::NAN,
            iterations_since_best: header.iteration.saturating_sub(header.best_iteration),
        };
        Ok(Self {
            header,
            params,
            state,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::decode(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ocda_core::models::{build_mlp, init_params, Activation};

    fn sample() -> Checkpoint {
        let spec = build_mlp(3, &[4], Activation::Tanh, 2).unwrap();
        let params = init_params(&spec, 5);
        let mut state = TrainState::new(params.clone());
        state.first_moment.values_mut()[0] = 0.25;
        state.second_moment.values_mut()[1] = 1e-9;
        state.iteration = 12;
        Checkpoint {
            header: CheckpointHeader {
                method: Method::Maml,
                normal_class: None,
                seed: 5,
                config_hash: "abc".into(),
                architecture_hash: spec.architecture_hash(),
                layout: spec.layout(),
                model: spec,
                hyper: HyperParams::rainbow(),
                iteration: 12,
                best_iteration: 10,
                norm_statistics: None,
            },
            params,
            state,
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        let back = Checkpoint::decode(&c.encode(), Path::new("x")).unwrap();
        assert_eq!(back.header, c.header);
        assert_eq!(back.params, c.params);
        assert_eq!(back.state.first_moment, c.state.first_moment);
        assert_eq!(back.state.second_moment, c.state.second_moment);
    }

    #[test]
    fn corruption_is_a_format_error_with_offset() {
        let bytes = sample().encode();
        let e = Checkpoint::decode(&bytes[..bytes.len() - 3], Path::new("x")).unwrap_err();
        assert!(matches!(e, Error::Format { offset: Some(o), .. } if o > 20));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            Checkpoint::decode(&bad, Path::new("x")),
            Err(Error::Format {
                offset: Some(0),
                ..
            })
        ));
        let mut v2 = bytes;
        v2[8] = 2;
        assert!(matches!(
            Checkpoint::decode(&v2, Path::new("x")),
            Err(Error::Format {
                offset: Some(8),
                ..
            })
        ));
    }
}
