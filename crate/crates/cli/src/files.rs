// SPDX-License-Identifier: MIT OR Apache-2.0

//! Sample and trace files.
//!
//! Samples: `{"version": 1, "rows": n, "cols": d, "data": [[...], ...]}`.
//! Traces: `{"version": 1, "layers": [<sample object without version>, ...]}`,
//! one entry per hook.

use serde::{Deserialize, Serialize};
use steer_core::{ActivationTrace, Error, Tensor};

pub const DATA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<Vec<f64>>,
}

impl Matrix {
    fn from_tensor(t: &Tensor) -> Self {
        Matrix {
            rows: t.rows(),
            cols: t.cols(),
            data: t.to_rows(),
        }
    }

    fn into_tensor(self, field: &str) -> steer_core::Result<Tensor> {
        let load = |reason: String| Error::Load {
            field: field.to_string(),
            reason,
        };
        if self.data.len() != self.rows {
            return Err(load(format!(
                "{} rows listed, header says {}",
                self.data.len(),
                self.rows
            )));
        }
        if let Some(i) = self.data.iter().position(|r| r.len() != self.cols) {
            return Err(load(format!("row {i} does not have {} values", self.cols)));
        }
        let flat: Vec<f64> = self.data.into_iter().flatten().collect();
        Tensor::from_vec(self.rows, self.cols, flat).map_err(|e| load(e.to_string()))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleFile {
    version: u32,
    #[serde(flatten)]
    matrix: Matrix,
}

impl SampleFile {
    pub fn from_tensor(t: &Tensor) -> Self {
        SampleFile {
            version: DATA_VERSION,
            matrix: Matrix::from_tensor(t),
        }
    }

    pub fn to_json(&self) -> String {
        crate::task::to_json_line(self)
    }

    pub fn from_json(text: &str) -> steer_core::Result<Tensor> {
        let f: SampleFile = serde_json::from_str(text).map_err(|e| Error::Load {
            field: "samples".into(),
            reason: e.to_string(),
        })?;
        if f.version != DATA_VERSION {
            return Err(Error::Load {
                field: "version".into(),
                reason: format!("unsupported version {}", f.version),
            });
        }
        f.matrix.into_tensor("data")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceFile {
    version: u32,
    layers: Vec<Matrix>,
}

impl TraceFile {
    pub fn from_trace(t: &ActivationTrace) -> Self {
        TraceFile {
            version: DATA_VERSION,
            layers: t.layers().iter().map(Matrix::from_tensor).collect(),
        }
    }

    pub fn to_json(&self) -> String {
        crate::task::to_json_line(self)
    }

    pub fn from_json(text: &str) -> steer_core::Result<ActivationTrace> {
        let f: TraceFile = serde_json::from_str(text).map_err(|e| Error::Load {
            field: "trace".into(),
            reason: e.to_string(),
        })?;
        if f.version != DATA_VERSION {
            return Err(Error::Load {
                field: "version".into(),
                reason: format!("unsupported version {}", f.version),
            });
        }
        let layers = f
            .layers
            .into_iter()
            .enumerate()
            .map(|(i, m)| m.into_tensor(&format!("layers[{i}]")))
            .collect::<steer_core::Result<Vec<_>>>()?;
        ActivationTrace::new(layers)
    }
}
