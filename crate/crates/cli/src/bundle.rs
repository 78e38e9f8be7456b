//! Tensor bundle file format.
//!
//! Layout: ASCII magic `QBND1`, a little-endian u32 length prefix, a UTF-8
//! JSON manifest, then raw little-endian f32 row-major tensor blocks in
//! manifest order. Values are upcast to f64 for computation.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use compquant::{LayerProblem, Matrix};

pub const MAGIC: &[u8; 5] = b"QBND1";

#[derive(Debug, Error)]
pub enum BundleError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: file is not a QBND1 bundle")]
    BadMagic,
    #[error("truncated bundle: expected {expected} more bytes for {what}")]
    Truncated { what: String, expected: usize },
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error("layer {layer} is missing required tensor {role}")]
    MissingTensor { layer: usize, role: String },
    #[error("shape inconsistency: {0}")]
    Shape(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    W,
    X,
    Xtilde,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub role: Role,
    pub layer: usize,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    schema: u32,
    tensors: Vec<TensorEntry>,
}

/// One layer's tensors. `x_fp` stays `None` when the bundle had no
/// FP-flow input; consumers then alias it to `x`.
#[derive(Debug, Clone)]
pub struct BundleLayer {
    pub weights: Matrix,
    pub x: Matrix,
    pub x_fp: Option<Matrix>,
}

impl BundleLayer {
    pub fn to_problem(&self) -> Result<LayerProblem, BundleError> {
        let fp = self.x_fp.clone().unwrap_or_else(|| self.x.clone());
        LayerProblem::new(self.weights.clone(), self.x.clone(), fp)
            .map_err(|e| BundleError::Shape(e.to_string()))
    }
}

#[derive(Debug, Clone)]
pub struct TensorBundle {
    pub layers: Vec<BundleLayer>,
}

fn matrix_to_f32_bytes(m: &Matrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(m.data().len() * 4);
    for &v in m.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn save_bundle(bundle: &TensorBundle, path: &Path) -> Result<(), BundleError> {
    let mut tensors = Vec::new();
    let mut payload = Vec::new();
    for (l, layer) in bundle.layers.iter().enumerate() {
        let mut push = |role: Role, m: &Matrix| {
            tensors.push(TensorEntry {
                name: format!("layer{l}.{role:?}"),
                role,
                layer: l,
                rows: m.rows(),
                cols: m.cols(),
            });
            payload.extend_from_slice(&matrix_to_f32_bytes(m));
        };
        push(Role::W, &layer.weights);
        push(Role::X, &layer.x);
        if let Some(fp) = &layer.x_fp {
            push(Role::Xtilde, fp);
        }
    }
    let manifest = serde_json::to_vec(&Manifest { schema: 1, tensors })
        .map_err(|e| BundleError::Manifest(e.to_string()))?;
    let mut f = fs::File::create(path)?;
    f.write_all(MAGIC)?;
    f.write_all(&(manifest.len() as u32).to_le_bytes())?;
    f.write_all(&manifest)?;
    f.write_all(&payload)?;
    Ok(())
}

pub fn load_bundle(path: &Path) -> Result<TensorBundle, BundleError> {
    let bytes = fs::read(path)?;
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(BundleError::BadMagic);
    }
    let mut pos = MAGIC.len();
    if bytes.len() < pos + 4 {
        return Err(BundleError::Truncated {
            what: "manifest length".into(),
            expected: pos + 4 - bytes.len(),
        });
    }
    let mlen = u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
    pos += 4;
    if bytes.len() < pos + mlen {
        return Err(BundleError::Truncated {
            what: "manifest".into(),
            expected: pos + mlen - bytes.len(),
        });
    }
    let manifest: Manifest = serde_json::from_slice(&bytes[pos..pos + mlen])
        .map_err(|e| BundleError::Manifest(e.to_string()))?;
    if manifest.schema != 1 {
        return Err(BundleError::Manifest(format!(
            "unsupported schema {}",
            manifest.schema
        )));
    }
    pos += mlen;

    let n_layers = manifest
        .tensors
        .iter()
        .map(|t| t.layer + 1)
        .max()
        .unwrap_or(0);
    let mut weights: Vec<Option<Matrix>> = vec![None; n_layers];
    let mut xs: Vec<Option<Matrix>> = vec![None; n_layers];
    let mut fps: Vec<Option<Matrix>> = vec![None; n_layers];
    for entry in &manifest.tensors {
        let count = entry.rows * entry.cols;
        let nbytes = count * 4;
        if bytes.len() < pos + nbytes {
            return Err(BundleError::Truncated {
                what: format!("payload of {}", entry.name),
                expected: pos + nbytes - bytes.len(),
            });
        }
        let data: Vec<f64> = bytes[pos..pos + nbytes]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        pos += nbytes;
        let m = Matrix::new(entry.rows, entry.cols, data)
            .map_err(|e| BundleError::Shape(format!("{}: {e}", entry.name)))?;
        let slot = match entry.role {
            Role::W => &mut weights[entry.layer],
            Role::X => &mut xs[entry.layer],
            Role::Xtilde => &mut fps[entry.layer],
        };
        if slot.is_some() {
            return Err(BundleError::Manifest(format!(
                "duplicate {:?} tensor for layer {}",
                entry.role, entry.layer
            )));
        }
        *slot = Some(m);
    }

    let mut layers = Vec::with_capacity(n_layers);
    for l in 0..n_layers {
        let w = weights[l].take().ok_or(BundleError::MissingTensor {
            layer: l,
            role: "W".into(),
        })?;
        let x = xs[l].take().ok_or(BundleError::MissingTensor {
            layer: l,
            role: "X".into(),
        })?;
        let x_fp = fps[l].take();
        if x.rows() != w.cols() {
            return Err(BundleError::Shape(format!(
                "layer {l}: W is {}x{} but X has {} rows",
                w.rows(),
                w.cols(),
                x.rows()
            )));
        }
        if let Some(fp) = &x_fp {
            if fp.rows() != x.rows() || fp.cols() != x.cols() {
                return Err(BundleError::Shape(format!(
                    "layer {l}: Xtilde is {}x{} but X is {}x{}",
                    fp.rows(),
                    fp.cols(),
                    x.rows(),
                    x.cols()
                )));
            }
        }
        layers.push(BundleLayer {
            weights: w,
            x,
            x_fp,
        });
    }
    Ok(TensorBundle { layers })
}

/// Seeded single-layer synthetic bundle. Values pass through f32 so a
/// save/load round trip is bit-exact.
pub fn gen_synthetic(seed: u64, m: usize, n: usize, k: usize, noise_level: f64) -> TensorBundle {
    let p = compquant::synth::seeded_problem(seed, m, n, k, noise_level);
    let through_f32 = |m: &Matrix| {
        Matrix::new(
            m.rows(),
            m.cols(),
            m.data().iter().map(|&v| v as f32 as f64).collect(),
        )
        .unwrap()
    };
    TensorBundle {
        layers: vec![BundleLayer {
            weights: through_f32(&p.weights),
            x: through_f32(&p.quant_input),
            x_fp: if noise_level == 0.0 {
                None
            } else {
                Some(through_f32(&p.fp_input))
            },
        }],
    }
}
