//! Multi-layer propagation harness. Two activation paths run side by
//! side: the quant-flow feeds each layer the outputs of the already
//! quantized layers before it, while the FP-flow stays full-precision
//! throughout. Their divergence is what asymmetric calibration feeds on.

use thiserror::Error;

use crate::engine::{self, EngineError, LayerReport, MethodSpec};
use crate::linalg::{self, LinalgError, Matrix};
use crate::problem::LayerProblem;

#[derive(Debug, Error)]
pub enum FlowError {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("layer {layer}: {source}")]
    Engine { layer: usize, source: EngineError },
    #[error("stack is empty")]
    Empty,
    #[error("layer {layer} expects width {want}, got {got}")]
    Width {
        layer: usize,
        want: usize,
        got: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Nonlinearity {
    Identity,
    Relu,
}

impl Nonlinearity {
    fn apply(&self, m: &mut Matrix) {
        if let Nonlinearity::Relu = self {
            for v in m.data_mut() {
                *v = v.max(0.0);
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct StackLayer {
    pub weights: Matrix,
    pub nonlinearity: Nonlinearity,
}

/// Ordered linear layers with compatible widths.
#[derive(Debug, Clone)]
pub struct LayerStack {
    pub layers: Vec<StackLayer>,
}

impl LayerStack {
    pub fn new(layers: Vec<StackLayer>) -> Result<Self, FlowError> {
        if layers.is_empty() {
            return Err(FlowError::Empty);
        }
        for l in 1..layers.len() {
            let want = layers[l].weights.cols();
            let got = layers[l - 1].weights.rows();
            if want != got {
                return Err(FlowError::Width {
                    layer: l,
                    want,
                    got,
                });
            }
        }
        Ok(Self { layers })
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].weights.cols()
    }
}

/// Both activation traces through the stack. Index 0 is the shared input;
/// index l is the activation after layer l-1.
#[derive(Debug, Clone)]
pub struct FlowTrace {
    pub quant: Vec<Matrix>,
    pub fp: Vec<Matrix>,
    /// `||X^l - X~^l||_F` per level; zero at level 0 by construction.
    pub divergence: Vec<f64>,
}

/// Runs the two flows. `quantized` supplies per-layer replacement weights
/// for the quant-flow; `None` entries (or no list at all) fall back to the
/// original weights.
pub fn propagate(
    stack: &LayerStack,
    input: &Matrix,
    quantized: Option<&[Matrix]>,
) -> Result<FlowTrace, FlowError> {
    if input.rows() != stack.input_width() {
        return Err(FlowError::Width {
            layer: 0,
            want: stack.input_width(),
            got: input.rows(),
        });
    }
    if let Some(qs) = quantized {
        assert_eq!(qs.len(), stack.layers.len(), "one Q per layer");
    }
    let mut quant = vec![input.clone()];
    let mut fp = vec![input.clone()];
    let mut divergence = vec![0.0];
    for (l, layer) in stack.layers.iter().enumerate() {
        let wq = quantized.map(|qs| &qs[l]).unwrap_or(&layer.weights);
        let mut xq = linalg::matmul(wq, quant.last().unwrap())?;
        let mut xf = linalg::matmul(&layer.weights, fp.last().unwrap())?;
        layer.nonlinearity.apply(&mut xq);
        layer.nonlinearity.apply(&mut xf);
        divergence.push(xq.sub(&xf)?.frob_norm_sq().sqrt());
        quant.push(xq);
        fp.push(xf);
    }
    Ok(FlowTrace {
        quant,
        fp,
        divergence,
    })
}

/// Quantizes the stack layer by layer: each layer is calibrated with its
/// quant-flow input against its FP-flow reference, then the quant-flow
/// advances through the freshly quantized weights.
pub fn quantize_stack(
    stack: &LayerStack,
    calibration_input: &Matrix,
    spec: &MethodSpec,
) -> Result<(Vec<Matrix>, Vec<LayerReport>), FlowError> {
    if calibration_input.rows() != stack.input_width() {
        return Err(FlowError::Width {
            layer: 0,
            want: stack.input_width(),
            got: calibration_input.rows(),
        });
    }
    let mut x = calibration_input.clone();
    let mut x_fp = calibration_input.clone();
    let mut quantized = Vec::with_capacity(stack.layers.len());
    let mut reports = Vec::with_capacity(stack.layers.len());
    for (l, layer) in stack.layers.iter().enumerate() {
        let problem = LayerProblem::new(layer.weights.clone(), x.clone(), x_fp.clone())
            .map_err(FlowError::Linalg)?;
        let outcome = engine::run_layer(&problem, spec)
            .map_err(|source| FlowError::Engine { layer: l, source })?;
        let mut next_q = linalg::matmul(&outcome.quantized, &x)?;
        let mut next_fp = linalg::matmul(&layer.weights, &x_fp)?;
        layer.nonlinearity.apply(&mut next_q);
        layer.nonlinearity.apply(&mut next_fp);
        x = next_q;
        x_fp = next_fp;
        quantized.push(outcome.quantized);
        reports.push(outcome.report);
    }
    Ok((quantized, reports))
}
