//! A single linear layer's quantization instance.

use crate::linalg::{LinalgError, Matrix};

/// One layer's problem data: weights `W` (m x n), quant-flow input `X`
/// (n x k) and FP-flow input (n x k). When no FP-flow trace exists the
/// FP input equals the quant input.
#[derive(Debug, Clone)]
pub struct LayerProblem {
    pub weights: Matrix,
    pub quant_input: Matrix,
    pub fp_input: Matrix,
}

impl LayerProblem {
    pub fn new(
        weights: Matrix,
        quant_input: Matrix,
        fp_input: Matrix,
    ) -> Result<Self, LinalgError> {
        let n = weights.cols();
        if quant_input.rows() != n || fp_input.rows() != n {
            return Err(LinalgError::Shape(format!(
                "weights are {}x{n} but inputs have {} / {} rows",
                weights.rows(),
                quant_input.rows(),
                fp_input.rows()
            )));
        }
        if quant_input.cols() != fp_input.cols() {
            return Err(LinalgError::Shape(format!(
                "input sample counts differ: {} vs {}",
                quant_input.cols(),
                fp_input.cols()
            )));
        }
        Ok(Self {
            weights,
            quant_input,
            fp_input,
        })
    }

    /// Symmetric case: FP-flow input aliases the quant-flow input.
    pub fn symmetric(weights: Matrix, input: Matrix) -> Result<Self, LinalgError> {
        let fp = input.clone();
        Self::new(weights, input, fp)
    }

    pub fn out_features(&self) -> usize {
        self.weights.rows()
    }

    pub fn in_features(&self) -> usize {
        self.weights.cols()
    }

    pub fn samples(&self) -> usize {
        self.quant_input.cols()
    }
}
