use crate::error::Result;

/// Loss value and gradients of one objective evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    /// The objective actually differentiated: task loss plus `gamma * reg`.
    pub loss: f64,
    pub task_loss: f64,
    /// Unweighted regularizer value (zero when `gamma == 0` or not applicable).
    pub reg: f64,
    /// Batch metric: accuracy or mean squared error.
    pub metric: f64,
    pub grad_upper: Vec<f64>,
    pub grad_lower: Vec<f64>,
}

/// A two-level problem over flat parameter vectors. The upper level owns the
/// magnitudes `M`, the lower level the direction factors `V`.
pub trait Bilevel {
    type Batch;

    fn upper_params(&self) -> Vec<f64>;
    fn set_upper_params(&mut self, values: &[f64]) -> Result<()>;
    fn lower_params(&self) -> Vec<f64>;
    fn set_lower_params(&mut self, values: &[f64]) -> Result<()>;

    /// Training objective `L_tr = task loss + gamma * R` on `batch`.
    fn train_objective(&mut self, batch: &Self::Batch, gamma: f64) -> Result<Evaluation>;

    /// Validation objective `L_val` on `batch`.
    fn val_objective(&mut self, batch: &Self::Batch) -> Result<Evaluation>;
}
