use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Batch, Model, ModelError};
use crate::numerics::{max_relative_error, Graph, NumericsError};

/// Worst relative error found by [`Model::gradient_check`], with the
/// parameter it occurred in.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientReport {
    pub max_error: f64,
    pub worst_param: String,
    pub checked: usize,
}

impl Model {
    /// Mean MLM cross-entropy over positions with a target, dropout off.
    pub fn mlm_loss(&self, batch: &Batch, targets: &[Option<usize>]) -> Result<f64, ModelError> {
        let graph = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = self.forward(&graph, batch, false, &mut rng)?;
        Ok(flat_logits(out.mlm_logits, self.config.vocab_size)?
            .cross_entropy(targets)?
            .item())
    }

    /// Compares backpropagated MLM-loss gradients with central differences
    /// of step `h` for every scalar of every parameter tensor (dropout off).
    pub fn gradient_check(
        &self,
        batch: &Batch,
        targets: &[Option<usize>],
        h: f64,
    ) -> Result<GradientReport, ModelError> {
        if !(1e-7..=1e-3).contains(&h) {
            return Err(NumericsError::Invalid {
                op: "gradient_check",
                msg: format!("step {h} outside [1e-7, 1e-3]"),
            }
            .into());
        }
        let graph = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bound = self.params.bind(&graph, true);
        let out = self.forward_bound(&graph, &bound, batch, false, &mut rng)?;
        let loss = flat_logits(out.mlm_logits, self.config.vocab_size)?.cross_entropy(targets)?;
        let grads = graph.backward(loss)?;

        let mut probe = self.clone();
        let mut report = GradientReport {
            max_error: 0.0,
            worst_param: String::new(),
            checked: 0,
        };
        for index in 0..self.params.len() {
            let id = super::ParamId(index);
            let analytic = grads
                .get(bound.get(id))
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; self.params.get(id).tensor.numel()]);
            let mut numeric = Vec::with_capacity(analytic.len());
            for k in 0..analytic.len() {
                let original = probe.params.get(id).tensor.data()[k];
                probe.params.get_mut(id).tensor.data_mut()[k] = original + h;
                let plus = probe.mlm_loss(batch, targets)?;
                probe.params.get_mut(id).tensor.data_mut()[k] = original - h;
                let minus = probe.mlm_loss(batch, targets)?;
                probe.params.get_mut(id).tensor.data_mut()[k] = original;
                numeric.push((plus - minus) / (2.0 * h));
            }
            let error = max_relative_error(&analytic, &numeric);
            report.checked += analytic.len();
            if error >= report.max_error {
                report.max_error = error;
                report.worst_param = self.params.get(id).name.clone();
            }
        }
        Ok(report)
    }
}

pub(crate) fn flat_logits(
    logits: crate::numerics::Var<'_>,
    vocab: usize,
) -> Result<crate::numerics::Var<'_>, NumericsError> {
    let rows = logits.shape().iter().product::<usize>() / vocab;
    logits.reshape(&[rows, vocab])
}
