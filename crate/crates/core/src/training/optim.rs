use super::TrainingError;
use crate::model::{text_enum, Checkpoint, ParamStore};
use crate::numerics::Tensor;

text_enum!(
    OptimizerKind { Lamb => "lamb", AdamW => "adamw" }
);

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// LAMB only: replace the trust ratio by 1.
    pub unit_trust_ratio: bool,
}

impl OptimizerConfig {
    pub fn lamb(weight_decay: f64) -> Self {
        Self {
            kind: OptimizerKind::Lamb,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-6,
            weight_decay,
            unit_trust_ratio: false,
        }
    }

    pub fn adamw(weight_decay: f64) -> Self {
        Self {
            kind: OptimizerKind::AdamW,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-6,
            weight_decay,
            unit_trust_ratio: false,
        }
    }
}

/// Per-tensor first and second moments plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, sizes: impl IntoIterator<Item = usize>) -> Self {
        let (m, v): (Vec<_>, Vec<_>) = sizes
            .into_iter()
            .map(|n| (vec![0.0; n], vec![0.0; n]))
            .unzip();
        Self {
            config,
            step: 0,
            m,
            v,
        }
    }

    pub fn for_params(config: OptimizerConfig, params: &ParamStore) -> Self {
        Self::new(config, params.iter().map(|p| p.tensor.numel()))
    }

    /// Advances the step counter; call once before the per-tensor updates
    /// of a step.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Updates tensor `index` in place. `decay` selects whether weight decay
    /// applies to it.
    pub fn update(&mut self, index: usize, param: &mut [f64], grad: &[f64], decay: bool, lr: f64) {
        let c = &self.config;
        let t = self.step.max(1) as i32;
        let correction1 = 1.0 - c.beta1.powi(t);
        let correction2 = 1.0 - c.beta2.powi(t);
        let wd = if decay { c.weight_decay } else { 0.0 };
        let (m, v) = (&mut self.m[index], &mut self.v[index]);
        let mut direction = Vec::with_capacity(param.len());
        for k in 0..param.len() {
            let g = grad[k];
            m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * g;
            v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * g * g;
            let m_hat = m[k] / correction1;
            let v_hat = v[k] / correction2;
            direction.push(m_hat / (v_hat.sqrt() + c.eps) + wd * param[k]);
        }
        let ratio = match c.kind {
            OptimizerKind::Lamb if !c.unit_trust_ratio => {
                let (p_norm, u_norm) = (norm(param), norm(&direction));
                if p_norm == 0.0 || u_norm == 0.0 {
                    1.0
                } else {
                    p_norm / u_norm
                }
            }
            _ => 1.0,
        };
        for (p, u) in param.iter_mut().zip(direction) {
            *p -= lr * ratio * u;
        }
    }

    /// One step over every tensor of `params`, using their gradient buffers.
    pub fn step(&mut self, params: &mut ParamStore, lr: f64) -> Result<(), TrainingError> {
        if self.m.len() != params.len() {
            return Err(TrainingError::Config(format!(
                "optimizer tracks {} tensors, model has {}",
                self.m.len(),
                params.len()
            )));
        }
        self.begin_step();
        for (index, param) in params.iter_mut().enumerate() {
            let decay = param.decay;
            let grad = param
                .tensor
                .grad()
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; param.tensor.numel()]);
            self.update(index, param.tensor.data_mut(), &grad, decay, lr);
        }
        Ok(())
    }

    /// Appends `optimizer.m.*` / `optimizer.v.*` tensors and the step count.
    pub fn save_into(
        &self,
        checkpoint: &mut Checkpoint,
        params: &ParamStore,
    ) -> Result<(), TrainingError> {
        checkpoint
            .meta
            .push(("optimizer".into(), self.config.kind.to_string()));
        checkpoint
            .meta
            .push(("optimizer_step".into(), self.step.to_string()));
        for (i, p) in params.iter().enumerate() {
            let shape = p.tensor.shape();
            checkpoint.tensors.push((
                format!("optimizer.m.{}", p.name),
                Tensor::new(shape, self.m[i].clone())?,
            ));
            checkpoint.tensors.push((
                format!("optimizer.v.{}", p.name),
                Tensor::new(shape, self.v[i].clone())?,
            ));
        }
        Ok(())
    }

    /// Restores moments saved by [`Optimizer::save_into`].
    pub fn load_from(
        config: OptimizerConfig,
        checkpoint: &Checkpoint,
        params: &ParamStore,
    ) -> Result<Self, TrainingError> {
        let missing = |what: String| TrainingError::Config(format!("checkpoint lacks {what}"));
        let step = checkpoint
            .meta("optimizer_step")
            .ok_or_else(|| missing("optimizer_step".into()))?
            .parse()
            .map_err(|_| TrainingError::Config("bad optimizer_step".into()))?;
        let mut opt = Self::for_params(config, params);
        opt.step = step;
        for (i, p) in params.iter().enumerate() {
            for (prefix, dest) in [("m", &mut opt.m[i]), ("v", &mut opt.v[i])] {
                let name = format!("optimizer.{prefix}.{}", p.name);
                let t = checkpoint
                    .tensor(&name)
                    .ok_or_else(|| missing(name.clone()))?;
                if t.numel() != dest.len() {
                    return Err(TrainingError::Config(format!("{name} has the wrong size")));
                }
                dest.copy_from_slice(t.data());
            }
        }
        Ok(opt)
    }
}

/// Scales the buffers so their joint L2 norm is at most `max_norm` and
/// returns the norm measured before scaling.
pub fn clip_gradients(grads: &mut [&mut [f64]], max_norm: f64) -> Result<f64, TrainingError> {
    let mut sum = 0.0;
    for g in grads.iter() {
        for &x in g.iter() {
            if !x.is_finite() {
                return Err(TrainingError::NonFinite("gradient".into()));
            }
            sum += x * x;
        }
    }
    let total = sum.sqrt();
    if total > max_norm {
        let scale = max_norm / total;
        for g in grads.iter_mut() {
            g.iter_mut().for_each(|x| *x *= scale);
        }
    }
    Ok(total)
}

/// [`clip_gradients`] over the gradient buffers of a parameter store.
pub fn clip_param_gradients(params: &mut ParamStore, max_norm: f64) -> Result<f64, TrainingError> {
    let mut buffers: Vec<&mut [f64]> = params
        .iter_mut()
        .filter_map(|p| p.tensor.grad_mut())
        .collect();
    clip_gradients(&mut buffers, max_norm)
}
