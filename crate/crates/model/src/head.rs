//! Attenuation head (pointwise conv, batch norm, ReLU, pointwise conv,
//! sigmoid) and the point-wise MSE loss.

use cbct_nn::{BatchStats, Graph, ParamId, ParamStore, Tensor, Var};
use rand::Rng;

use crate::layers::Linear;
use crate::{Error, Result};

pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct Head {
    pub conv1: Linear,
    pub bn_gamma: ParamId,
    pub bn_beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub conv2: Linear,
}

impl Head {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, in_dim: usize, hidden: usize) -> Self {
        Self {
            conv1: Linear::new(store, rng, "head.conv1", in_dim, hidden),
            bn_gamma: store.add("head.bn.gamma", Tensor::full(&[hidden], 1.0)),
            bn_beta: store.add("head.bn.beta", Tensor::zeros(&[hidden])),
            running_mean: store.add_buffer("head.bn.running_mean", Tensor::zeros(&[hidden])),
            running_var: store.add_buffer("head.bn.running_var", Tensor::full(&[hidden], 1.0)),
            conv2: Linear::new(store, rng, "head.conv2", hidden, 1),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.conv1.in_dim
    }

    /// Predictions `[N, 1]` in `(0,1)`. In a training graph the batch
    /// statistics are returned for [`Head::update_running_stats`]; otherwise
    /// the running statistics are used.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<(Var, Option<BatchStats>)> {
        let d = g.value(x).dims2().1;
        if d != self.in_dim() {
            return Err(Error::Shape(format!("head expects width {}, got {d}", self.in_dim())));
        }
        let h = self.conv1.apply(g, store, x);
        let gamma = g.param(store, self.bn_gamma);
        let beta = g.param(store, self.bn_beta);
        let (h, stats) = if g.is_training() {
            let (h, s) = g.batch_norm_train(h, gamma, beta);
            (h, Some(s))
        } else {
            let mean = store.get(self.running_mean).data().to_vec();
            let var = store.get(self.running_var).data().to_vec();
            (g.batch_norm_eval(h, gamma, beta, &mean, &var), None)
        };
        let h = g.relu(h);
        let h = self.conv2.apply(g, store, h);
        Ok((g.sigmoid(h), stats))
    }

    /// Exponential moving average of the batch mean and unbiased variance.
    pub fn update_running_stats(&self, store: &mut ParamStore, stats: &BatchStats) {
        let var = stats.unbiased_var();
        for (r, b) in store.get_mut(self.running_mean).data_mut().iter_mut().zip(&stats.mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
        }
        for (r, b) in store.get_mut(self.running_var).data_mut().iter_mut().zip(&var) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
        }
    }
}

/// `(1/N) Σ (pred - gt)²`.
pub fn mse_loss(pred: &[f64], gt: &[f64]) -> Result<f64> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::Shape(format!("{} predictions for {} targets", pred.len(), gt.len())));
    }
    Ok(pred.iter().zip(gt).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / pred.len() as f64)
}
