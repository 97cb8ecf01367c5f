use crate::error::{Error, Result};
use crate::layers::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adaptive-moment optimizer with bias correction. Moments are kept per
/// parameter and a parameter's step count only advances when it receives a
/// gradient.
#[derive(Debug, Clone)]
pub struct Adam {
    pub hp: AdamParams,
    m: Vec<Option<Tensor>>,
    v: Vec<Option<Tensor>>,
    t: Vec<u64>,
}

impl Adam {
    pub fn new(n_params: usize, hp: AdamParams) -> Self {
        Adam {
            hp,
            m: vec![None; n_params],
            v: vec![None; n_params],
            t: vec![0; n_params],
        }
    }

    /// Applies one update for each `(id, grad)`. All gradients are checked
    /// before any parameter changes.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[(ParamId, Tensor)]) -> Result<()> {
        for (id, g) in grads {
            if g.shape() != params.get(*id).shape() {
                return Err(Error::Dimension {
                    op: "optimizer_step",
                    left: params.get(*id).shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
            if let Some(i) = g.data().iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFinite {
                    param: format!("{} (element {i} = {})", params.name(*id), g.data()[i]),
                });
            }
        }
        let AdamParams {
            lr,
            beta1,
            beta2,
            eps,
        } = self.hp;
        for (id, g) in grads {
            let id = *id;
            let m = self.m[id].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v[id].get_or_insert_with(|| Tensor::zeros(g.shape()));
            self.t[id] += 1;
            let t = self.t[id] as i32;
            let c1 = 1.0 - beta1.powi(t);
            let c2 = 1.0 - beta2.powi(t);
            let p = params.get_mut(id).data_mut();
            for (((p, m), v), &g) in p
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

pub fn global_norm(grads: &[(ParamId, Tensor)]) -> f64 {
    grads
        .iter()
        .flat_map(|(_, g)| g.data())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [(ParamId, Tensor)], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}
