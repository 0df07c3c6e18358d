use serde::{Deserialize, Serialize};

use super::{Gradients, ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
    /// SGD with non-monotonically triggered iterate averaging.
    Asgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-7,
        }
    }
}

fn check_grads<T: Scalar>(store: &ParamStore<T>, grads: &Gradients<T>) -> Result<()> {
    for (id, p) in store.iter() {
        if let Some(g) = grads.get(id) {
            if g.shape() != p.tensor.shape() {
                return Err(Error::shape("optimizer step", p.tensor.shape(), g.shape()));
            }
            if !g.all_finite() {
                return Err(Error::NonFinite(format!("gradient of {}", p.name)));
            }
        }
    }
    Ok(())
}

fn group_lr(lrs: &[f64], group: usize) -> f64 {
    lrs.get(group).or(lrs.last()).copied().unwrap_or(0.0)
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub weight_decay: f64,
    state: Vec<Option<AdamState<T>>>,
}

#[derive(Debug, Clone)]
struct AdamState<T> {
    m: Tensor<T>,
    v: Tensor<T>,
    beta1_prod: f64,
    beta2_prod: f64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, weight_decay: f64) -> Self {
        Adam {
            config,
            weight_decay,
            state: Vec::new(),
        }
    }

    /// One update. `lrs` is indexed by layer group; `beta1` overrides the
    /// configured first-moment decay for this step (momentum cycling).
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>, lrs: &[f64], beta1: Option<f64>) -> Result<()> {
        check_grads(store, grads)?;
        let b1 = beta1.unwrap_or(self.config.beta1);
        let b2 = self.config.beta2;
        self.state.resize_with(store.len(), || None);
        for (id, p) in store.iter_mut().enumerate().map(|(i, p)| (super::ParamId(i), p)) {
            if p.frozen {
                continue;
            }
            let Some(g) = grads.get(id) else { continue };
            let lr = group_lr(lrs, p.layer_group);
            let st = self.state[id.0].get_or_insert_with(|| AdamState {
                m: Tensor::zeros(p.tensor.rows(), p.tensor.cols()),
                v: Tensor::zeros(p.tensor.rows(), p.tensor.cols()),
                beta1_prod: 1.0,
                beta2_prod: 1.0,
            });
            st.beta1_prod *= b1;
            st.beta2_prod *= b2;
            let c1 = T::lit(1.0 - st.beta1_prod);
            let c2 = T::lit(1.0 - st.beta2_prod);
            let (b1t, b2t) = (T::lit(b1), T::lit(b2));
            let (lr_t, eps) = (T::lit(lr), T::lit(self.config.eps));
            let decay = T::one() - T::lit(lr * self.weight_decay);
            let w = p.tensor.data_mut();
            let m = st.m.data_mut();
            let v = st.v.data_mut();
            for i in 0..w.len() {
                let gi = g.data()[i];
                m[i] = b1t * m[i] + (T::one() - b1t) * gi;
                v[i] = b2t * v[i] + (T::one() - b2t) * gi * gi;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                w[i] = w[i] * decay - lr_t * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Plain SGD with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub weight_decay: f64,
}

impl Sgd {
    pub fn step<T: Scalar>(&self, store: &mut ParamStore<T>, grads: &Gradients<T>, lrs: &[f64]) -> Result<()> {
        check_grads(store, grads)?;
        for (i, p) in store.iter_mut().enumerate() {
            if p.frozen {
                continue;
            }
            let lr = group_lr(lrs, p.layer_group);
            let decay = T::one() - T::lit(lr * self.weight_decay);
            let lr_t = T::lit(lr);
            let g = grads.get(super::ParamId(i));
            for (j, w) in p.tensor.data_mut().iter_mut().enumerate() {
                let gj = g.map_or(T::zero(), |g| g.data()[j]);
                *w = *w * decay - lr_t * gj;
            }
        }
        Ok(())
    }
}

/// SGD that, once triggered, also keeps a running average of the iterates.
#[derive(Debug, Clone)]
pub struct Asgd<T> {
    pub sgd: Sgd,
    /// Epochs without improvement over the best earlier validation loss
    /// before averaging starts.
    pub nonmono: usize,
    average: Option<(Vec<Tensor<T>>, usize)>,
}

impl<T: Scalar> Asgd<T> {
    pub fn new(weight_decay: f64, nonmono: usize) -> Self {
        Asgd {
            sgd: Sgd { weight_decay },
            nonmono,
            average: None,
        }
    }

    pub fn is_averaging(&self) -> bool {
        self.average.is_some()
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>, lrs: &[f64]) -> Result<()> {
        self.sgd.step(store, grads, lrs)?;
        if let Some((avg, count)) = &mut self.average {
            *count += 1;
            let k = T::one() / T::lit(*count as f64);
            for (a, (_, p)) in avg.iter_mut().zip(store.iter()) {
                for (av, &w) in a.data_mut().iter_mut().zip(p.tensor.data()) {
                    *av += (w - *av) * k;
                }
            }
        }
        Ok(())
    }

    /// Start averaging when the latest validation loss is worse than the
    /// best loss seen more than `nonmono` epochs earlier.
    pub fn observe_validation(&mut self, store: &ParamStore<T>, history: &[f64]) {
        if self.average.is_some() || history.len() <= self.nonmono + 1 {
            return;
        }
        let (last, earlier) = history.split_last().unwrap();
        let best_before = earlier[..earlier.len() - self.nonmono]
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min);
        if *last > best_before {
            let snapshot = store.iter().map(|(_, p)| p.tensor.clone()).collect();
            self.average = Some((snapshot, 1));
        }
    }

    /// Averaged weights, if averaging has started.
    pub fn averaged(&self, store: &ParamStore<T>) -> Option<ParamStore<T>> {
        let (avg, _) = self.average.as_ref()?;
        let mut out = store.clone();
        for (p, a) in out.iter_mut().zip(avg) {
            p.tensor = a.clone();
        }
        Some(out)
    }
}

#[derive(Debug, Clone)]
pub enum Optimizer<T> {
    Adam(Adam<T>),
    Sgd(Sgd),
    Asgd(Asgd<T>),
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind, adam: AdamConfig, weight_decay: f64) -> Self {
        match kind {
            OptimizerKind::Adam => Optimizer::Adam(Adam::new(adam, weight_decay)),
            OptimizerKind::Sgd => Optimizer::Sgd(Sgd { weight_decay }),
            OptimizerKind::Asgd => Optimizer::Asgd(Asgd::new(weight_decay, 5)),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>, lrs: &[f64], momentum: Option<f64>) -> Result<()> {
        match self {
            Optimizer::Adam(a) => a.step(store, grads, lrs, momentum),
            Optimizer::Sgd(s) => s.step(store, grads, lrs),
            Optimizer::Asgd(a) => a.step(store, grads, lrs),
        }
    }

    pub fn uses_momentum(&self) -> bool {
        matches!(self, Optimizer::Adam(_))
    }
}
