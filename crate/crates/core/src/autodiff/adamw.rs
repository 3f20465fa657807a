//! AdamW with bias correction and decoupled weight decay.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.0,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Moments {
    m: Tensor,
    v: Tensor,
    step: u64,
}

/// Per-parameter first/second moments and step counters.
///
/// Step counters are per parameter so that experts spawned mid-task get the
/// same bias correction on their first update as a freshly created model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamWState {
    pub config: AdamWConfig,
    moments: BTreeMap<ParamId, Moments>,
}

impl AdamWState {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            moments: BTreeMap::new(),
        }
    }

    pub fn step_count(&self, id: ParamId) -> u64 {
        self.moments.get(&id).map_or(0, |m| m.step)
    }

    /// Drops the moments of a removed parameter.
    pub fn forget(&mut self, id: ParamId) {
        self.moments.remove(&id);
    }

    /// Rebuilds the moments of a matrix parameter whose columns changed.
    /// `mapping[new_col]` names the old column to keep, or `None` for a
    /// fresh zeroed column.
    pub fn remap_columns(&mut self, id: ParamId, mapping: &[Option<usize>]) -> Result<()> {
        let Some(mom) = self.moments.get_mut(&id) else {
            return Ok(());
        };
        let remap = |t: &Tensor| -> Result<Tensor> {
            let (rows, cols) = t.dims2()?;
            let mut data = Vec::with_capacity(rows * mapping.len());
            for r in 0..rows {
                for m in mapping {
                    data.push(match m {
                        Some(c) if *c < cols => t.get(r, *c),
                        Some(c) => {
                            return Err(Error::Index {
                                index: *c,
                                len: cols,
                            })
                        }
                        None => 0.0,
                    });
                }
            }
            Tensor::matrix(rows, mapping.len(), data)
        };
        mom.m = remap(&mom.m)?;
        mom.v = remap(&mom.v)?;
        Ok(())
    }

    /// Applies one update to every non-frozen parameter and clears all
    /// gradients. A non-finite gradient aborts before anything is modified.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        for (id, p) in store.iter() {
            if !p.frozen && !p.grad.all_finite() {
                return Err(Error::NonFiniteGradient {
                    name: p.name.clone(),
                    id: id.0,
                });
            }
        }
        let AdamWConfig {
            lr,
            beta1,
            beta2,
            weight_decay,
            eps,
        } = self.config;
        for (id, p) in store.iter_mut() {
            if p.frozen {
                p.grad.fill(0.0);
                continue;
            }
            let mom = self.moments.entry(id).or_insert_with(|| Moments {
                m: Tensor::zeros(p.value.shape()),
                v: Tensor::zeros(p.value.shape()),
                step: 0,
            });
            if mom.m.shape() != p.value.shape() {
                return Err(Error::Consistency(format!(
                    "optimizer moments for `{}` have shape {:?}, parameter has {:?}",
                    p.name,
                    mom.m.shape(),
                    p.value.shape()
                )));
            }
            mom.step += 1;
            let bc1 = 1.0 - beta1.powi(mom.step as i32);
            let bc2 = 1.0 - beta2.powi(mom.step as i32);
            let g = p.grad.data();
            let m = mom.m.data_mut();
            for (mi, gi) in m.iter_mut().zip(g) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
            }
            let v = mom.v.data_mut();
            for (vi, gi) in v.iter_mut().zip(g) {
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
            }
            let (m, v) = (mom.m.data(), mom.v.data());
            for ((theta, mi), vi) in p.value.data_mut().iter_mut().zip(m).zip(v) {
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                *theta -= lr * (m_hat / (v_hat.sqrt() + eps) + weight_decay * *theta);
            }
            p.grad.fill(0.0);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_scalar_step_matches_hand_value() {
        let mut store = ParamStore::new();
        let id = store.insert("w", Tensor::scalar(0.5));
        store.get_mut(id).unwrap().grad = Tensor::scalar(1.0);
        let mut opt = AdamWState::new(AdamWConfig {
            lr: 0.1,
            ..AdamWConfig::default()
        });
        opt.step(&mut store).unwrap();
        // m = 0.1, v = 0.001; m_hat = 1, v_hat = 1; update = 0.1 / (1 + 1e-8)
        let expected = 0.5 - 0.1 * (1.0 / (1.0 + 1e-8));
        assert_eq!(store.value(id).unwrap().data()[0], expected);
        assert_eq!(store.get(id).unwrap().grad.data()[0], 0.0);
        assert_eq!(opt.step_count(id), 1);
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut store = ParamStore::new();
        let id = store.insert("w", Tensor::row(vec![0.3, -0.7]));
        let mut opt = AdamWState::new(AdamWConfig::default());
        for _ in 0..5 {
            opt.step(&mut store).unwrap();
        }
        assert_eq!(store.value(id).unwrap().data(), &[0.3, -0.7]);
    }

    #[test]
    fn frozen_parameters_are_bit_identical() {
        let mut store = ParamStore::new();
        let id = store.insert("w", Tensor::row(vec![0.3, -0.7]));
        store.set_frozen(id, true).unwrap();
        let before = store.hash(id).unwrap();
        let mut opt = AdamWState::new(AdamWConfig::default());
        store.get_mut(id).unwrap().grad = Tensor::row(vec![1.0, 1.0]);
        opt.step(&mut store).unwrap();
        assert_eq!(before, store.hash(id).unwrap());
    }

    #[test]
    fn nan_gradient_aborts_with_parameter_name() {
        let mut store = ParamStore::new();
        let ok = store.insert("ok", Tensor::scalar(1.0));
        let bad = store.insert("router.w", Tensor::scalar(1.0));
        store.get_mut(ok).unwrap().grad = Tensor::scalar(1.0);
        store.get_mut(bad).unwrap().grad = Tensor::scalar(f64::NAN);
        let mut opt = AdamWState::new(AdamWConfig::default());
        let err = opt.step(&mut store).unwrap_err();
        assert!(err.to_string().contains("router.w"));
        // nothing was applied
        assert_eq!(store.value(ok).unwrap().data()[0], 1.0);
    }

    #[test]
    fn weight_decay_is_decoupled() {
        let mut store = ParamStore::new();
        let id = store.insert("w", Tensor::scalar(2.0));
        let mut opt = AdamWState::new(AdamWConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..AdamWConfig::default()
        });
        opt.step(&mut store).unwrap();
        // zero gradient: only the decay term acts
        assert!((store.value(id).unwrap().data()[0] - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-15);
    }
}
