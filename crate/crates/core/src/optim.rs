//! AdamW with decoupled weight decay, and learning-rate schedules.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{Gradients, ParameterStore};
use crate::error::{Error, Result};
use crate::math;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            lr: 1e-4,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamW {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if !ok {
            return Err(Error::config(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }
}

/// Moment buffers per parameter path plus the number of steps taken.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

impl OptimizerState {
    /// Zeroed buffers mirroring `params`.
    pub fn new(params: &ParameterStore) -> Self {
        let mut m = BTreeMap::new();
        for (path, e) in params.iter() {
            m.insert(String::from(path), vec![0.0; e.value.len()]);
        }
        OptimizerState {
            step: 0,
            v: m.clone(),
            m,
        }
    }

    /// Checks that the buffers mirror `params` exactly.
    pub fn check_against(&self, params: &ParameterStore) -> Result<()> {
        if self.m.len() != params.len() || self.v.len() != params.len() {
            return Err(Error::contract("optimizer state does not cover the parameters"));
        }
        for (path, e) in params.iter() {
            let n = e.value.len();
            match (self.m.get(path), self.v.get(path)) {
                (Some(m), Some(v)) if m.len() == n && v.len() == n => {}
                _ => return Err(Error::contract(format!("optimizer buffers for `{path}` do not match"))),
            }
        }
        Ok(())
    }
}

/// One AdamW update at learning rate `lr_t`.
pub fn adamw_step(
    params: &mut ParameterStore,
    grads: &Gradients,
    state: &mut OptimizerState,
    opt: &AdamW,
    lr_t: f64,
) -> Result<()> {
    state.check_against(params)?;
    for (path, e) in params.iter() {
        match grads.get(path) {
            Some(g) if g.shape() == e.value.shape() => {}
            Some(g) => {
                return Err(Error::contract(format!(
                    "gradient for `{path}` has shape {:?}, parameter {:?}",
                    g.shape(),
                    e.value.shape()
                )))
            }
            None => return Err(Error::contract(format!("no gradient for `{path}`"))),
        }
    }
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - math::powf(opt.beta1, t);
    let bc2 = 1.0 - math::powf(opt.beta2, t);
    let paths: Vec<String> = params.paths().map(String::from).collect();
    for path in paths {
        let g = grads.get(&path).expect("checked above").data();
        let m = state.m.get_mut(&path).expect("checked above");
        let v = state.v.get_mut(&path).expect("checked above");
        let theta = params.value_mut(&path).expect("path from store").data_mut();
        for i in 0..theta.len() {
            m[i] = opt.beta1 * m[i] + (1.0 - opt.beta1) * g[i];
            v[i] = opt.beta2 * v[i] + (1.0 - opt.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            theta[i] -= lr_t * (m_hat / (math::sqrt(v_hat) + opt.eps) + opt.weight_decay * theta[i]);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub enum Schedule {
    Constant,
    /// Half-cosine from the base rate at step 0 to zero at `total`.
    Cosine { total: u64 },
    /// Multiplies by `factor` at each milestone reached.
    Step { milestones: Vec<u64>, factor: f64 },
}

impl Schedule {
    /// Step decay at 9/13 and 12/13 of `total`, the proportions of the
    /// usual short detection schedule. Milestones that collapse to zero or
    /// onto each other in very short runs are dropped.
    pub fn step_for(total: u64) -> Self {
        let mut milestones: Vec<u64> = [total * 9 / 13, total * 12 / 13].into_iter().filter(|&m| m > 0).collect();
        milestones.dedup();
        Schedule::Step { milestones, factor: 0.1 }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Schedule::Constant | Schedule::Cosine { .. } => Ok(()),
            Schedule::Step { milestones, factor } => {
                if milestones.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::config(format!("milestones {milestones:?} not strictly increasing")));
                }
                if !(*factor > 0.0) {
                    return Err(Error::config("step factor must be positive"));
                }
                Ok(())
            }
        }
    }

    pub fn lr_at(&self, base: f64, step: u64) -> f64 {
        match self {
            Schedule::Constant => base,
            Schedule::Cosine { total } => {
                if *total == 0 || step >= *total {
                    return if *total == 0 { base } else { 0.0 };
                }
                let frac = step as f64 / *total as f64;
                base * 0.5 * (1.0 + math::cos(core::f64::consts::PI * frac))
            }
            Schedule::Step { milestones, factor } => {
                let hits = milestones.iter().filter(|&&m| step >= m).count();
                let mut lr = base;
                for _ in 0..hits {
                    lr *= factor;
                }
                lr
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Graph, Init};
    use crate::tensor::Tensor;

    fn store() -> ParameterStore {
        let mut s = ParameterStore::new();
        s.declare("a", &[3], Init::Zero).unwrap();
        s.declare("b", &[2, 2], Init::Zero).unwrap();
        s
    }

    fn grads_of(s: &ParameterStore, f: impl Fn(&mut Graph, &[crate::autodiff::NodeId]) -> crate::autodiff::NodeId) -> Gradients {
        let mut g = Graph::new();
        let ids: Vec<_> = s.paths().map(|p| g.param(s, p).unwrap()).collect();
        let root = f(&mut g, &ids);
        g.backward(root, s).unwrap()
    }

    #[test]
    fn first_step_unit_gradient() {
        let mut s = store();
        let grads = grads_of(&s, |g, ids| {
            let a = g.sum(ids[0], None).unwrap();
            let b = g.sum(ids[1], None).unwrap();
            g.add(a, b).unwrap()
        });
        let opt = AdamW::default();
        let mut st = OptimizerState::new(&s);
        adamw_step(&mut s, &grads, &mut st, &opt, opt.lr).unwrap();
        let want = -opt.lr * (1.0 / (1.0 + opt.eps));
        for (_, e) in s.iter() {
            assert!(e.value.data().iter().all(|&v| (v - want).abs() < 1e-18));
        }
    }

    #[test]
    fn zero_gradient_is_pure_decay() {
        let mut s = store();
        s.set("a", Tensor::new(&[3], vec![1.0, -2.0, 3.0]).unwrap()).unwrap();
        let grads = grads_of(&s, |g, ids| {
            let z = g.scale(ids[0], 0.0).unwrap();
            g.sum(z, None).unwrap()
        });
        let opt = AdamW::default();
        let mut st = OptimizerState::new(&s);
        adamw_step(&mut s, &grads, &mut st, &opt, 0.01).unwrap();
        let f = 1.0 - 0.01 * opt.weight_decay;
        assert_eq!(s.get("a").unwrap().data(), &[1.0 * f, -2.0 * f, 3.0 * f]);
    }

    #[test]
    fn missing_gradient_is_contract_error() {
        let mut s = store();
        let mut other = ParameterStore::new();
        other.declare("a", &[3], Init::Zero).unwrap();
        let grads = grads_of(&other, |g, ids| g.sum(ids[0], None).unwrap());
        let mut st = OptimizerState::new(&s);
        let err = adamw_step(&mut s, &grads, &mut st, &AdamW::default(), 1e-3).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn schedule_endpoints() {
        let c = Schedule::Cosine { total: 500 };
        assert!((c.lr_at(1e-3, 0) - 1e-3).abs() < 1e-12);
        assert!(c.lr_at(1e-3, 500).abs() < 1e-12);
        let s = Schedule::step_for(500);
        assert_eq!(s, Schedule::Step { milestones: vec![346, 461], factor: 0.1 });
        assert_eq!(s.lr_at(2.0, 345), 2.0);
        assert_eq!(s.lr_at(2.0, 346), 2.0 * 0.1);
        assert_eq!(s.lr_at(2.0, 461), 2.0 * 0.1 * 0.1);
        assert!(Schedule::Step { milestones: vec![3, 3], factor: 0.1 }.validate().is_err());
        assert_eq!(Schedule::step_for(1), Schedule::Step { milestones: vec![], factor: 0.1 });
        assert!(Schedule::step_for(2).validate().is_ok());
    }
}
