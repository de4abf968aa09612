//! RMSprop and a reduce-on-plateau learning-rate schedule.

use std::collections::HashMap;
use std::path::Path;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;

pub const RMSPROP_RHO: f64 = 0.99;
pub const RMSPROP_EPS: f64 = 1e-8;

/// `v <- rho v + (1 - rho) g^2`, `p <- p - lr g / (sqrt(v) + eps)`, no momentum.
#[derive(Debug, Clone)]
pub struct RmsProp {
    lr: f64,
    names: Vec<String>,
    vars: Vec<Var>,
    sq: Vec<Tensor>,
}

/// Copy of the running squared-gradient averages.
#[derive(Debug, Clone)]
pub struct RmsState(Vec<Tensor>);

impl RmsProp {
    pub fn new(named: Vec<(String, Var)>, lr: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {lr} must be positive")));
        }
        let mut names = Vec::with_capacity(named.len());
        let mut vars = Vec::with_capacity(named.len());
        let mut sq = Vec::with_capacity(named.len());
        for (name, var) in named {
            sq.push(var.as_tensor().zeros_like()?);
            names.push(name);
            vars.push(var);
        }
        Ok(Self { lr, names, vars, sq })
    }

    pub fn for_store(store: &ParamStore, lr: f64) -> Result<Self> {
        Self::new(store.iter().map(|(n, v)| (n.clone(), v.clone())).collect(), lr)
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    /// Applies one update; parameters without a gradient are left alone.
    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        for (var, sq) in self.vars.iter().zip(self.sq.iter_mut()) {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let g = g.detach();
            let v = ((&*sq * RMSPROP_RHO)? + (g.sqr()? * (1.0 - RMSPROP_RHO))?)?;
            let update = (g / (v.sqrt()? + RMSPROP_EPS)?)?;
            var.set(&(var.as_tensor().detach() - (update * self.lr)?)?)?;
            *sq = v;
        }
        Ok(())
    }

    pub fn state(&self) -> RmsState {
        RmsState(self.sq.clone())
    }

    pub fn restore(&mut self, state: &RmsState) -> Result<()> {
        if state.0.len() != self.sq.len() {
            return Err(Error::validation("optimizer state belongs to a different parameter set"));
        }
        self.sq = state.0.clone();
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let map: HashMap<String, Tensor> = self.names.iter().cloned().zip(self.sq.iter().cloned()).collect();
        candle_core::safetensors::save(&map, path)?;
        Ok(())
    }

    pub fn load(&mut self, path: &Path) -> Result<()> {
        let mut map = candle_core::safetensors::load(path, self.vars[0].device())?;
        for (name, (sq, var)) in self.names.iter().zip(self.sq.iter_mut().zip(&self.vars)) {
            let t = map
                .remove(name)
                .ok_or_else(|| Error::Config(format!("optimizer state lacks {name}")))?;
            if t.dims() != var.dims() {
                return Err(Error::shape(format!("{:?}", var.dims()), format!("{:?}", t.dims())));
            }
            *sq = t.to_dtype(var.dtype())?;
        }
        Ok(())
    }
}

/// Multiplies the learning rate by `factor` once the monitored loss has not
/// improved for more than `patience` consecutive evaluations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plateau {
    pub patience: usize,
    pub factor: f64,
    pub min_lr: f64,
    /// Relative improvement needed to count as better.
    pub threshold: f64,
    best: Option<f64>,
    bad: usize,
}

impl Plateau {
    pub fn new(patience: usize, factor: f64, min_lr: f64) -> Self {
        Self {
            patience,
            factor,
            min_lr,
            threshold: 1e-4,
            best: None,
            bad: 0,
        }
    }

    /// Records a loss; returns the new learning rate when it was reduced.
    pub fn observe(&mut self, loss: f64, opt: &mut RmsProp) -> Option<f64> {
        if self.best.is_none_or(|best| loss < best * (1.0 - self.threshold)) {
            self.best = Some(loss);
            self.bad = 0;
            return None;
        }
        self.bad += 1;
        if self.bad <= self.patience {
            return None;
        }
        self.bad = 0;
        let lr = (opt.lr() * self.factor).max(self.min_lr);
        if lr < opt.lr() {
            opt.set_lr(lr);
            Some(lr)
        } else {
            None
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn first_step_matches_hand_computation() {
        let var = Var::from_tensor(&Tensor::new(&[1.0f64, -2.0, 0.0], &Device::Cpu).unwrap()).unwrap();
        let mut opt = RmsProp::new(vec![("p".into(), var.clone())], 0.01).unwrap();
        // loss = sum(3 p) gives gradient 3 everywhere
        let grads = (var.as_tensor() * 3.0).unwrap().sum_all().unwrap().backward().unwrap();
        opt.step(&grads).unwrap();
        let got: Vec<f64> = var.as_tensor().to_vec1().unwrap();
        let v: f64 = 0.01 * 9.0;
        let step = 0.01 * 3.0 / (v.sqrt() + 1e-8);
        for (g, p0) in got.iter().zip([1.0, -2.0, 0.0]) {
            assert!((g - (p0 - step)).abs() < 1e-15);
        }
    }

    #[test]
    fn restore_rewinds_state() {
        let var = Var::from_tensor(&Tensor::new(&[0.5f64], &Device::Cpu).unwrap()).unwrap();
        let mut opt = RmsProp::new(vec![("p".into(), var.clone())], 0.1).unwrap();
        let saved = opt.state();
        let grads = var.as_tensor().sqr().unwrap().sum_all().unwrap().backward().unwrap();
        opt.step(&grads).unwrap();
        opt.restore(&saved).unwrap();
        let sq: Vec<f64> = opt.sq[0].to_vec1().unwrap();
        assert_eq!(sq, vec![0.0]);
    }

    #[test]
    fn state_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let var = Var::from_tensor(&Tensor::new(&[0.5f32, 1.5], &Device::Cpu).unwrap()).unwrap();
        let mut opt = RmsProp::new(vec![("p".into(), var.clone())], 0.1).unwrap();
        let grads = var.as_tensor().sqr().unwrap().sum_all().unwrap().backward().unwrap();
        opt.step(&grads).unwrap();
        let path = dir.path().join("opt.safetensors");
        opt.save(&path).unwrap();
        let mut fresh = RmsProp::new(vec![("p".into(), var.clone())], 0.1).unwrap();
        fresh.load(&path).unwrap();
        assert_eq!(fresh.sq[0].to_vec1::<f32>().unwrap(), opt.sq[0].to_vec1::<f32>().unwrap());
        assert_eq!(fresh.sq[0].dtype(), DType::F32);
    }

    #[test]
    fn plateau_reduces_after_patience_and_respects_floor() {
        let var = Var::from_tensor(&Tensor::new(&[0.0f64], &Device::Cpu).unwrap()).unwrap();
        let mut opt = RmsProp::new(vec![("p".into(), var)], 1.25e-6).unwrap();
        let mut sched = Plateau::new(5, 0.8, 1e-6);
        assert_eq!(sched.observe(1.0, &mut opt), None);
        for _ in 0..5 {
            assert_eq!(sched.observe(1.0, &mut opt), None);
        }
        let reduced = sched.observe(1.0, &mut opt).unwrap();
        assert!((reduced - 1e-6).abs() < 1e-18);
        for _ in 0..30 {
            sched.observe(2.0, &mut opt);
        }
        assert!(opt.lr() >= 1e-6);
    }
}
