use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};

const EPS: f64 = 1e-8;

/// Adam with bias correction over a fixed list of variables.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    t: u64,
    vars: Vec<Var>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(vars: Vec<Var>, lr: f64, beta1: f64, beta2: f64) -> Result<Self> {
        let m = vars.iter().map(|v| v.zeros_like()).collect::<candle_core::Result<Vec<_>>>()?;
        Ok(Adam {
            lr,
            beta1,
            beta2,
            t: 0,
            v: m.clone(),
            m,
            vars,
        })
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update; variables without a gradient are left untouched.
    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((var, m), v) in self.vars.iter().zip(&mut self.m).zip(&mut self.v) {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            // gradients keep their backprop history; the moments must not
            let g = &g.detach();
            *m = ((&*m * self.beta1)? + (g * (1.0 - self.beta1))?)?;
            *v = ((&*v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?;
            let denom = ((&*v / c2)?.sqrt()? + EPS)?;
            let update = ((&*m / c1)? / denom)?;
            var.set(&(var.as_tensor() - (update * self.lr)?)?)?;
        }
        Ok(())
    }

    pub fn save_into(&self, ck: &mut Checkpoint, prefix: &str) -> Result<()> {
        for (i, (m, v)) in self.m.iter().zip(&self.v).enumerate() {
            ck.insert(format!("{prefix}.m.{i}"), m)?;
            ck.insert(format!("{prefix}.v.{i}"), v)?;
        }
        ck.insert(
            format!("{prefix}.t"),
            &Tensor::new(&[self.t as f32], &candle_core::Device::Cpu)?,
        )?;
        Ok(())
    }

    pub fn load_from(&mut self, ck: &Checkpoint, prefix: &str) -> Result<()> {
        for i in 0..self.vars.len() {
            let m = ck.tensor(&format!("{prefix}.m.{i}"))?;
            if m.shape != self.vars[i].dims() {
                return Err(Error::Checkpoint(format!("optimizer state `{prefix}` does not match network")));
            }
            self.m[i] = m.to_tensor()?;
            self.v[i] = ck.tensor(&format!("{prefix}.v.{i}"))?.to_tensor()?;
        }
        self.t = ck.tensor(&format!("{prefix}.t"))?.data[0] as u64;
        Ok(())
    }
}
