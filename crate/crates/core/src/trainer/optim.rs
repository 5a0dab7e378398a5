//! Adam with bias correction.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Matrix, Real};

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every parameter named in `grads`; names absent from
    /// `grads` are left untouched. A gradient for an unknown name or with
    /// the wrong shape is an error and nothing is updated.
    pub fn step<F: Real>(&mut self, params: &mut ParamStore<F>, grads: &BTreeMap<String, Matrix<F>>) -> Result<()> {
        for (name, g) in grads {
            let p = params
                .get(name)
                .ok_or_else(|| Error::NameMismatch(format!("gradient for unknown parameter {name}")))?;
            if p.shape() != g.shape() {
                return Err(Error::NameMismatch(format!(
                    "{name}: gradient {:?} vs parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads {
            let p = params.get_mut(name).expect("checked above");
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for (i, (x, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gi = gi.as_f64();
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                *x = F::lit(x.as_f64() - self.lr * mh / (vh.sqrt() + self.eps));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_keeps_params() {
        let mut p = ParamStore::<f64>::new();
        p.insert("w", Matrix::from_vec(1, 2, vec![0.3, -0.7]));
        let before = p.clone();
        let mut opt = Adam::new(0.1);
        let grads = BTreeMap::from([("w".to_string(), Matrix::zeros(1, 2))]);
        opt.step(&mut p, &grads).unwrap();
        assert_eq!(p, before);
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn unknown_name_rejected() {
        let mut p = ParamStore::<f64>::new();
        let mut opt = Adam::new(0.1);
        let grads = BTreeMap::from([("nope".to_string(), Matrix::zeros(1, 1))]);
        assert!(matches!(opt.step(&mut p, &grads), Err(Error::NameMismatch(_))));
        assert_eq!(opt.steps(), 0);
    }
}
