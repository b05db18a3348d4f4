//! AdamW with decoupled weight decay and bias correction.

use super::Tensor;
use crate::error::{Error, Result};

/// Optimizer state: first/second moment buffers aligned with the parameter
/// list it was created from, plus the shared step counter.
#[derive(Debug)]
pub struct AdamW {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamW {
    pub fn new(params: &[(String, Tensor)], weight_decay: f32) -> AdamW {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: params.iter().map(|(_, p)| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|(_, p)| vec![0.0; p.len()]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update. Every parameter must carry a gradient; gradients are
    /// consumed (zeroed) by the step.
    pub fn step(&mut self, params: &[(String, Tensor)], lr: f32) -> Result<()> {
        assert_eq!(params.len(), self.m.len(), "optimizer/parameter list mismatch");
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, (name, p)) in params.iter().enumerate() {
            let g = p.grad().ok_or_else(|| Error::MissingGrad { name: name.clone() })?;
            let mut data = p.to_vec();
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for j in 0..data.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                data[j] -= lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * data[j]);
            }
            p.set_data(data);
            p.zero_grad();
        }
        Ok(())
    }

    /// Moment buffers as named tensors for checkpointing.
    pub fn export_state(&self, params: &[(String, Tensor)]) -> Vec<(String, Vec<f32>)> {
        let mut out = Vec::with_capacity(2 * params.len());
        for (i, (name, _)) in params.iter().enumerate() {
            out.push((format!("opt.m.{name}"), self.m[i].clone()));
            out.push((format!("opt.v.{name}"), self.v[i].clone()));
        }
        out
    }

    pub fn import_state(
        &mut self,
        params: &[(String, Tensor)],
        state: &dyn Fn(&str) -> Option<Vec<f32>>,
        step: u64,
    ) -> Result<()> {
        for (i, (name, p)) in params.iter().enumerate() {
            let m = state(&format!("opt.m.{name}"))
                .ok_or_else(|| Error::Checkpoint(format!("missing opt.m.{name}")))?;
            let v = state(&format!("opt.v.{name}"))
                .ok_or_else(|| Error::Checkpoint(format!("missing opt.v.{name}")))?;
            if m.len() != p.len() || v.len() != p.len() {
                return Err(Error::Checkpoint(format!("moment size mismatch for {name}")));
            }
            self.m[i] = m;
            self.v[i] = v;
        }
        self.step = step;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn named(t: Tensor) -> Vec<(String, Tensor)> {
        vec![("p".to_string(), t)]
    }

    #[test]
    fn zero_grad_zero_decay_leaves_params() {
        let p = Tensor::param(&[3], vec![1.0, -2.0, 3.0]).unwrap();
        let params = named(p.clone());
        let mut opt = AdamW::new(&params, 0.0);
        // zero gradient
        let loss = p.scale(0.0).unwrap().sum_all().unwrap();
        loss.backward().unwrap();
        opt.step(&params, 1e-2).unwrap();
        assert_eq!(p.to_vec(), vec![1.0, -2.0, 3.0]);
        assert_eq!(opt.step_count(), 1);
    }

    // Scalar closed-form oracle for the first step from m = v = 0:
    // update = -lr * g / (|g| + eps) exactly (bias corrections cancel).
    #[test]
    fn first_step_matches_scalar_oracle() {
        for &g in &[0.5f32, -1.25, 3.0e-3] {
            let p = Tensor::param(&[1], vec![2.0]).unwrap();
            let params = named(p.clone());
            let mut opt = AdamW::new(&params, 0.0);
            let lr = 1e-2f32;
            let loss = p.scale(g).unwrap().sum_all().unwrap();
            loss.backward().unwrap();
            opt.step(&params, lr).unwrap();
            let expect = 2.0 - lr * g / (g.abs() + opt.eps);
            let got = p.to_vec()[0];
            assert!((got - expect).abs() < 1e-6, "g={g}: {got} vs {expect}");
        }
    }

    #[test]
    fn decoupled_decay_with_zero_grad() {
        let p = Tensor::param(&[2], vec![4.0, -8.0]).unwrap();
        let params = named(p.clone());
        let lambda = 0.1f32;
        let lr = 0.05f32;
        let mut opt = AdamW::new(&params, lambda);
        let loss = p.scale(0.0).unwrap().sum_all().unwrap();
        loss.backward().unwrap();
        opt.step(&params, lr).unwrap();
        for (got, init) in p.to_vec().iter().zip([4.0f32, -8.0]) {
            let expect = init * (1.0 - lr * lambda);
            assert!((got - expect).abs() < 1e-6);
        }
    }

    #[test]
    fn missing_grad_is_error() {
        let p = Tensor::param(&[2], vec![1.0, 1.0]).unwrap();
        let params = named(p.clone());
        let mut opt = AdamW::new(&params, 0.0);
        assert!(matches!(
            opt.step(&params, 1e-3),
            Err(Error::MissingGrad { .. })
        ));
    }
}
