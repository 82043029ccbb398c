use super::{ParamStore, Result, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias-corrected moments. Moment buffers are created lazily
/// on the first step and must keep matching the store's layout.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, t: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update. `grads[i]` belongs to parameter `i`; `None`
    /// leaves that parameter (and its moments) untouched.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Option<Tensor>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(TensorError::Invalid {
                op: "adam_step",
                msg: format!("{} gradients for {} parameters", grads.len(), params.len()),
            });
        }
        if self.m.is_empty() {
            self.m = params.tensors().iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = self.m.clone();
        }
        for ((id, g), m) in params.ids().zip(grads).zip(&self.m) {
            if let Some(g) = g {
                let p = params.get(id);
                if g.shape() != p.shape() || m.len() != p.numel() {
                    return Err(TensorError::ShapeMismatch {
                        op: "adam_step",
                        lhs: p.shape().to_vec(),
                        rhs: g.shape().to_vec(),
                    });
                }
            }
        }
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (i, id) in params.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let Some(g) = &grads[i] else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let p = params.get_mut(id).data_mut();
            for (((p, g), m), v) in p.iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let mh = *m / bc1;
                let vh = *v / bc2;
                *p -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(vals: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("p", Tensor::new([vals.len()], vals.to_vec()).unwrap());
        s
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = store(&[1.0, -2.0]);
        let mut opt = Adam::new(AdamConfig::default());
        opt.step(&mut s, &[Some(Tensor::zeros([2]))]).unwrap();
        assert_eq!(s.tensors()[0].data(), &[1.0, -2.0]);
    }

    #[test]
    fn first_step_is_sign_scaled() {
        let mut s = store(&[0.5, 0.5]);
        let mut opt = Adam::new(AdamConfig::default());
        let g = [3.0, -0.25];
        opt.step(&mut s, &[Some(Tensor::new([2], g.to_vec()).unwrap())]).unwrap();
        for (p, g) in s.tensors()[0].data().iter().zip(g) {
            let want = 0.5 - 1e-3 * g / (g.abs() + 1e-8);
            assert!((p - want).abs() < 1e-15, "{p} vs {want}");
        }
    }

    #[test]
    fn two_steps_match_reference() {
        // Hand-rolled Adam for a scalar with constant gradient.
        let (lr, b1, b2, eps, g) = (1e-3, 0.9, 0.999, 1e-8, 0.7);
        let (mut p, mut m, mut v) = (2.0_f64, 0.0_f64, 0.0_f64);
        for t in 1..=2 {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            p -= lr * mh / (vh.sqrt() + eps);
        }
        let mut s = store(&[2.0]);
        let mut opt = Adam::new(AdamConfig::default());
        for _ in 0..2 {
            opt.step(&mut s, &[Some(Tensor::new([1], vec![g]).unwrap())]).unwrap();
        }
        assert!((s.tensors()[0].data()[0] - p).abs() < 1e-12);
        assert_eq!(opt.steps(), 2);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut s = store(&[1.0, 2.0]);
        let mut opt = Adam::new(AdamConfig::default());
        assert!(opt.step(&mut s, &[Some(Tensor::zeros([3]))]).is_err());
        assert!(opt.step(&mut s, &[]).is_err());
    }
}
