use super::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self::adam(1e-3)
    }
}

impl OptimizerConfig {
    pub fn adam(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn sgd(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            ..Self::adam(lr)
        }
    }
}

/// First-order optimizer over a list of parameter tensors.
#[derive(Debug, Clone)]
pub struct Optimizer {
    cfg: OptimizerConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    steps: u64,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig) -> Self {
        Self {
            cfg,
            m: Vec::new(),
            v: Vec::new(),
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step<F: Real>(&mut self, params: Vec<&mut [F]>, grads: &[Vec<F>]) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter tensor");
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        self.steps += 1;
        let c = self.cfg;
        let bias1 = 1.0 - c.beta1.powi(self.steps as i32);
        let bias2 = 1.0 - c.beta2.powi(self.steps as i32);
        for (k, (p, g)) in params.into_iter().zip(grads).enumerate() {
            assert_eq!(p.len(), g.len(), "parameter/gradient length");
            match c.kind {
                OptimizerKind::Sgd => {
                    for (w, &d) in p.iter_mut().zip(g) {
                        *w -= F::lit(c.lr * d.as_f64());
                    }
                }
                OptimizerKind::Adam => {
                    let (m, v) = (&mut self.m[k], &mut self.v[k]);
                    for i in 0..p.len() {
                        let d = g[i].as_f64();
                        m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * d;
                        v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * d * d;
                        let mh = m[i] / bias1;
                        let vh = v[i] / bias2;
                        p[i] -= F::lit(c.lr * mh / (vh.sqrt() + c.eps));
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut opt = Optimizer::new(OptimizerConfig::adam(0.01));
        let mut w = vec![1.0f64, -2.0];
        opt.step(vec![w.as_mut_slice()], &[vec![3.0, -0.5]]);
        assert!((w[0] - 0.99).abs() < 1e-9);
        assert!((w[1] + 1.99).abs() < 1e-9);
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn sgd_step() {
        let mut opt = Optimizer::new(OptimizerConfig::sgd(0.5));
        let mut w = vec![1.0f32];
        opt.step(vec![w.as_mut_slice()], &[vec![2.0]]);
        assert_eq!(w[0], 0.0);
    }
}
