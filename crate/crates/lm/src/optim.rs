use crate::config::LmConfig;
use crate::model::Param;

/// Linear warmup to `peak`, then decay as `peak·sqrt(warmup/step)`. Steps are 1-based.
pub fn inverse_sqrt_lr(peak: f64, warmup: usize, step: usize) -> f64 {
    let s = step.max(1) as f64;
    if warmup == 0 {
        return peak / s.sqrt();
    }
    let w = warmup as f64;
    if s <= w {
        peak * s / w
    } else {
        peak * (w / s).sqrt()
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    peak_lr: f64,
    warmup: usize,
    betas: (f64, f64),
    eps: f64,
    weight_decay: f64,
    step: usize,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(config: &LmConfig, params: &[Param]) -> Self {
        Self {
            peak_lr: config.peak_lr,
            warmup: config.warmup_steps,
            betas: config.betas,
            eps: config.adam_eps,
            weight_decay: config.weight_decay,
            step: 0,
            first: params.iter().map(|p| vec![0.0; p.value.numel()]).collect(),
            second: params.iter().map(|p| vec![0.0; p.value.numel()]).collect(),
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn current_lr(&self) -> f64 {
        inverse_sqrt_lr(self.peak_lr, self.warmup, self.step.max(1))
    }

    /// One update; `grads[i]` belongs to `params[i]`.
    pub fn step(&mut self, params: &mut [Param], grads: &[Vec<f64>]) {
        self.step += 1;
        let lr = inverse_sqrt_lr(self.peak_lr, self.warmup, self.step);
        let (b1, b2) = self.betas;
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let decay = if p.decays() { lr * self.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (j, x) in p.value.data_mut().iter_mut().enumerate() {
                let g = grads[i][j];
                m[j] = b1 * m[j] + (1.0 - b1) * g;
                v[j] = b2 * v[j] + (1.0 - b2) * g * g;
                let update = (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
                *x -= lr * update + decay * *x;
            }
        }
    }
}

/// Scales `grads` in place so their global norm is at most `max_norm`; returns the norm before scaling.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use rpe_autograd::Tensor;

    #[test]
    fn schedule_shape() {
        assert_eq!(inverse_sqrt_lr(1.0, 4, 1), 0.25);
        assert_eq!(inverse_sqrt_lr(1.0, 4, 4), 1.0);
        assert_eq!(inverse_sqrt_lr(1.0, 4, 16), 0.5);
        assert_eq!(inverse_sqrt_lr(2.0, 0, 4), 1.0);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // bias-corrected Adam moves each coordinate by about lr·sign(g) on step one
        let cfg = LmConfig {
            peak_lr: 0.1,
            warmup_steps: 1,
            weight_decay: 0.0,
            ..LmConfig::default()
        };
        let mut params = vec![Param {
            name: "w".into(),
            value: Tensor::new(&[2], vec![1.0, -1.0]).unwrap(),
        }];
        let mut opt = AdamW::new(&cfg, &params);
        opt.step(&mut params, &[vec![3.0, -0.5]]);
        let d = params[0].value.data();
        assert!((d[0] - 0.9).abs() < 1e-6 && (d[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn decay_only_on_matrices() {
        let cfg = LmConfig {
            peak_lr: 0.1,
            warmup_steps: 1,
            weight_decay: 0.5,
            ..LmConfig::default()
        };
        let mut params = vec![
            Param {
                name: "m".into(),
                value: Tensor::full(&[1, 1], 2.0),
            },
            Param {
                name: "b".into(),
                value: Tensor::full(&[1], 2.0),
            },
        ];
        let mut opt = AdamW::new(&cfg, &params);
        opt.step(&mut params, &[vec![0.0], vec![0.0]]);
        assert!((params[0].value.data()[0] - 1.9).abs() < 1e-12);
        assert_eq!(params[1].value.data()[0], 2.0);
    }

    #[test]
    fn clipping() {
        let mut g = vec![vec![3.0], vec![4.0]];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0][0] - 0.6).abs() < 1e-15 && (g[1][0] - 0.8).abs() < 1e-15);
    }
}
