use super::params::ParamSet;
use super::tensor::Real;

/// RMSProp with bias-corrected second moment and no momentum term.
#[derive(Debug, Clone, PartialEq)]
pub struct RmsProp<F> {
    pub lr: f64,
    pub beta: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub step: u64,
    pub second_moment: ParamSet<F>,
}

impl<F: Real> RmsProp<F> {
    pub fn new(params: &ParamSet<F>, lr: f64) -> Self {
        Self {
            lr,
            beta: 0.999,
            eps: 1e-8,
            clip_norm: Some(1.0),
            step: 0,
            second_moment: params.zeros_like(),
        }
    }

    pub fn apply(&mut self, params: &mut ParamSet<F>, grads: &ParamSet<F>) {
        self.step += 1;
        let norm = grads
            .entries()
            .iter()
            .flat_map(|e| e.data.iter())
            .map(|g| g.to_f64().unwrap().powi(2))
            .sum::<f64>()
            .sqrt();
        let scale = match self.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        let beta = self.beta;
        let correction = 1.0 - beta.powi(self.step.min(i32::MAX as u64) as i32);
        let (scale, beta_f, one_minus) = (F::lit(scale), F::lit(beta), F::lit(1.0 - beta));
        let (lr, eps, corr) = (F::lit(self.lr), F::lit(self.eps), F::lit(correction));
        for ((p, g), v) in params
            .entries_mut()
            .iter_mut()
            .zip(grads.entries())
            .zip(self.second_moment.entries_mut())
        {
            for ((pv, &gv), vv) in p.data.iter_mut().zip(&g.data).zip(v.data.iter_mut()) {
                let g = gv * scale;
                *vv = beta_f * *vv + one_minus * g * g;
                let vhat = *vv / corr;
                *pv = *pv - lr * g / (vhat.sqrt() + eps);
            }
        }
    }
}
