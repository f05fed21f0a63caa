use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Adam optimizer state for a fixed list of parameter tensors.
///
/// The moment buffers are keyed by position, so every call must pass the
/// parameters in the same order (and with the same shapes) as the first call.
#[derive(Clone, Debug)]
pub struct AdamState {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    steps: u64,
    moments: Option<Vec<(Tensor, Tensor)>>,
}

impl AdamState {
    /// Standard coefficients: beta1 = 0.9, beta2 = 0.999, eps = 1e-8.
    pub fn new(lr: f64) -> Result<AdamState> {
        AdamState::with_coefficients(lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_coefficients(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Result<AdamState> {
        if !(lr.is_finite() && lr > 0.0) {
            return Err(Error::Contract(format!("adam: lr must be positive, got {}", lr)));
        }
        if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
            return Err(Error::Contract(format!(
                "adam: betas must lie in [0, 1), got {} and {}",
                beta1, beta2
            )));
        }
        if !(eps.is_finite() && eps > 0.0) {
            return Err(Error::Contract(format!("adam: eps must be positive, got {}", eps)));
        }
        Ok(AdamState {
            lr,
            beta1,
            beta2,
            eps,
            steps: 0,
            moments: None,
        })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    /// One descent step: `p <- p - lr * m_hat / (sqrt(v_hat) + eps)`.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor]) -> Result<()> {
        self.update(params, grads, -1.0)
    }

    /// One ascent step, for objectives that are maximized.
    pub fn step_ascending(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor]) -> Result<()> {
        self.update(params, grads, 1.0)
    }

    fn update(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor], sign: f64) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Contract(format!(
                "adam: {} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        let moments = self.moments.get_or_insert_with(|| {
            params
                .iter()
                .map(|p| {
                    (
                        Tensor::zeros(p.shape().to_vec()),
                        Tensor::zeros(p.shape().to_vec()),
                    )
                })
                .collect()
        });
        if moments.len() != params.len() {
            return Err(Error::Contract(format!(
                "adam: parameter list changed length ({} -> {})",
                moments.len(),
                params.len()
            )));
        }
        for ((p, g), (m, v)) in params.iter().zip(grads).zip(moments.iter()) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(Error::Shape {
                    op: "adam",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            let _ = v;
            if !g.is_finite() {
                return Err(Error::numeric("adam: non-finite gradient"));
            }
        }

        self.steps += 1;
        let t = self.steps as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);

        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(moments.iter_mut()) {
            let pd = p.data_mut();
            let gd = g.data();
            let md = m.data_mut();
            let vd = v.data_mut();
            for i in 0..pd.len() {
                md[i] = self.beta1 * md[i] + (1.0 - self.beta1) * gd[i];
                vd[i] = self.beta2 * vd[i] + (1.0 - self.beta2) * gd[i] * gd[i];
                let m_hat = md[i] / bc1;
                let v_hat = vd[i] / bc2;
                pd[i] += sign * self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
