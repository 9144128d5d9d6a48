//! Adam-style first-order optimizer state, shared by map training and pose
//! refinement.

/// Adam moment estimates for a flat slice of parameters.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(lr: f64, len: usize) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    /// Computes the update (to be *added* to the parameters) for `grads`,
    /// advancing the optimizer step: `-lr * m_hat / (sqrt(v_hat) + eps)`.
    pub fn update(&mut self, grads: &[f64]) -> Vec<f64> {
        assert_eq!(grads.len(), self.m.len(), "gradient length mismatch");
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        grads
            .iter()
            .enumerate()
            .map(|(i, g)| {
                self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
                self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = self.m[i] / bc1;
                let v_hat = self.v[i] / bc2;
                -self.lr * m_hat / (v_hat.sqrt() + self.eps)
            })
            .collect()
    }

    /// Applies the update in place: `params += update(grads)`.
    pub fn step_params(&mut self, params: &mut [f64], grads: &[f64]) {
        let delta = self.update(grads);
        for (p, d) in params.iter_mut().zip(delta) {
            *p += d;
        }
    }

    /// Rebuilds the moment vectors after primitives were pruned or spawned.
    /// `provenance[i] = Some(j)` keeps the moments of old slot `j` for new
    /// slot `i`; `None` starts the slot fresh.
    pub fn remap(&mut self, provenance: &[Option<usize>], stride: usize) {
        let mut m = vec![0.0; provenance.len() * stride];
        let mut v = vec![0.0; provenance.len() * stride];
        for (i, src) in provenance.iter().enumerate() {
            if let Some(j) = src {
                m[i * stride..(i + 1) * stride]
                    .copy_from_slice(&self.m[j * stride..(j + 1) * stride]);
                v[i * stride..(i + 1) * stride]
                    .copy_from_slice(&self.v[j * stride..(j + 1) * stride]);
            }
        }
        self.m = m;
        self.v = v;
    }
}
