//! Bias-corrected Adam.

use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct AdamHyper {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// Per-parameter first/second moment accumulators plus a step counter.
#[derive(Clone, Debug)]
pub struct AdamState<F: Scalar> {
    pub step: u64,
    pub m: Vec<Tensor<F>>,
    pub v: Vec<Tensor<F>>,
    pub hyper: AdamHyper,
}

impl<F: Scalar> AdamState<F> {
    pub fn new(params: &[Tensor<F>], hyper: AdamHyper) -> Self {
        let m = params.iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect();
        let v = params.iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect();
        Self { step: 0, m, v, hyper }
    }

    /// One Adam step, in place. `grads[i]` of `None` means zero gradient.
    pub fn update(&mut self, params: &mut [Tensor<F>], grads: &[Option<Tensor<F>>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::Shape("adam parameter/gradient count mismatch".into()));
        }
        self.step += 1;
        let t = self.step as i32;
        let b1 = F::from_f64_lit(self.hyper.beta1);
        let b2 = F::from_f64_lit(self.hyper.beta2);
        let lr = F::from_f64_lit(self.hyper.learning_rate);
        let eps = F::from_f64_lit(self.hyper.epsilon);
        let c1 = F::one() - b1.powi(t);
        let c2 = F::one() - b2.powi(t);
        for i in 0..params.len() {
            let Some(g) = &grads[i] else { continue };
            if g.shape() != params[i].shape() {
                return Err(Error::Shape("adam gradient shape mismatch".into()));
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = params[i].data_mut();
            for j in 0..p.len() {
                let gj = g.data()[j];
                m[j] = b1 * m[j] + (F::one() - b1) * gj;
                v[j] = b2 * v[j] + (F::one() - b2) * gj * gj;
                let mhat = m[j] / c1;
                let vhat = v[j] / c2;
                p[j] = p[j] - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut params = vec![Tensor::<f64>::row_vec(vec![1.0, -2.0])];
        let before = params.clone();
        let mut st = AdamState::new(&params, AdamHyper::default());
        let zero = Tensor::<f64>::zeros(1, 2);
        st.update(&mut params, &[Some(zero)]).unwrap();
        assert_eq!(params, before);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn single_step_matches_hand_rolled_formula() {
        // g = 1, lr = 0.1, defaults: m_hat = 1, v_hat = 1, delta = lr / (1 + eps).
        let mut params = vec![Tensor::<f64>::row_vec(vec![0.5])];
        let hyper = AdamHyper { learning_rate: 0.1, ..Default::default() };
        let mut st = AdamState::new(&params, hyper);
        st.update(&mut params, &[Some(Tensor::row_vec(vec![1.0]))]).unwrap();
        let expected = 0.5 - 0.1 * 1.0 / (1.0f64.sqrt() + 1e-8);
        assert!((params[0].at(0, 0) - expected).abs() < 1e-15);
    }

    #[test]
    fn descends_convex_quadratic() {
        // loss = x^2, grad = 2x.
        let mut params = vec![Tensor::<f64>::row_vec(vec![2.0])];
        let hyper = AdamHyper { learning_rate: 0.05, ..Default::default() };
        let mut st = AdamState::new(&params, hyper);
        let loss = |x: f64| x * x;
        let l0 = loss(params[0].at(0, 0));
        for _ in 0..2 {
            let x = params[0].at(0, 0);
            st.update(&mut params, &[Some(Tensor::row_vec(vec![2.0 * x]))]).unwrap();
        }
        assert!(loss(params[0].at(0, 0)) < l0);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut params = vec![Tensor::<f64>::row_vec(vec![1.0, 2.0])];
        let mut st = AdamState::new(&params, AdamHyper::default());
        let bad = Tensor::<f64>::row_vec(vec![1.0]);
        assert!(st.update(&mut params, &[Some(bad)]).is_err());
    }
}
