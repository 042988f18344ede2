//! Parameter update rules: plain SGD and bias-corrected adaptive moments.

use crate::autodiff::{GradSet, Matrix, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimMethod {
    Sgd,
    /// Adam-style update with bias-corrected first and second moments.
    AdaptiveMoment,
}

impl OptimMethod {
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sgd" => Some(OptimMethod::Sgd),
            "adam" | "adaptive-moment" => Some(OptimMethod::AdaptiveMoment),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    method: OptimMethod,
    eta: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Optimizer {
    pub fn new(method: OptimMethod, eta: f64) -> Self {
        Optimizer {
            method,
            eta,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn set_eta(&mut self, eta: f64) {
        self.eta = eta;
    }

    /// One update of `params` from `grads`.
    pub fn apply(&mut self, params: &mut ParamSet, grads: &GradSet) {
        match self.method {
            OptimMethod::Sgd => {
                let eta = self.eta;
                params.update_with(grads, |p, g| p.add_scaled_assign(g, -eta));
            }
            OptimMethod::AdaptiveMoment => {
                if self.m.is_empty() {
                    self.m = params.values_cloned();
                    self.v = params.values_cloned();
                    for m in self.m.iter_mut().chain(self.v.iter_mut()) {
                        m.fill(0.0);
                    }
                }
                self.t += 1;
                let (b1, b2) = (self.beta1, self.beta2);
                let bc1 = 1.0 - b1.powi(self.t as i32);
                let bc2 = 1.0 - b2.powi(self.t as i32);
                let (eta, eps) = (self.eta, self.eps);
                let mut idx = 0;
                let (ms, vs) = (&mut self.m, &mut self.v);
                params.update_with(grads, |p, g| {
                    let m = &mut ms[idx];
                    let v = &mut vs[idx];
                    idx += 1;
                    for i in 0..p.len() {
                        let gi = g.as_slice()[i];
                        let mi = b1 * m.as_slice()[i] + (1.0 - b1) * gi;
                        let vi = b2 * v.as_slice()[i] + (1.0 - b2) * gi * gi;
                        m.as_mut_slice()[i] = mi;
                        v.as_mut_slice()[i] = vi;
                        let m_hat = mi / bc1;
                        let v_hat = vi / bc2;
                        p.as_mut_slice()[i] -= eta * m_hat / (v_hat.sqrt() + eps);
                    }
                });
            }
        }
    }
}

/// Scale `grads` so their global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_grad_norm(grads: &mut GradSet, max_norm: f64) -> f64 {
    let norm = grads.norm();
    if norm > max_norm && norm > 0.0 {
        grads.scale_assign(max_norm / norm);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(v: f64) -> (ParamSet, GradSet) {
        let mut ps = ParamSet::new();
        ps.add("p", Matrix::filled(1, 1, v));
        let gs = GradSet::zeros_like(&ps);
        (ps, gs)
    }

    #[test]
    fn sgd_zero_gradient_leaves_params_unchanged() {
        let (mut ps, gs) = one_param(0.73);
        let mut opt = Optimizer::new(OptimMethod::Sgd, 0.5);
        opt.apply(&mut ps, &gs);
        assert_eq!(ps.value(ps.ids().next().unwrap()).get(0, 0), 0.73);
    }

    #[test]
    fn sgd_unit_rate_with_gradient_equal_params_zeroes_them() {
        let (mut ps, mut gs) = one_param(0.73);
        let id = ps.ids().next().unwrap();
        gs.get_mut(id).set(0, 0, 0.73);
        let mut opt = Optimizer::new(OptimMethod::Sgd, 1.0);
        opt.apply(&mut ps, &gs);
        assert_eq!(ps.value(id).get(0, 0), 0.0);
    }

    #[test]
    fn adaptive_moment_first_step_matches_hand_calculation() {
        // hand-computed bias-corrected first step for g = 0.3, eta = 0.1:
        // m_hat = g, v_hat = g^2, p1 = 1 - 0.1 * 0.3 / (0.3 + 1e-8)
        let (mut ps, mut gs) = one_param(1.0);
        let id = ps.ids().next().unwrap();
        gs.get_mut(id).set(0, 0, 0.3);
        let mut opt = Optimizer::new(OptimMethod::AdaptiveMoment, 0.1);
        opt.apply(&mut ps, &gs);
        let got = ps.value(id).get(0, 0);
        assert!((got - 0.9000000033333332).abs() < 1e-15, "{got}");
    }

    #[test]
    fn clip_rescales_only_above_the_limit() {
        let (_, mut gs) = {
            let mut ps = ParamSet::new();
            ps.add("p", Matrix::from_vec(1, 2, vec![3.0, 4.0]));
            let mut gs = GradSet::zeros_like(&ps);
            let id = ps.ids().next().unwrap();
            gs.get_mut(id).set(0, 0, 3.0);
            gs.get_mut(id).set(0, 1, 4.0);
            (ps, gs)
        };
        let norm = clip_grad_norm(&mut gs, 1.0);
        assert!((norm - 5.0).abs() < 1e-12);
        assert!((gs.norm() - 1.0).abs() < 1e-12);
        let norm2 = clip_grad_norm(&mut gs, 10.0);
        assert!((norm2 - 1.0).abs() < 1e-12);
        assert!((gs.norm() - 1.0).abs() < 1e-12);
    }
}
