//! Spiking neuron dynamics: plain LIF, adaptive spiking neurons (ASN) and
//! liquid time-constant spiking neurons (LTC), plus the multi-Gaussian
//! surrogate used as the spike derivative.
//!
//! All neurons share the same update skeleton. The membrane is a convex
//! combination `u <- u + (x_net - u) * tau_m_inv` with `tau_m_inv` in (0,1),
//! a spike fires when the membrane reaches the threshold, and the membrane
//! resets to 0 on a spike. Adaptive variants low-pass filter their own spikes
//! into `b` and move the threshold as `theta = 0.1 + 1.8 b`; the liquid
//! variant computes both inverse time constants as sigmoids of learned
//! functions of the current input and state.

use crate::autodiff::{Matrix, NodeId, ParamId, TapeBuilder};
use crate::{Error, Result};

/// Forward behaviour of the spike nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpikeMode {
    /// Binary forward value, multi-Gaussian surrogate in the backward pass.
    HardSpike,
    /// Steep sigmoid forward with its exact derivative in the backward pass.
    /// Exists so finite-difference oracles are valid; never used for
    /// reported training runs.
    SoftForward,
}

/// Parameters of the multi-Gaussian surrogate spike derivative: a central
/// Gaussian of width `sigma` minus two side lobes of relative depth `h` and
/// width `s_scale * sigma`, scaled by `gamma`.
#[derive(Debug, Clone, Copy)]
pub struct SurrogateConfig {
    pub sigma: f64,
    pub h: f64,
    pub s_scale: f64,
    pub gamma: f64,
    pub mode: SpikeMode,
    /// Temperature of the soft-forward sigmoid.
    pub soft_temp: f64,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        SurrogateConfig {
            sigma: 0.5,
            h: 0.15,
            s_scale: 6.0,
            gamma: 0.5,
            mode: SpikeMode::HardSpike,
            soft_temp: 0.2,
        }
    }
}

impl SurrogateConfig {
    pub fn soft() -> Self {
        SurrogateConfig {
            mode: SpikeMode::SoftForward,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        fn positive(v: f64) -> bool {
            v.is_finite() && v > 0.0
        }
        if !positive(self.sigma) {
            return Err(Error::config("surrogate sigma must be positive"));
        }
        if !(self.s_scale.is_finite() && self.s_scale > 1.0) {
            return Err(Error::config("surrogate s_scale must exceed 1"));
        }
        if !(0.0..1.0).contains(&self.h) {
            return Err(Error::config("surrogate h must lie in [0,1)"));
        }
        if !positive(self.gamma) {
            return Err(Error::config("surrogate gamma must be positive"));
        }
        if !positive(self.soft_temp) {
            return Err(Error::config("soft_temp must be positive"));
        }
        Ok(())
    }

    /// Surrogate derivative evaluated at `d = u - theta`.
    #[inline]
    pub fn multi_gaussian(&self, d: f64) -> f64 {
        let side = self.s_scale * self.sigma;
        self.gamma
            * ((1.0 + self.h) * gaussian_pdf(d, 0.0, self.sigma)
                - self.h * gaussian_pdf(d, self.sigma, side)
                - self.h * gaussian_pdf(d, -self.sigma, side))
    }
}

#[inline]
fn gaussian_pdf(x: f64, mu: f64, sigma: f64) -> f64 {
    let z = (x - mu) / sigma;
    (-0.5 * z * z).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt())
}

/// Hard threshold: 1 iff `u >= theta`.
#[inline]
pub fn spike(u: f64, theta: f64) -> f64 {
    if u >= theta {
        1.0
    } else {
        0.0
    }
}

/// Multi-Gaussian surrogate derivative of the spike w.r.t. the membrane.
#[inline]
pub fn surrogate_grad(u: f64, theta: f64, cfg: &SurrogateConfig) -> f64 {
    cfg.multi_gaussian(u - theta)
}

/// Post-spike reset to the resting potential (0): `(1 - s) u`.
#[inline]
pub fn reset(u: f64, s: f64) -> f64 {
    (1.0 - s) * u
}

/// One step of a non-spiking leaky integrator, `u + (x - u) * tau_inv`.
#[inline]
pub fn leaky_integrator_scalar(x: f64, u_prev: f64, tau_inv: f64) -> f64 {
    u_prev + (x - u_prev) * tau_inv
}

/// Weight handles of the liquid time-constant maps. `w_tau_m` acts on
/// `[x_t, u_prev]`, `w_tau_adp` on `[x_t, b_prev]`; both outputs pass through
/// a sigmoid so the inverse time constants stay strictly inside (0,1).
#[derive(Debug, Clone, Copy)]
pub struct LiquidTauParams {
    pub w_tau_m: ParamId,
    pub b_tau_m: ParamId,
    pub w_tau_adp: ParamId,
    pub b_tau_adp: ParamId,
}

/// How a spiking layer obtains its time constants.
#[derive(Debug, Clone, Copy)]
pub enum TauParams {
    /// Input- and state-dependent sigmoidal maps (LTC neurons).
    Liquid(LiquidTauParams),
    /// Learned per-neuron scalars through a sigmoid (ASN neurons).
    PerNeuron {
        tau_m_raw: ParamId,
        tau_adp_raw: ParamId,
    },
    /// Fixed membrane time constant, fixed unit threshold, no adaptation.
    Fixed { tau_m_inv: f64 },
}

/// Parameter handles of one spiking layer.
#[derive(Debug, Clone, Copy)]
pub struct SpikingLayerParams {
    pub w_in: ParamId,
    pub b_in: ParamId,
    pub w_rec: Option<ParamId>,
    pub tau: TauParams,
}

/// Node ids of the incoming state of a spiking layer.
#[derive(Debug, Clone, Copy)]
pub struct SpikingPrevNodes {
    pub u: NodeId,
    pub s: NodeId,
    pub b: NodeId,
}

/// Node ids produced by one spiking-layer step. `u`, `s`, `b` are the new
/// state; the remaining nodes expose intermediates for inspection and tests.
#[derive(Debug, Clone, Copy)]
pub struct SpikingStepNodes {
    pub u: NodeId,
    pub s: NodeId,
    pub b: NodeId,
    pub theta: NodeId,
    pub x_net: NodeId,
    pub u_pre: NodeId,
    pub rho: NodeId,
    pub tau_m_inv: NodeId,
}

/// One step of a spiking layer, recorded on the active tape.
///
/// Update order: time constants, adaptation `b` and threshold, net input,
/// membrane, spike, reset. The returned `u` is post-reset.
pub fn spiking_step(
    tb: &mut TapeBuilder,
    p: &SpikingLayerParams,
    x: NodeId,
    prev: &SpikingPrevNodes,
    cfg: &SurrogateConfig,
) -> Result<SpikingStepNodes> {
    let batch = tb.value(prev.u).rows();
    let units = tb.value(prev.u).cols();

    // inverse time constants
    let (rho, tau_m_inv) = match &p.tau {
        TauParams::Liquid(lt) => {
            let xb = tb.concat(x, prev.b)?;
            let w_adp = tb.param(lt.w_tau_adp);
            let b_adp = tb.param(lt.b_tau_adp);
            let rho_pre = tb.affine(xb, w_adp, b_adp)?;
            let rho = tb.sigmoid(rho_pre);

            let xu = tb.concat(x, prev.u)?;
            let w_m = tb.param(lt.w_tau_m);
            let b_m = tb.param(lt.b_tau_m);
            let tau_pre = tb.affine(xu, w_m, b_m)?;
            (rho, tb.sigmoid(tau_pre))
        }
        TauParams::PerNeuron {
            tau_m_raw,
            tau_adp_raw,
        } => {
            let adp = tb.param(*tau_adp_raw);
            let adp_rows = tb.broadcast_row(adp, batch)?;
            let rho = tb.sigmoid(adp_rows);
            let m = tb.param(*tau_m_raw);
            let m_rows = tb.broadcast_row(m, batch)?;
            (rho, tb.sigmoid(m_rows))
        }
        TauParams::Fixed { tau_m_inv } => {
            let rho = tb.input(Matrix::filled(batch, units, 1.0));
            let tau = tb.input(Matrix::filled(batch, units, *tau_m_inv));
            (rho, tau)
        }
    };

    // adaptation and threshold
    let (b_new, theta) = match &p.tau {
        TauParams::Fixed { .. } => {
            // no adaptation: b passes through, threshold pinned at 1
            let theta = tb.input(Matrix::filled(batch, units, 1.0));
            (prev.b, theta)
        }
        _ => {
            let decayed = tb.mul(rho, prev.b)?;
            let one_minus_rho = tb.affine_scalar(rho, -1.0, 1.0);
            let driven = tb.mul(one_minus_rho, prev.s)?;
            let b_new = tb.add(decayed, driven)?;
            let theta = tb.affine_scalar(b_new, 1.8, 0.1);
            (b_new, theta)
        }
    };

    // net input
    let w_in = tb.param(p.w_in);
    let b_in = tb.param(p.b_in);
    let mut z = tb.linear(x, w_in)?;
    if let Some(w_rec) = p.w_rec {
        let w_rec = tb.param(w_rec);
        let rec = tb.linear(prev.s, w_rec)?;
        z = tb.add(z, rec)?;
    }
    let x_net = tb.add_row(z, b_in)?;

    // membrane: convex combination of previous potential and net input
    let delta = tb.sub(x_net, prev.u)?;
    let gated = tb.mul(delta, tau_m_inv)?;
    let u_pre = tb.add(prev.u, gated)?;

    // spike and reset
    let d = tb.sub(u_pre, theta)?;
    let s_new = tb.spike(d, *cfg);
    let keep = tb.affine_scalar(s_new, -1.0, 1.0);
    let u_new = tb.mul(u_pre, keep)?;

    Ok(SpikingStepNodes {
        u: u_new,
        s: s_new,
        b: b_new,
        theta,
        x_net,
        u_pre,
        rho,
        tau_m_inv,
    })
}

/// Liquid time-constant neuron step; `p.tau` must be [`TauParams::Liquid`].
pub fn ltc_step(
    tb: &mut TapeBuilder,
    p: &SpikingLayerParams,
    x: NodeId,
    prev: &SpikingPrevNodes,
    cfg: &SurrogateConfig,
) -> Result<SpikingStepNodes> {
    match p.tau {
        TauParams::Liquid(_) => spiking_step(tb, p, x, prev, cfg),
        _ => Err(Error::usage("ltc_step requires liquid tau parameters")),
    }
}

/// Adaptive spiking neuron step; `p.tau` must be [`TauParams::PerNeuron`].
pub fn asn_step(
    tb: &mut TapeBuilder,
    p: &SpikingLayerParams,
    x: NodeId,
    prev: &SpikingPrevNodes,
    cfg: &SurrogateConfig,
) -> Result<SpikingStepNodes> {
    match p.tau {
        TauParams::PerNeuron { .. } => spiking_step(tb, p, x, prev, cfg),
        _ => Err(Error::usage("asn_step requires per-neuron tau parameters")),
    }
}

/// Non-spiking leaky integrator step on the tape: `u + (x - u) * tau_inv`.
pub fn leaky_integrator_step(
    tb: &mut TapeBuilder,
    x: NodeId,
    u_prev: NodeId,
    tau_inv: f64,
) -> Result<NodeId> {
    let delta = tb.sub(x, u_prev)?;
    let gated = tb.affine_scalar(delta, tau_inv, 0.0);
    tb.add(u_prev, gated)
}
