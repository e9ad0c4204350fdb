//! Convergence constants for the single-layer and over-parameterized
//! two-layer results.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Constants of the single-layer contraction bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thm4Ledger {
    pub theta0: f64,
    pub m: usize,
    pub eps_d: f64,
    pub k_d: f64,
    pub d_min: f64,
    pub eta: f64,
    pub m_d: f64,
    pub d_bar: f64,
    pub gamma: f64,
    /// `1 - eta * d_bar * gamma`; meaningful only when `feasible`.
    pub rate: f64,
    pub feasible: bool,
}

pub fn thm4_constants(theta0: f64, m: usize, eps_d: f64, k_d: f64, d_min: f64, eta: f64) -> Result<Thm4Ledger> {
    if !(theta0 > 0.0 && theta0 < std::f64::consts::FRAC_PI_2) {
        return Err(Error::pre(format!("theta0 = {theta0} outside (0, pi/2)")));
    }
    if m == 0 {
        return Err(Error::pre("m must be at least 1"));
    }
    if [eps_d, k_d, d_min, eta].iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::pre("ledger inputs must be finite and non-negative"));
    }
    let half = theta0 / 2.0;
    let spread = 1.0 + 2.0 * k_d * half.sin();
    let m_d = (1.0 + k_d) * spread * spread / half.cos();
    let d_bar = spread * d_min;
    let gamma = theta0.cos() - (m as f64 - 1.0) * eps_d * m_d;
    Ok(Thm4Ledger {
        theta0,
        m,
        eps_d,
        k_d,
        d_min,
        eta,
        m_d,
        d_bar,
        gamma,
        rate: 1.0 - eta * d_bar * gamma,
        feasible: gamma > 0.0,
    })
}

/// Measured inputs of the two-layer ledger.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thm5Inputs {
    pub k_d: f64,
    pub k_l: f64,
    pub theta0: f64,
    pub eps_d: f64,
    pub eps_l: f64,
    pub b_v: f64,
    pub b_dv: f64,
    pub m: usize,
    pub n: usize,
    pub c0: f64,
    pub eta: f64,
    /// `min_j d*_jj` at initialization.
    pub d_min: f64,
    /// `min_j l*_jj` at initialization.
    pub l_min: f64,
}

/// The four cross-set factors and the two aggregated bounds of one family
/// (`d` or `l`).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CrossBounds {
    pub c_u: f64,
    pub c_r: f64,
    pub m_uu: f64,
    pub m_ur: f64,
    pub m_ru: f64,
    pub m_rr: f64,
    pub b_u: f64,
    pub b_r: f64,
}

impl CrossBounds {
    fn new(k: f64, c_u: f64, c_r: f64, cos_half: f64, m: usize, n: usize) -> Self {
        let m_uu = (1.0 + k) * (1.0 + c_u).powi(2) / cos_half;
        let m_ur = (1.0 + k) * (1.0 + c_u) * (1.0 + c_r);
        let m_ru = (1.0 + k) * (1.0 + c_u) * (1.0 + c_r) / cos_half;
        let m_rr = (1.0 + k) * (1.0 + c_r).powi(2);
        let (mu, rest) = (m as f64 - 1.0, (n - m) as f64);
        CrossBounds {
            c_u,
            c_r,
            m_uu,
            m_ur,
            m_ru,
            m_rr,
            b_u: mu * m_uu + rest * m_ur,
            b_r: mu * m_ru + rest * m_rr,
        }
    }

    pub fn b_max(&self) -> f64 {
        self.b_u.max(self.b_r)
    }

    /// The `M` factor for an ordered pair of nodes by set membership.
    pub fn m_for(&self, j_in_u: bool, jp_in_u: bool) -> f64 {
        match (j_in_u, jp_in_u) {
            (true, true) => self.m_uu,
            (true, false) => self.m_ur,
            (false, true) => self.m_ru,
            (false, false) => self.m_rr,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Binding {
    /// The lower-layer condition on `gamma` fails.
    WCond,
    /// The upper-layer condition on `gamma` fails.
    VCond,
    DBar,
    LBar,
    /// `2 - eta * lambda_bar * gamma` is not positive.
    StepSize,
    /// The damped iteration did not settle in 100 rounds.
    NoFixedPoint,
}

/// Full two-layer ledger.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstantLedger {
    pub inputs: Thm5Inputs,
    pub d: CrossBounds,
    pub l: CrossBounds,
    pub kappa: f64,
    pub d_bar: f64,
    pub l_bar: f64,
    pub lambda_bar: f64,
    pub gamma_w: f64,
    pub gamma_v: f64,
    pub gamma: f64,
    pub iterations: usize,
    pub feasible: bool,
    pub binding: Option<Binding>,
}

/// Solve the mutually dependent conditions on `gamma`.
///
/// `C_{d,r}` and `C_{l,r}` depend on `gamma` through `lambda_bar`, and the
/// bounds on `gamma` depend on them, so the pair is iterated with damping
/// 0.5 from `C_{.,r} = 0` until the change drops below 1e-10. The
/// conservative `max(B_u, B_r)` is used wherever a bound enters.
pub fn thm5_constants(inp: &Thm5Inputs) -> Result<ConstantLedger> {
    if !(inp.theta0 > 0.0 && inp.theta0 < std::f64::consts::FRAC_PI_2) {
        return Err(Error::pre(format!("theta0 = {} outside (0, pi/2)", inp.theta0)));
    }
    if inp.m == 0 || inp.n < inp.m {
        return Err(Error::pre("need 1 <= m <= n"));
    }
    let vals = [
        inp.k_d, inp.k_l, inp.eps_d, inp.eps_l, inp.b_v, inp.b_dv, inp.c0, inp.eta, inp.d_min, inp.l_min,
    ];
    if vals.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::pre("ledger inputs must be finite and non-negative"));
    }
    let half = inp.theta0 / 2.0;
    let cos_half = half.cos();
    let c_du = 2.0 * inp.k_d * half.sin();
    let c_lu = 2.0 * inp.k_l * half.sin();
    let kappa = 2.0 * inp.c0 * half.sin() * (1.0 + inp.b_dv);
    let (mut c_dr, mut c_lr) = (0.0, 0.0);
    let mut binding = None;
    let mut iterations = 0;
    let mut out;
    loop {
        iterations += 1;
        let d = CrossBounds::new(inp.k_d, c_du, c_dr, cos_half, inp.m, inp.n);
        let l = CrossBounds::new(inp.k_l, c_lu, c_lr, cos_half, inp.m, inp.n);
        let gamma_w = (inp.b_v - inp.b_dv) * inp.theta0.cos() - inp.eps_d * (inp.b_v + inp.b_dv) * d.b_max();
        let gamma_v = 1.0 - inp.eps_l * l.b_max() - kappa;
        let gamma = gamma_w.min(gamma_v);
        let d_bar = (1.0 - inp.k_d * c_du.max(c_dr)) * inp.d_min;
        let l_bar = (1.0 - inp.k_l * c_lu.max(c_lr)) * inp.l_min;
        let lambda_bar = d_bar.min(l_bar);
        out = ConstantLedger {
            inputs: *inp,
            d,
            l,
            kappa,
            d_bar,
            l_bar,
            lambda_bar,
            gamma_w,
            gamma_v,
            gamma,
            iterations,
            feasible: false,
            binding: None,
        };
        if gamma <= 0.0 {
            binding = Some(if gamma_w <= gamma_v {
                Binding::WCond
            } else {
                Binding::VCond
            });
            break;
        }
        if d_bar <= 0.0 || l_bar <= 0.0 {
            binding = Some(if d_bar <= l_bar { Binding::DBar } else { Binding::LBar });
            break;
        }
        let denom = lambda_bar * gamma * (2.0 - inp.eta * lambda_bar * gamma);
        if denom <= 0.0 {
            binding = Some(Binding::StepSize);
            break;
        }
        let spread = (inp.b_v + inp.b_dv) * inp.b_v / denom;
        let next_dr = inp.eps_d * inp.k_d * d.b_max() * spread;
        let next_lr = inp.eps_l * inp.k_l * l.b_max() * spread;
        let new_dr = 0.5 * c_dr + 0.5 * next_dr;
        let new_lr = 0.5 * c_lr + 0.5 * next_lr;
        let change = (new_dr - c_dr).abs().max((new_lr - c_lr).abs());
        c_dr = new_dr;
        c_lr = new_lr;
        if !(change.is_finite()) {
            binding = Some(Binding::NoFixedPoint);
            break;
        }
        if change < 1e-10 {
            break;
        }
        if iterations >= 100 {
            binding = Some(Binding::NoFixedPoint);
            break;
        }
    }
    out.feasible = binding.is_none();
    out.binding = binding;
    Ok(out)
}
