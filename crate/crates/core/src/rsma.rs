//! Closed-form RSMA rate engine.
//!
//! The common stream is broadcast by every AP, so the common rate sums `Ξᶜ`
//! over all APs. Only the private rate is gated by the association `g`.
//! Interference covariances sum over every UE's private precoder; callers
//! zero the private precoders of unselected pairs.

use serde::{Deserialize, Serialize};

use crate::channel::ChannelGrid;
use crate::error::{Error, Result};
use crate::linalg::{self, CMat, Complex64};

/// Common precoders `P_n^c` and private precoders `P_kn^p`, each `M × M'`.
#[derive(Debug, Clone, PartialEq)]
pub struct PrecoderSet {
    pub n_ues: usize,
    pub n_aps: usize,
    pub m_ap: usize,
    pub m_ue: usize,
    pub common: Vec<CMat>,
    /// UE-major: index `k * n_aps + n`.
    pub private: Vec<CMat>,
}

impl PrecoderSet {
    pub fn zeros(n_ues: usize, n_aps: usize, m_ap: usize, m_ue: usize) -> Self {
        Self {
            n_ues,
            n_aps,
            m_ap,
            m_ue,
            common: vec![CMat::zeros(m_ap, m_ue); n_aps],
            private: vec![CMat::zeros(m_ap, m_ue); n_ues * n_aps],
        }
    }

    pub fn private(&self, k: usize, n: usize) -> &CMat {
        &self.private[k * self.n_aps + n]
    }

    pub fn private_mut(&mut self, k: usize, n: usize) -> &mut CMat {
        &mut self.private[k * self.n_aps + n]
    }

    pub fn is_finite(&self) -> bool {
        self.common.iter().chain(&self.private).all(|m| m.iter().all(|z| z.re.is_finite() && z.im.is_finite()))
    }

    fn check_against(&self, ch: &ChannelGrid) -> Result<()> {
        if (self.n_ues, self.n_aps, self.m_ap, self.m_ue) != (ch.n_ues, ch.n_aps, ch.m_ap, ch.m_ue) {
            return Err(Error::Domain(format!(
                "precoder dims (K={}, N={}, M={}, M'={}) do not match channel dims (K={}, N={}, M={}, M'={})",
                self.n_ues, self.n_aps, self.m_ap, self.m_ue, ch.n_ues, ch.n_aps, ch.m_ap, ch.m_ue
            )));
        }
        Ok(())
    }
}

/// Common-rate shares `c_k ≥ 0` with `Σ c_k ≤ 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommonRateShares(Vec<f64>);

impl CommonRateShares {
    pub fn new(c: Vec<f64>) -> Result<Self> {
        if c.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Domain("common-rate shares must be non-negative".into()));
        }
        if c.iter().sum::<f64>() > 1.0 {
            return Err(Error::Domain("common-rate shares must sum to at most 1".into()));
        }
        Ok(Self(c))
    }

    pub fn zeros(k: usize) -> Self {
        Self(vec![0.0; k])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Binary AP-selection matrix `g_kn`, UE-major.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Association {
    pub n_ues: usize,
    pub n_aps: usize,
    g: Vec<bool>,
}

impl Association {
    pub fn all_ones(n_ues: usize, n_aps: usize) -> Self {
        Self { n_ues, n_aps, g: vec![true; n_ues * n_aps] }
    }

    pub fn zeros(n_ues: usize, n_aps: usize) -> Self {
        Self { n_ues, n_aps, g: vec![false; n_ues * n_aps] }
    }

    pub fn from_flags(n_ues: usize, n_aps: usize, g: Vec<bool>) -> Result<Self> {
        crate::error::shape_check(n_ues * n_aps, g.len())?;
        Ok(Self { n_ues, n_aps, g })
    }

    pub fn get(&self, k: usize, n: usize) -> bool {
        self.g[k * self.n_aps + n]
    }

    pub fn set(&mut self, k: usize, n: usize, v: bool) {
        self.g[k * self.n_aps + n] = v;
    }

    pub fn flags(&self) -> &[bool] {
        &self.g
    }

    /// `𝒦_n`: UEs whose private stream AP `n` carries.
    pub fn served_ues(&self, n: usize) -> Vec<usize> {
        (0..self.n_ues).filter(|&k| self.get(k, n)).collect()
    }

    pub fn aps_of(&self, k: usize) -> usize {
        (0..self.n_aps).filter(|&n| self.get(k, n)).count()
    }

    /// C2: every UE is served by at most `n_ue_max` APs.
    pub fn respects_ue_limit(&self, n_ue_max: usize) -> bool {
        (0..self.n_ues).all(|k| self.aps_of(k) <= n_ue_max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    pub common: Vec<f64>,
    pub private: Vec<f64>,
    /// `R^c = min_k R_k^c`.
    pub common_total: f64,
    pub total: Vec<f64>,
    pub min_rate: f64,
}

impl RateReport {
    pub fn mean_rate(&self) -> f64 {
        self.total.iter().sum::<f64>() / self.total.len() as f64
    }
}

/// `Ŷᶜ_kn = H_knᴴ P_nᶜ` and `Ŷᵖ_kn = H_knᴴ P_knᵖ`.
pub fn received_signal_parts(ch: &ChannelGrid, pre: &PrecoderSet, k: usize, n: usize) -> (CMat, CMat) {
    let hh = ch.get(k, n).adjoint();
    (&hh * &pre.common[n], &hh * pre.private(k, n))
}

/// Common and private interference-plus-noise covariances `(Σᶜ_k, Σᵖ_k)`.
pub fn interference_covariances(ch: &ChannelGrid, pre: &PrecoderSet, k: usize, n0: f64) -> (CMat, CMat) {
    let mp = ch.m_ue;
    let mut others = CMat::zeros(mp, mp);
    let mut own = CMat::zeros(mp, mp);
    for n in 0..ch.n_aps {
        let hh = ch.get(k, n).adjoint();
        for i in 0..ch.n_ues {
            let y = &hh * pre.private(i, n);
            let yy = &y * y.adjoint();
            if i == k {
                own += yy;
            } else {
                others += yy;
            }
        }
    }
    let mut sigma_p = CMat::identity(mp, mp) * Complex64::new(n0, 0.0) + others;
    linalg::hermitianize(&mut sigma_p);
    let mut sigma_c = &sigma_p + own;
    linalg::hermitianize(&mut sigma_c);
    (sigma_c, sigma_p)
}

/// `Yᴴ Σ⁻¹ Y` through the Cholesky factor of `Σ`; Hermitian PSD by construction.
fn whitened_gram(sigma_chol: &nalgebra::Cholesky<Complex64, nalgebra::Dyn>, y: &CMat) -> CMat {
    let x = sigma_chol.l_dirty().solve_lower_triangular(y).expect("Cholesky factor has a positive diagonal");
    x.adjoint() * x
}

fn chol(sigma: &CMat) -> nalgebra::Cholesky<Complex64, nalgebra::Dyn> {
    sigma.clone().cholesky().expect("N0·I plus PSD terms is positive definite")
}

/// `(Ξᶜ_kn, Ξᵖ_kn)`.
pub fn xi_matrices(ch: &ChannelGrid, pre: &PrecoderSet, k: usize, n: usize, n0: f64) -> (CMat, CMat) {
    let (sc, sp) = interference_covariances(ch, pre, k, n0);
    let (yc, yp) = received_signal_parts(ch, pre, k, n);
    (whitened_gram(&chol(&sc), &yc), whitened_gram(&chol(&sp), &yp))
}

/// All `Ξᵖ_kn` for one UE, reusing a single factorization of `Σᵖ_k`.
pub(crate) fn private_xis(ch: &ChannelGrid, pre: &PrecoderSet, k: usize, n0: f64) -> Vec<CMat> {
    let (_, sp) = interference_covariances(ch, pre, k, n0);
    let cp = chol(&sp);
    (0..ch.n_aps).map(|n| whitened_gram(&cp, &received_signal_parts(ch, pre, k, n).1)).collect()
}

/// Per-UE common/private rates, total common rate and per-UE totals.
pub fn rates(
    ch: &ChannelGrid,
    pre: &PrecoderSet,
    assoc: &Association,
    shares: &CommonRateShares,
    n0: f64,
) -> Result<RateReport> {
    pre.check_against(ch)?;
    crate::error::shape_check(ch.n_ues, shares.as_slice().len())?;
    if (assoc.n_ues, assoc.n_aps) != (ch.n_ues, ch.n_aps) {
        return Err(Error::Domain("association dims do not match channel dims".into()));
    }
    let mp = ch.m_ue;
    let mut common = Vec::with_capacity(ch.n_ues);
    let mut private = Vec::with_capacity(ch.n_ues);
    for k in 0..ch.n_ues {
        let (sc, sp) = interference_covariances(ch, pre, k, n0);
        let (cc, cp) = (chol(&sc), chol(&sp));
        let mut acc_c = CMat::identity(mp, mp);
        let mut acc_p = CMat::identity(mp, mp);
        for n in 0..ch.n_aps {
            let (yc, yp) = received_signal_parts(ch, pre, k, n);
            acc_c += whitened_gram(&cc, &yc);
            if assoc.get(k, n) {
                acc_p += whitened_gram(&cp, &yp);
            }
        }
        common.push(linalg::log2_det_hpd(&acc_c).max(0.0));
        private.push(linalg::log2_det_hpd(&acc_p).max(0.0));
    }
    let common_total = common.iter().copied().fold(f64::INFINITY, f64::min);
    let total: Vec<f64> = shares.as_slice().iter().zip(&private).map(|(c, rp)| c * common_total + rp).collect();
    let min_rate = total.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(RateReport { common, private, common_total, total, min_rate })
}

/// C1 left-hand side at AP `n`: `‖P_nᶜ‖² + Σ_k g_kn ‖P_knᵖ‖²`.
pub fn power_used(pre: &PrecoderSet, assoc: &Association, n: usize) -> f64 {
    let mut p = linalg::frob_sq(&pre.common[n]);
    for k in 0..pre.n_ues {
        if assoc.get(k, n) {
            p += linalg::frob_sq(pre.private(k, n));
        }
    }
    p
}

/// Factor that brings `used` watts within `p_max`; 1 when already feasible.
pub(crate) fn budget_scale(used: f64, p_max: f64) -> f64 {
    if used > p_max {
        (p_max / used).sqrt()
    } else {
        1.0
    }
}

/// Scales every precoder of each over-budget AP by `√(p_max / used)`.
pub fn project_power(pre: &PrecoderSet, assoc: &Association, p_max: f64) -> PrecoderSet {
    let mut out = pre.clone();
    for n in 0..pre.n_aps {
        let s = budget_scale(power_used(pre, assoc, n), p_max);
        if s < 1.0 {
            let s = Complex64::new(s, 0.0);
            out.common[n] *= s;
            for k in 0..pre.n_ues {
                *out.private_mut(k, n) *= s;
            }
        }
    }
    out
}
