//! Max-min AP selection on the eigenvalue-linearized private-rate objective.
//!
//! Each UE's private-rate contribution from AP `n` is replaced by the largest
//! eigenvalue `λ^max_kn` of `Ξᵖ_kn`, turning selection into the integer
//! program
//!
//! ```text
//! max_g  min_k Σ_n g_kn λ_kn
//! s.t.   common_n + Σ_k g_kn · private_kn ≤ p_max   ∀n
//!        Σ_n g_kn ≤ n_ue_max                          ∀k
//!        g_kn ∈ {0, 1}
//! ```
//!
//! [`solve_p3`] is a depth-first branch-and-bound over `g` in row-major
//! order, zero branch first. Among optimal matrices it returns the
//! lexicographically smallest one (row-major, `0 < 1`).

use serde::{Deserialize, Serialize};

use crate::channel::ChannelGrid;
use crate::error::{Error, Result};
use crate::linalg::{self, CMat};
use crate::rsma::{self, Association, PrecoderSet};

/// Hermitian tolerance accepted by [`lambda_max`], relative to `max(1, ‖Ξ‖_F)`.
pub const HERMITIAN_TOL: f64 = 1e-10;

/// Largest enumeration [`brute_force_p3`] accepts.
pub const BRUTE_FORCE_MAX_VARS: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionInstance {
    pub n_ues: usize,
    pub n_aps: usize,
    /// `λ^max_kn`, UE-major.
    pub lambda_max: Vec<f64>,
    /// `‖P_knᵖ‖²_F`, UE-major.
    pub private_power: Vec<f64>,
    /// `‖P_nᶜ‖²_F`.
    pub common_power: Vec<f64>,
    pub p_max: f64,
    pub n_ue_max: usize,
}

impl SelectionInstance {
    pub fn validate(&self) -> Result<()> {
        let kn = self.n_ues * self.n_aps;
        crate::error::shape_check(kn, self.lambda_max.len())?;
        crate::error::shape_check(kn, self.private_power.len())?;
        crate::error::shape_check(self.n_aps, self.common_power.len())?;
        if self.n_ues == 0 || self.n_aps == 0 {
            return Err(Error::Domain("selection instance needs K, N ≥ 1".into()));
        }
        let nonneg = |v: &[f64]| v.iter().all(|x| *x >= 0.0 && x.is_finite());
        if !nonneg(&self.lambda_max) || !nonneg(&self.private_power) || !nonneg(&self.common_power) {
            return Err(Error::Domain("λ and power entries must be finite and non-negative".into()));
        }
        for (n, &c) in self.common_power.iter().enumerate() {
            if c > self.p_max {
                return Err(Error::Infeasible { ap: n, common_power: c, p_max: self.p_max });
            }
        }
        Ok(())
    }

    fn lambda(&self, k: usize, n: usize) -> f64 {
        self.lambda_max[k * self.n_aps + n]
    }

    fn private(&self, k: usize, n: usize) -> f64 {
        self.private_power[k * self.n_aps + n]
    }

    /// `min_k Σ_n g_kn λ_kn`, each row summed in AP order.
    pub fn objective(&self, g: &Association) -> f64 {
        (0..self.n_ues)
            .map(|k| {
                let mut s = 0.0;
                for n in 0..self.n_aps {
                    if g.get(k, n) {
                        s += self.lambda(k, n);
                    }
                }
                s
            })
            .fold(f64::INFINITY, f64::min)
    }

    /// C1 and C2 (C4 holds by type).
    pub fn is_feasible(&self, g: &Association) -> bool {
        if !g.respects_ue_limit(self.n_ue_max) {
            return false;
        }
        (0..self.n_aps).all(|n| {
            let mut load = self.common_power[n];
            for k in 0..self.n_ues {
                if g.get(k, n) {
                    load += self.private(k, n);
                }
            }
            load <= self.p_max
        })
    }
}

/// Largest eigenvalue of a Hermitian PSD matrix, clamped at zero.
pub fn lambda_max(xi: &CMat) -> Result<f64> {
    if xi.nrows() != xi.ncols() {
        return Err(Error::Shape { expected: xi.nrows(), got: xi.ncols() });
    }
    let defect = linalg::hermitian_defect(xi);
    if defect > HERMITIAN_TOL * linalg::frob(xi).max(1.0) {
        return Err(Error::Domain(format!("matrix is not Hermitian (‖A − Aᴴ‖ = {defect:e})")));
    }
    if xi.nrows() == 1 {
        return Ok(xi[(0, 0)].re.max(0.0));
    }
    let mut m = xi.clone();
    linalg::hermitianize(&mut m);
    let eig = m.symmetric_eigen();
    Ok(eig.eigenvalues.iter().copied().fold(0.0, f64::max))
}

/// λ and power data from the pre-training precoders. `Ξᵖ` does not depend on
/// `g`, so this is the all-ones evaluation.
pub fn build_instance(
    ch: &ChannelGrid,
    pre: &PrecoderSet,
    n0: f64,
    p_max: f64,
    n_ue_max: usize,
) -> Result<SelectionInstance> {
    let (k_count, n_count) = (ch.n_ues, ch.n_aps);
    let mut lambda = Vec::with_capacity(k_count * n_count);
    for k in 0..k_count {
        for xi in rsma::private_xis(ch, pre, k, n0) {
            lambda.push(lambda_max(&xi)?);
        }
    }
    let private_power = pre.private.iter().map(linalg::frob_sq).collect();
    let common_power = pre.common.iter().map(linalg::frob_sq).collect();
    Ok(SelectionInstance {
        n_ues: k_count,
        n_aps: n_count,
        lambda_max: lambda,
        private_power,
        common_power,
        p_max,
        n_ue_max,
    })
}

/// Exhaustive enumeration in lexicographic order; keeps the first strict best.
pub fn brute_force_p3(inst: &SelectionInstance) -> Result<Association> {
    inst.validate()?;
    let vars = inst.n_ues * inst.n_aps;
    if vars > BRUTE_FORCE_MAX_VARS {
        return Err(Error::TooLarge { vars, limit: BRUTE_FORCE_MAX_VARS });
    }
    let mut best: Option<(f64, Association)> = None;
    for code in 0u64..(1u64 << vars) {
        // Most significant bit is variable 0, so counting up walks lexicographic order.
        let flags = (0..vars).map(|v| code >> (vars - 1 - v) & 1 == 1).collect();
        let g = Association::from_flags(inst.n_ues, inst.n_aps, flags)?;
        if !inst.is_feasible(&g) {
            continue;
        }
        let obj = inst.objective(&g);
        if best.as_ref().is_none_or(|(b, _)| obj > *b) {
            best = Some((obj, g));
        }
    }
    // g = 0 is always feasible once validate() has passed.
    Ok(best.expect("zero association is feasible").1)
}

/// Exact branch-and-bound for the max-min selection program.
pub fn solve_p3(inst: &SelectionInstance) -> Result<Association> {
    inst.validate()?;
    let mut search = Search::new(inst);
    search.threshold = greedy_value(inst);
    search.dfs(0);
    let flags = search.best.expect("zero association is reached first").1;
    Association::from_flags(inst.n_ues, inst.n_aps, flags)
}

/// Value of a simple bottleneck-first greedy; a lower bound on the optimum.
fn greedy_value(inst: &SelectionInstance) -> f64 {
    let mut g = Association::zeros(inst.n_ues, inst.n_aps);
    let mut load = inst.common_power.clone();
    loop {
        let sums: Vec<f64> = (0..inst.n_ues)
            .map(|k| (0..inst.n_aps).filter(|&n| g.get(k, n)).map(|n| inst.lambda(k, n)).sum())
            .collect();
        let k = (0..inst.n_ues).fold(0, |b, k| if sums[k] < sums[b] { k } else { b });
        if g.aps_of(k) >= inst.n_ue_max {
            break;
        }
        let pick = (0..inst.n_aps)
            .filter(|&n| !g.get(k, n) && inst.lambda(k, n) > 0.0 && load[n] + inst.private(k, n) <= inst.p_max)
            .max_by(|&a, &b| inst.lambda(k, a).total_cmp(&inst.lambda(k, b)));
        match pick {
            Some(n) => {
                g.set(k, n, true);
                load[n] += inst.private(k, n);
            }
            None => break,
        }
    }
    if inst.is_feasible(&g) {
        inst.objective(&g)
    } else {
        0.0
    }
}

/// Inflation applied to bounds so they dominate any float-evaluated objective.
fn inflate(x: f64, terms: usize) -> f64 {
    x * (1.0 + 4.0 * (terms as f64 + 2.0) * f64::EPSILON)
}

struct Search<'a> {
    inst: &'a SelectionInstance,
    flags: Vec<bool>,
    load: Vec<f64>,
    count: Vec<usize>,
    /// Subtrees whose bound falls strictly below this cannot hold an optimum.
    threshold: f64,
    best: Option<(f64, Vec<bool>)>,
}

impl<'a> Search<'a> {
    fn new(inst: &'a SelectionInstance) -> Self {
        Self {
            inst,
            flags: vec![false; inst.n_ues * inst.n_aps],
            load: inst.common_power.clone(),
            count: vec![0; inst.n_ues],
            threshold: 0.0,
            best: None,
        }
    }

    fn dfs(&mut self, var: usize) {
        let inst = self.inst;
        if var == self.flags.len() {
            let g = Association::from_flags(inst.n_ues, inst.n_aps, self.flags.clone()).expect("shape");
            let obj = inst.objective(&g);
            if self.best.as_ref().is_none_or(|(b, _)| obj > *b) {
                self.best = Some((obj, self.flags.clone()));
            }
            return;
        }
        if let Some((incumbent, _)) = &self.best {
            let bound = self.bound(var);
            // Later subtrees are lexicographically larger, so equal values lose too.
            if bound <= *incumbent || bound < self.threshold {
                return;
            }
        }
        let (k, n) = (var / inst.n_aps, var % inst.n_aps);
        self.dfs(var + 1);
        let fits = self.count[k] < inst.n_ue_max && self.load[n] + inst.private(k, n) <= inst.p_max;
        if fits {
            let saved = self.load[n];
            self.flags[var] = true;
            self.load[n] += inst.private(k, n);
            self.count[k] += 1;
            self.dfs(var + 1);
            self.flags[var] = false;
            self.load[n] = saved;
            self.count[k] -= 1;
        }
    }

    /// Upper bound on the objective of any completion of the first `var` fixed variables.
    fn bound(&self, var: usize) -> f64 {
        let per_ue = self.per_ue_bound(var);
        let packing = self.packing_bound(var, per_ue);
        per_ue.min(packing)
    }

    /// Candidate free variables of UE `k`: not yet decided and fitting the current load.
    fn candidates(&self, var: usize, k: usize) -> impl Iterator<Item = usize> + '_ {
        let inst = self.inst;
        (0..inst.n_aps).filter(move |&n| {
            k * inst.n_aps + n >= var && self.load[n] + inst.private(k, n) <= inst.p_max && inst.lambda(k, n) > 0.0
        })
    }

    fn fixed_sum(&self, var: usize, k: usize) -> f64 {
        let inst = self.inst;
        let mut s = 0.0;
        for n in 0..inst.n_aps {
            let v = k * inst.n_aps + n;
            if v < var && self.flags[v] {
                s += inst.lambda(k, n);
            }
        }
        s
    }

    /// Each UE on its own: fixed part plus its best remaining picks under C2.
    fn per_ue_bound(&self, var: usize) -> f64 {
        let inst = self.inst;
        let mut bound = f64::INFINITY;
        for k in 0..inst.n_ues {
            let mut cands: Vec<f64> = self.candidates(var, k).map(|n| inst.lambda(k, n)).collect();
            cands.sort_by(|a, b| b.total_cmp(a));
            let room = inst.n_ue_max.saturating_sub(self.count[k]);
            let s = self.fixed_sum(var, k) + cands.iter().take(room).sum::<f64>();
            bound = bound.min(inflate(s, inst.n_aps));
        }
        bound
    }

    /// Couples the UEs through the pooled remaining power: binary search on
    /// the level `t`, each UE buying its shortfall by a fractional knapsack.
    fn packing_bound(&self, var: usize, hi: f64) -> f64 {
        let inst = self.inst;
        let pool: f64 = self.load.iter().map(|l| (inst.p_max - l).max(0.0)).sum();
        let fixed: Vec<f64> = (0..inst.n_ues).map(|k| self.fixed_sum(var, k)).collect();
        let mut items: Vec<Vec<(f64, f64)>> = (0..inst.n_ues)
            .map(|k| self.candidates(var, k).map(|n| (inst.lambda(k, n), inst.private(k, n))).collect())
            .collect();
        // Cheapest power per unit of λ first.
        for row in &mut items {
            row.sort_by(|a, b| (a.1 * b.0).total_cmp(&(b.1 * a.0)));
        }
        let cost_at = |t: f64| -> f64 {
            let mut total = 0.0;
            for k in 0..inst.n_ues {
                let mut need = t - fixed[k];
                if need <= 0.0 {
                    continue;
                }
                for &(lam, pw) in &items[k] {
                    if need <= 0.0 {
                        break;
                    }
                    let frac = (need / lam).min(1.0);
                    total += frac * pw;
                    need -= frac * lam;
                }
                if need > 1e-12 * t {
                    return f64::INFINITY;
                }
            }
            total
        };
        let slack = pool * (1.0 + 1e-9) + 1e-300;
        if !hi.is_finite() || cost_at(hi) <= slack {
            return hi;
        }
        let (mut lo, mut up) = (0.0f64, hi);
        for _ in 0..60 {
            let mid = 0.5 * (lo + up);
            if cost_at(mid) <= slack {
                lo = mid;
            } else {
                up = mid;
            }
        }
        (up * (1.0 + 1e-9)).min(hi)
    }
}
