//! Embedded oracle checks run by `cellfree selftest`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ap_selection::{brute_force_p3, solve_p3, SelectionInstance};
use crate::channel::ChannelGrid;
use crate::ddpg::{AgentNets, DdpgConfig, Experience};
use crate::federation::{column_space_projector, estimate_channel};
use crate::linalg::{self, random_gaussian, CMat, Complex64};
use crate::nn::{Activation, Mlp, MlpDims};
use crate::rsma::{self, Association, CommonRateShares, PrecoderSet};

#[derive(Debug, Clone, Copy, Default)]
pub struct SelftestOptions {
    /// Added to one analytic network gradient entry; non-zero values must
    /// make the gradient check fail.
    pub gradient_fault: f64,
}

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

type Check = fn(&SelftestOptions) -> std::result::Result<String, String>;

const CHECKS: &[(&str, Check)] = &[
    ("nn-gradient", nn_gradient),
    ("critic-gradient", critic_gradient),
    ("actor-gradient", actor_gradient),
    ("rate-oracle", rate_oracle),
    ("p3-brute-force", p3_brute_force),
    ("estimate-projection", estimate_projection),
    ("power-projection", power_projection),
];

pub fn check_names() -> Vec<&'static str> {
    CHECKS.iter().map(|c| c.0).collect()
}

/// Runs every check; never stops early.
pub fn run_all(opts: &SelftestOptions) -> Vec<CheckOutcome> {
    CHECKS
        .iter()
        .map(|(name, f)| match f(opts) {
            Ok(detail) => CheckOutcome { name, passed: true, detail },
            Err(detail) => CheckOutcome { name, passed: false, detail },
        })
        .collect()
}

fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

fn fd_check(
    name: &str,
    analytic: &[f64],
    mut f: impl FnMut(usize, f64) -> f64,
    tol: f64,
) -> std::result::Result<f64, String> {
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for (i, &g) in analytic.iter().enumerate() {
        let fd = (f(i, h) - f(i, -h)) / (2.0 * h);
        let e = rel_err(g, fd, 1e-3);
        worst = worst.max(e);
        if e > tol {
            return Err(format!("{name}: parameter {i}: analytic {g:e}, finite difference {fd:e}"));
        }
    }
    Ok(worst)
}

fn nn_gradient(opts: &SelftestOptions) -> std::result::Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for output in [Activation::Tanh, Activation::Linear] {
        let net = Mlp::new(MlpDims { n_in: 1, n_hidden: 8, n_out: 2, output }, &mut rng);
        let x = [rng.random_range(-1.0..1.0)];
        let w = [0.7, -1.3];
        let loss = |m: &Mlp| -> f64 { m.forward(&x).unwrap().iter().zip(&w).map(|(y, w)| y * w).sum() };
        let cache = net.forward_cached(&x).map_err(|e| e.to_string())?;
        let mut g = vec![0.0; net.param_count()];
        net.backward(&cache, &w, Some(&mut g)).map_err(|e| e.to_string())?;
        g[0] += opts.gradient_fault;
        let e = fd_check(
            "forward/backward",
            &g,
            |i, h| {
                let mut m = net.clone();
                m.params_mut()[i] += h;
                loss(&m)
            },
            1e-5,
        )?;
        worst = worst.max(e);
    }
    Ok(format!("worst relative error {worst:.1e}"))
}

fn experiences(rng: &mut ChaCha8Rng, s: usize, a: usize, count: usize) -> Vec<Experience> {
    (0..count)
        .map(|_| Experience {
            state: (0..s).map(|_| rng.random_range(-1.0..1.0)).collect(),
            action: (0..a).map(|_| rng.random_range(-1.0..1.0)).collect(),
            reward: rng.random_range(-1.0..1.0),
            next_state: (0..s).map(|_| rng.random_range(-1.0..1.0)).collect(),
        })
        .collect()
}

fn tiny_nets(rng: &mut ChaCha8Rng) -> AgentNets {
    let actor = Mlp::new(MlpDims { n_in: 1, n_hidden: 8, n_out: 1, output: Activation::Tanh }, rng);
    let critic = Mlp::new(MlpDims { n_in: 3, n_hidden: 8, n_out: 1, output: Activation::Linear }, rng);
    let mut nets = AgentNets::from_nets(actor, critic, &DdpgConfig::default());
    nets.target_actor = Mlp::new(nets.actor.dims(), rng);
    nets.target_critic = Mlp::new(nets.critic.dims(), rng);
    nets
}

fn critic_gradient(_: &SelftestOptions) -> std::result::Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let nets = tiny_nets(&mut rng);
    let exps = experiences(&mut rng, 1, 2, 6);
    let batch: Vec<&Experience> = exps.iter().collect();
    let z = nets.td_targets(&batch, 0.99).map_err(|e| e.to_string())?;
    let (_, g) = nets.critic_loss_and_grad(&batch, &z).map_err(|e| e.to_string())?;
    let worst = fd_check(
        "critic loss",
        &g,
        |i, h| {
            let mut n = nets.clone();
            n.critic.params_mut()[i] += h;
            n.critic_loss_and_grad(&batch, &z).unwrap().0
        },
        1e-5,
    )?;
    Ok(format!("worst relative error {worst:.1e}"))
}

fn actor_gradient(_: &SelftestOptions) -> std::result::Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let nets = tiny_nets(&mut rng);
    let exps = experiences(&mut rng, 1, 2, 6);
    let batch: Vec<&Experience> = exps.iter().collect();
    let (_, g) = nets.actor_objective_and_grad(&batch).map_err(|e| e.to_string())?;
    let worst = fd_check(
        "actor objective",
        &g,
        |i, h| {
            let mut n = nets.clone();
            n.actor.params_mut()[i] += h;
            n.actor_objective_and_grad(&batch).unwrap().0
        },
        1e-5,
    )?;
    Ok(format!("worst relative error {worst:.1e}"))
}

/// log2 det through Hermitian eigenvalues.
fn eig_log2_det(a: &CMat) -> f64 {
    let mut m = a.clone();
    linalg::hermitianize(&mut m);
    m.symmetric_eigen().eigenvalues.iter().map(|v| v.log2()).sum()
}

fn rate_oracle(_: &SelftestOptions) -> std::result::Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut worst: f64 = 0.0;
    for trial in 0..40 {
        let (k_n, n_n, m, mp) =
            (rng.random_range(1..=3), rng.random_range(1..=3), rng.random_range(1..=4), rng.random_range(1..=2));
        let mut ch = ChannelGrid::zeros(k_n, n_n, m, mp);
        let mut pre = PrecoderSet::zeros(k_n, n_n, m, mp);
        for n in 0..n_n {
            pre.common[n] = random_gaussian(&mut rng, m, mp);
            for k in 0..k_n {
                ch.set(k, n, random_gaussian(&mut rng, m, mp));
                *pre.private_mut(k, n) = random_gaussian(&mut rng, m, mp);
            }
        }
        let flags = (0..k_n * n_n).map(|_| rng.random_bool(0.7)).collect();
        let assoc = Association::from_flags(k_n, n_n, flags).map_err(|e| e.to_string())?;
        let shares = CommonRateShares::new(vec![1.0 / k_n as f64; k_n]).map_err(|e| e.to_string())?;
        let n0 = 0.5;
        let got = rsma::rates(&ch, &pre, &assoc, &shares, n0).map_err(|e| e.to_string())?;
        for k in 0..k_n {
            let mut sp = CMat::identity(mp, mp) * Complex64::new(n0, 0.0);
            let mut own = CMat::zeros(mp, mp);
            for n in 0..n_n {
                for i in 0..k_n {
                    let y = ch.get(k, n).adjoint() * pre.private(i, n);
                    if i == k {
                        own += &y * y.adjoint();
                    } else {
                        sp += &y * y.adjoint();
                    }
                }
            }
            let sc = &sp + own;
            let (ic, ip) = (sc.try_inverse().ok_or("singular Σᶜ")?, sp.try_inverse().ok_or("singular Σᵖ")?);
            let mut ac = CMat::identity(mp, mp);
            let mut ap = CMat::identity(mp, mp);
            for n in 0..n_n {
                let yc = ch.get(k, n).adjoint() * &pre.common[n];
                ac += yc.adjoint() * &ic * &yc;
                if assoc.get(k, n) {
                    let yp = ch.get(k, n).adjoint() * pre.private(k, n);
                    ap += yp.adjoint() * &ip * &yp;
                }
            }
            let (rc, rp) = (eig_log2_det(&ac), eig_log2_det(&ap));
            let (ec, ep) = (rel_err(got.common[k], rc, 1e-300), rel_err(got.private[k], rp, 1e-300));
            worst = worst.max(ec).max(ep);
            if ec > 1e-10 || ep > 1e-10 {
                return Err(format!(
                    "trial {trial}, UE {k}: engine ({}, {}) vs oracle ({rc}, {rp})",
                    got.common[k], got.private[k]
                ));
            }
        }
    }
    Ok(format!("worst relative error {worst:.1e}"))
}

fn p3_brute_force(_: &SelftestOptions) -> std::result::Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for trial in 0..100 {
        let (k_n, n_n) = (rng.random_range(1..=3), rng.random_range(1..=3));
        let kn = k_n * n_n;
        let inst = SelectionInstance {
            n_ues: k_n,
            n_aps: n_n,
            lambda_max: (0..kn).map(|_| rng.random_range(0.0..5.0)).collect(),
            private_power: (0..kn).map(|_| rng.random_range(0.0..0.6)).collect(),
            common_power: (0..n_n).map(|_| rng.random_range(0.0..0.3)).collect(),
            p_max: 1.0,
            n_ue_max: rng.random_range(1..=n_n),
        };
        let a = solve_p3(&inst).map_err(|e| e.to_string())?;
        let b = brute_force_p3(&inst).map_err(|e| e.to_string())?;
        if inst.objective(&a) != inst.objective(&b) {
            return Err(format!(
                "trial {trial}: {inst:?}: solver {} vs enumeration {}",
                inst.objective(&a),
                inst.objective(&b)
            ));
        }
    }
    Ok("100 instances agree".into())
}

fn estimate_projection(_: &SelftestOptions) -> std::result::Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    for trial in 0..50 {
        let h = random_gaussian(&mut rng, 4, 2);
        let p = random_gaussian(&mut rng, 4, 2);
        let (est, _) = estimate_channel(&(h.adjoint() * &p), &p);
        let err = linalg::frob(&(est - column_space_projector(&p) * &h));
        if err > 1e-10 * linalg::frob(&h) {
            return Err(format!("trial {trial}: ‖H̃ − ΠH‖ = {err:e}"));
        }
    }
    Ok("50 instances within 1e-10".into())
}

fn power_projection(_: &SelftestOptions) -> std::result::Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for trial in 0..50 {
        let mut pre = PrecoderSet::zeros(3, 2, 2, 2);
        for n in 0..2 {
            pre.common[n] = random_gaussian(&mut rng, 2, 2);
            for k in 0..3 {
                *pre.private_mut(k, n) = random_gaussian(&mut rng, 2, 2);
            }
        }
        let assoc = Association::all_ones(3, 2);
        let p_max = rng.random_range(0.1..10.0);
        let out = rsma::project_power(&pre, &assoc, p_max);
        for n in 0..2 {
            let used = rsma::power_used(&out, &assoc, n);
            let before = rsma::power_used(&pre, &assoc, n);
            let expect = before.min(p_max);
            if rel_err(used, expect, 1e-300) > 1e-12 {
                return Err(format!("trial {trial}, AP {n}: {used} W after projection, expected {expect} W"));
            }
        }
    }
    Ok("50 instances hold the budget".into())
}
