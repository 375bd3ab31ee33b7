//! Per-agent DDPG: state/action encodings, replay, TD targets, critic
//! regression and the deterministic policy gradient.
//!
//! Network inputs are laid out owner-first: an agent's global state is its
//! own local state followed by the frozen snapshots of the other agents (in
//! cyclic order after itself), and likewise for the global action. The
//! actor only produces the owner's slot.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::channel::ChannelGrid;
use crate::error::{shape_check, Error, Result};
use crate::linalg::{CMat, Complex64};
use crate::nn::{Activation, AdamState, Mlp, MlpDims, ParamVector};
use crate::rsma::{self, PrecoderSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DdpgConfig {
    pub gamma: f64,
    pub tau: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub batch_size: usize,
    pub replay_capacity: usize,
    /// Target networks are blended every `target_interval` steps.
    pub target_interval: usize,
    /// Hidden width factor: `n1 = round(eta · n0)`.
    pub eta: f64,
    pub noise_start: f64,
    pub noise_end: f64,
    pub finetune_noise_start: f64,
    pub finetune_noise_end: f64,
}

impl Default for DdpgConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            tau: 1e-3,
            actor_lr: 1e-4,
            critic_lr: 1e-3,
            batch_size: 64,
            replay_capacity: 20_000,
            target_interval: 1,
            eta: 2.0,
            noise_start: 0.2,
            noise_end: 0.02,
            finetune_noise_start: 0.05,
            finetune_noise_end: 0.005,
        }
    }
}

impl DdpgConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |f: &str, r: &str| Err(Error::Config { field: format!("ddpg.{f}"), reason: r.into() });
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad("gamma", "must lie in [0, 1]");
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad("tau", "must lie in (0, 1]");
        }
        if !(self.actor_lr > 0.0) || !(self.critic_lr > 0.0) {
            return bad("actor_lr", "learning rates must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1");
        }
        if self.replay_capacity == 0 {
            return bad("replay_capacity", "must be at least 1");
        }
        if self.target_interval == 0 {
            return bad("target_interval", "must be at least 1");
        }
        if !(self.eta > 0.0) {
            return bad("eta", "must be positive");
        }
        for (f, v) in [
            ("noise_start", self.noise_start),
            ("noise_end", self.noise_end),
            ("finetune_noise_start", self.finetune_noise_start),
            ("finetune_noise_end", self.finetune_noise_end),
        ] {
            if !(v >= 0.0) {
                return bad(f, "must be non-negative");
            }
        }
        Ok(())
    }
}

/// Linear decay from `start` to `end` over `episodes` episodes (0-based index).
pub fn noise_at(start: f64, end: f64, episode: usize, episodes: usize) -> f64 {
    if episodes <= 1 {
        return start;
    }
    let f = episode.min(episodes - 1) as f64 / (episodes - 1) as f64;
    start + (end - start) * f
}

pub fn local_state_len(n_ues: usize, m_ue: usize) -> usize {
    4 * n_ues * m_ue * m_ue
}

pub fn local_action_len(n_ues: usize, m_ap: usize, m_ue: usize) -> usize {
    2 * (n_ues + 1) * m_ap * m_ue + n_ues
}

/// Raw received-signal parts seen by one AP, flattened.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalState(pub Vec<f64>);

/// Raw actor output for one AP, entries in `[−1, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalAction(pub Vec<f64>);

fn push_matrix(out: &mut Vec<f64>, m: &CMat) {
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(m[(i, j)].re);
            out.push(m[(i, j)].im);
        }
    }
}

fn read_matrix(src: &[f64], rows: usize, cols: usize) -> CMat {
    CMat::from_fn(rows, cols, |i, j| {
        let at = 2 * (i * cols + j);
        Complex64::new(src[at], src[at + 1])
    })
}

/// Flattens `{Ŷᶜ_kn}_k` then `{Ŷᵖ_kn}_k` for AP `n`: row-major within each
/// `M' × M'` block, real part before imaginary.
pub fn encode_state(ch: &ChannelGrid, pre: &PrecoderSet, n: usize) -> LocalState {
    let mut common = Vec::with_capacity(local_state_len(ch.n_ues, ch.m_ue));
    let mut private = Vec::with_capacity(common.capacity() / 2);
    for k in 0..ch.n_ues {
        let (yc, yp) = rsma::received_signal_parts(ch, pre, k, n);
        push_matrix(&mut common, &yc);
        push_matrix(&mut private, &yp);
    }
    common.extend(private);
    LocalState(common)
}

impl LocalState {
    /// Inverse of [`encode_state`]: `(Ŷᶜ_k, Ŷᵖ_k)` for every UE.
    pub fn received_parts(&self, n_ues: usize, m_ue: usize) -> Result<(Vec<CMat>, Vec<CMat>)> {
        shape_check(local_state_len(n_ues, m_ue), self.0.len())?;
        let block = 2 * m_ue * m_ue;
        let half = n_ues * block;
        let parts = |base: usize| -> Vec<CMat> {
            (0..n_ues).map(|k| read_matrix(&self.0[base + k * block..], m_ue, m_ue)).collect()
        };
        Ok((parts(0), parts(half)))
    }

    /// Network features: `sign(x)·ln(1 + |x|/√N0)` per entry, so received
    /// amplitudes enter on an SNR-like log scale.
    pub fn features(&self, n0: f64) -> Vec<f64> {
        let s = 1.0 / n0.sqrt();
        self.0.iter().map(|x| x.signum() * (x.abs() * s).ln_1p()).collect()
    }
}

/// Decoded action of one AP.
#[derive(Debug, Clone, PartialEq)]
pub struct ApAction {
    pub common: CMat,
    pub private: Vec<CMat>,
    pub shares: Vec<f64>,
}

/// Maps raw actor outputs to feasible precoders and common-rate shares.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActionCodec {
    pub n_ues: usize,
    pub m_ap: usize,
    pub m_ue: usize,
    pub p_max: f64,
    /// Disables the common stream.
    pub sdma: bool,
}

impl ActionCodec {
    pub fn action_len(&self) -> usize {
        local_action_len(self.n_ues, self.m_ap, self.m_ue)
    }

    /// Per real component; a saturated action spends exactly `p_max`.
    pub fn amplitude(&self) -> f64 {
        (self.p_max / (2 * (self.n_ues + 1) * self.m_ap * self.m_ue) as f64).sqrt()
    }

    /// `served[k]` is `g_kn` for this AP; unserved private precoders are zeroed.
    pub fn decode(&self, raw: &LocalAction, served: &[bool]) -> Result<ApAction> {
        shape_check(self.action_len(), raw.0.len())?;
        shape_check(self.n_ues, served.len())?;
        let block = 2 * self.m_ap * self.m_ue;
        let amp = Complex64::new(self.amplitude(), 0.0);
        let mut common = read_matrix(&raw.0, self.m_ap, self.m_ue) * amp;
        if self.sdma {
            common.fill(Complex64::new(0.0, 0.0));
        }
        let mut private: Vec<CMat> = (0..self.n_ues)
            .map(|k| {
                if served[k] {
                    read_matrix(&raw.0[(k + 1) * block..], self.m_ap, self.m_ue) * amp
                } else {
                    CMat::zeros(self.m_ap, self.m_ue)
                }
            })
            .collect();
        let used = crate::linalg::frob_sq(&common) + private.iter().map(crate::linalg::frob_sq).sum::<f64>();
        let s = rsma::budget_scale(used, self.p_max);
        if s < 1.0 {
            let s = Complex64::new(s, 0.0);
            common *= s;
            private.iter_mut().for_each(|p| *p *= s);
        }
        let logits = &raw.0[(self.n_ues + 1) * block..];
        Ok(ApAction { common, private, shares: shares_from_logits(logits) })
    }
}

/// `c_k = relu(x_k) / max(1, Σ relu(x))`: non-negative, summing to at most 1.
pub fn shares_from_logits(logits: &[f64]) -> Vec<f64> {
    let relu: Vec<f64> = logits.iter().map(|x| x.max(0.0)).collect();
    let denom = relu.iter().sum::<f64>().max(1.0);
    let mut c: Vec<f64> = relu.iter().map(|x| x / denom).collect();
    cap_sum_at_one(&mut c);
    c
}

/// Nudges the largest entries down by an ulp until the sum is at most 1;
/// only ever needed to undo rounding.
pub fn cap_sum_at_one(c: &mut [f64]) {
    while c.iter().sum::<f64>() > 1.0 {
        let i = (0..c.len()).fold(0, |b, i| if c[i] > c[b] { i } else { b });
        c[i] = f64::from_bits(c[i].to_bits() - 1).max(0.0);
    }
}

/// One replay transition; states and actions are the global (owner-first) vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Experience {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
}

/// FIFO ring buffer sampled uniformly with replacement.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Experience>,
    head: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self { capacity: capacity.max(1), items: Vec::new(), head: 0 }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn clear(&mut self) {
        self.items.clear();
        self.head = 0;
    }

    pub fn push(&mut self, e: Experience) {
        if self.items.len() < self.capacity {
            self.items.push(e);
        } else {
            self.items[self.head] = e;
            self.head = (self.head + 1) % self.capacity;
        }
    }

    pub fn sample_indices<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Result<Vec<usize>> {
        if self.items.is_empty() {
            return Err(Error::EmptyReplay);
        }
        Ok((0..batch).map(|_| rng.random_range(0..self.items.len())).collect())
    }

    pub fn sample<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Result<Vec<&Experience>> {
        Ok(self.sample_indices(batch, rng)?.into_iter().map(|i| &self.items[i]).collect())
    }

    /// Oldest first.
    pub fn iter(&self) -> impl Iterator<Item = &Experience> {
        self.items[self.head..].iter().chain(&self.items[..self.head])
    }
}

/// Actor, critic, their targets and the two optimizers.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentNets {
    pub actor: Mlp,
    pub critic: Mlp,
    pub target_actor: Mlp,
    pub target_critic: Mlp,
    pub actor_opt: AdamState,
    pub critic_opt: AdamState,
}

impl AgentNets {
    /// `state_len`/`global_action_len` are the full (owner-first) input sizes;
    /// the actor emits the first `own_action_len` action entries.
    pub fn new<R: Rng + ?Sized>(
        state_len: usize,
        own_action_len: usize,
        global_action_len: usize,
        cfg: &DdpgConfig,
        rng: &mut R,
    ) -> Self {
        let actor = Mlp::new(MlpDims::with_eta(state_len, cfg.eta, own_action_len, Activation::Tanh), rng);
        let critic = Mlp::new(MlpDims::with_eta(state_len + global_action_len, cfg.eta, 1, Activation::Linear), rng);
        Self::from_nets(actor, critic, cfg)
    }

    pub fn from_nets(actor: Mlp, critic: Mlp, cfg: &DdpgConfig) -> Self {
        Self {
            actor_opt: AdamState::new(actor.param_count(), cfg.actor_lr),
            critic_opt: AdamState::new(critic.param_count(), cfg.critic_lr),
            target_actor: actor.clone(),
            target_critic: critic.clone(),
            actor,
            critic,
        }
    }

    pub fn state_len(&self) -> usize {
        self.actor.dims().n_in
    }

    pub fn own_action_len(&self) -> usize {
        self.actor.dims().n_out
    }

    pub fn global_action_len(&self) -> usize {
        self.critic.dims().n_in - self.state_len()
    }

    /// `clamp(μ(s) + N(0, σ²), −1, 1)` for the owner's slot.
    pub fn act<R: Rng + ?Sized>(&self, state: &[f64], noise_sigma: f64, rng: &mut R) -> Result<Vec<f64>> {
        let mut a = self.actor.forward(state)?;
        if noise_sigma > 0.0 {
            let normal = Normal::new(0.0, noise_sigma).map_err(|e| Error::Domain(e.to_string()))?;
            for v in &mut a {
                *v += normal.sample(rng);
            }
        }
        a.iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
        Ok(a)
    }

    /// Row-major `[state | own action | frozen action]` rows.
    fn critic_rows<'a>(rows: impl Iterator<Item = (&'a [f64], &'a [f64], &'a [f64])>, width: usize) -> Vec<f64> {
        let mut x = Vec::new();
        for (s, own, frozen) in rows {
            x.extend_from_slice(s);
            x.extend_from_slice(own);
            x.extend_from_slice(frozen);
            debug_assert_eq!(x.len() % width, 0);
        }
        x
    }

    fn stack<'a>(rows: impl Iterator<Item = &'a [f64]>) -> Vec<f64> {
        rows.flat_map(|r| r.iter().copied()).collect()
    }

    /// `z = r + γ·Q'(s', [μ'(s') | frozen slots of a])`.
    pub fn td_targets(&self, batch: &[&Experience], gamma: f64) -> Result<Vec<f64>> {
        if gamma == 0.0 {
            return Ok(batch.iter().map(|e| e.reward).collect());
        }
        let own = self.own_action_len();
        let rows = batch.len();
        let next = Self::stack(batch.iter().map(|e| e.next_state.as_slice()));
        let mu = self.target_actor.forward_batch(&next, rows)?.output;
        let x = Self::critic_rows(
            batch
                .iter()
                .enumerate()
                .map(|(i, e)| (e.next_state.as_slice(), &mu[i * own..(i + 1) * own], &e.action[own..])),
            self.critic.dims().n_in,
        );
        let q = self.target_critic.forward_batch(&x, rows)?.output;
        Ok(batch.iter().zip(q).map(|(e, q)| e.reward + gamma * q).collect())
    }

    /// Mean squared TD error and its gradient with respect to the critic parameters.
    pub fn critic_loss_and_grad(&self, batch: &[&Experience], targets: &[f64]) -> Result<(f64, Vec<f64>)> {
        shape_check(batch.len(), targets.len())?;
        let rows = batch.len();
        let scale = 1.0 / rows as f64;
        let x = Self::critic_rows(
            batch.iter().map(|e| (e.state.as_slice(), e.action.as_slice(), &[][..])),
            self.critic.dims().n_in,
        );
        let cache = self.critic.forward_batch(&x, rows)?;
        let err: Vec<f64> = cache.output.iter().zip(targets).map(|(q, z)| q - z).collect();
        let loss = err.iter().map(|e| e * e * scale).sum();
        let upstream: Vec<f64> = err.iter().map(|e| 2.0 * e * scale).collect();
        let mut grads = vec![0.0; self.critic.param_count()];
        self.critic.backward_batch(&cache, &upstream, Some(&mut grads), false)?;
        Ok((loss, grads))
    }

    /// One Adam step on the critic; returns the pre-step loss.
    pub fn critic_update(&mut self, batch: &[&Experience], gamma: f64) -> Result<f64> {
        let targets = self.td_targets(batch, gamma)?;
        let (loss, grads) = self.critic_loss_and_grad(batch, &targets)?;
        self.critic_opt.step(&mut self.critic, &grads)?;
        Ok(loss)
    }

    /// `J = mean Q(s, [μ(s) | frozen])` and `∇_θμ J` by the chain rule through
    /// the owner's action slot only.
    pub fn actor_objective_and_grad(&self, batch: &[&Experience]) -> Result<(f64, Vec<f64>)> {
        let own = self.own_action_len();
        let s_len = self.state_len();
        let n_in = self.critic.dims().n_in;
        let rows = batch.len();
        let scale = 1.0 / rows as f64;
        let states = Self::stack(batch.iter().map(|e| e.state.as_slice()));
        let a_cache = self.actor.forward_batch(&states, rows)?;
        let mu = &a_cache.output;
        let x = Self::critic_rows(
            batch.iter().enumerate().map(|(i, e)| (e.state.as_slice(), &mu[i * own..(i + 1) * own], &e.action[own..])),
            n_in,
        );
        let q_cache = self.critic.forward_batch(&x, rows)?;
        let objective = q_cache.output.iter().map(|q| q * scale).sum();
        let dq_dx = self.critic.backward_batch(&q_cache, &vec![scale; rows], None, true)?;
        let dq_da: Vec<f64> =
            (0..rows).flat_map(|i| dq_dx[i * n_in + s_len..i * n_in + s_len + own].iter().copied()).collect();
        let mut grads = vec![0.0; self.actor.param_count()];
        self.actor.backward_batch(&a_cache, &dq_da, Some(&mut grads), false)?;
        Ok((objective, grads))
    }

    /// One ascent step on the sampled policy gradient; returns the pre-step objective.
    pub fn actor_update(&mut self, batch: &[&Experience]) -> Result<f64> {
        let (objective, mut grads) = self.actor_objective_and_grad(batch)?;
        grads.iter_mut().for_each(|g| *g = -*g);
        self.actor_opt.step(&mut self.actor, &grads)?;
        Ok(objective)
    }

    pub fn update_targets(&mut self, tau: f64) -> Result<()> {
        self.target_actor.polyak_update(&self.actor, tau)?;
        self.target_critic.polyak_update(&self.critic, tau)
    }

    /// Actor, target actor, critic, target critic.
    pub fn param_vectors(&self) -> [ParamVector; 4] {
        [
            self.actor.to_param_vector(),
            self.target_actor.to_param_vector(),
            self.critic.to_param_vector(),
            self.target_critic.to_param_vector(),
        ]
    }

    pub fn load_param_vectors(&mut self, pvs: &[ParamVector; 4]) -> Result<()> {
        self.actor = Mlp::from_param_vector(&pvs[0], self.actor.dims())?;
        self.target_actor = Mlp::from_param_vector(&pvs[1], self.target_actor.dims())?;
        self.critic = Mlp::from_param_vector(&pvs[2], self.critic.dims())?;
        self.target_critic = Mlp::from_param_vector(&pvs[3], self.target_critic.dims())?;
        Ok(())
    }

    const CHECKPOINT_MAGIC: [u8; 4] = *b"CFCK";
    const CHECKPOINT_VERSION: u8 = 1;

    /// Container: magic `CFCK`, version byte, four parameter vectors in
    /// [`Self::param_vectors`] order, then actor and critic optimizer states.
    pub fn checkpoint_bytes(&self) -> Vec<u8> {
        let mut out = Self::CHECKPOINT_MAGIC.to_vec();
        out.push(Self::CHECKPOINT_VERSION);
        for pv in self.param_vectors() {
            out.extend(pv.to_bytes());
        }
        out.extend(self.actor_opt.to_bytes());
        out.extend(self.critic_opt.to_bytes());
        out
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 5 || bytes[..4] != Self::CHECKPOINT_MAGIC {
            return Err(Error::Format("bad checkpoint magic".into()));
        }
        if bytes[4] != Self::CHECKPOINT_VERSION {
            return Err(Error::Format(format!("checkpoint version {}", bytes[4])));
        }
        let mut at = 5;
        let mut nets = Vec::with_capacity(4);
        for _ in 0..4 {
            let (pv, used) = ParamVector::from_bytes(&bytes[at..])?;
            at += used;
            nets.push(Mlp::from_param_vector(&pv, pv.dims)?);
        }
        let (actor_opt, used) = AdamState::from_bytes(&bytes[at..])?;
        at += used;
        let (critic_opt, _) = AdamState::from_bytes(&bytes[at..])?;
        let target_critic = nets.pop().unwrap();
        let critic = nets.pop().unwrap();
        let target_actor = nets.pop().unwrap();
        let actor = nets.pop().unwrap();
        Ok(Self { actor, critic, target_actor, target_critic, actor_opt, critic_opt })
    }
}

/// Divides rewards by the largest magnitude seen so far.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RewardScaler {
    max_seen: f64,
}

impl RewardScaler {
    pub fn normalize(&mut self, r: f64) -> f64 {
        self.max_seen = self.max_seen.max(r.abs());
        if self.max_seen > 0.0 {
            r / self.max_seen
        } else {
            0.0
        }
    }
}

/// A DDPG learner with its replay buffer, used by both federated agents and
/// the centralized baseline.
#[derive(Debug, Clone)]
pub struct Learner {
    pub nets: AgentNets,
    pub replay: ReplayBuffer,
    pub scaler: RewardScaler,
    steps: u64,
}

impl Learner {
    pub fn new(nets: AgentNets, cfg: &DdpgConfig) -> Self {
        Self { nets, replay: ReplayBuffer::new(cfg.replay_capacity), scaler: RewardScaler::default(), steps: 0 }
    }

    /// Stores a transition (reward normalized) and runs one training step
    /// once the buffer holds a full minibatch.
    pub fn observe<R: Rng + ?Sized>(
        &mut self,
        state: Vec<f64>,
        action: Vec<f64>,
        raw_reward: f64,
        next_state: Vec<f64>,
        cfg: &DdpgConfig,
        rng: &mut R,
    ) -> Result<()> {
        let reward = self.scaler.normalize(raw_reward);
        self.replay.push(Experience { state, action, reward, next_state });
        let batch = self.replay.sample(cfg.batch_size, rng)?;
        self.nets.critic_update(&batch, cfg.gamma)?;
        self.nets.actor_update(&batch)?;
        self.steps += 1;
        if self.steps % cfg.target_interval as u64 == 0 {
            self.nets.update_targets(cfg.tau)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::random_gaussian;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_experience(r: &mut ChaCha8Rng, s: usize, a: usize) -> Experience {
        Experience {
            state: (0..s).map(|_| r.random_range(-1.0..1.0)).collect(),
            action: (0..a).map(|_| r.random_range(-1.0..1.0)).collect(),
            reward: r.random_range(-1.0..1.0),
            next_state: (0..s).map(|_| r.random_range(-1.0..1.0)).collect(),
        }
    }

    fn tiny_nets(seed: u64, s: usize, own: usize, global: usize, hidden: usize) -> AgentNets {
        let mut r = rng(seed);
        let actor = Mlp::new(MlpDims { n_in: s, n_hidden: hidden, n_out: own, output: Activation::Tanh }, &mut r);
        let critic =
            Mlp::new(MlpDims { n_in: s + global, n_hidden: hidden, n_out: 1, output: Activation::Linear }, &mut r);
        let mut nets = AgentNets::from_nets(actor, critic, &DdpgConfig::default());
        // Targets distinct from the primaries so compositions are exercised.
        let mut r2 = rng(seed + 1000);
        nets.target_actor = Mlp::new(nets.actor.dims(), &mut r2);
        nets.target_critic = Mlp::new(nets.critic.dims(), &mut r2);
        nets
    }

    #[test]
    fn state_encoding_layout() {
        let mut r = rng(1);
        let mut ch = ChannelGrid::zeros(1, 1, 3, 1);
        ch.set(0, 0, random_gaussian(&mut r, 3, 1));
        let mut pre = PrecoderSet::zeros(1, 1, 3, 1);
        assert!(encode_state(&ch, &pre, 0).0.iter().all(|v| *v == 0.0));
        pre.common[0] = random_gaussian(&mut r, 3, 1);
        *pre.private_mut(0, 0) = random_gaussian(&mut r, 3, 1);
        let s = encode_state(&ch, &pre, 0);
        let (yc, yp) = rsma::received_signal_parts(&ch, &pre, 0, 0);
        assert_eq!(s.0, vec![yc[(0, 0)].re, yc[(0, 0)].im, yp[(0, 0)].re, yp[(0, 0)].im]);
    }

    #[test]
    fn state_layout_inverts() {
        let mut r = rng(2);
        let (k, n, m, mp) = (3, 2, 3, 2);
        let mut ch = ChannelGrid::zeros(k, n, m, mp);
        let mut pre = PrecoderSet::zeros(k, n, m, mp);
        for kk in 0..k {
            for nn in 0..n {
                ch.set(kk, nn, random_gaussian(&mut r, m, mp));
                *pre.private_mut(kk, nn) = random_gaussian(&mut r, m, mp);
            }
        }
        pre.common[1] = random_gaussian(&mut r, m, mp);
        let s = encode_state(&ch, &pre, 1);
        assert_eq!(s.0.len(), local_state_len(k, mp));
        let (c, p) = s.received_parts(k, mp).unwrap();
        for kk in 0..k {
            let (yc, yp) = rsma::received_signal_parts(&ch, &pre, kk, 1);
            assert_eq!(c[kk], yc);
            assert_eq!(p[kk], yp);
        }
    }

    fn codec() -> ActionCodec {
        ActionCodec { n_ues: 2, m_ap: 2, m_ue: 1, p_max: 1.0, sdma: false }
    }

    #[test]
    fn decode_zero_action() {
        let c = codec();
        let d = c.decode(&LocalAction(vec![0.0; c.action_len()]), &[true, true]).unwrap();
        assert_eq!(crate::linalg::frob(&d.common), 0.0);
        assert!(d.private.iter().all(|p| crate::linalg::frob(p) == 0.0));
        assert_eq!(d.shares, vec![0.0, 0.0]);
    }

    #[test]
    fn share_normalization() {
        assert_eq!(shares_from_logits(&[1.0, 1.0]), vec![0.5, 0.5]);
        assert_eq!(shares_from_logits(&[0.2, -0.5]), vec![0.2, 0.0]);
    }

    #[test]
    fn decoded_actions_are_feasible() {
        let mut r = rng(3);
        for sdma in [false, true] {
            let c = ActionCodec { n_ues: 3, m_ap: 2, m_ue: 2, p_max: 0.7, sdma };
            for trial in 0..2000 {
                // Include out-of-range raw values; projection must still hold C1.
                let spread = if trial % 2 == 0 { 1.0 } else { 3.0 };
                let raw: Vec<f64> = (0..c.action_len()).map(|_| r.random_range(-spread..=spread)).collect();
                let served: Vec<bool> = (0..3).map(|_| r.random()).collect();
                let d = c.decode(&LocalAction(raw), &served).unwrap();
                let used =
                    crate::linalg::frob_sq(&d.common) + d.private.iter().map(crate::linalg::frob_sq).sum::<f64>();
                assert!(used <= c.p_max * (1.0 + 1e-12));
                assert!(d.shares.iter().all(|v| *v >= 0.0));
                assert!(d.shares.iter().sum::<f64>() <= 1.0);
                for (p, s) in d.private.iter().zip(&served) {
                    if !s {
                        assert_eq!(crate::linalg::frob(p), 0.0);
                    }
                }
                if sdma {
                    assert_eq!(crate::linalg::frob(&d.common), 0.0);
                }
            }
        }
    }

    #[test]
    fn saturated_action_spends_full_budget() {
        let c = codec();
        let d = c.decode(&LocalAction(vec![1.0; c.action_len()]), &[true, true]).unwrap();
        let used = crate::linalg::frob_sq(&d.common) + d.private.iter().map(crate::linalg::frob_sq).sum::<f64>();
        assert!((used - c.p_max).abs() < 1e-12);
    }

    #[test]
    fn act_noise_and_clamp() {
        let nets = tiny_nets(4, 3, 2, 4, 5);
        let s = [0.3, -0.2, 0.9];
        let a = nets.act(&s, 0.0, &mut rng(1)).unwrap();
        assert_eq!(a, nets.actor.forward(&s).unwrap());
        let mut r = rng(5);
        for _ in 0..500 {
            let a = nets.act(&s, 3.0, &mut r).unwrap();
            assert!(a.iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn td_target_composition() {
        let nets = tiny_nets(6, 3, 2, 4, 5);
        let mut r = rng(7);
        let exps: Vec<Experience> = (0..6).map(|_| random_experience(&mut r, 3, 4)).collect();
        let batch: Vec<&Experience> = exps.iter().collect();
        let z = nets.td_targets(&batch, 0.9).unwrap();
        for (e, zi) in exps.iter().zip(&z) {
            let mu = nets.target_actor.forward(&e.next_state).unwrap();
            let mut x = e.next_state.clone();
            x.extend(&mu);
            x.extend(&e.action[2..]);
            let q = nets.target_critic.forward(&x).unwrap()[0];
            assert!((zi - (e.reward + 0.9 * q)).abs() <= 1e-12);
        }
        let z0 = nets.td_targets(&batch, 0.0).unwrap();
        assert!(z0.iter().zip(&exps).all(|(z, e)| *z == e.reward));

        let mut zero = nets.clone();
        zero.target_critic = Mlp::zeros(nets.target_critic.dims());
        let zz = zero.td_targets(&batch, 0.99).unwrap();
        assert!(zz.iter().zip(&exps).all(|(z, e)| *z == e.reward));
    }

    #[test]
    fn critic_loss_gradient_matches_finite_differences() {
        let nets = tiny_nets(8, 2, 1, 2, 6);
        let mut r = rng(9);
        let exps: Vec<Experience> = (0..5).map(|_| random_experience(&mut r, 2, 2)).collect();
        let batch: Vec<&Experience> = exps.iter().collect();
        let z = nets.td_targets(&batch, 0.9).unwrap();
        let (_, g) = nets.critic_loss_and_grad(&batch, &z).unwrap();
        let h = 1e-6;
        for i in 0..g.len() {
            let mut p = nets.clone();
            p.critic.params_mut()[i] += h;
            let lp = p.critic_loss_and_grad(&batch, &z).unwrap().0;
            p.critic.params_mut()[i] -= 2.0 * h;
            let lm = p.critic_loss_and_grad(&batch, &z).unwrap().0;
            let fd = (lp - lm) / (2.0 * h);
            assert!((g[i] - fd).abs() / g[i].abs().max(fd.abs()).max(1e-3) <= 1e-5, "param {i}");
        }
    }

    #[test]
    fn critic_fixed_point_has_zero_gradient() {
        let nets = tiny_nets(10, 2, 1, 2, 4);
        let mut r = rng(11);
        let exps: Vec<Experience> = (0..4).map(|_| random_experience(&mut r, 2, 2)).collect();
        let batch: Vec<&Experience> = exps.iter().collect();
        // Targets from the same batched pass the loss uses, so they agree bit for bit.
        let x: Vec<f64> = exps.iter().flat_map(|e| e.state.iter().chain(&e.action).copied()).collect();
        let q = nets.critic.forward_batch(&x, exps.len()).unwrap().output;
        let (loss, g) = nets.critic_loss_and_grad(&batch, &q).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn duplicated_batch_equals_single_sample() {
        let nets = tiny_nets(12, 2, 1, 2, 4);
        let e = random_experience(&mut rng(13), 2, 2);
        let one = nets.critic_loss_and_grad(&[&e], &[0.3]).unwrap();
        let many = nets.critic_loss_and_grad(&[&e, &e, &e, &e], &[0.3; 4]).unwrap();
        assert!((one.0 - many.0).abs() < 1e-15);
        for (a, b) in one.1.iter().zip(&many.1) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn actor_gradient_matches_finite_differences() {
        // 1-2-1 actor, two-slot action with one frozen entry.
        let nets = tiny_nets(14, 1, 1, 2, 2);
        let mut r = rng(15);
        let exps: Vec<Experience> = (0..4).map(|_| random_experience(&mut r, 1, 2)).collect();
        let batch: Vec<&Experience> = exps.iter().collect();
        let (_, g) = nets.actor_objective_and_grad(&batch).unwrap();
        let h = 1e-6;
        for i in 0..g.len() {
            let mut p = nets.clone();
            p.actor.params_mut()[i] += h;
            let jp = p.actor_objective_and_grad(&batch).unwrap().0;
            p.actor.params_mut()[i] -= 2.0 * h;
            let jm = p.actor_objective_and_grad(&batch).unwrap().0;
            let fd = (jp - jm) / (2.0 * h);
            assert!((g[i] - fd).abs() / g[i].abs().max(fd.abs()).max(1e-3) <= 1e-4, "param {i}");
        }
    }

    #[test]
    fn zero_critic_gives_zero_actor_gradient() {
        let mut nets = tiny_nets(16, 2, 2, 3, 4);
        nets.critic = Mlp::zeros(nets.critic.dims());
        let e = random_experience(&mut rng(17), 2, 3);
        let (_, g) = nets.actor_objective_and_grad(&[&e]).unwrap();
        assert!(g.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn tiny_actor_step_does_not_decrease_q() {
        let mut r = rng(18);
        for seed in 0..10 {
            let mut nets = tiny_nets(seed, 3, 2, 3, 6);
            nets.actor_opt.lr = 1e-6;
            let exps: Vec<Experience> = (0..8).map(|_| random_experience(&mut r, 3, 3)).collect();
            let batch: Vec<&Experience> = exps.iter().collect();
            let before = nets.actor_update(&batch).unwrap();
            let after = nets.actor_objective_and_grad(&batch).unwrap().0;
            assert!(after >= before - 1e-15, "seed {seed}: {before} -> {after}");
        }
    }

    #[test]
    fn replay_fifo_and_errors() {
        let mut b = ReplayBuffer::new(2);
        let mut r = rng(21);
        assert!(matches!(b.sample(1, &mut r), Err(Error::EmptyReplay)));
        for i in 0..3 {
            b.push(Experience { state: vec![i as f64], action: vec![], reward: 0.0, next_state: vec![] });
        }
        let states: Vec<f64> = b.iter().map(|e| e.state[0]).collect();
        assert_eq!(states, vec![1.0, 2.0]);
        let a = b.sample_indices(10, &mut rng(5)).unwrap();
        let c = b.sample_indices(10, &mut rng(5)).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn replay_sampling_is_uniform() {
        let mut b = ReplayBuffer::new(10);
        for i in 0..10 {
            b.push(Experience { state: vec![i as f64], action: vec![], reward: 0.0, next_state: vec![] });
        }
        let draws = 100_000;
        let mut counts = [0usize; 10];
        for i in b.sample_indices(draws, &mut rng(22)).unwrap() {
            counts[i] += 1;
        }
        let expected = draws as f64 / 10.0;
        let chi2: f64 = counts.iter().map(|c| (*c as f64 - expected).powi(2) / expected).sum();
        // 99th percentile of χ² with 9 degrees of freedom.
        assert!(chi2 < 21.666, "χ² = {chi2}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let nets = tiny_nets(23, 3, 2, 4, 5);
        let bytes = nets.checkpoint_bytes();
        assert_eq!(AgentNets::from_checkpoint_bytes(&bytes).unwrap(), nets);
        assert!(AgentNets::from_checkpoint_bytes(&bytes[..10]).is_err());
    }

    #[test]
    fn polyak_targets_shrink_geometrically() {
        let mut nets = tiny_nets(24, 2, 1, 2, 3);
        let gap0: Vec<f64> = nets.target_actor.params().iter().zip(nets.actor.params()).map(|(a, b)| a - b).collect();
        for _ in 0..10 {
            nets.update_targets(0.2).unwrap();
        }
        let f = 0.8f64.powi(10);
        for ((t, a), g) in nets.target_actor.params().iter().zip(nets.actor.params()).zip(&gap0) {
            assert!(((t - a) - f * g).abs() < 1e-12);
        }
    }

    #[test]
    fn noise_schedule() {
        assert_eq!(noise_at(0.2, 0.02, 0, 10), 0.2);
        assert!((noise_at(0.2, 0.02, 9, 10) - 0.02).abs() < 1e-15);
        assert_eq!(noise_at(0.2, 0.02, 0, 1), 0.2);
    }

    #[test]
    fn reward_scaler() {
        let mut s = RewardScaler::default();
        assert_eq!(s.normalize(0.0), 0.0);
        assert_eq!(s.normalize(2.0), 1.0);
        assert_eq!(s.normalize(1.0), 0.5);
    }
}
