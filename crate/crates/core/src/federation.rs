//! Federated exchange between AP agents and the CPU.
//!
//! Agents own their nets, replay buffer, local CSI and channel estimates.
//! The only thing that crosses an agent boundary is a [`SyncMessage`]:
//! parameters plus the agent's latest local state and the action that
//! produced it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::channel::ChannelGrid;
use crate::ddpg::{ActionCodec, AgentNets, DdpgConfig, Learner, LocalAction, LocalState};
use crate::error::{shape_check, Error, Result};
use crate::linalg::{self, CMat, Complex64};
use crate::nn::ParamVector;
use crate::rsma::{self, Association, CommonRateShares, PrecoderSet};

/// What an agent sends to the CPU at a sync.
#[derive(Debug, Clone, PartialEq)]
pub struct SyncMessage {
    pub version: u8,
    pub agent_id: usize,
    pub episode: u64,
    /// Actor, target actor, critic, target critic.
    pub params: [ParamVector; 4],
    pub state: LocalState,
    pub action: LocalAction,
}

impl SyncMessage {
    pub const VERSION: u8 = 1;
    const MAGIC: [u8; 4] = *b"CFSM";

    /// `CFSM`, version, agent id (u32), episode (u64), four parameter
    /// vectors, then state and action as u64 length + f64 values, all LE.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Self::MAGIC.to_vec();
        out.push(self.version);
        out.extend((self.agent_id as u32).to_le_bytes());
        out.extend(self.episode.to_le_bytes());
        for pv in &self.params {
            out.extend(pv.to_bytes());
        }
        for v in [&self.state.0, &self.action.0] {
            out.extend((v.len() as u64).to_le_bytes());
            v.iter().for_each(|x| out.extend(x.to_le_bytes()));
        }
        out
    }

    /// Returns the message and the number of bytes consumed.
    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, usize)> {
        let short = || Error::Format("truncated sync message".into());
        if bytes.len() < 17 || bytes[..4] != Self::MAGIC {
            return Err(Error::Format("bad sync message header".into()));
        }
        let version = bytes[4];
        if version != Self::VERSION {
            return Err(Error::Format(format!("sync message version {version}")));
        }
        let agent_id = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
        let episode = u64::from_le_bytes(bytes[9..17].try_into().unwrap());
        let mut at = 17;
        let mut pvs = Vec::with_capacity(4);
        for _ in 0..4 {
            let (pv, used) = ParamVector::from_bytes(&bytes[at..])?;
            pvs.push(pv);
            at += used;
        }
        let mut vecs = Vec::with_capacity(2);
        for _ in 0..2 {
            let len_bytes = bytes.get(at..at + 8).ok_or_else(short)?;
            let len = u64::from_le_bytes(len_bytes.try_into().unwrap()) as usize;
            at += 8;
            let body = bytes.get(at..at + 8 * len).ok_or_else(short)?;
            vecs.push(body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect::<Vec<_>>());
            at += 8 * len;
        }
        let action = LocalAction(vecs.pop().unwrap());
        let state = LocalState(vecs.pop().unwrap());
        let params: [ParamVector; 4] = pvs.try_into().unwrap();
        Ok((Self { version, agent_id, episode, params, state, action }, at))
    }
}

const TRACE_MAGIC: [u8; 4] = *b"CFTR";

/// Federation trace: `CFTR`, version byte, then concatenated messages.
pub fn write_trace(messages: &[SyncMessage]) -> Vec<u8> {
    let mut out = TRACE_MAGIC.to_vec();
    out.push(SyncMessage::VERSION);
    for m in messages {
        out.extend(m.to_bytes());
    }
    out
}

pub fn read_trace(bytes: &[u8]) -> Result<Vec<SyncMessage>> {
    if bytes.len() < 5 || bytes[..4] != TRACE_MAGIC {
        return Err(Error::Format("bad federation trace header".into()));
    }
    if bytes[4] != SyncMessage::VERSION {
        return Err(Error::Format(format!("federation trace version {}", bytes[4])));
    }
    let mut at = 5;
    let mut out = Vec::new();
    while at < bytes.len() {
        let (m, used) = SyncMessage::from_bytes(&bytes[at..])?;
        out.push(m);
        at += used;
    }
    Ok(out)
}

/// Elementwise mean with compensated summation. Columns whose entries are
/// all equal are returned bit-exact.
pub fn mean_of(vectors: &[&[f64]]) -> Result<Vec<f64>> {
    let first = *vectors.first().ok_or_else(|| Error::Sync("nothing to average".into()))?;
    for v in vectors {
        shape_check(first.len(), v.len())?;
    }
    let n = vectors.len() as f64;
    Ok((0..first.len())
        .map(|j| {
            let x0 = first[j];
            if vectors.iter().all(|v| v[j] == x0) {
                return x0;
            }
            let (mut sum, mut comp) = (0.0f64, 0.0f64);
            for v in vectors {
                let x = v[j];
                let t = sum + x;
                comp += if sum.abs() >= x.abs() { (sum - t) + x } else { (x - t) + sum };
                sum = t;
            }
            (sum + comp) / n
        })
        .collect())
}

/// Averages each of the four networks across all `n_agents` messages.
pub fn aggregate(messages: &[SyncMessage], n_agents: usize) -> Result<[ParamVector; 4]> {
    if messages.len() != n_agents {
        return Err(Error::Sync(format!("{} of {n_agents} agents reported", messages.len())));
    }
    let mut seen = vec![false; n_agents];
    for m in messages {
        if m.version != SyncMessage::VERSION {
            return Err(Error::Sync(format!("agent {} sent message version {}", m.agent_id, m.version)));
        }
        match seen.get_mut(m.agent_id) {
            Some(s) if !*s => *s = true,
            _ => return Err(Error::Sync(format!("unexpected or duplicate agent id {}", m.agent_id))),
        }
    }
    let reference = &messages[0].params;
    let mut out = reference.clone();
    for (i, slot) in out.iter_mut().enumerate() {
        for m in messages {
            let p = &m.params[i];
            if p.version != reference[i].version || p.dims != reference[i].dims {
                return Err(Error::Sync(format!("agent {} parameter layout differs", m.agent_id)));
            }
        }
        let views: Vec<&[f64]> = messages.iter().map(|m| m.params[i].values.as_slice()).collect();
        slot.values = mean_of(&views)?;
    }
    Ok(out)
}

/// Estimates `H` from `Ŷᶜ = Hᴴ P` as `(P Pᴴ)⁺ P Ŷᶜᴴ`, i.e. the projection of
/// `H` onto the column space of `P`. Computed as `(Pᴴ)⁺ Ŷᶜᴴ`, which is the
/// same matrix without squaring the condition number.
///
/// Returns `(estimate, flagged)`; `flagged` is set when `P` is identically
/// zero and nothing can be learned.
pub fn estimate_channel(y_common: &CMat, p_common: &CMat) -> (CMat, bool) {
    let (m, mp) = p_common.shape();
    if p_common.iter().all(|z| *z == Complex64::new(0.0, 0.0)) {
        return (CMat::zeros(m, mp), true);
    }
    let svd = p_common.adjoint().svd(true, true);
    let smax = svd.singular_values.iter().copied().fold(0.0, f64::max);
    let eps = smax * m.max(mp) as f64 * f64::EPSILON;
    let pinv = svd.pseudo_inverse(eps).expect("both factors were computed");
    (pinv * y_common.adjoint(), false)
}

/// An agent's picture of the channel: its own column is measured, the rest
/// comes from [`estimate_channel`] at the last sync.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatedChannels {
    pub owner: usize,
    pub grid: ChannelGrid,
}

impl EstimatedChannels {
    pub fn zeros(owner: usize, n_ues: usize, n_aps: usize, m_ap: usize, m_ue: usize) -> Self {
        Self { owner, grid: ChannelGrid::zeros(n_ues, n_aps, m_ap, m_ue) }
    }

    /// Overwrites the owner's column with freshly measured CSI.
    pub fn set_own(&mut self, own: &[CMat]) -> Result<()> {
        shape_check(self.grid.n_ues, own.len())?;
        for (k, h) in own.iter().enumerate() {
            self.grid.set(k, self.owner, h.clone());
        }
        Ok(())
    }

    /// Re-estimates AP `n`'s column from its exchanged state and common
    /// precoder. Returns true when the estimate had to be zeroed.
    pub fn update_from(&mut self, n: usize, state: &LocalState, p_common: &CMat) -> Result<bool> {
        if n == self.owner {
            return Err(Error::Domain("an agent never estimates its own channel".into()));
        }
        let (yc, _) = state.received_parts(self.grid.n_ues, self.grid.m_ue)?;
        let mut flagged = false;
        for (k, y) in yc.iter().enumerate() {
            let (h, f) = estimate_channel(y, p_common);
            flagged |= f;
            self.grid.set(k, n, h);
        }
        Ok(flagged)
    }
}

/// Result of the per-agent reward computation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgentReward {
    pub value: f64,
    /// Set when the agent serves no UE and the reward defaults to 0.
    pub empty_service: bool,
}

/// `min_{k ∈ 𝒦_n} R_k` evaluated on the agent's channel view.
pub fn reward(
    view: &EstimatedChannels,
    pre: &PrecoderSet,
    assoc: &Association,
    shares: &CommonRateShares,
    n0: f64,
) -> Result<AgentReward> {
    let served = assoc.served_ues(view.owner);
    if served.is_empty() {
        return Ok(AgentReward { value: 0.0, empty_service: true });
    }
    let report = rsma::rates(&view.grid, pre, assoc, shares, n0)?;
    let value = served.iter().map(|&k| report.total[k]).fold(f64::INFINITY, f64::min);
    Ok(AgentReward { value, empty_service: false })
}

/// Mean share vector with the sum kept within 1.
pub fn mean_shares(per_agent: &[Vec<f64>]) -> Result<CommonRateShares> {
    let views: Vec<&[f64]> = per_agent.iter().map(Vec::as_slice).collect();
    let mut c: Vec<f64> = mean_of(&views)?.into_iter().map(|v| v.max(0.0)).collect();
    crate::ddpg::cap_sum_at_one(&mut c);
    CommonRateShares::new(c)
}

/// One AP's learner and everything it knows about the others.
#[derive(Debug, Clone)]
pub struct FederatedAgent {
    pub id: usize,
    pub learner: Learner,
    pub codec: ActionCodec,
    pub estimates: EstimatedChannels,
    /// Latest own local state.
    pub state: LocalState,
    /// Last action this agent applied.
    pub action: LocalAction,
    /// Exchanged `(state, action)` of every agent as of the last sync.
    pub snapshots: Vec<(LocalState, LocalAction)>,
    snapshot_features: Vec<Vec<f64>>,
    pub rng: ChaCha8Rng,
    n0: f64,
}

impl FederatedAgent {
    pub fn new(
        id: usize,
        n_aps: usize,
        nets: AgentNets,
        codec: ActionCodec,
        m_ap: usize,
        n0: f64,
        cfg: &DdpgConfig,
        seed: u64,
    ) -> Self {
        let state_len = crate::ddpg::local_state_len(codec.n_ues, codec.m_ue);
        let action_len = codec.action_len();
        let zero = (LocalState(vec![0.0; state_len]), LocalAction(vec![0.0; action_len]));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(id as u64 + 1);
        Self {
            id,
            learner: Learner::new(nets, cfg),
            codec,
            estimates: EstimatedChannels::zeros(id, codec.n_ues, n_aps, m_ap, codec.m_ue),
            state: zero.0.clone(),
            action: zero.1.clone(),
            snapshot_features: vec![vec![0.0; state_len]; n_aps],
            snapshots: vec![zero; n_aps],
            rng,
            n0,
        }
    }

    pub fn n_aps(&self) -> usize {
        self.snapshots.len()
    }

    /// Other agents in the order their slots appear: `id+1, …, id−1`.
    pub fn others(&self) -> impl Iterator<Item = usize> + '_ {
        let n = self.n_aps();
        (1..n).map(move |j| (self.id + j) % n)
    }

    /// Own features followed by the frozen features of the others.
    pub fn global_state(&self, own: &LocalState) -> Vec<f64> {
        let mut s = own.features(self.n0);
        for m in self.others() {
            s.extend_from_slice(&self.snapshot_features[m]);
        }
        s
    }

    /// `own` followed by the frozen actions of the others.
    pub fn global_action(&self, own: &[f64]) -> Vec<f64> {
        let mut a = own.to_vec();
        for m in self.others() {
            a.extend_from_slice(&self.snapshots[m].1 .0);
        }
        a
    }

    /// Precoders as this agent believes them to be: its own from `own`,
    /// the rest decoded from the snapshots.
    pub fn believed_precoders(&self, own: &crate::ddpg::ApAction, assoc: &Association) -> Result<PrecoderSet> {
        let n_aps = self.n_aps();
        let mut pre = PrecoderSet::zeros(self.codec.n_ues, n_aps, self.codec.m_ap, self.codec.m_ue);
        let mut place = |n: usize, a: &crate::ddpg::ApAction| {
            pre.common[n] = a.common.clone();
            for (k, p) in a.private.iter().enumerate() {
                *pre.private_mut(k, n) = p.clone();
            }
        };
        place(self.id, own);
        for m in self.others() {
            let decoded = self.codec.decode(&self.snapshots[m].1, &served_mask(assoc, m))?;
            place(m, &decoded);
        }
        Ok(pre)
    }

    pub fn sync_message(&self, episode: u64) -> SyncMessage {
        SyncMessage {
            version: SyncMessage::VERSION,
            agent_id: self.id,
            episode,
            params: self.learner.nets.param_vectors(),
            state: self.state.clone(),
            action: self.action.clone(),
        }
    }

    /// Installs the broadcast parameters and the exchanged snapshots, then
    /// re-estimates the other agents' channels. Returns how many estimates
    /// were zeroed because the sender's common precoder was zero.
    pub fn apply_sync(
        &mut self,
        global: &[ParamVector; 4],
        messages: &[SyncMessage],
        assoc: &Association,
    ) -> Result<usize> {
        self.learner.nets.load_param_vectors(global)?;
        let mut flagged = 0;
        for m in messages {
            self.snapshots[m.agent_id] = (m.state.clone(), m.action.clone());
            self.snapshot_features[m.agent_id] = m.state.features(self.n0);
            if m.agent_id != self.id {
                let decoded = self.codec.decode(&m.action, &served_mask(assoc, m.agent_id))?;
                flagged += self.estimates.update_from(m.agent_id, &m.state, &decoded.common)? as usize;
            }
        }
        Ok(flagged)
    }
}

pub fn served_mask(assoc: &Association, n: usize) -> Vec<bool> {
    (0..assoc.n_ues).map(|k| assoc.get(k, n)).collect()
}

/// Barrier round: collect, aggregate, broadcast. Returns the messages for
/// tracing and the number of zeroed estimates.
pub fn sync_round(
    agents: &mut [FederatedAgent],
    episode: u64,
    assoc: &Association,
) -> Result<(Vec<SyncMessage>, usize)> {
    let messages: Vec<SyncMessage> = agents.iter().map(|a| a.sync_message(episode)).collect();
    let global = aggregate(&messages, agents.len())?;
    let mut flagged = 0;
    for a in agents.iter_mut() {
        flagged += a.apply_sync(&global, &messages, assoc)?;
    }
    Ok((messages, flagged))
}

/// Full-matrix helper used by tests and the CLI: the projector onto the
/// column space of `p`, built from an orthonormal basis.
pub fn column_space_projector(p: &CMat) -> CMat {
    let (m, _) = p.shape();
    let svd = p.clone().svd(true, false);
    let u = svd.u.expect("requested");
    let smax = svd.singular_values.iter().copied().fold(0.0, f64::max);
    let tol = smax * p.nrows().max(p.ncols()) as f64 * f64::EPSILON;
    let mut proj = CMat::zeros(m, m);
    for (j, s) in svd.singular_values.iter().enumerate() {
        if *s > tol {
            let col = u.column(j).into_owned();
            proj += &col * col.adjoint();
        }
    }
    linalg::hermitianize(&mut proj);
    proj
}
