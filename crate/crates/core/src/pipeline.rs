//! Training orchestration: precoder pre-training with full association, AP
//! selection, then fine-tuning from the pre-trained weights. The same three
//! blocks run for the federated agents and for the centralized baseline.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ap_selection::{self, SelectionInstance};
use crate::channel::{self, ChannelGrid, ChannelParams, Topology};
use crate::config::{ExperimentConfig, Mode};
use crate::ddpg::{self, ActionCodec, AgentNets, ApAction, DdpgConfig, Learner, LocalAction, LocalState};
use crate::error::{Error, Result};
use crate::federation::{self, FederatedAgent, SyncMessage};
use crate::linalg::CMat;
use crate::rsma::{self, Association, CommonRateShares, PrecoderSet, RateReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Pretrain,
    Finetune,
}

/// Everything an observer may inspect after one environment step.
#[derive(Debug)]
pub struct StepEvent<'a> {
    pub phase: Phase,
    pub round: usize,
    pub episode: usize,
    pub step: usize,
    /// Precoders actually transmitted.
    pub precoders: &'a PrecoderSet,
    /// Decoded share vectors, one per acting network.
    pub shares: &'a [Vec<f64>],
    pub assoc: &'a Association,
    pub p_max: f64,
}

/// Hooks into a run. Step events are only built when `wants_steps` is true.
pub trait Observer: Send {
    fn wants_steps(&self) -> bool {
        false
    }
    fn on_step(&mut self, _event: &StepEvent<'_>) {}
    fn on_sync(&mut self, _episode: usize, _messages: &[SyncMessage]) {}
    fn on_selection(&mut self, _round: usize, _instance: &SelectionInstance, _assoc: &Association) {}
    fn on_episode(&mut self, _record: &EpisodeRecord) {}
}

pub struct NoObserver;

impl Observer for NoObserver {}

/// Noise-free evaluation of the current policy on the true channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode: usize,
    pub phase: Phase,
    pub min_rate: f64,
    pub mean_rate: f64,
    pub common_rate: f64,
    /// `min_n (p_max − used_n)`, watts.
    pub power_slack: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunCounters {
    pub syncs: usize,
    /// Channel estimates zeroed because the sender's common precoder was zero.
    pub zero_estimates: usize,
    /// Agent steps whose reward defaulted to 0 for lack of served UEs.
    pub empty_service_steps: usize,
    /// Links added to the selected association by augmentation.
    pub added_links: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub mode: Mode,
    pub seed: u64,
    pub records: Vec<EpisodeRecord>,
    /// Selected association of each outer round.
    pub associations: Vec<Association>,
    pub counters: RunCounters,
    pub wall_clock_s: f64,
    pub config: ExperimentConfig,
}

pub const METRICS_HEADER: &str = "episode,mode,seed,min_rate,mean_rate,R_c,power_slack";

impl RunReport {
    pub fn min_rates(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.min_rate).collect()
    }

    /// Rows without the header; floats use shortest round-trip formatting.
    pub fn metrics_rows(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.episode, self.mode, self.seed, r.min_rate, r.mean_rate, r.common_rate, r.power_slack
            ));
        }
        out
    }

    pub fn metrics_csv(&self) -> String {
        format!("{METRICS_HEADER}\n{}", self.metrics_rows())
    }

    /// `k,n,g` rows for the last selected association.
    pub fn association_csv(&self) -> String {
        let mut out = String::from("k,n,g\n");
        if let Some(a) = self.associations.last() {
            for k in 0..a.n_ues {
                for n in 0..a.n_aps {
                    out.push_str(&format!("{k},{n},{}\n", a.get(k, n) as u8));
                }
            }
        }
        out
    }
}

/// Ground truth the simulator holds; agents only ever see their own column.
#[derive(Debug, Clone)]
pub struct Environment {
    pub topology: Topology,
    pub params: ChannelParams,
    pub n_ues: usize,
    pub n_aps: usize,
    pub m_ap: usize,
    pub m_ue: usize,
    pub n0: f64,
    pub p_max: f64,
    pub channels: ChannelGrid,
    /// Precoders currently on air; carried across episodes.
    pub precoders: PrecoderSet,
    rng: ChaCha8Rng,
}

impl Environment {
    pub fn new(cfg: &ExperimentConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0);
        let m_ue = cfg.effective_m_ue();
        let topology = Topology::random(&mut rng, cfg.n_aps, cfg.n_ues, cfg.area_side_m, cfg.h_ap_m, cfg.h_ue_m)?;
        Ok(Self {
            topology,
            params: cfg.channel.clone(),
            n_ues: cfg.n_ues,
            n_aps: cfg.n_aps,
            m_ap: cfg.m_ap,
            m_ue,
            n0: channel::noise_power(&cfg.channel)?,
            p_max: cfg.p_max_watts(),
            channels: ChannelGrid::zeros(cfg.n_ues, cfg.n_aps, cfg.m_ap, m_ue),
            precoders: PrecoderSet::zeros(cfg.n_ues, cfg.n_aps, cfg.m_ap, m_ue),
            rng,
        })
    }

    /// New placement for the next outer round.
    pub fn redraw_topology(&mut self) -> Result<()> {
        let t = &self.topology;
        self.topology = Topology::random(&mut self.rng, self.n_aps, self.n_ues, t.area_side, t.h_ap, t.h_ue)?;
        Ok(())
    }

    pub fn redraw_channels(&mut self) -> Result<()> {
        self.channels = channel::draw_channel(&mut self.rng, &self.topology, &self.params, self.m_ap, self.m_ue)?.h;
        Ok(())
    }

    /// `H_kn` for all `k`: what AP `n` measures itself.
    pub fn own_column(&self, n: usize) -> Vec<CMat> {
        (0..self.n_ues).map(|k| self.channels.get(k, n).clone()).collect()
    }

    pub fn local_state(&self, n: usize) -> LocalState {
        ddpg::encode_state(&self.channels, &self.precoders, n)
    }

    pub fn evaluate(&self, pre: &PrecoderSet, assoc: &Association, shares: &CommonRateShares) -> Result<RateReport> {
        rsma::rates(&self.channels, pre, assoc, shares, self.n0)
    }
}

fn place(pre: &mut PrecoderSet, n: usize, a: &ApAction) {
    pre.common[n] = a.common.clone();
    for (k, p) in a.private.iter().enumerate() {
        *pre.private_mut(k, n) = p.clone();
    }
}

/// Policy output on the current states without exploration.
struct Greedy {
    precoders: PrecoderSet,
    shares: Vec<Vec<f64>>,
}

/// The single CPU-side learner of the centralized baseline: its state and
/// action are the concatenation over all APs, with nothing frozen.
#[derive(Debug, Clone)]
pub struct CentralAgent {
    pub learner: Learner,
    pub codec: ActionCodec,
    pub rng: ChaCha8Rng,
}

pub enum Trainer {
    Federated(Vec<FederatedAgent>),
    Centralized(CentralAgent),
}

fn map_agents<T: Send>(
    agents: &mut [FederatedAgent],
    parallel: bool,
    f: impl Fn(&mut FederatedAgent) -> Result<T> + Sync + Send,
) -> Result<Vec<T>> {
    if parallel {
        agents.par_iter_mut().map(f).collect()
    } else {
        agents.iter_mut().map(f).collect()
    }
}

impl Trainer {
    pub fn new(cfg: &ExperimentConfig, env: &Environment, seed: u64) -> Self {
        let codec = ActionCodec {
            n_ues: env.n_ues,
            m_ap: env.m_ap,
            m_ue: env.m_ue,
            p_max: env.p_max,
            sdma: cfg.mode.is_sdma(),
        };
        let local_s = ddpg::local_state_len(env.n_ues, env.m_ue);
        let local_a = codec.action_len();
        let n = env.n_aps;
        let mut init_rng = ChaCha8Rng::seed_from_u64(seed);
        init_rng.set_stream(1 << 32);
        if cfg.mode.is_centralized() {
            let nets = AgentNets::new(n * local_s, n * local_a, n * local_a, &cfg.ddpg, &mut init_rng);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream((1 << 32) + 1);
            Trainer::Centralized(CentralAgent { learner: Learner::new(nets, &cfg.ddpg), codec, rng })
        } else {
            // One initialization broadcast by the CPU to every agent.
            let nets = AgentNets::new(n * local_s, local_a, n * local_a, &cfg.ddpg, &mut init_rng);
            Trainer::Federated(
                (0..n)
                    .map(|id| FederatedAgent::new(id, n, nets.clone(), codec, env.m_ap, env.n0, &cfg.ddpg, seed))
                    .collect(),
            )
        }
    }

    /// Agents measure their own CSI for the new episode.
    fn begin_episode(&mut self, env: &Environment) -> Result<()> {
        if let Trainer::Federated(agents) = self {
            for a in agents.iter_mut() {
                a.estimates.set_own(&env.own_column(a.id))?;
                a.state = env.local_state(a.id);
            }
        }
        Ok(())
    }

    fn central_state(env: &Environment) -> Vec<f64> {
        (0..env.n_aps).flat_map(|n| env.local_state(n).features(env.n0)).collect()
    }

    fn decode_all(codec: &ActionCodec, raw: &[f64], assoc: &Association, n_aps: usize) -> Result<Vec<ApAction>> {
        let len = codec.action_len();
        (0..n_aps)
            .map(|n| {
                codec.decode(&LocalAction(raw[n * len..(n + 1) * len].to_vec()), &federation::served_mask(assoc, n))
            })
            .collect()
    }

    fn greedy(&self, env: &Environment, assoc: &Association) -> Result<Greedy> {
        let mut precoders = PrecoderSet::zeros(env.n_ues, env.n_aps, env.m_ap, env.m_ue);
        let mut shares = Vec::with_capacity(env.n_aps);
        match self {
            Trainer::Federated(agents) => {
                for a in agents {
                    let raw = a.learner.nets.actor.forward(&a.global_state(&a.state))?;
                    let d = a.codec.decode(&LocalAction(raw), &federation::served_mask(assoc, a.id))?;
                    place(&mut precoders, a.id, &d);
                    shares.push(d.shares);
                }
            }
            Trainer::Centralized(c) => {
                let raw = c.learner.nets.actor.forward(&Self::central_state(env))?;
                for (n, d) in Self::decode_all(&c.codec, &raw, assoc, env.n_aps)?.into_iter().enumerate() {
                    place(&mut precoders, n, &d);
                    shares.push(d.shares);
                }
            }
        }
        Ok(Greedy { precoders, shares })
    }

    /// One environment step for every learner. Returns the transmitted
    /// precoders' share vectors and the number of empty-service rewards.
    fn step(
        &mut self,
        env: &mut Environment,
        assoc: &Association,
        noise: f64,
        cfg: &DdpgConfig,
        parallel: bool,
    ) -> Result<(Vec<Vec<f64>>, usize)> {
        match self {
            Trainer::Federated(agents) => {
                let acted = map_agents(agents, parallel, |a| {
                    let gs = a.global_state(&a.state);
                    let raw = a.learner.nets.act(&gs, noise, &mut a.rng)?;
                    let d = a.codec.decode(&LocalAction(raw.clone()), &federation::served_mask(assoc, a.id))?;
                    Ok((gs, raw, d))
                })?;
                for (n, (_, _, d)) in acted.iter().enumerate() {
                    place(&mut env.precoders, n, d);
                }
                let next_states: Vec<LocalState> = (0..env.n_aps).map(|n| env.local_state(n)).collect();
                let n0 = env.n0;
                let mut inputs: Vec<_> = acted.into_iter().zip(next_states).collect();
                let outcomes = {
                    let run = |(a, ((gs, raw, d), next)): (
                        &mut FederatedAgent,
                        &mut ((Vec<f64>, Vec<f64>, ApAction), LocalState),
                    )|
                     -> Result<(Vec<f64>, bool)> {
                        let believed = a.believed_precoders(d, assoc)?;
                        let shares = CommonRateShares::new(d.shares.clone())?;
                        let r = federation::reward(&a.estimates, &believed, assoc, &shares, n0)?;
                        let next_gs = a.global_state(next);
                        let ga = a.global_action(raw);
                        a.learner.observe(std::mem::take(gs), ga, r.value, next_gs, cfg, &mut a.rng)?;
                        a.state = next.clone();
                        a.action = LocalAction(std::mem::take(raw));
                        Ok((d.shares.clone(), r.empty_service))
                    };
                    if parallel {
                        agents.par_iter_mut().zip(inputs.par_iter_mut()).map(run).collect::<Result<Vec<_>>>()?
                    } else {
                        agents.iter_mut().zip(inputs.iter_mut()).map(run).collect::<Result<Vec<_>>>()?
                    }
                };
                let empty = outcomes.iter().filter(|o| o.1).count();
                Ok((outcomes.into_iter().map(|o| o.0).collect(), empty))
            }
            Trainer::Centralized(c) => {
                let gs = Self::central_state(env);
                let raw = c.learner.nets.act(&gs, noise, &mut c.rng)?;
                let decoded = Self::decode_all(&c.codec, &raw, assoc, env.n_aps)?;
                for (n, d) in decoded.iter().enumerate() {
                    place(&mut env.precoders, n, d);
                }
                let shares: Vec<Vec<f64>> = decoded.into_iter().map(|d| d.shares).collect();
                let report = env.evaluate(&env.precoders, assoc, &federation::mean_shares(&shares)?)?;
                let next = Self::central_state(env);
                c.learner.observe(gs, raw, report.min_rate, next, cfg, &mut c.rng)?;
                Ok((shares, 0))
            }
        }
    }

    fn clear_replay(&mut self) {
        match self {
            Trainer::Federated(agents) => agents.iter_mut().for_each(|a| a.learner.replay.clear()),
            Trainer::Centralized(c) => c.learner.replay.clear(),
        }
    }

    /// Actor, target actor, critic, target critic of each learner.
    pub fn nets(&self) -> Vec<&AgentNets> {
        match self {
            Trainer::Federated(agents) => agents.iter().map(|a| &a.learner.nets).collect(),
            Trainer::Centralized(c) => vec![&c.learner.nets],
        }
    }
}

/// A run in progress: environment, learners and the metric series.
pub struct Session {
    pub cfg: ExperimentConfig,
    pub seed: u64,
    pub env: Environment,
    pub trainer: Trainer,
    pub records: Vec<EpisodeRecord>,
    pub counters: RunCounters,
    pub round: usize,
    parallel: bool,
    episode: usize,
    /// Running λ sums over the selection window, UE-major.
    lambda_sum: Vec<f64>,
    lambda_count: usize,
}

impl Session {
    pub fn new(cfg: &ExperimentConfig, seed: u64, workers: usize) -> Result<Self> {
        cfg.validate()?;
        let env = Environment::new(cfg, seed)?;
        let trainer = Trainer::new(cfg, &env, seed);
        Ok(Self {
            cfg: cfg.clone(),
            seed,
            env,
            trainer,
            records: Vec::new(),
            counters: RunCounters::default(),
            round: 0,
            parallel: workers > 1,
            episode: 0,
            lambda_sum: Vec::new(),
            lambda_count: 0,
        })
    }

    fn run_episodes(
        &mut self,
        phase: Phase,
        episodes: usize,
        assoc: &Association,
        obs: &mut dyn Observer,
    ) -> Result<()> {
        let (start, end) = match phase {
            Phase::Pretrain => (self.cfg.ddpg.noise_start, self.cfg.ddpg.noise_end),
            Phase::Finetune => (self.cfg.ddpg.finetune_noise_start, self.cfg.ddpg.finetune_noise_end),
        };
        for e in 0..episodes {
            let noise = ddpg::noise_at(start, end, e, episodes);
            self.env.redraw_channels()?;
            self.trainer.begin_episode(&self.env)?;
            // A sync episode opens with the exchange, so the snapshots and
            // estimates describe the channels this episode runs on.
            if let Trainer::Federated(agents) = &mut self.trainer {
                if self.episode % self.cfg.t_fl == 0 {
                    let (msgs, zeroed) = federation::sync_round(agents, self.episode as u64, assoc)?;
                    self.counters.syncs += 1;
                    self.counters.zero_estimates += zeroed;
                    obs.on_sync(self.episode, &msgs);
                }
            }
            for t in 0..self.cfg.episode_len {
                let (shares, empty) = self.trainer.step(&mut self.env, assoc, noise, &self.cfg.ddpg, self.parallel)?;
                self.counters.empty_service_steps += empty;
                if obs.wants_steps() {
                    obs.on_step(&StepEvent {
                        phase,
                        round: self.round,
                        episode: self.episode,
                        step: t,
                        precoders: &self.env.precoders,
                        shares: &shares,
                        assoc,
                        p_max: self.env.p_max,
                    });
                }
            }
            if phase == Phase::Pretrain && e + self.cfg.selection_window >= episodes {
                let inst = self.selection_instance()?;
                if self.lambda_sum.is_empty() {
                    self.lambda_sum = vec![0.0; inst.lambda_max.len()];
                }
                self.lambda_sum.iter_mut().zip(&inst.lambda_max).for_each(|(s, l)| *s += l);
                self.lambda_count += 1;
            }
            let record = self.evaluate_greedy(phase, assoc)?;
            obs.on_episode(&record);
            self.records.push(record);
            self.episode += 1;
        }
        Ok(())
    }

    fn evaluate_greedy(&self, phase: Phase, assoc: &Association) -> Result<EpisodeRecord> {
        let g = self.trainer.greedy(&self.env, assoc)?;
        let shares = federation::mean_shares(&g.shares)?;
        let report = self.env.evaluate(&g.precoders, assoc, &shares)?;
        let power_slack = (0..self.env.n_aps)
            .map(|n| self.env.p_max - rsma::power_used(&g.precoders, assoc, n))
            .fold(f64::INFINITY, f64::min);
        Ok(EpisodeRecord {
            episode: self.episode,
            phase,
            min_rate: report.min_rate,
            mean_rate: report.mean_rate(),
            common_rate: report.common_total,
            power_slack,
        })
    }

    /// Pre-training block: every AP serves every UE.
    pub fn pretrain(&mut self, obs: &mut dyn Observer) -> Result<()> {
        let all = Association::all_ones(self.env.n_ues, self.env.n_aps);
        self.run_episodes(Phase::Pretrain, self.cfg.pretrain_len(), &all, obs)
    }

    /// Selection data from the greedy full-association precoders on the
    /// current channels.
    pub fn selection_instance(&self) -> Result<SelectionInstance> {
        let all = Association::all_ones(self.env.n_ues, self.env.n_aps);
        let g = self.trainer.greedy(&self.env, &all)?;
        ap_selection::build_instance(&self.env.channels, &g.precoders, self.env.n0, self.env.p_max, self.cfg.n_ue_max)
    }

    /// Solves the selection program with λ averaged over the last
    /// `selection_window` pre-training episodes and power data from the
    /// final one, then adds every link that still fits.
    pub fn select(&mut self, obs: &mut dyn Observer) -> Result<Association> {
        let mut inst = self.selection_instance()?;
        if self.lambda_count > 0 {
            let c = self.lambda_count as f64;
            inst.lambda_max = self.lambda_sum.iter().map(|s| s / c).collect();
        }
        self.lambda_sum.clear();
        self.lambda_count = 0;
        let mut assoc = ap_selection::solve_p3(&inst)?;
        self.counters.added_links += augment_association(&mut assoc, &inst);
        obs.on_selection(self.round, &inst, &assoc);
        Ok(assoc)
    }

    /// Fine-tuning block: fixed association, warm weights, fresh replay,
    /// smaller exploration noise.
    pub fn finetune(&mut self, assoc: &Association, obs: &mut dyn Observer) -> Result<()> {
        self.trainer.clear_replay();
        self.run_episodes(Phase::Finetune, self.cfg.finetune_len(), assoc, obs)
    }

    pub fn into_report(self, associations: Vec<Association>, started: Instant) -> RunReport {
        RunReport {
            mode: self.cfg.mode,
            seed: self.seed,
            records: self.records,
            associations,
            counters: self.counters,
            wall_clock_s: started.elapsed().as_secs_f64(),
            config: self.cfg,
        }
    }
}

/// Adds every link that keeps C1 and C2, largest λ first. With λ ≥ 0 the
/// max-min objective cannot drop, so a selected optimum stays optimal; this
/// only undoes the tie-break's habit of cutting links of UEs that are not the
/// bottleneck. Returns the number of links added.
pub fn augment_association(assoc: &mut Association, inst: &SelectionInstance) -> usize {
    let (kn, nn) = (inst.n_ues, inst.n_aps);
    let mut order: Vec<usize> = (0..kn * nn).filter(|&i| !assoc.get(i / nn, i % nn)).collect();
    order.sort_by(|&a, &b| inst.lambda_max[b].total_cmp(&inst.lambda_max[a]).then(a.cmp(&b)));
    let mut added = 0;
    for i in order {
        let (k, n) = (i / nn, i % nn);
        if assoc.aps_of(k) < inst.n_ue_max {
            assoc.set(k, n, true);
            if inst.is_feasible(assoc) {
                added += 1;
            } else {
                assoc.set(k, n, false);
            }
        }
    }
    added
}

/// Runs every outer round of pre-training, selection and fine-tuning for one seed.
pub fn run(cfg: &ExperimentConfig, seed: u64, workers: usize, obs: &mut dyn Observer) -> Result<RunReport> {
    let started = Instant::now();
    let mut body = || -> Result<RunReport> {
        let mut s = Session::new(cfg, seed, workers)?;
        let mut associations = Vec::with_capacity(cfg.outer_rounds);
        for round in 0..cfg.outer_rounds {
            s.round = round;
            if round > 0 {
                s.env.redraw_topology()?;
            }
            s.pretrain(obs)?;
            let assoc = s.select(obs)?;
            s.finetune(&assoc, obs)?;
            associations.push(assoc);
        }
        Ok(s.into_report(associations, started))
    };
    if workers > 1 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::Domain(format!("worker pool: {e}")))?
            .install(body)
    } else {
        body()
    }
}
