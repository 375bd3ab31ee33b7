//! Experiment configuration. All powers are given in dBm here and converted
//! to watts once, by [`ExperimentConfig::p_max_watts`].

use serde::{Deserialize, Serialize};

use crate::channel::ChannelParams;
use crate::ddpg::DdpgConfig;
use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    FdrlRsma,
    #[serde(alias = "drl-centralized")]
    DrlRsmaCentralized,
    FdrlSdma,
    FdrlRsmaMiso,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::FdrlRsma => "fdrl-rsma",
            Mode::DrlRsmaCentralized => "drl-rsma-centralized",
            Mode::FdrlSdma => "fdrl-sdma",
            Mode::FdrlRsmaMiso => "fdrl-rsma-miso",
        }
    }

    pub fn is_centralized(self) -> bool {
        self == Mode::DrlRsmaCentralized
    }

    pub fn is_sdma(self) -> bool {
        self == Mode::FdrlSdma
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fdrl-rsma" => Ok(Mode::FdrlRsma),
            "drl-rsma-centralized" | "drl-centralized" => Ok(Mode::DrlRsmaCentralized),
            "fdrl-sdma" => Ok(Mode::FdrlSdma),
            "fdrl-rsma-miso" => Ok(Mode::FdrlRsmaMiso),
            _ => Err(Error::Config { field: "mode".into(), reason: format!("unknown mode `{s}`") }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub mode: Mode,
    pub n_aps: usize,
    pub n_ues: usize,
    /// Antennas per AP.
    pub m_ap: usize,
    /// Antennas per UE; forced to 1 in MISO mode.
    pub m_ue: usize,
    pub p_max_dbm: f64,
    /// Maximum number of APs serving one UE.
    pub n_ue_max: usize,
    /// Episodes between federated exchanges.
    pub t_fl: usize,
    /// Steps per episode.
    pub episode_len: usize,
    /// Total episodes per outer round, fine-tuning included.
    pub episodes: usize,
    /// Episodes of fine-tuning at the end of each round, capped at half of `episodes`.
    pub finetune_episodes: usize,
    /// Pre-training episodes whose channel draws are averaged into the
    /// selection eigenvalues; 1 uses the final draw only.
    pub selection_window: usize,
    /// Independent topology redraws, each running all three blocks.
    pub outer_rounds: usize,
    pub seeds: Vec<u64>,
    /// Side of the square deployment area, metres.
    pub area_side_m: f64,
    pub h_ap_m: f64,
    pub h_ue_m: f64,
    pub channel: ChannelParams,
    pub ddpg: DdpgConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            mode: Mode::FdrlRsma,
            n_aps: 2,
            n_ues: 4,
            m_ap: 4,
            m_ue: 2,
            p_max_dbm: 30.0,
            n_ue_max: 4,
            t_fl: 10,
            episode_len: 50,
            episodes: 300,
            finetune_episodes: 100,
            selection_window: 20,
            outer_rounds: 1,
            seeds: vec![1],
            area_side_m: 1000.0,
            h_ap_m: 15.0,
            h_ue_m: 1.65,
            channel: ChannelParams::default(),
            ddpg: DdpgConfig::default(),
        }
    }
}

pub fn dbm_to_watts(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s)
            .map_err(|e| Error::Config { field: unknown_field(e.message()), reason: e.message().to_string() })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn p_max_watts(&self) -> f64 {
        dbm_to_watts(self.p_max_dbm)
    }

    /// UE antenna count actually simulated.
    pub fn effective_m_ue(&self) -> usize {
        if self.mode == Mode::FdrlRsmaMiso {
            1
        } else {
            self.m_ue
        }
    }

    pub fn finetune_len(&self) -> usize {
        self.finetune_episodes.min(self.episodes / 2)
    }

    pub fn pretrain_len(&self) -> usize {
        self.episodes - self.finetune_len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |f: &str, r: String| Err(Error::Config { field: f.into(), reason: r });
        if self.schema_version != SCHEMA_VERSION {
            return bad("schema_version", format!("expected {SCHEMA_VERSION}, got {}", self.schema_version));
        }
        for (f, v) in [("n_aps", self.n_aps), ("n_ues", self.n_ues), ("m_ap", self.m_ap), ("m_ue", self.m_ue)] {
            if v == 0 {
                return bad(f, "must be at least 1".into());
            }
        }
        if self.n_aps * self.n_ues > 64 {
            return bad("n_ues", "n_aps · n_ues above 64 is outside the exact AP-selection range".into());
        }
        if !self.p_max_dbm.is_finite() {
            return bad("p_max_dbm", "must be finite".into());
        }
        if self.n_ue_max == 0 {
            return bad("n_ue_max", "must be at least 1".into());
        }
        if self.t_fl == 0 {
            return bad("t_fl", "must be at least 1".into());
        }
        if self.episode_len == 0 {
            return bad("episode_len", "must be at least 1".into());
        }
        if self.selection_window == 0 {
            return bad("selection_window", "must be at least 1".into());
        }
        if self.outer_rounds == 0 {
            return bad("outer_rounds", "must be at least 1".into());
        }
        if !(self.area_side_m > 0.0) {
            return bad("area_side_m", "must be positive".into());
        }
        if !(self.h_ap_m > 0.0) || !(self.h_ue_m >= 0.0) {
            return bad("h_ap_m", "antenna heights must be positive".into());
        }
        if self.seeds.is_empty() {
            return bad("seeds", "must list at least one seed".into());
        }
        self.channel.validate()?;
        self.ddpg.validate()
    }
}

/// Pulls the offending field name out of a serde message such as
/// "unknown field `foo`, expected one of ...".
fn unknown_field(msg: &str) -> String {
    msg.split('`').nth(1).map(str::to_string).unwrap_or_else(|| "config".into())
}
