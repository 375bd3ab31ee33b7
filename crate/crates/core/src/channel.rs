//! Network topology and channel realizations.
//!
//! Large-scale fading follows a three-slope path-loss model with a
//! COST-231-style constant, plus correlated log-normal shadowing built from a
//! per-AP and a per-UE standard-normal component. Small-scale fading is
//! Nakagami-m amplitude with a uniform phase.
//!
//! Distances fed to the path-loss model are in kilometres.

use std::io::{Read, Write};

use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{CMat, Complex64};

/// Boltzmann constant, J/K.
pub const BOLTZMANN: f64 = 1.380649e-23;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn distance(&self, other: &Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// AP and UE placement. Positions and heights are in metres.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Topology {
    pub ap_positions: Vec<Point>,
    pub ue_positions: Vec<Point>,
    pub h_ap: f64,
    pub h_ue: f64,
    pub area_side: f64,
}

impl Topology {
    pub fn new(
        ap_positions: Vec<Point>,
        ue_positions: Vec<Point>,
        h_ap: f64,
        h_ue: f64,
        area_side: f64,
    ) -> Result<Self> {
        if ap_positions.is_empty() || ue_positions.is_empty() {
            return Err(Error::Domain("topology needs at least one AP and one UE".into()));
        }
        let inside = |p: &Point| (0.0..=area_side).contains(&p.x) && (0.0..=area_side).contains(&p.y);
        if !ap_positions.iter().chain(&ue_positions).all(inside) {
            return Err(Error::Domain(format!("position outside [0, {area_side}]²")));
        }
        Ok(Self { ap_positions, ue_positions, h_ap, h_ue, area_side })
    }

    /// Uniform i.i.d. placement over the square. APs are drawn first.
    pub fn random<R: Rng + ?Sized>(
        rng: &mut R,
        n_aps: usize,
        n_ues: usize,
        area_side: f64,
        h_ap: f64,
        h_ue: f64,
    ) -> Result<Self> {
        let mut draw = |count: usize| -> Vec<Point> {
            (0..count)
                .map(|_| Point { x: rng.random::<f64>() * area_side, y: rng.random::<f64>() * area_side })
                .collect()
        };
        let aps = draw(n_aps);
        let ues = draw(n_ues);
        Self::new(aps, ues, h_ap, h_ue, area_side)
    }

    pub fn n_aps(&self) -> usize {
        self.ap_positions.len()
    }

    pub fn n_ues(&self) -> usize {
        self.ue_positions.len()
    }

    /// Planar UE–AP distance in kilometres.
    pub fn distance_km(&self, k: usize, n: usize) -> f64 {
        self.ue_positions[k].distance(&self.ap_positions[n]) / 1000.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChannelParams {
    /// Carrier frequency, MHz.
    pub carrier_mhz: f64,
    pub bandwidth_hz: f64,
    pub noise_figure_db: f64,
    pub temperature_k: f64,
    pub nakagami_m: f64,
    pub nakagami_omega: f64,
    pub shadowing_std_db: f64,
    /// Weight of the per-AP shadowing component, in `[0, 1]`.
    pub shadowing_corr: f64,
    pub d_upper_km: f64,
    pub d_lower_km: f64,
}

impl Default for ChannelParams {
    fn default() -> Self {
        Self {
            carrier_mhz: 1900.0,
            bandwidth_hz: 20e6,
            noise_figure_db: 9.0,
            temperature_k: 290.0,
            nakagami_m: 1.0,
            nakagami_omega: 2.0,
            shadowing_std_db: 8.0,
            shadowing_corr: 0.5,
            d_upper_km: 0.05,
            d_lower_km: 0.01,
        }
    }
}

impl ChannelParams {
    pub fn validate(&self) -> Result<()> {
        let field =
            |name: &str, reason: &str| Error::Config { field: format!("channel.{name}"), reason: reason.into() };
        if !(0.0..=1.0).contains(&self.shadowing_corr) {
            return Err(field("shadowing_corr", "must lie in [0, 1]"));
        }
        if !(self.d_lower_km < self.d_upper_km) || self.d_lower_km <= 0.0 {
            return Err(field("d_lower_km", "must satisfy 0 < d_lower_km < d_upper_km"));
        }
        if !(self.nakagami_m >= 0.5) {
            return Err(field("nakagami_m", "must be at least 0.5"));
        }
        if !(self.nakagami_omega > 0.0) {
            return Err(field("nakagami_omega", "must be positive"));
        }
        if !(self.carrier_mhz > 0.0) {
            return Err(field("carrier_mhz", "must be positive"));
        }
        if !(self.bandwidth_hz > 0.0) {
            return Err(field("bandwidth_hz", "must be positive"));
        }
        if !(self.temperature_k > 0.0) {
            return Err(field("temperature_k", "must be positive"));
        }
        if !(self.shadowing_std_db >= 0.0) {
            return Err(field("shadowing_std_db", "must be non-negative"));
        }
        Ok(())
    }
}

/// COST-231-style path-loss constant `L` in dB. `f` in MHz, heights in metres.
pub fn path_loss_constant(f: f64, h_ap: f64, h_ue: f64) -> Result<f64> {
    if !(f > 0.0 && h_ap > 0.0 && h_ue > 0.0) {
        return Err(Error::Domain(format!(
            "path-loss constant needs positive arguments (f={f}, h_ap={h_ap}, h_ue={h_ue})"
        )));
    }
    Ok(path_loss_constant_unchecked(f, h_ap, h_ue))
}

pub(crate) fn path_loss_constant_unchecked(f: f64, h_ap: f64, h_ue: f64) -> f64 {
    let lf = f.log10();
    46.3 + 33.9 * lf - 13.82 * h_ap.log10() - (1.1 * lf - 0.7) * h_ue + 1.56 * lf - 0.8
}

/// Three-slope path loss in dB (negative: a gain). `d` in km.
pub fn path_loss(d: f64, l: f64, params: &ChannelParams) -> f64 {
    let (du, dl) = (params.d_upper_km, params.d_lower_km);
    if d >= du {
        -l - 35.0 * d.log10()
    } else if d > dl {
        -l - 15.0 * du.log10() - 20.0 * d.log10()
    } else {
        -l - 15.0 * du.log10() - 20.0 * dl.log10()
    }
}

/// Thermal noise power `K'·T·B·NF` in watts.
pub fn noise_power(params: &ChannelParams) -> Result<f64> {
    if !(params.bandwidth_hz > 0.0 && params.temperature_k > 0.0) {
        return Err(Error::Domain("noise power needs positive bandwidth and temperature".into()));
    }
    Ok(BOLTZMANN * params.temperature_k * params.bandwidth_hz * 10f64.powf(params.noise_figure_db / 10.0))
}

/// Shadowing deviates `z[k][n] = √ε·b_n + √(1−ε)·q_k`.
///
/// Draw order: all `b_n`, then all `q_k`.
pub fn draw_shadowing<R: Rng + ?Sized>(rng: &mut R, topology: &Topology, params: &ChannelParams) -> Vec<Vec<f64>> {
    let b: Vec<f64> = (0..topology.n_aps()).map(|_| rng.sample(StandardNormal)).collect();
    let q: Vec<f64> = (0..topology.n_ues()).map(|_| rng.sample(StandardNormal)).collect();
    let (we, wq) = (params.shadowing_corr.sqrt(), (1.0 - params.shadowing_corr).sqrt());
    q.iter().map(|qk| b.iter().map(|bn| we * bn + wq * qk).collect()).collect()
}

/// The `K × N` grid of channel matrices `H_kn ∈ C^{M×M'}`, stored UE-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelGrid {
    pub n_ues: usize,
    pub n_aps: usize,
    /// Antennas per AP (M).
    pub m_ap: usize,
    /// Antennas per UE (M').
    pub m_ue: usize,
    h: Vec<CMat>,
}

impl ChannelGrid {
    pub fn zeros(n_ues: usize, n_aps: usize, m_ap: usize, m_ue: usize) -> Self {
        Self { n_ues, n_aps, m_ap, m_ue, h: vec![CMat::zeros(m_ap, m_ue); n_ues * n_aps] }
    }

    pub fn get(&self, k: usize, n: usize) -> &CMat {
        &self.h[k * self.n_aps + n]
    }

    pub fn set(&mut self, k: usize, n: usize, h: CMat) {
        assert_eq!((h.nrows(), h.ncols()), (self.m_ap, self.m_ue), "channel block shape");
        self.h[k * self.n_aps + n] = h;
    }

    pub fn is_finite(&self) -> bool {
        self.h.iter().all(|m| m.iter().all(|z| z.re.is_finite() && z.im.is_finite()))
    }

    const MAGIC: [u8; 4] = *b"CFH1";

    /// Binary snapshot: magic `CFH1`, then `N, K, M, M'` as little-endian
    /// u32, then every `H_kn` (k outer, n inner) row-major as little-endian
    /// f64 `(re, im)` pairs.
    pub fn write_snapshot<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&Self::MAGIC)?;
        for d in [self.n_aps, self.n_ues, self.m_ap, self.m_ue] {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for m in &self.h {
            for i in 0..m.nrows() {
                for j in 0..m.ncols() {
                    w.write_all(&m[(i, j)].re.to_le_bytes())?;
                    w.write_all(&m[(i, j)].im.to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    pub fn read_snapshot<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if magic != Self::MAGIC {
            return Err(Error::Format("bad channel snapshot magic".into()));
        }
        let mut dims = [0usize; 4];
        for d in &mut dims {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            *d = u32::from_le_bytes(b) as usize;
        }
        let [n_aps, n_ues, m_ap, m_ue] = dims;
        let mut grid = Self::zeros(n_ues, n_aps, m_ap, m_ue);
        let mut b = [0u8; 8];
        for m in &mut grid.h {
            for i in 0..m_ap {
                for j in 0..m_ue {
                    r.read_exact(&mut b)?;
                    let re = f64::from_le_bytes(b);
                    r.read_exact(&mut b)?;
                    let im = f64::from_le_bytes(b);
                    m[(i, j)] = Complex64::new(re, im);
                }
            }
        }
        Ok(grid)
    }
}

/// One channel draw: the matrices plus their large-scale components.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSet {
    pub h: ChannelGrid,
    /// Linear large-scale gain, `[k][n]`.
    pub kappa: Vec<Vec<f64>>,
    /// Path loss in dB, `[k][n]`.
    pub pl_db: Vec<Vec<f64>>,
    /// Shadowing deviates, `[k][n]`.
    pub z: Vec<Vec<f64>>,
}

/// Draws `H_kn` entries as `√κ_kn · A · e^{jφ}` with `A² ~ Gamma(m, Ω/m)`.
///
/// Draw order: shadowing, then entries for each (k, n) row-major, amplitude
/// before phase.
pub fn draw_channel<R: Rng + ?Sized>(
    rng: &mut R,
    topology: &Topology,
    params: &ChannelParams,
    m_ap: usize,
    m_ue: usize,
) -> Result<ChannelSet> {
    if m_ap == 0 || m_ue == 0 {
        return Err(Error::Domain("antenna counts must be at least 1".into()));
    }
    params.validate()?;
    let l = path_loss_constant(params.carrier_mhz, topology.h_ap, topology.h_ue)?;
    let z = draw_shadowing(rng, topology, params);
    let (k_count, n_count) = (topology.n_ues(), topology.n_aps());
    let pl_db: Vec<Vec<f64>> = (0..k_count)
        .map(|k| (0..n_count).map(|n| path_loss(topology.distance_km(k, n), l, params)).collect())
        .collect();
    let kappa: Vec<Vec<f64>> = (0..k_count)
        .map(|k| (0..n_count).map(|n| 10f64.powf((pl_db[k][n] + params.shadowing_std_db * z[k][n]) / 10.0)).collect())
        .collect();
    let h = draw_fading(rng, &kappa, params, m_ap, m_ue)?;
    Ok(ChannelSet { h, kappa, pl_db, z })
}

/// Small-scale fading on top of given large-scale gains `kappa[k][n]`.
pub fn draw_fading<R: Rng + ?Sized>(
    rng: &mut R,
    kappa: &[Vec<f64>],
    params: &ChannelParams,
    m_ap: usize,
    m_ue: usize,
) -> Result<ChannelGrid> {
    let gamma = Gamma::new(params.nakagami_m, params.nakagami_omega / params.nakagami_m)
        .map_err(|e| Error::Domain(format!("nakagami parameters: {e}")))?;
    let n_ues = kappa.len();
    let n_aps = kappa.first().map_or(0, Vec::len);
    let mut grid = ChannelGrid::zeros(n_ues, n_aps, m_ap, m_ue);
    for (k, row) in kappa.iter().enumerate() {
        for (n, &kap) in row.iter().enumerate() {
            let scale = kap.sqrt();
            let mut m = CMat::zeros(m_ap, m_ue);
            for i in 0..m_ap {
                for j in 0..m_ue {
                    let amp = gamma.sample(rng).sqrt();
                    let phase = rng.random::<f64>() * std::f64::consts::TAU;
                    m[(i, j)] = Complex64::from_polar(amp * scale, phase);
                }
            }
            grid.set(k, n, m);
        }
    }
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params() -> ChannelParams {
        ChannelParams::default()
    }

    fn topo(seed: u64, n: usize, k: usize) -> Topology {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Topology::random(&mut rng, n, k, 1000.0, 15.0, 1.65).unwrap()
    }

    // Reference values from an independent 40-digit evaluation.
    #[test]
    fn path_loss_constant_reference_values() {
        let l = path_loss_constant(1900.0, 15.0, 1.65).unwrap();
        assert!((l - 140.715_083_703_908_4).abs() < 1e-10, "{l}");
        let l0 = path_loss_constant_unchecked(1900.0, 15.0, 0.0);
        assert!((l0 - 145.511_021_489_637_8).abs() < 1e-10, "{l0}");
        let l1 = path_loss_constant(1.0, 15.0, 1.65).unwrap();
        let expected = 46.3 - 13.82 * 15f64.log10() + 0.7 * 1.65 - 0.8;
        assert!((l1 - expected).abs() < 1e-12);
    }

    #[test]
    fn path_loss_constant_rejects_nonpositive() {
        assert!(path_loss_constant(0.0, 15.0, 1.65).is_err());
        assert!(path_loss_constant(1900.0, -1.0, 1.65).is_err());
        assert!(path_loss_constant(1900.0, 15.0, 0.0).is_err());
    }

    #[test]
    fn path_loss_branches() {
        let p = params();
        let l = path_loss_constant(1900.0, 15.0, 1.65).unwrap();
        let near = -l - 15.0 * 0.05f64.log10() - 20.0 * 0.01f64.log10();
        assert_eq!(path_loss(0.0, l, &p), near);
        assert_eq!(path_loss(0.005, l, &p), near);
        assert_eq!(path_loss(0.01, l, &p), near);
        assert!((path_loss(0.1, l, &p) - (-105.715_083_703_908_4)).abs() < 1e-10);
        assert!((path_loss(0.03, l, &p) - (-90.742_058_863_341_94)).abs() < 1e-10);
        assert_eq!(path_loss(0.05, l, &p), -l - 35.0 * 0.05f64.log10());
    }

    #[test]
    fn path_loss_non_increasing_beyond_lower_break() {
        let p = params();
        let l = 140.0;
        let mut prev = path_loss(0.0101, l, &p);
        for i in 1..2000 {
            let d = 0.0101 + i as f64 * 0.0005;
            let cur = path_loss(d, l, &p);
            assert!(cur <= prev + 1e-12, "d={d}");
            prev = cur;
        }
    }

    #[test]
    fn noise_power_values() {
        let n0 = noise_power(&params()).unwrap();
        assert!((n0 / 6.360_793_201_074_298e-13 - 1.0).abs() < 1e-12);
        let dbm = 10.0 * (n0 * 1000.0).log10();
        assert!((dbm + 91.96).abs() < 0.01);

        let unit = ChannelParams { noise_figure_db: 0.0, bandwidth_hz: 1.0, temperature_k: 1.0, ..params() };
        assert_eq!(noise_power(&unit).unwrap(), BOLTZMANN);
        let double = ChannelParams { bandwidth_hz: 40e6, ..params() };
        assert!((noise_power(&double).unwrap() / n0 - 2.0).abs() < 1e-14);
        assert!(noise_power(&ChannelParams { bandwidth_hz: 0.0, ..params() }).is_err());
    }

    #[test]
    fn shadowing_extreme_correlations() {
        let t = topo(3, 4, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let z = draw_shadowing(&mut rng, &t, &ChannelParams { shadowing_corr: 1.0, ..params() });
        for n in 0..4 {
            assert!(z.iter().all(|row| row[n] == z[0][n]));
        }
        let z = draw_shadowing(&mut rng, &t, &ChannelParams { shadowing_corr: 0.0, ..params() });
        for row in &z {
            assert!(row.iter().all(|v| *v == row[0]));
        }
    }

    #[test]
    fn shadowing_unit_variance() {
        let t = topo(1, 1, 1);
        let p = ChannelParams { shadowing_corr: 0.3, ..params() };
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let n = 100_000;
        let samples: Vec<f64> = (0..n).map(|_| draw_shadowing(&mut rng, &t, &p)[0][0]).collect();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((var - 1.0).abs() < 0.02, "var={var}");
    }

    #[test]
    fn fading_second_moment_matches_omega() {
        let p = ChannelParams { nakagami_m: 1.0, nakagami_omega: 2.0, ..params() };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let kappa = vec![vec![1.0; 10]; 10];
        let mut acc = 0.0;
        let mut count = 0usize;
        for _ in 0..250 {
            let g = draw_fading(&mut rng, &kappa, &p, 4, 10).unwrap();
            for k in 0..10 {
                for n in 0..10 {
                    acc += g.get(k, n).iter().map(|z| z.norm_sqr()).sum::<f64>();
                    count += 40;
                }
            }
        }
        assert!(count >= 100_000);
        let second = acc / count as f64;
        assert!((second / 2.0 - 1.0).abs() < 0.02, "E|h|²={second}");
    }

    #[test]
    fn draw_is_deterministic() {
        let t = topo(11, 3, 4);
        let a = draw_channel(&mut ChaCha8Rng::seed_from_u64(42), &t, &params(), 2, 2).unwrap();
        let b = draw_channel(&mut ChaCha8Rng::seed_from_u64(42), &t, &params(), 2, 2).unwrap();
        assert_eq!(a, b);
        assert!(a.h.is_finite());
        assert!(a.kappa.iter().flatten().all(|k| *k > 0.0));
    }

    #[test]
    fn doubling_kappa_scales_by_sqrt2() {
        let p = params();
        let a = draw_fading(&mut ChaCha8Rng::seed_from_u64(1), &[vec![1.0]], &p, 3, 2).unwrap();
        let b = draw_fading(&mut ChaCha8Rng::seed_from_u64(1), &[vec![2.0]], &p, 3, 2).unwrap();
        let ratio = crate::linalg::frob(b.get(0, 0)) / crate::linalg::frob(a.get(0, 0));
        assert!((ratio - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn snapshot_round_trip() {
        let t = topo(2, 2, 3);
        let set = draw_channel(&mut ChaCha8Rng::seed_from_u64(8), &t, &params(), 4, 2).unwrap();
        let mut buf = Vec::new();
        set.h.write_snapshot(&mut buf).unwrap();
        assert_eq!(buf.len(), 4 + 16 + 3 * 2 * 4 * 2 * 16);
        let back = ChannelGrid::read_snapshot(buf.as_slice()).unwrap();
        assert_eq!(back, set.h);
        buf[0] = b'X';
        assert!(ChannelGrid::read_snapshot(buf.as_slice()).is_err());
    }

    #[test]
    fn topology_rejects_outside_points() {
        let p = Point { x: 1200.0, y: 3.0 };
        assert!(Topology::new(vec![p], vec![Point { x: 1.0, y: 1.0 }], 15.0, 1.65, 1000.0).is_err());
        assert!(Topology::new(vec![], vec![Point { x: 1.0, y: 1.0 }], 15.0, 1.65, 1000.0).is_err());
    }
}
