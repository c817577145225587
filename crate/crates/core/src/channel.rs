//! Synthetic uplink channel generator.
//!
//! Each user's CSI is `H_k = [d_k, B_k]` with `B_k = G diag(f_k)`. The direct
//! link `d_k`, the IRS-to-BS link `G` and the user-to-IRS link `f_k` are
//! Rician: a line-of-sight steering component plus CN(0, 1) scattering, mixed
//! by the K-factor. Large-scale gains follow a log-distance law anchored at the
//! free-space loss at 1 m, with log-normal shadowing drawn once per link.
//!
//! Successive coherence intervals follow an AR(1) process around the
//! line-of-sight mean:
//!
//! ```text
//! H_next = rho * H_prev + (1 - rho) * mu + sqrt(1 - rho^2) * (H_innov - mu)
//! ```
//!
//! With the default random line-of-sight phase the mean `mu` is zero and this
//! reduces to `rho * H_prev + sqrt(1 - rho^2) * H_innov`.

use std::f64::consts::PI;

use num_complex::Complex64;

use crate::cmat::CMatrix;
use crate::config::SystemConfig;
use crate::error::{Error, Result};
use crate::rng::ComplexGaussian;

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

pub type Position = [f64; 3];

/// One user's uplink CSI. Column 0 is the direct path, columns `1..=N` the
/// cascaded channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelState {
    pub user: usize,
    pub h: CMatrix,
}

impl ChannelState {
    pub fn direct(&self) -> Vec<Complex64> {
        self.h.col(0)
    }

    pub fn cascaded(&self) -> CMatrix {
        self.h.columns(1, self.h.cols() - 1)
    }
}

/// How large-scale gains are scaled after path loss and shadowing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GainNormalization {
    /// Absolute free-space/log-distance gains.
    Physical,
    /// Direct and cascaded links are each rescaled so that their mean
    /// per-entry power across users equals the given value. Relative gains
    /// between users are kept.
    MeanEntryPower(f64),
}

/// Node positions and propagation parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GeometrySpec {
    pub bs_position: Position,
    pub irs_position: Position,
    pub user_positions: Vec<Position>,
    pub carrier_freq_hz: f64,
    /// Linear Rician K-factor of the user-BS link.
    pub rician_k_direct: f64,
    /// Linear Rician K-factor of both IRS links.
    pub rician_k_irs: f64,
    pub pathloss_exponent_direct: f64,
    pub pathloss_exponent_irs: f64,
    pub shadowing_std_db: f64,
    pub gain_normalization: GainNormalization,
    /// Draw a uniform phase for the line-of-sight component of every
    /// realization, which makes the channel zero-mean.
    pub random_los_phase: bool,
}

/// User positions from the outdoor 73 GHz scenario.
pub const DEFAULT_USER_POSITIONS: [Position; 4] =
    [[0.0, 0.0, 0.0], [25.0, 10.0, 0.0], [40.0, 30.0, 0.0], [20.0, 15.0, 0.0]];

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

impl GeometrySpec {
    /// BS at (0, 25, 20), IRS at (70, 85, 10), 73 GHz carrier, and the first
    /// `num_users` of [`DEFAULT_USER_POSITIONS`] (cycled with a 5 m offset when
    /// more users are requested).
    pub fn outdoor(num_users: usize) -> Self {
        let user_positions = (0..num_users)
            .map(|k| {
                let base = DEFAULT_USER_POSITIONS[k % 4];
                let shift = 5.0 * (k / 4) as f64;
                [base[0] + shift, base[1] + shift, base[2]]
            })
            .collect();
        Self {
            bs_position: [0.0, 25.0, 20.0],
            irs_position: [70.0, 85.0, 10.0],
            user_positions,
            carrier_freq_hz: 73e9,
            rician_k_direct: db_to_linear(3.0),
            rician_k_irs: db_to_linear(10.0),
            pathloss_exponent_direct: 3.5,
            pathloss_exponent_irs: 2.0,
            shadowing_std_db: 4.0,
            gain_normalization: GainNormalization::MeanEntryPower(0.01),
            random_los_phase: true,
        }
    }

    pub fn validate(&self, cfg: &SystemConfig) -> Result<()> {
        if self.user_positions.len() != cfg.num_users {
            return Err(Error::InvalidConfig(format!(
                "geometry has {} user positions but the system has {} users",
                self.user_positions.len(),
                cfg.num_users
            )));
        }
        let all = [self.bs_position, self.irs_position]
            .into_iter()
            .chain(self.user_positions.iter().copied());
        for p in all {
            if p.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidConfig(format!("non-finite position {p:?}")));
            }
        }
        if !(self.carrier_freq_hz > 0.0 && self.carrier_freq_hz.is_finite()) {
            return Err(Error::InvalidConfig(format!("carrier frequency must be positive, got {}", self.carrier_freq_hz)));
        }
        for (name, k) in [("rician_k_direct", self.rician_k_direct), ("rician_k_irs", self.rician_k_irs)] {
            if k.is_nan() || k < 0.0 {
                return Err(Error::InvalidConfig(format!("{name} must be non-negative, got {k}")));
            }
        }
        if !(self.shadowing_std_db >= 0.0 && self.shadowing_std_db.is_finite()) {
            return Err(Error::InvalidConfig(format!("shadowing std must be non-negative, got {}", self.shadowing_std_db)));
        }
        if let GainNormalization::MeanEntryPower(p) = self.gain_normalization {
            if !(p > 0.0 && p.is_finite()) {
                return Err(Error::InvalidConfig(format!("normalized entry power must be positive, got {p}")));
            }
        }
        Ok(())
    }
}

/// `(c / (4 pi d f))^2`, linear.
pub fn free_space_path_loss(distance_m: f64, carrier_freq_hz: f64) -> f64 {
    (SPEED_OF_LIGHT / (4.0 * PI * distance_m * carrier_freq_hz)).powi(2)
}

/// Log-distance path loss anchored at the 1 m free-space loss.
pub fn log_distance_path_loss(distance_m: f64, carrier_freq_hz: f64, exponent: f64) -> f64 {
    free_space_path_loss(1.0, carrier_freq_hz) * distance_m.powf(-exponent)
}

fn distance(a: Position, b: Position) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Half-wavelength uniform linear array response toward `target`, with the
/// array axis along `axis`.
fn steering_vector(len: usize, from: Position, target: Position, axis: usize) -> Vec<Complex64> {
    let dir: Vec<f64> = (0..3).map(|i| target[i] - from[i]).collect();
    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
    let cos_angle = dir[axis] / norm;
    (0..len)
        .map(|m| Complex64::from_polar(1.0, PI * m as f64 * cos_angle))
        .collect()
}

/// Rician mixing weights `(sqrt(K/(K+1)), sqrt(1/(K+1)))`; `K = inf` is pure LOS.
fn rician_weights(k: f64) -> (f64, f64) {
    if k.is_infinite() {
        (1.0, 0.0)
    } else {
        ((k / (k + 1.0)).sqrt(), (1.0 / (k + 1.0)).sqrt())
    }
}

#[derive(Debug, Clone)]
struct UserLinks {
    /// Amplitude (sqrt of power gain) of the direct link.
    direct_amp: f64,
    /// Amplitude of the cascaded link, applied to `G diag(f)`.
    cascaded_amp: f64,
    bs_steer: Vec<Complex64>,
    irs_steer: Vec<Complex64>,
}

/// Draws channel realizations for a fixed geometry. Large-scale gains and
/// steering vectors are fixed at construction.
#[derive(Debug, Clone)]
pub struct ChannelGenerator {
    m: usize,
    n: usize,
    users: Vec<UserLinks>,
    bs_to_irs_steer: Vec<Complex64>,
    irs_to_bs_steer: Vec<Complex64>,
    k_direct: f64,
    k_irs: f64,
    random_los_phase: bool,
}

const BS_AXIS: usize = 0;
const IRS_AXIS: usize = 1;

impl ChannelGenerator {
    pub fn new(cfg: &SystemConfig, geo: &GeometrySpec, rng: &mut ComplexGaussian) -> Result<Self> {
        cfg.validate()?;
        geo.validate(cfg)?;
        let (m, n) = (cfg.num_bs_antennas, cfg.num_irs_elements);
        let d_irs_bs = distance(geo.irs_position, geo.bs_position);
        if d_irs_bs == 0.0 {
            return Err(Error::CoincidentPositions("IRS".into(), "BS".into()));
        }
        let shadow = |rng: &mut ComplexGaussian| db_to_linear(geo.shadowing_std_db * rng.standard_normal());
        let pl_irs_bs = log_distance_path_loss(d_irs_bs, geo.carrier_freq_hz, geo.pathloss_exponent_irs) * shadow(rng);

        let mut direct_gain = Vec::with_capacity(cfg.num_users);
        let mut cascaded_gain = Vec::with_capacity(cfg.num_users);
        for (k, &pos) in geo.user_positions.iter().enumerate() {
            let d_direct = distance(pos, geo.bs_position);
            if d_direct == 0.0 {
                return Err(Error::CoincidentPositions(format!("user {k}"), "BS".into()));
            }
            let d_user_irs = distance(pos, geo.irs_position);
            if d_user_irs == 0.0 {
                return Err(Error::CoincidentPositions(format!("user {k}"), "IRS".into()));
            }
            direct_gain.push(
                log_distance_path_loss(d_direct, geo.carrier_freq_hz, geo.pathloss_exponent_direct) * shadow(rng),
            );
            cascaded_gain.push(
                log_distance_path_loss(d_user_irs, geo.carrier_freq_hz, geo.pathloss_exponent_irs)
                    * shadow(rng)
                    * pl_irs_bs,
            );
        }
        if let GainNormalization::MeanEntryPower(p) = geo.gain_normalization {
            for gains in [&mut direct_gain, &mut cascaded_gain] {
                let mean = gains.iter().sum::<f64>() / gains.len() as f64;
                gains.iter_mut().for_each(|g| *g *= p / mean);
            }
        }

        let users = geo
            .user_positions
            .iter()
            .enumerate()
            .map(|(k, &pos)| UserLinks {
                direct_amp: direct_gain[k].sqrt(),
                cascaded_amp: cascaded_gain[k].sqrt(),
                bs_steer: steering_vector(m, geo.bs_position, pos, BS_AXIS),
                irs_steer: steering_vector(n, geo.irs_position, pos, IRS_AXIS),
            })
            .collect();
        Ok(Self {
            m,
            n,
            users,
            bs_to_irs_steer: steering_vector(m, geo.bs_position, geo.irs_position, BS_AXIS),
            irs_to_bs_steer: steering_vector(n, geo.irs_position, geo.bs_position, IRS_AXIS),
            k_direct: geo.rician_k_direct,
            k_irs: geo.rician_k_irs,
            random_los_phase: geo.random_los_phase,
        })
    }

    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.m, self.n + 1)
    }

    fn los_phase(&self, rng: &mut ComplexGaussian) -> Complex64 {
        if self.random_los_phase {
            Complex64::from_polar(1.0, 2.0 * PI * rng.uniform())
        } else {
            Complex64::new(1.0, 0.0)
        }
    }

    fn rician_vector(&self, los: &[Complex64], k: f64, rng: &mut ComplexGaussian) -> Vec<Complex64> {
        let (w_los, w_nlos) = rician_weights(k);
        let phase = self.los_phase(rng) * w_los;
        los.iter().map(|&a| a * phase + rng.sample() * w_nlos).collect()
    }

    /// Fresh independent realization for `user`.
    pub fn draw(&self, user: usize, rng: &mut ComplexGaussian) -> ChannelState {
        let links = &self.users[user];
        let d = self.rician_vector(&links.bs_steer, self.k_direct, rng);
        let (w_los, w_nlos) = rician_weights(self.k_irs);
        let g_phase = self.los_phase(rng) * w_los;
        let g = CMatrix::from_fn(self.m, self.n, |r, c| {
            self.bs_to_irs_steer[r] * self.irs_to_bs_steer[c].conj() * g_phase + rng.sample() * w_nlos
        });
        let f = self.rician_vector(&links.irs_steer, self.k_irs, rng);
        let h = CMatrix::from_fn(self.m, self.n + 1, |r, c| {
            if c == 0 {
                d[r] * links.direct_amp
            } else {
                g[(r, c - 1)] * f[c - 1] * links.cascaded_amp
            }
        });
        ChannelState { user, h }
    }

    pub fn draw_all(&self, rng: &mut ComplexGaussian) -> Vec<ChannelState> {
        (0..self.num_users()).map(|k| self.draw(k, rng)).collect()
    }

    /// Mean of `H_k`: zero with random line-of-sight phase, otherwise the
    /// line-of-sight part of every link.
    pub fn mean(&self, user: usize) -> CMatrix {
        if self.random_los_phase {
            return CMatrix::zeros(self.m, self.n + 1);
        }
        let links = &self.users[user];
        let wd = rician_weights(self.k_direct).0;
        let wi = rician_weights(self.k_irs).0;
        CMatrix::from_fn(self.m, self.n + 1, |r, c| {
            if c == 0 {
                links.bs_steer[r] * wd * links.direct_amp
            } else {
                self.bs_to_irs_steer[r]
                    * self.irs_to_bs_steer[c - 1].conj()
                    * links.irs_steer[c - 1]
                    * (wi * wi * links.cascaded_amp)
            }
        })
    }

    /// One AR(1) step of the coherence process.
    pub fn advance(&self, prev: &ChannelState, rho: f64, rng: &mut ComplexGaussian) -> ChannelState {
        assert!((0.0..=1.0).contains(&rho), "rho must lie in [0, 1]");
        let innov = self.draw(prev.user, rng);
        let mu = self.mean(prev.user);
        let w_innov = (1.0 - rho * rho).sqrt();
        let h = CMatrix::from_fn(self.m, self.n + 1, |r, c| {
            let m = mu[(r, c)];
            prev.h[(r, c)] * rho + m * (1.0 - rho) + (innov.h[(r, c)] - m) * w_innov
        });
        ChannelState { user: prev.user, h }
    }

    /// `len` successive states following `start` (exclusive).
    pub fn continue_sequence(
        &self,
        start: &ChannelState,
        len: usize,
        rho: f64,
        rng: &mut ComplexGaussian,
    ) -> CoherentSequence {
        let mut states = Vec::with_capacity(len);
        let mut prev = start.clone();
        for _ in 0..len {
            prev = self.advance(&prev, rho, rng);
            states.push(prev.clone());
        }
        CoherentSequence { states, rho }
    }
}

/// One user's channel across successive coherence intervals.
#[derive(Debug, Clone, PartialEq)]
pub struct CoherentSequence {
    pub states: Vec<ChannelState>,
    pub rho: f64,
}

impl CoherentSequence {
    /// Lag-1 Pearson correlation of the vectorized entries (real and
    /// imaginary parts pooled as real samples).
    pub fn lag1_correlation(&self) -> f64 {
        let pairs = self.states.windows(2).flat_map(|w| {
            w[0].h
                .as_slice()
                .iter()
                .zip(w[1].h.as_slice())
                .flat_map(|(a, b)| [(a.re, b.re), (a.im, b.im)])
        });
        pearson(pairs)
    }
}

/// Pearson correlation of paired real samples.
pub fn pearson(pairs: impl Iterator<Item = (f64, f64)>) -> f64 {
    let (mut n, mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    for (x, y) in pairs {
        n += 1.0;
        sx += x;
        sy += y;
        sxx += x * x;
        syy += y * y;
        sxy += x * y;
    }
    let cov = sxy / n - (sx / n) * (sy / n);
    let vx = sxx / n - (sx / n).powi(2);
    let vy = syy / n - (sy / n).powi(2);
    cov / (vx * vy).sqrt()
}

/// Draws one independent realization per user.
pub fn generate_channel(
    cfg: &SystemConfig,
    geo: &GeometrySpec,
    rng: &mut ComplexGaussian,
) -> Result<Vec<ChannelState>> {
    let gen = ChannelGenerator::new(cfg, geo, rng)?;
    Ok(gen.draw_all(rng))
}

/// Training channels: per user a reference state followed by `n_samples`
/// correlated states.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelDataset {
    pub sequences: Vec<CoherentSequence>,
    pub references: Vec<ChannelState>,
}

impl ChannelDataset {
    pub fn num_users(&self) -> usize {
        self.references.len()
    }

    pub fn num_samples(&self) -> usize {
        self.sequences.first().map_or(0, |s| s.states.len())
    }

    /// `[K, n_samples, M, N + 1]`.
    pub fn dims(&self) -> [usize; 4] {
        let (m, c) = self.references.first().map_or((0, 0), |r| r.h.shape());
        [self.num_users(), self.num_samples(), m, c]
    }

    /// Last state of each user's sequence.
    pub fn last_states(&self) -> Vec<ChannelState> {
        self.sequences
            .iter()
            .map(|s| s.states.last().cloned().expect("non-empty sequence"))
            .collect()
    }
}

/// Builds the generator and a correlated training set. The reference state
/// is drawn first and the sequence continues from it.
pub fn make_dataset(
    cfg: &SystemConfig,
    geo: &GeometrySpec,
    n_samples: usize,
    rng: &mut ComplexGaussian,
) -> Result<(ChannelGenerator, ChannelDataset)> {
    if n_samples == 0 {
        return Err(Error::InvalidConfig("n_samples must be at least 1".into()));
    }
    let gen = ChannelGenerator::new(cfg, geo, rng)?;
    let references = gen.draw_all(rng);
    let sequences = references
        .iter()
        .map(|r| gen.continue_sequence(r, n_samples, cfg.coherence_correlation, rng))
        .collect();
    Ok((gen, ChannelDataset { sequences, references }))
}
