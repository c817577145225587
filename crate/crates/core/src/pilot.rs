//! Uplink training protocol: orthogonal pilots, the DFT reflection schedule,
//! received frame synthesis and per-user de-spreading.

use std::f64::consts::PI;

use num_complex::Complex64;

use crate::channel::ChannelState;
use crate::cmat::CMatrix;
use crate::config::SystemConfig;
use crate::error::{Error, Result};
use crate::rng::ComplexGaussian;

/// `K x L` matrix whose row `k` is user k's pilot `u_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct PilotMatrix {
    pub u: CMatrix,
    pub symbol_power: f64,
}

impl PilotMatrix {
    pub fn num_users(&self) -> usize {
        self.u.rows()
    }

    pub fn length(&self) -> usize {
        self.u.cols()
    }

    /// `u_i^H u_j`.
    pub fn inner(&self, i: usize, j: usize) -> Complex64 {
        (0..self.length()).map(|l| self.u[(i, l)].conj() * self.u[(j, l)]).sum()
    }
}

/// The `(N+1) x C` reflection schedule `P = [p_1 .. p_C]` with `p_c = [1, r_c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReflectionSchedule {
    pub p: CMatrix,
}

impl ReflectionSchedule {
    pub fn num_subframes(&self) -> usize {
        self.p.cols()
    }

    /// Column `c` of `P`.
    pub fn pattern(&self, c: usize) -> Vec<Complex64> {
        self.p.col(c)
    }

    /// Phase `theta_n` of IRS element `n` (1-based row of `P`) in subframe `c`.
    pub fn phase(&self, element: usize, c: usize) -> f64 {
        self.p[(element, c)].arg()
    }
}

/// De-spread observation `X_k = H_k P + Z_k` for one user.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub user: usize,
    pub x: CMatrix,
    /// Effective noise `Z_k`, kept for diagnostics only.
    pub noise: Option<CMatrix>,
}

/// Raw received frames `S_c`, `M x L` each, one per subframe.
#[derive(Debug, Clone)]
pub struct ReceivedFrames {
    pub frames: Vec<CMatrix>,
    /// Noise `N_c` added to each frame.
    pub noise: Vec<CMatrix>,
}

fn dft_entry(row: usize, col: usize, size: usize) -> Complex64 {
    // Reduce the exponent modulo the size so large products stay exact.
    let k = (row * col) % size;
    match (4 * k).checked_rem(size) {
        Some(0) => match 4 * k / size {
            0 => Complex64::new(1.0, 0.0),
            1 => Complex64::new(0.0, -1.0),
            2 => Complex64::new(-1.0, 0.0),
            _ => Complex64::new(0.0, 1.0),
        },
        _ => Complex64::from_polar(1.0, -2.0 * PI * k as f64 / size as f64),
    }
}

/// First K rows of the L-point DFT scaled by `sqrt(P_t)`.
pub fn make_pilots(cfg: &SystemConfig) -> Result<PilotMatrix> {
    if cfg.pilot_length < cfg.num_users {
        return Err(Error::PilotRank {
            num_users: cfg.num_users,
            pilot_length: cfg.pilot_length,
        });
    }
    let amp = cfg.symbol_power.sqrt();
    let u = CMatrix::from_fn(cfg.num_users, cfg.pilot_length, |k, l| {
        dft_entry(k, l, cfg.pilot_length) * amp
    });
    Ok(PilotMatrix {
        u,
        symbol_power: cfg.symbol_power,
    })
}

/// C-point DFT schedule, entry `(n, c) = exp(-2 pi i n c / C)`, unit modulus.
pub fn make_schedule(cfg: &SystemConfig) -> Result<ReflectionSchedule> {
    let c = cfg.num_subframes;
    if c != cfg.num_irs_elements + 1 {
        return Err(Error::InvalidConfig(format!(
            "reflection schedule needs C = N + 1 = {}, got {c}",
            cfg.num_irs_elements + 1
        )));
    }
    Ok(ReflectionSchedule {
        p: CMatrix::from_fn(c, c, |n, col| dft_entry(n, col, c)),
    })
}

/// `S_c = sum_k H_k p_c u_k^T + N_c` with `N_c` i.i.d. CN(0, sigma^2).
///
/// Noise is drawn as unit-variance samples scaled by `sigma`, so the same
/// stream yields the same noise shape at every SNR.
pub fn synthesize_received(
    channels: &[ChannelState],
    pilots: &PilotMatrix,
    schedule: &ReflectionSchedule,
    cfg: &SystemConfig,
    rng: &mut ComplexGaussian,
) -> Result<ReceivedFrames> {
    let (m, cols) = (cfg.num_bs_antennas, cfg.channel_cols());
    if channels.len() != pilots.num_users() {
        return Err(Error::Shape(format!(
            "{} channels for {} pilots",
            channels.len(),
            pilots.num_users()
        )));
    }
    if schedule.p.rows() != cols {
        return Err(Error::Shape(format!(
            "schedule has {} rows, channels need {cols}",
            schedule.p.rows()
        )));
    }
    for ch in channels {
        if ch.h.shape() != (m, cols) {
            return Err(Error::Shape(format!(
                "channel of user {} is {:?}, expected ({m}, {cols})",
                ch.user,
                ch.h.shape()
            )));
        }
    }
    let sigma = cfg.noise_variance.sqrt();
    let l = pilots.length();
    let mut frames = Vec::with_capacity(schedule.num_subframes());
    let mut noise = Vec::with_capacity(schedule.num_subframes());
    for c in 0..schedule.num_subframes() {
        let p_c = CMatrix::column(&schedule.pattern(c));
        let mut s = CMatrix::zeros(m, l);
        for (k, ch) in channels.iter().enumerate() {
            let hp = ch.h.matmul(&p_c)?;
            for r in 0..m {
                for j in 0..l {
                    s[(r, j)] += hp[(r, 0)] * pilots.u[(k, j)];
                }
            }
        }
        let n_c = rng.matrix(m, l).scale_real(sigma);
        frames.push(s.add(&n_c)?);
        noise.push(n_c);
    }
    Ok(ReceivedFrames { frames, noise })
}

/// `S u^* / (P_t L)` for one user's pilot.
fn correlate(s: &CMatrix, pilots: &PilotMatrix, user: usize) -> Vec<Complex64> {
    let norm = 1.0 / (pilots.symbol_power * pilots.length() as f64);
    (0..s.rows())
        .map(|r| {
            let acc: Complex64 = (0..s.cols()).map(|l| s[(r, l)] * pilots.u[(user, l)].conj()).sum();
            acc * norm
        })
        .collect()
}

/// Correlates every frame with each user's conjugate pilot:
/// `x_{c,k} = S_c u_k^* / (P_t L)`.
pub fn despread(frames: &ReceivedFrames, pilots: &PilotMatrix) -> Vec<Observation> {
    let m = frames.frames.first().map_or(0, CMatrix::rows);
    let c_total = frames.frames.len();
    (0..pilots.num_users())
        .map(|k| {
            let mut x = CMatrix::zeros(m, c_total);
            let mut z = CMatrix::zeros(m, c_total);
            for c in 0..c_total {
                x.set_col(c, &correlate(&frames.frames[c], pilots, k));
                z.set_col(c, &correlate(&frames.noise[c], pilots, k));
            }
            Observation {
                user: k,
                x,
                noise: Some(z),
            }
        })
        .collect()
}

/// Frame synthesis followed by de-spreading.
pub fn observe(
    channels: &[ChannelState],
    pilots: &PilotMatrix,
    schedule: &ReflectionSchedule,
    cfg: &SystemConfig,
    rng: &mut ComplexGaussian,
) -> Result<Vec<Observation>> {
    let frames = synthesize_received(channels, pilots, schedule, cfg, rng)?;
    Ok(despread(&frames, pilots))
}
