//! NMSE, downlink beamforming with IRS phase optimization, spectral
//! efficiency and inference timing.

use std::f64::consts::PI;
use std::time::Instant;

use crate::cmat::CMatrix;
use crate::error::{Error, Result};
use crate::Complex64;

/// `||H_est - H||_F^2 / ||H||_F^2`.
pub fn nmse(h_true: &CMatrix, h_est: &CMatrix) -> Result<f64> {
    let p = h_true.frobenius_norm_sqr();
    if p == 0.0 {
        return Err(Error::ZeroReference("NMSE of an all-zero channel"));
    }
    Ok(h_est.sub(h_true)?.frobenius_norm_sqr() / p)
}

/// TDD reciprocity: the downlink channel is `H^H`.
pub fn downlink_from_uplink(h: &CMatrix) -> CMatrix {
    h.hermitian()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BeamformerConfig {
    /// Total transmit power `P_bf`, split equally over users.
    pub power_budget: f64,
    pub noise_variance: f64,
    pub max_rounds: usize,
    /// Stop once a round improves the objective by less than this.
    pub tol: f64,
    /// Candidate phases per IRS element, uniformly spaced on the circle.
    pub phase_levels: usize,
    /// One IRS configuration for all users instead of per-user `r_k`.
    pub shared_phases: bool,
}

impl BeamformerConfig {
    pub fn new(noise_variance: f64) -> Self {
        Self {
            power_budget: 1.0,
            noise_variance,
            max_rounds: 20,
            tol: 1e-4,
            phase_levels: 32,
            shared_phases: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.power_budget > 0.0) || !(self.noise_variance > 0.0) {
            return Err(Error::InvalidConfig("power budget and noise variance must be positive".into()));
        }
        if self.max_rounds == 0 || self.phase_levels == 0 {
            return Err(Error::InvalidConfig("max_rounds and phase_levels must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeamformingSolution {
    /// `M x K`, column `k` is `w_k`.
    pub w: CMatrix,
    /// `N x K`, column `k` is `r_k` (unit modulus).
    pub r: CMatrix,
    /// The zero-forcing inverse needed ridge regularization.
    pub regularized: bool,
    /// Objective after every round, on the CSI used for optimization.
    pub objective_trace: Vec<f64>,
}

/// `g_k = B_k r_k + d_k` for a channel `[d_k, B_k]`.
fn effective(h: &CMatrix, r: &[Complex64]) -> Vec<Complex64> {
    (0..h.rows())
        .map(|m| h[(m, 0)] + (0..r.len()).map(|n| h[(m, n + 1)] * r[n]).sum::<Complex64>())
        .collect()
}

fn dot_h(a: &[Complex64], b: &[Complex64]) -> Complex64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

/// Per-user SINR
/// `|g_k^H w_k|^2 / (sum_{i != k} |g_k^H w_i|^2 + sigma^2)`.
pub fn sinr(channels: &[CMatrix], sol: &BeamformingSolution, noise_variance: f64) -> Result<Vec<f64>> {
    let k_users = channels.len();
    if sol.w.cols() != k_users || sol.r.cols() != k_users {
        return Err(Error::Shape(format!(
            "solution for {} users, {} channels",
            sol.w.cols(),
            k_users
        )));
    }
    let ws: Vec<Vec<Complex64>> = (0..k_users).map(|i| sol.w.col(i)).collect();
    channels
        .iter()
        .enumerate()
        .map(|(k, h)| {
            if h.rows() != sol.w.rows() || h.cols() != sol.r.rows() + 1 {
                return Err(Error::DimensionMismatch {
                    op: "sinr",
                    lhs: (sol.w.rows(), sol.r.rows() + 1),
                    rhs: h.shape(),
                });
            }
            let g = effective(h, &sol.r.col(k));
            let signal = dot_h(&g, &ws[k]).norm_sqr();
            let interference: f64 = (0..k_users)
                .filter(|&i| i != k)
                .map(|i| dot_h(&g, &ws[i]).norm_sqr())
                .sum();
            Ok(signal / (interference + noise_variance))
        })
        .collect()
}

/// `sum_k log2(1 + gamma_k) / K`.
pub fn se_from_sinr(gamma: &[f64]) -> f64 {
    if gamma.is_empty() {
        return 0.0;
    }
    gamma.iter().map(|g| (1.0 + g).log2()).sum::<f64>() / gamma.len() as f64
}

/// Zero-forcing on the effective channels with equal per-user power.
/// Returns the precoder and whether ridge regularization was needed.
fn zero_forcing(g: &[Vec<Complex64>], power_budget: f64) -> (CMatrix, bool) {
    let k_users = g.len();
    let m = g[0].len();
    let gm = CMatrix::from_fn(m, k_users, |r, c| g[c][r]);
    let gram = gm.hermitian().matmul(&gm).expect("gram shape");
    let scale = (0..k_users).map(|i| gram[(i, i)].re).fold(0.0, f64::max);
    let tol = 1e-12 * scale.max(f64::MIN_POSITIVE);
    let cond_ok = |inv: &CMatrix| inv.is_finite() && inv.frobenius_norm() * scale < 1e12;
    let (inv, regularized) = match gram.inverse(tol) {
        Some(inv) if cond_ok(&inv) => (inv, false),
        _ => {
            let mut ridge = gram.clone();
            for i in 0..k_users {
                ridge[(i, i)] += Complex64::new(1e-6, 0.0);
            }
            (ridge.inverse(0.0).unwrap_or_else(|| CMatrix::zeros(k_users, k_users)), true)
        }
    };
    let mut w = gm.matmul(&inv).expect("zf shape");
    let per_user = power_budget / k_users as f64;
    let mut regularized = regularized;
    for k in 0..k_users {
        let mut col = w.col(k);
        let mut norm = col.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        if !(norm > 0.0) {
            // vanishing effective channel: any unit direction
            col = vec![Complex64::new(0.0, 0.0); m];
            col[k % m] = Complex64::new(1.0, 0.0);
            norm = 1.0;
            regularized = true;
        }
        let f = per_user.sqrt() / norm;
        let scaled: Vec<Complex64> = col.iter().map(|z| z * f).collect();
        w.set_col(k, &scaled);
    }
    (w, regularized)
}

fn objective(channels: &[CMatrix], w: &CMatrix, r: &CMatrix, noise: f64) -> f64 {
    let sol = BeamformingSolution {
        w: w.clone(),
        r: r.clone(),
        regularized: false,
        objective_trace: Vec::new(),
    };
    se_from_sinr(&sinr(channels, &sol, noise).expect("consistent shapes"))
}

/// Coordinate ascent over the phase grid for the IRS elements of the
/// users in `users`, all sharing one configuration when more than one is
/// given. Never lowers the objective.
fn phase_ascent(channels: &[CMatrix], w: &CMatrix, r: &mut CMatrix, users: &[usize], cfg: &BeamformerConfig) {
    let n = r.rows();
    let k_users = w.cols();
    let ws: Vec<Vec<Complex64>> = (0..k_users).map(|i| w.col(i)).collect();
    // t[u][i] = g_u^H w_i, c[u][e][i] = B_u[:, e]^H w_i
    let coeffs: Vec<Vec<Vec<Complex64>>> = users
        .iter()
        .map(|&u| {
            (0..n)
                .map(|e| {
                    let b: Vec<Complex64> = (0..channels[u].rows()).map(|m| channels[u][(m, e + 1)]).collect();
                    ws.iter().map(|wi| dot_h(&b, wi)).collect()
                })
                .collect()
        })
        .collect();
    let current = r.col(users[0]);
    let mut t: Vec<Vec<Complex64>> = users
        .iter()
        .map(|&u| {
            let g = effective(&channels[u], &current);
            ws.iter().map(|wi| dot_h(&g, wi)).collect()
        })
        .collect();
    let rate = |t: &[Vec<Complex64>]| -> f64 {
        users
            .iter()
            .zip(t)
            .map(|(&u, tu)| {
                let s = tu[u].norm_sqr();
                let i: f64 = (0..k_users).filter(|&i| i != u).map(|i| tu[i].norm_sqr()).sum();
                (1.0 + s / (i + cfg.noise_variance)).log2()
            })
            .sum()
    };
    let candidates: Vec<Complex64> = (0..cfg.phase_levels)
        .map(|l| Complex64::from_polar(1.0, 2.0 * PI * l as f64 / cfg.phase_levels as f64))
        .collect();
    let mut phases = current;
    let mut best = rate(&t);
    for e in 0..n {
        let old = phases[e];
        let mut chosen = old;
        for &cand in &candidates {
            let delta = cand.conj() - old.conj();
            let trial: Vec<Vec<Complex64>> = t
                .iter()
                .zip(&coeffs)
                .map(|(tu, cu)| tu.iter().zip(&cu[e]).map(|(a, c)| a + delta * c).collect())
                .collect();
            let v = rate(&trial);
            if v > best {
                best = v;
                chosen = cand;
            }
        }
        if chosen != old {
            let delta = chosen.conj() - old.conj();
            for (tu, cu) in t.iter_mut().zip(&coeffs) {
                for (a, c) in tu.iter_mut().zip(&cu[e]) {
                    *a += delta * c;
                }
            }
            phases[e] = chosen;
        }
    }
    for &u in users {
        r.set_col(u, &phases);
    }
}

/// Alternates zero-forcing precoding and IRS phase coordinate ascent on the
/// given (typically estimated) channels `[d_k, B_k]`.
pub fn optimize_beamforming(channels: &[CMatrix], cfg: &BeamformerConfig) -> Result<BeamformingSolution> {
    cfg.validate()?;
    let first = channels
        .first()
        .ok_or_else(|| Error::InvalidConfig("beamforming needs at least one user".into()))?;
    let (m, cols) = first.shape();
    if cols == 0 {
        return Err(Error::Shape("channel has no direct-link column".into()));
    }
    for h in channels {
        if h.shape() != (m, cols) {
            return Err(Error::DimensionMismatch {
                op: "optimize_beamforming",
                lhs: (m, cols),
                rhs: h.shape(),
            });
        }
        if !h.is_finite() {
            return Err(Error::InvalidConfig("non-finite channel estimate".into()));
        }
    }
    let k_users = channels.len();
    let n = cols - 1;
    let mut r = CMatrix::from_fn(n, k_users, |_, _| Complex64::new(1.0, 0.0));
    let effective_all =
        |r: &CMatrix| -> Vec<Vec<Complex64>> { channels.iter().enumerate().map(|(k, h)| effective(h, &r.col(k))).collect() };
    let (mut w, mut regularized) = zero_forcing(&effective_all(&r), cfg.power_budget);
    let mut value = objective(channels, &w, &r, cfg.noise_variance);
    let mut trace = vec![value];
    for _ in 0..cfg.max_rounds {
        let start = value;
        if n > 0 {
            if cfg.shared_phases {
                let all: Vec<usize> = (0..k_users).collect();
                phase_ascent(channels, &w, &mut r, &all, cfg);
            } else {
                for k in 0..k_users {
                    phase_ascent(channels, &w, &mut r, &[k], cfg);
                }
            }
            value = objective(channels, &w, &r, cfg.noise_variance).max(value);
        }
        let (w_new, reg) = zero_forcing(&effective_all(&r), cfg.power_budget);
        let v_new = objective(channels, &w_new, &r, cfg.noise_variance);
        if v_new >= value {
            w = w_new;
            regularized = reg;
            value = v_new;
        }
        trace.push(value);
        if value - start < cfg.tol {
            break;
        }
    }
    Ok(BeamformingSolution {
        w,
        r,
        regularized,
        objective_trace: trace,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SEReport {
    pub per_user_sinr: Vec<f64>,
    pub se_bps_hz: f64,
    pub method: String,
    pub pilot_snr_db: f64,
    pub regularized: bool,
}

/// SE with the solution applied to the true channels.
pub fn spectral_efficiency(
    h_true: &[CMatrix],
    sol: &BeamformingSolution,
    noise_variance: f64,
    method: &str,
    pilot_snr_db: f64,
) -> Result<SEReport> {
    let gamma = sinr(h_true, sol, noise_variance)?;
    Ok(SEReport {
        se_bps_hz: se_from_sinr(&gamma),
        per_user_sinr: gamma,
        method: method.to_string(),
        pilot_snr_db,
        regularized: sol.regularized,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimingStats {
    pub mean_ms: f64,
    pub std_ms: f64,
    pub trials: usize,
}

/// Wall-clock time of `estimate` per call, after `warmup` untimed calls.
pub fn time_inference(mut estimate: impl FnMut(), n_trials: usize, warmup: usize) -> Result<TimingStats> {
    if n_trials < 100 {
        return Err(Error::InvalidConfig(format!("timing needs at least 100 trials, got {n_trials}")));
    }
    for _ in 0..warmup {
        estimate();
    }
    let mut samples = Vec::with_capacity(n_trials);
    for _ in 0..n_trials {
        let t = Instant::now();
        estimate();
        samples.push(t.elapsed().as_secs_f64() * 1e3);
    }
    let mean = samples.iter().sum::<f64>() / n_trials as f64;
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n_trials - 1) as f64;
    Ok(TimingStats {
        mean_ms: mean,
        std_ms: var.sqrt(),
        trials: n_trials,
    })
}
