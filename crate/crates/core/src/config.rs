//! System parameters shared by every stage of the simulator.

use crate::error::{Error, Result};

/// Scalar parameters of the uplink training phase.
///
/// The symbol power is fixed at 1 W and the pilot SNR is swept through the
/// noise variance, so `pilot_snr_db = 10 log10(P_t / sigma^2)` always holds.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemConfig {
    /// K
    pub num_users: usize,
    /// M
    pub num_bs_antennas: usize,
    /// N
    pub num_irs_elements: usize,
    /// L
    pub pilot_length: usize,
    /// C, always N + 1.
    pub num_subframes: usize,
    /// P_t in watts.
    pub symbol_power: f64,
    /// sigma^2 in watts.
    pub noise_variance: f64,
    pub pilot_snr_db: f64,
    /// AR(1) coefficient between successive coherence intervals.
    pub coherence_correlation: f64,
    pub rng_seed: u64,
}

impl SystemConfig {
    /// Builds a configuration with `P_t = 1` and `sigma^2 = 10^(-snr_db / 10)`.
    pub fn from_snr(
        num_users: usize,
        num_bs_antennas: usize,
        num_irs_elements: usize,
        pilot_length: usize,
        snr_db: f64,
        coherence_correlation: f64,
        rng_seed: u64,
    ) -> Result<Self> {
        if !snr_db.is_finite() {
            return Err(Error::InvalidConfig(format!("pilot SNR must be finite, got {snr_db}")));
        }
        let cfg = Self {
            num_users,
            num_bs_antennas,
            num_irs_elements,
            pilot_length,
            num_subframes: num_irs_elements + 1,
            symbol_power: 1.0,
            noise_variance: 10f64.powf(-snr_db / 10.0),
            pilot_snr_db: snr_db,
            coherence_correlation,
            rng_seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Same system at a different pilot SNR.
    pub fn with_snr(&self, snr_db: f64) -> Result<Self> {
        Self::from_snr(
            self.num_users,
            self.num_bs_antennas,
            self.num_irs_elements,
            self.pilot_length,
            snr_db,
            self.coherence_correlation,
            self.rng_seed,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("num_users", self.num_users),
            ("num_bs_antennas", self.num_bs_antennas),
            ("num_irs_elements", self.num_irs_elements),
            ("pilot_length", self.pilot_length),
        ];
        for (name, v) in sizes {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be at least 1")));
            }
        }
        if self.pilot_length < self.num_users {
            return Err(Error::PilotRank {
                num_users: self.num_users,
                pilot_length: self.pilot_length,
            });
        }
        if self.num_subframes != self.num_irs_elements + 1 {
            return Err(Error::InvalidConfig(format!(
                "num_subframes must equal num_irs_elements + 1 ({}), got {}",
                self.num_irs_elements + 1,
                self.num_subframes
            )));
        }
        if !(self.symbol_power > 0.0 && self.symbol_power.is_finite()) {
            return Err(Error::InvalidConfig(format!("symbol power must be positive, got {}", self.symbol_power)));
        }
        if !(self.noise_variance > 0.0 && self.noise_variance.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "noise variance must be positive, got {}",
                self.noise_variance
            )));
        }
        if !(0.0..=1.0).contains(&self.coherence_correlation) {
            return Err(Error::InvalidConfig(format!(
                "coherence correlation must lie in [0, 1], got {}",
                self.coherence_correlation
            )));
        }
        let implied = self.implied_snr_db();
        if (implied - self.pilot_snr_db).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!(
                "pilot_snr_db {} disagrees with P_t/sigma^2 = {implied} dB",
                self.pilot_snr_db
            )));
        }
        Ok(())
    }

    /// `10 log10(P_t / sigma^2)`.
    pub fn implied_snr_db(&self) -> f64 {
        10.0 * (self.symbol_power / self.noise_variance).log10()
    }

    /// Columns of a channel matrix, N + 1.
    pub fn channel_cols(&self) -> usize {
        self.num_irs_elements + 1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_sizes() {
        let cfg = SystemConfig::from_snr(4, 8, 32, 4, 0.0, 0.4, 1).unwrap();
        assert_eq!(cfg.num_subframes, 33);
        assert_eq!(cfg.noise_variance, 1.0);
    }

    #[test]
    fn minimal_sizes() {
        let cfg = SystemConfig::from_snr(1, 1, 1, 1, 0.0, 0.0, 0).unwrap();
        assert_eq!(cfg.num_subframes, 2);
        assert_eq!(cfg.noise_variance, 1.0);
    }

    #[test]
    fn ten_db_noise() {
        let cfg = SystemConfig::from_snr(2, 2, 3, 2, 10.0, 0.5, 7).unwrap();
        assert!((cfg.noise_variance - 0.1).abs() < 1e-15);
    }

    #[test]
    fn rejects_short_pilots() {
        let err = SystemConfig::from_snr(4, 8, 32, 3, 0.0, 0.4, 1).unwrap_err();
        assert!(matches!(err, Error::PilotRank { .. }));
        assert!(err.to_string().contains("pilot rank"));
    }

    #[test]
    fn rejects_non_finite_snr() {
        assert!(SystemConfig::from_snr(1, 1, 1, 1, f64::NAN, 0.0, 0).is_err());
        assert!(SystemConfig::from_snr(1, 1, 1, 1, f64::INFINITY, 0.0, 0).is_err());
    }

    #[test]
    fn rejects_bad_correlation() {
        assert!(SystemConfig::from_snr(1, 1, 1, 1, 0.0, 1.5, 0).is_err());
        assert!(SystemConfig::from_snr(1, 1, 1, 1, 0.0, -0.1, 0).is_err());
    }

    #[test]
    fn snr_round_trips() {
        for snr in [-5.0, -1.3, 0.0, 2.5, 7.77, 15.0, 30.0] {
            let cfg = SystemConfig::from_snr(2, 4, 8, 2, snr, 0.4, 3).unwrap();
            assert!((cfg.implied_snr_db() - snr).abs() < 1e-12, "{snr}");
        }
    }
}
