//! Channel and observation sets for one spec and seed.
//!
//! Every random quantity comes from its own stream derived from the seed,
//! so the channels do not depend on the SNR list and the noise draws are
//! shared by all SNRs (only their scale changes).

use std::path::{Path, PathBuf};

use irs_core::channel::{make_dataset, ChannelDataset, CoherentSequence};
use irs_core::dataset::{MatrixSet, CHANNEL_MAGIC, OBSERVATION_MAGIC};
use irs_core::estimation::{observe_samples, Sample};
use irs_core::pilot::{make_pilots, make_schedule, observe, ReflectionSchedule};
use irs_core::rng::ComplexGaussian;
use irs_core::{CMatrix, SystemConfig};

use crate::error::{HarnessError, Result};
use crate::spec::ExperimentSpec;

pub const STREAM_CHANNELS: u64 = 1;
pub const STREAM_TRAIN_NOISE: u64 = 2;
pub const STREAM_TEST_NOISE: u64 = 3;
pub const STREAM_REFERENCE_NOISE: u64 = 4;

pub const TRAIN_CHANNELS: &str = "channels_train.irsd";
pub const TEST_CHANNELS: &str = "channels_test.irsd";

/// File-name fragment for an SNR, e.g. `snr-5` or `snr2.5`.
pub fn snr_tag(snr_db: f64) -> String {
    format!("snr{snr_db}")
}

pub fn train_obs_file(snr_db: f64) -> String {
    format!("obs_train_{}.irso", snr_tag(snr_db))
}

pub fn test_obs_file(snr_db: f64) -> String {
    format!("obs_test_{}.irso", snr_tag(snr_db))
}

/// Training channels (with the per-user reference state) and held-out
/// test channels that continue each user's sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelData {
    pub train: ChannelDataset,
    pub test: Vec<CoherentSequence>,
}

impl ChannelData {
    pub fn generate(spec: &ExperimentSpec, seed: u64) -> Result<Self> {
        let cfg = spec.system_config(spec.system.pilot_snr_db, seed)?;
        let geo = spec.geometry(&cfg)?;
        let mut rng = ComplexGaussian::derived(seed, STREAM_CHANNELS);
        let (gen, train) = make_dataset(&cfg, &geo, spec.experiment.n_train, &mut rng)?;
        let test = train
            .last_states()
            .iter()
            .map(|s| gen.continue_sequence(s, spec.experiment.n_test, cfg.coherence_correlation, &mut rng))
            .collect();
        Ok(Self { train, test })
    }

    pub fn num_users(&self) -> usize {
        self.train.num_users()
    }

    pub fn references(&self) -> Vec<CMatrix> {
        self.train.references.iter().map(|r| r.h.clone()).collect()
    }

    /// Test channels of instance `t`, one per user.
    pub fn test_instance(&self, t: usize) -> Vec<CMatrix> {
        self.test.iter().map(|s| s.states[t].h.clone()).collect()
    }

    pub fn num_test(&self) -> usize {
        self.test.first().map_or(0, |s| s.states.len())
    }

    pub fn save(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let train = MatrixSet::from(&self.train);
        let test = MatrixSet {
            samples: self
                .test
                .iter()
                .map(|s| s.states.iter().map(|st| st.h.clone()).collect())
                .collect(),
            ..train.clone()
        };
        let paths = [dir.join(TRAIN_CHANNELS), dir.join(TEST_CHANNELS)];
        train.save(CHANNEL_MAGIC, &paths[0])?;
        test.save(CHANNEL_MAGIC, &paths[1])?;
        Ok(paths.to_vec())
    }

    pub fn load(dir: &Path, spec: &ExperimentSpec) -> Result<Self> {
        let rho = spec.system.coherence_correlation;
        let train = load_set(&dir.join(TRAIN_CHANNELS), CHANNEL_MAGIC, spec, spec.experiment.n_train)?;
        let test = load_set(&dir.join(TEST_CHANNELS), CHANNEL_MAGIC, spec, spec.experiment.n_test)?;
        if test.references != train.references {
            return Err(HarnessError::DatasetMismatch(
                "training and test channel files have different references".into(),
            ));
        }
        let test = test.into_channels(rho).sequences;
        Ok(Self {
            train: train.into_channels(rho),
            test,
        })
    }
}

fn load_set(path: &Path, magic: [u8; 4], spec: &ExperimentSpec, n: usize) -> Result<MatrixSet> {
    if !path.exists() {
        return Err(HarnessError::NotFound {
            what: "dataset",
            path: path.to_path_buf(),
        });
    }
    let set = MatrixSet::load(magic, path)?;
    let s = &spec.system;
    let expected = (s.num_users, s.num_bs_antennas, s.num_irs_elements, n);
    let found = (set.num_users, set.m, set.n, set.num_samples());
    if expected != found {
        return Err(HarnessError::DatasetMismatch(format!(
            "{}: (K, M, N, samples) = {found:?}, spec needs {expected:?}",
            path.display()
        )));
    }
    Ok(set)
}

/// Observations of the reference, training and test channels at one SNR.
#[derive(Debug, Clone, PartialEq)]
pub struct Observed {
    pub snr_db: f64,
    pub cfg: SystemConfig,
    pub schedule: ReflectionSchedule,
    pub x_ref: Vec<CMatrix>,
    /// Time-major: sample `t * K + k` belongs to user `k`.
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Observed {
    pub fn generate(spec: &ExperimentSpec, seed: u64, data: &ChannelData, snr_db: f64) -> Result<Self> {
        let cfg = spec.system_config(snr_db, seed)?;
        let pilots = make_pilots(&cfg)?;
        let schedule = make_schedule(&cfg)?;
        let mut ref_rng = ComplexGaussian::derived(seed, STREAM_REFERENCE_NOISE);
        let x_ref = observe(&data.train.references, &pilots, &schedule, &cfg, &mut ref_rng)?
            .into_iter()
            .map(|o| o.x)
            .collect();
        let mut train_rng = ComplexGaussian::derived(seed, STREAM_TRAIN_NOISE);
        let train = observe_samples(&data.train.sequences, &pilots, &schedule, &cfg, &mut train_rng)?;
        let mut test_rng = ComplexGaussian::derived(seed, STREAM_TEST_NOISE);
        let test = observe_samples(&data.test, &pilots, &schedule, &cfg, &mut test_rng)?;
        Ok(Self {
            snr_db,
            cfg,
            schedule,
            x_ref,
            train,
            test,
        })
    }

    pub fn num_users(&self) -> usize {
        self.x_ref.len()
    }

    /// Test samples of instance `t`, one per user.
    pub fn test_instance(&self, t: usize) -> &[Sample] {
        let k = self.num_users();
        &self.test[t * k..(t + 1) * k]
    }

    pub fn num_test(&self) -> usize {
        self.test.len() / self.num_users().max(1)
    }

    pub fn save(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let k = self.num_users();
        let (m, c) = self.x_ref[0].shape();
        let to_set = |samples: &[Sample]| MatrixSet {
            num_users: k,
            m,
            n: c - 1,
            samples: (0..k)
                .map(|u| samples.iter().skip(u).step_by(k).map(|s| s.x.clone()).collect())
                .collect(),
            references: self.x_ref.clone(),
        };
        let paths = [dir.join(train_obs_file(self.snr_db)), dir.join(test_obs_file(self.snr_db))];
        to_set(&self.train).save(OBSERVATION_MAGIC, &paths[0])?;
        to_set(&self.test).save(OBSERVATION_MAGIC, &paths[1])?;
        Ok(paths.to_vec())
    }

    pub fn load(dir: &Path, spec: &ExperimentSpec, seed: u64, data: &ChannelData, snr_db: f64) -> Result<Self> {
        let cfg = spec.system_config(snr_db, seed)?;
        let schedule = make_schedule(&cfg)?;
        let train_set = load_set(&dir.join(train_obs_file(snr_db)), OBSERVATION_MAGIC, spec, spec.experiment.n_train)?;
        let test_set = load_set(&dir.join(test_obs_file(snr_db)), OBSERVATION_MAGIC, spec, spec.experiment.n_test)?;
        let pair = |set: &MatrixSet, channels: &[CoherentSequence]| -> Vec<Sample> {
            let n = set.num_samples();
            let mut out = Vec::with_capacity(n * set.num_users);
            for t in 0..n {
                for (k, seq) in channels.iter().enumerate() {
                    out.push(Sample {
                        user: k,
                        x: set.samples[k][t].clone(),
                        h: seq.states[t].h.clone(),
                    });
                }
            }
            out
        };
        Ok(Self {
            snr_db,
            schedule,
            x_ref: train_set.references.clone(),
            train: pair(&train_set, &data.train.sequences),
            test: pair(&test_set, &data.test),
            cfg,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentSpec {
        let mut spec = ExperimentSpec::smoke();
        spec.experiment.n_train = 5;
        spec.experiment.n_test = 3;
        spec
    }

    #[test]
    fn shapes_follow_spec() {
        let spec = tiny();
        let data = ChannelData::generate(&spec, 1).unwrap();
        assert_eq!(data.train.dims(), [2, 5, 4, 5]);
        assert_eq!(data.num_test(), 3);
        let obs = Observed::generate(&spec, 1, &data, 0.0).unwrap();
        assert_eq!(obs.train.len(), 10);
        assert_eq!(obs.test.len(), 6);
        assert_eq!(obs.test_instance(2)[1].h, data.test[1].states[2].h);
        assert_eq!(obs.test_instance(2)[1].user, 1);
    }

    #[test]
    fn generation_is_deterministic_and_seeded() {
        let spec = tiny();
        let a = ChannelData::generate(&spec, 7).unwrap();
        assert_eq!(a, ChannelData::generate(&spec, 7).unwrap());
        assert_ne!(a, ChannelData::generate(&spec, 8).unwrap());
    }

    #[test]
    fn noise_is_shared_across_snrs() {
        // same draws, scaled: X - H P at 10 dB is X - H P at 0 dB / sqrt(10)
        let spec = tiny();
        let data = ChannelData::generate(&spec, 2).unwrap();
        let lo = Observed::generate(&spec, 2, &data, 0.0).unwrap();
        let hi = Observed::generate(&spec, 2, &data, 10.0).unwrap();
        let noise = |o: &Observed, i: usize| o.train[i].x.sub(&o.train[i].h.matmul(&o.schedule.p).unwrap()).unwrap();
        let ratio = noise(&lo, 3).frobenius_norm() / noise(&hi, 3).frobenius_norm();
        assert!((ratio - 10f64.sqrt()).abs() < 1e-9, "{ratio}");
    }

    #[test]
    fn files_round_trip() {
        let spec = tiny();
        let dir = tempfile::tempdir().unwrap();
        let data = ChannelData::generate(&spec, 3).unwrap();
        data.save(dir.path()).unwrap();
        let back = ChannelData::load(dir.path(), &spec).unwrap();
        assert_eq!(back, data);
        let obs = Observed::generate(&spec, 3, &data, -5.0).unwrap();
        obs.save(dir.path()).unwrap();
        assert_eq!(Observed::load(dir.path(), &spec, 3, &back, -5.0).unwrap(), obs);
    }

    #[test]
    fn missing_and_mismatched_files() {
        let spec = tiny();
        let dir = tempfile::tempdir().unwrap();
        let err = ChannelData::load(dir.path(), &spec).unwrap_err();
        assert!(err.to_string().starts_with("dataset not found"), "{err}");
        ChannelData::generate(&spec, 3).unwrap().save(dir.path()).unwrap();
        let mut other = spec.clone();
        other.experiment.n_train = 6;
        assert!(matches!(ChannelData::load(dir.path(), &other), Err(HarnessError::DatasetMismatch(_))));
    }
}
