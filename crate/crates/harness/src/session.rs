//! In-memory experiment state: channel data, observations per SNR and
//! trained models, created on first use and reused afterwards.

use std::collections::HashMap;
use std::hint::black_box;
use std::time::Instant;

use irs_core::estimation::{
    estimate_drn_style, estimate_drn_style_batch, estimate_ls, estimate_mismatch, estimate_mismatch_batch,
    train_drn_style, train_mismatch_model, DrnStyleModel, MismatchModel, Provenance, ReferencePair,
};
use irs_core::evaluation::{nmse, optimize_beamforming, spectral_efficiency, time_inference, TimingStats};
use irs_core::nn::ModelArchitecture;
use irs_core::CMatrix;
use log::info;
use rayon::prelude::*;

use crate::data::{ChannelData, Observed};
use crate::error::Result;
use crate::output::{AblationRow, ResultRow};
use crate::spec::{ExperimentSpec, Method};

/// Rows of the perfect-CSI reference in sweep results.
pub const PERFECT: &str = "perfect";

/// Inference batch size used for evaluation.
const EVAL_BATCH: usize = 256;

fn key(snr_db: f64) -> u64 {
    snr_db.to_bits()
}

pub struct Session {
    pub spec: ExperimentSpec,
    pub seed: u64,
    pub data: ChannelData,
    observed: HashMap<u64, Observed>,
    drn: HashMap<u64, DrnStyleModel>,
    mismatch: HashMap<(u64, Provenance), MismatchModel>,
}

impl Session {
    pub fn generate(spec: &ExperimentSpec, seed: u64) -> Result<Self> {
        Ok(Self::with_data(spec, seed, ChannelData::generate(spec, seed)?))
    }

    pub fn with_data(spec: &ExperimentSpec, seed: u64, data: ChannelData) -> Self {
        Self {
            spec: spec.clone(),
            seed,
            data,
            observed: HashMap::new(),
            drn: HashMap::new(),
            mismatch: HashMap::new(),
        }
    }

    pub fn observed(&mut self, snr_db: f64) -> Result<&Observed> {
        if !self.observed.contains_key(&key(snr_db)) {
            let obs = Observed::generate(&self.spec, self.seed, &self.data, snr_db)?;
            self.observed.insert(key(snr_db), obs);
        }
        Ok(&self.observed[&key(snr_db)])
    }

    pub fn insert_observed(&mut self, obs: Observed) {
        self.observed.insert(key(obs.snr_db), obs);
    }

    pub fn has_drn(&self, snr_db: f64) -> bool {
        self.drn.contains_key(&key(snr_db))
    }

    pub fn has_mismatch(&self, snr_db: f64, provenance: Provenance) -> bool {
        self.mismatch.contains_key(&(key(snr_db), provenance))
    }

    /// DRN-style model for `snr_db`, trained on first request.
    pub fn drn(&mut self, snr_db: f64) -> Result<&DrnStyleModel> {
        if !self.has_drn(snr_db) {
            let tcfg = self.spec.training_config(self.seed);
            let arch = self.spec.drn_architecture();
            let obs = self.observed(snr_db)?;
            let start = Instant::now();
            let model = train_drn_style(&obs.train, &obs.schedule, arch, &tcfg)?;
            info!(
                "trained drn_style at {snr_db} dB: {} epochs, final loss {:.4}, {:.1} s",
                model.log.loss_curve.len(),
                model.log.loss_curve.last().copied().unwrap_or(f64::NAN),
                start.elapsed().as_secs_f64()
            );
            self.drn.insert(key(snr_db), model);
        }
        Ok(&self.drn[&key(snr_db)])
    }

    pub fn insert_drn(&mut self, snr_db: f64, model: DrnStyleModel) {
        self.drn.insert(key(snr_db), model);
    }

    /// Reference pair of the given provenance, observed at `snr_db`.
    pub fn reference(&mut self, snr_db: f64, provenance: Provenance) -> Result<ReferencePair> {
        let x_ref = self.observed(snr_db)?.x_ref.clone();
        Ok(match provenance {
            Provenance::ExactCsi => ReferencePair::exact(x_ref, self.data.references())?,
            Provenance::Ls => ReferencePair::from_ls(x_ref, &self.observed(snr_db)?.schedule)?,
            Provenance::DrnStyle => {
                let schedule = self.observed(snr_db)?.schedule.clone();
                ReferencePair::from_drn_style(x_ref, self.drn(snr_db)?, &schedule)?
            }
        })
    }

    /// Mismatch model for `snr_db` and a reference provenance, trained on
    /// first request.
    pub fn mismatch(&mut self, snr_db: f64, provenance: Provenance) -> Result<&MismatchModel> {
        if !self.has_mismatch(snr_db, provenance) {
            let reference = self.reference(snr_db, provenance)?;
            let tcfg = self.spec.training_config(self.seed);
            let obs = self.observed(snr_db)?;
            let start = Instant::now();
            let model = train_mismatch_model(&obs.train, &reference, ModelArchitecture::proposed(), &tcfg)?;
            info!(
                "trained mismatch ({provenance} reference) at {snr_db} dB: {} epochs, final loss {:.4}, {:.1} s",
                model.log.loss_curve.len(),
                model.log.loss_curve.last().copied().unwrap_or(f64::NAN),
                start.elapsed().as_secs_f64()
            );
            self.mismatch.insert((key(snr_db), provenance), model);
        }
        Ok(&self.mismatch[&(key(snr_db), provenance)])
    }

    pub fn insert_mismatch(&mut self, snr_db: f64, model: MismatchModel) {
        self.mismatch.insert((key(snr_db), model.reference.provenance), model);
    }

    /// Trains whatever the spec's estimators need at `snr_db`.
    pub fn train_all(&mut self, snr_db: f64) -> Result<()> {
        let methods = self.spec.estimators()?;
        let provenance = self.spec.reference_provenance()?;
        if methods.contains(&Method::DrnStyle) || (methods.contains(&Method::Mismatch) && provenance == Provenance::DrnStyle) {
            self.drn(snr_db)?;
        }
        if methods.contains(&Method::Mismatch) {
            self.mismatch(snr_db, provenance)?;
        }
        Ok(())
    }

    /// Estimates of every test sample at `snr_db`, in test-sample order.
    pub fn estimates(&mut self, snr_db: f64, method: Method) -> Result<Vec<CMatrix>> {
        let provenance = self.spec.reference_provenance()?;
        match method {
            Method::Ls => {
                let obs = self.observed(snr_db)?;
                obs.test.iter().map(|s| Ok(estimate_ls(&s.x, &obs.schedule)?)).collect()
            }
            Method::DrnStyle => {
                self.drn(snr_db)?;
                let obs = &self.observed[&key(snr_db)];
                let model = &self.drn[&key(snr_db)];
                let mut out = Vec::with_capacity(obs.test.len());
                for chunk in obs.test.chunks(EVAL_BATCH) {
                    let xs: Vec<CMatrix> = chunk.iter().map(|s| s.x.clone()).collect();
                    out.extend(estimate_drn_style_batch(model, &xs, &obs.schedule)?);
                }
                Ok(out)
            }
            Method::Mismatch => {
                let model = self.mismatch(snr_db, provenance)?.clone();
                self.mismatch_estimates(snr_db, &model)
            }
        }
    }

    fn mismatch_estimates(&mut self, snr_db: f64, model: &MismatchModel) -> Result<Vec<CMatrix>> {
        let obs = self.observed(snr_db)?;
        let mut out = Vec::with_capacity(obs.test.len());
        for chunk in obs.test.chunks(EVAL_BATCH) {
            let inputs: Vec<(usize, CMatrix)> = chunk.iter().map(|s| (s.user, s.x.clone())).collect();
            out.extend(estimate_mismatch_batch(model, &inputs)?);
        }
        Ok(out)
    }

    /// Mean NMSE of estimates against the test channels.
    fn mean_nmse(obs: &Observed, estimates: &[CMatrix]) -> Result<f64> {
        let total: f64 = obs
            .test
            .iter()
            .zip(estimates)
            .map(|(s, e)| nmse(&s.h, e))
            .collect::<irs_core::Result<Vec<f64>>>()?
            .iter()
            .sum();
        Ok(total / obs.test.len() as f64)
    }

    /// Mean SE over test instances with beamformers optimized on the given
    /// per-sample channels and evaluated on the true ones.
    fn mean_se(&self, obs: &Observed, estimates: &[CMatrix]) -> Result<f64> {
        let k = obs.num_users();
        let bf = self.spec.beamformer(obs.cfg.noise_variance);
        let per_instance: Vec<f64> = (0..obs.num_test())
            .into_par_iter()
            .map(|t| -> irs_core::Result<f64> {
                let truth: Vec<CMatrix> = obs.test_instance(t).iter().map(|s| s.h.clone()).collect();
                let sol = optimize_beamforming(&estimates[t * k..(t + 1) * k], &bf)?;
                Ok(spectral_efficiency(&truth, &sol, bf.noise_variance, "", obs.snr_db)?.se_bps_hz)
            })
            .collect::<irs_core::Result<_>>()?;
        Ok(per_instance.iter().sum::<f64>() / per_instance.len() as f64)
    }

    /// Wall-clock time of one single-user estimate at `snr_db`.
    pub fn time_method(&mut self, snr_db: f64, method: Method, trials: usize, warmup: usize) -> Result<TimingStats> {
        let provenance = self.spec.reference_provenance()?;
        self.observed(snr_db)?;
        if method == Method::DrnStyle {
            self.drn(snr_db)?;
        }
        if method == Method::Mismatch {
            self.mismatch(snr_db, provenance)?;
        }
        let obs = &self.observed[&key(snr_db)];
        let samples = &obs.test;
        let mut i = 0usize;
        let mut next = || {
            i = (i + 1) % samples.len();
            &samples[i]
        };
        let stats = match method {
            Method::Ls => time_inference(
                || {
                    black_box(estimate_ls(black_box(&next().x), &obs.schedule).ok());
                },
                trials,
                warmup,
            )?,
            Method::DrnStyle => {
                let model = &self.drn[&key(snr_db)];
                time_inference(
                    || {
                        black_box(estimate_drn_style(model, black_box(&next().x), &obs.schedule).ok());
                    },
                    trials,
                    warmup,
                )?
            }
            Method::Mismatch => {
                let model = &self.mismatch[&(key(snr_db), provenance)];
                time_inference(
                    || {
                        let s = next();
                        black_box(estimate_mismatch(model, s.user, black_box(&s.x)).ok());
                    },
                    trials,
                    warmup,
                )?
            }
        };
        Ok(stats)
    }

    /// One row per requested estimator plus the perfect-CSI row.
    pub fn evaluate(&mut self, snr_db: f64, with_timing: bool) -> Result<Vec<ResultRow>> {
        let methods = self.spec.estimators()?;
        let mut rows = Vec::with_capacity(methods.len() + 1);
        for method in methods {
            let estimates = self.estimates(snr_db, method)?;
            let obs = self.observed(snr_db)?;
            let mean_nmse = Self::mean_nmse(obs, &estimates)?;
            let mean_se = self.mean_se(&self.observed[&key(snr_db)], &estimates)?;
            let mean_time_ms = if with_timing {
                let t = &self.spec.timing;
                let (trials, warmup) = (t.trials, t.warmup);
                self.time_method(snr_db, method, trials, warmup)?.mean_ms
            } else {
                0.0
            };
            info!("{snr_db} dB {method}: nmse {mean_nmse:.4}, se {mean_se:.4}");
            rows.push(self.row(snr_db, method.name(), mean_nmse, mean_se, mean_time_ms));
        }
        let obs = &self.observed[&key(snr_db)];
        let truth: Vec<CMatrix> = obs.test.iter().map(|s| s.h.clone()).collect();
        let perfect_se = self.mean_se(obs, &truth)?;
        rows.push(self.row(snr_db, PERFECT, 0.0, perfect_se, 0.0));
        Ok(rows)
    }

    fn row(&self, snr_db: f64, method: &str, mean_nmse: f64, mean_se_bps_hz: f64, mean_time_ms: f64) -> ResultRow {
        ResultRow {
            snr_db,
            method: method.into(),
            mean_nmse,
            mean_se_bps_hz,
            mean_time_ms,
            n_samples: self.data.num_test(),
            seed: self.seed,
        }
    }

    /// Mean test NMSE of one estimator.
    pub fn nmse(&mut self, snr_db: f64, method: Method) -> Result<f64> {
        let estimates = self.estimates(snr_db, method)?;
        Self::mean_nmse(&self.observed[&key(snr_db)], &estimates)
    }

    /// Test NMSE of the mismatch estimator for one reference provenance.
    pub fn provenance_nmse(&mut self, snr_db: f64, provenance: Provenance) -> Result<f64> {
        let model = self.mismatch(snr_db, provenance)?.clone();
        let estimates = self.mismatch_estimates(snr_db, &model)?;
        Self::mean_nmse(&self.observed[&key(snr_db)], &estimates)
    }

    /// Reference-provenance rows at the ablation SNR, then one exact-CSI
    /// row per extra array size.
    pub fn ablation(&mut self) -> Result<Vec<AblationRow>> {
        let snr = self.spec.ablation.snr_db;
        let (m, n) = (self.spec.system.num_bs_antennas, self.spec.system.num_irs_elements);
        let mut rows = Vec::new();
        for provenance in self.spec.ablation_provenances()? {
            let mean_nmse = self.provenance_nmse(snr, provenance)?;
            info!("ablation {snr} dB, {provenance} reference: nmse {mean_nmse:.4}");
            rows.push(AblationRow {
                snr_db: snr,
                m,
                n,
                provenance: provenance.name().into(),
                mean_nmse,
                n_samples: self.data.num_test(),
                seed: self.seed,
            });
        }
        for &[sm, sn] in &self.spec.ablation.sizes {
            let spec = self.spec.with_size(sm, sn);
            spec.validate()?;
            let mut sub = Session::generate(&spec, self.seed)?;
            let mean_nmse = sub.provenance_nmse(snr, Provenance::ExactCsi)?;
            info!("ablation {snr} dB, M={sm}, N={sn}: nmse {mean_nmse:.4}");
            rows.push(AblationRow {
                snr_db: snr,
                m: sm,
                n: sn,
                provenance: Provenance::ExactCsi.name().into(),
                mean_nmse,
                n_samples: sub.data.num_test(),
                seed: self.seed,
            });
        }
        Ok(rows)
    }
}
