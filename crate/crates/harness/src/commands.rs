//! The pipeline stages behind each `irs-sim` subcommand.
//!
//! Layout of an output directory:
//!
//! ```text
//! generate.manifest.json   data/channels_*.irsd, data/obs_*.irso
//! train.manifest.json      checkpoints/*.irsm, loss/*.csv
//! sweep.manifest.json      results.csv, fig3_nmse.dat, fig4_se.dat
//! ablate-ref.manifest.json ablation.csv
//! bench.manifest.json      timing.csv
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use irs_core::estimation::{
    compute_scaling_constant, continue_drn_style_training, continue_mismatch_training, DrnStyleModel, MismatchModel,
    Provenance,
};
use irs_core::nn::{Checkpoint, ModelArchitecture};
use log::info;
use serde::Deserialize;

use crate::data::{test_obs_file, ChannelData, Observed};
use crate::error::{HarnessError, Result};
use crate::manifest::Manifest;
use crate::output::{
    read_csv, write_ablation, write_gnuplot, write_loss_curve, write_results, write_timing, AblationRow, ResultRow,
    TimingRow,
};
use crate::session::Session;
use crate::spec::{ExperimentSpec, Method};

pub const DATA_DIR: &str = "data";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const LOSS_DIR: &str = "loss";
pub const RESULTS_FILE: &str = "results.csv";
pub const NMSE_PLOT: &str = "fig3_nmse.dat";
pub const SE_PLOT: &str = "fig4_se.dat";
pub const ABLATION_FILE: &str = "ablation.csv";
pub const TIMING_FILE: &str = "timing.csv";

pub const GENERATE: &str = "generate";
pub const TRAIN: &str = "train";
pub const SWEEP: &str = "sweep";
pub const ABLATE: &str = "ablate-ref";
pub const BENCH: &str = "bench";

/// Trained model kinds, as they appear in file names.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    DrnStyle,
    Mismatch(Provenance),
}

impl ModelKind {
    pub fn stem(self, snr_db: f64) -> String {
        match self {
            ModelKind::DrnStyle => format!("drn_style_snr{snr_db}"),
            ModelKind::Mismatch(p) => format!("mismatch-{}_snr{snr_db}", p.name()),
        }
    }

    pub fn checkpoint(self, out: &Path, snr_db: f64) -> PathBuf {
        out.join(CHECKPOINT_DIR).join(format!("{}.irsm", self.stem(snr_db)))
    }

    pub fn loss_file(self, out: &Path, snr_db: f64) -> PathBuf {
        out.join(LOSS_DIR).join(format!("{}.csv", self.stem(snr_db)))
    }
}

/// Models the spec's estimators need at every sweep SNR.
pub fn required_models(spec: &ExperimentSpec) -> Result<Vec<ModelKind>> {
    let methods = spec.estimators()?;
    let provenance = spec.reference_provenance()?;
    let mut kinds = Vec::new();
    if methods.contains(&Method::DrnStyle)
        || (methods.contains(&Method::Mismatch) && provenance == Provenance::DrnStyle)
    {
        kinds.push(ModelKind::DrnStyle);
    }
    if methods.contains(&Method::Mismatch) {
        kinds.push(ModelKind::Mismatch(provenance));
    }
    Ok(kinds)
}

/// Sweep SNRs followed by the ablation SNR if it is not among them.
pub fn snrs(spec: &ExperimentSpec) -> Vec<f64> {
    let mut v = spec.experiment.snr_sweep_db.clone();
    if !v.contains(&spec.ablation.snr_db) {
        v.push(spec.ablation.snr_db);
    }
    v
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(HarnessError::io(path))
}

fn checkpoint_error(path: &Path) -> impl FnOnce(irs_core::Error) -> HarnessError + '_ {
    move |e| HarnessError::Checkpoint {
        path: path.to_path_buf(),
        detail: e.to_string(),
    }
}

/// Channels plus observations at every SNR the spec uses.
pub fn generate(spec: &ExperimentSpec, out: &Path, seed: u64) -> Result<Manifest> {
    let data_dir = out.join(DATA_DIR);
    create_dir(&data_dir)?;
    let mut session = Session::generate(spec, seed)?;
    let mut manifest = Manifest::new(GENERATE, spec, seed);
    for p in session.data.save(&data_dir)? {
        manifest.add(out, &p)?;
    }
    for snr in snrs(spec) {
        for p in session.observed(snr)?.save(&data_dir)? {
            manifest.add(out, &p)?;
        }
    }
    manifest.write(out)?;
    info!("generated {} files in {}", manifest.files.len(), out.display());
    Ok(manifest)
}

/// Session over the files written by `generate`, checked against its manifest.
pub fn load_session(spec: &ExperimentSpec, out: &Path, seed: u64) -> Result<Session> {
    let data_dir = out.join(DATA_DIR);
    let manifest = match Manifest::read(out, GENERATE) {
        Err(HarnessError::NotFound { .. }) => {
            return Err(HarnessError::NotFound {
                what: "dataset",
                path: data_dir,
            })
        }
        other => other?,
    };
    manifest.check(spec, seed)?;
    manifest.verify_files(out)?;
    let data = ChannelData::load(&data_dir, spec)?;
    let mut session = Session::with_data(spec, seed, data);
    for snr in snrs(spec) {
        if data_dir.join(test_obs_file(snr)).exists() {
            let obs = Observed::load(&data_dir, spec, seed, &session.data, snr)?;
            session.insert_observed(obs);
        }
    }
    Ok(session)
}

#[derive(Deserialize)]
struct LossRow {
    #[allow(dead_code)]
    epoch: usize,
    mean_nmse: f64,
}

fn read_loss(path: &Path) -> Result<Vec<f64>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    Ok(read_csv::<LossRow>(path)?.into_iter().map(|r| r.mean_nmse).collect())
}

fn check_scaling(path: &Path, stored: f64, session: &mut Session, snr_db: f64) -> Result<()> {
    let expected = compute_scaling_constant(session.observed(snr_db)?.train.iter().map(|s| &s.h))?;
    if (stored - expected).abs() > 1e-9 * expected.abs() {
        return Err(HarnessError::Checkpoint {
            path: path.to_path_buf(),
            detail: format!("scaling constant {stored} does not match the training data ({expected})"),
        });
    }
    Ok(())
}

fn check_arch(path: &Path, found: &ModelArchitecture, expected: &ModelArchitecture) -> Result<()> {
    if found != expected {
        return Err(HarnessError::Checkpoint {
            path: path.to_path_buf(),
            detail: format!("architecture {found:?}, spec needs {expected:?}"),
        });
    }
    Ok(())
}

fn load_drn(path: &Path, session: &mut Session, snr_db: f64) -> Result<DrnStyleModel> {
    let ck = Checkpoint::load(path).map_err(checkpoint_error(path))?;
    let drn = DrnStyleModel::from_checkpoint(ck).map_err(checkpoint_error(path))?;
    check_arch(path, drn.model.arch(), &session.spec.drn_architecture())?;
    check_scaling(path, drn.scaling, session, snr_db)?;
    Ok(drn)
}

fn load_mismatch(path: &Path, session: &mut Session, snr_db: f64, provenance: Provenance) -> Result<MismatchModel> {
    let ck = Checkpoint::load(path).map_err(checkpoint_error(path))?;
    let model = MismatchModel::from_checkpoint(ck).map_err(checkpoint_error(path))?;
    check_arch(path, model.model.arch(), &ModelArchitecture::proposed())?;
    let s = &session.spec.system;
    let expected = (s.num_users, s.num_bs_antennas, s.num_irs_elements + 1);
    let r = &model.reference;
    let found = (r.num_users(), r.h_ref[0].rows(), r.h_ref[0].cols());
    if found != expected {
        return Err(HarnessError::Checkpoint {
            path: path.to_path_buf(),
            detail: format!("reference of (K, M, N+1) = {found:?}, spec needs {expected:?}"),
        });
    }
    if r.provenance != provenance {
        return Err(HarnessError::Checkpoint {
            path: path.to_path_buf(),
            detail: format!("{} reference, expected {provenance}", r.provenance),
        });
    }
    check_scaling(path, model.scaling, session, snr_db)?;
    Ok(model)
}

fn load_model(session: &mut Session, out: &Path, kind: ModelKind, snr_db: f64) -> Result<()> {
    let path = kind.checkpoint(out, snr_db);
    match kind {
        ModelKind::DrnStyle => {
            let drn = load_drn(&path, session, snr_db)?;
            session.insert_drn(snr_db, drn);
        }
        ModelKind::Mismatch(p) => {
            let m = load_mismatch(&path, session, snr_db, p)?;
            session.insert_mismatch(snr_db, m);
        }
    }
    Ok(())
}

/// Loads the checkpoints listed by the `train` manifest. With `strict`,
/// every model the spec needs must be present.
pub fn load_models(session: &mut Session, out: &Path, strict: bool) -> Result<()> {
    let spec = session.spec.clone();
    let manifest = Manifest::read(out, TRAIN)?;
    manifest.check(&spec, session.seed)?;
    manifest.verify_files(out)?;
    for snr in spec.experiment.snr_sweep_db.clone() {
        for kind in required_models(&spec)? {
            let rel = format!("{CHECKPOINT_DIR}/{}.irsm", kind.stem(snr));
            if manifest.has(&rel) {
                load_model(session, out, kind, snr)?;
            } else if strict {
                return Err(HarnessError::NotFound {
                    what: "checkpoint",
                    path: out.join(rel),
                });
            }
        }
    }
    Ok(())
}

/// Trains every required model at every sweep SNR. With `resume`, existing
/// checkpoints are trained further and their loss files extended.
pub fn train(spec: &ExperimentSpec, out: &Path, seed: u64, resume: bool) -> Result<Manifest> {
    let mut session = load_session(spec, out, seed)?;
    create_dir(&out.join(CHECKPOINT_DIR))?;
    create_dir(&out.join(LOSS_DIR))?;
    let mut manifest = Manifest::new(TRAIN, spec, seed);
    for snr in spec.experiment.snr_sweep_db.iter().copied() {
        for kind in required_models(spec)? {
            let ckpt = kind.checkpoint(out, snr);
            let loss = kind.loss_file(out, snr);
            let resuming = resume && ckpt.exists();
            let mut curve = if resuming { read_loss(&loss)? } else { Vec::new() };
            let checkpoint = if resuming {
                resume_model(&mut session, &ckpt, kind, snr, &mut curve)?
            } else {
                match kind {
                    ModelKind::DrnStyle => {
                        let m = session.drn(snr)?;
                        curve.extend(&m.log.loss_curve);
                        m.to_checkpoint()
                    }
                    ModelKind::Mismatch(p) => {
                        let m = session.mismatch(snr, p)?;
                        curve.extend(&m.log.loss_curve);
                        m.to_checkpoint()
                    }
                }
            };
            checkpoint.save(&ckpt).map_err(checkpoint_error(&ckpt))?;
            write_loss_curve(&loss, &curve, 1)?;
            manifest.add(out, &ckpt)?;
            manifest.add(out, &loss)?;
        }
    }
    manifest.write(out)?;
    Ok(manifest)
}

fn resume_model(
    session: &mut Session,
    ckpt: &Path,
    kind: ModelKind,
    snr_db: f64,
    curve: &mut Vec<f64>,
) -> Result<Checkpoint> {
    let spec = session.spec.clone();
    match kind {
        ModelKind::DrnStyle => {
            let mut drn = load_drn(ckpt, session, snr_db)?;
            let tcfg = spec.training_config(session.seed.wrapping_add(drn.model.step));
            let obs = session.observed(snr_db)?;
            drn.log = continue_drn_style_training(&mut drn, &obs.train, &obs.schedule, &tcfg)?;
            info!("resumed {} for {} epochs", kind.stem(snr_db), drn.log.loss_curve.len());
            curve.extend(&drn.log.loss_curve);
            let ck = drn.to_checkpoint();
            session.insert_drn(snr_db, drn);
            Ok(ck)
        }
        ModelKind::Mismatch(p) => {
            let mut m = load_mismatch(ckpt, session, snr_db, p)?;
            let tcfg = spec.training_config(session.seed.wrapping_add(m.model.step));
            let obs = session.observed(snr_db)?;
            m.log = continue_mismatch_training(&mut m.model, &obs.train, &m.reference, &tcfg, Some(m.scaling))?;
            info!("resumed {} for {} epochs", kind.stem(snr_db), m.log.loss_curve.len());
            curve.extend(&m.log.loss_curve);
            let ck = m.to_checkpoint();
            session.insert_mismatch(snr_db, m);
            Ok(ck)
        }
    }
}

/// NMSE, SE and timing of every estimator at every sweep SNR.
pub fn sweep(spec: &ExperimentSpec, out: &Path, seed: u64) -> Result<Vec<ResultRow>> {
    let mut session = load_session(spec, out, seed)?;
    load_models(&mut session, out, true)?;
    let mut rows = Vec::new();
    for snr in spec.experiment.snr_sweep_db.iter().copied() {
        rows.extend(session.evaluate(snr, spec.timing.in_sweep)?);
    }
    let mut manifest = Manifest::new(SWEEP, spec, seed);
    let results = out.join(RESULTS_FILE);
    write_results(&results, &rows)?;
    manifest.add(out, &results)?;
    let nmse = out.join(NMSE_PLOT);
    write_gnuplot(&nmse, "mean NMSE versus pilot SNR (dB)", &rows, |r| r.mean_nmse)?;
    manifest.add(out, &nmse)?;
    let se = out.join(SE_PLOT);
    write_gnuplot(&se, "spectral efficiency (bit/s/Hz) versus pilot SNR (dB)", &rows, |r| {
        r.mean_se_bps_hz
    })?;
    manifest.add(out, &se)?;
    manifest.write(out)?;
    Ok(rows)
}

/// Reference-provenance and array-size ablation. Reuses generated data
/// and trained checkpoints when their manifests match, else starts fresh.
pub fn ablate(spec: &ExperimentSpec, out: &Path, seed: u64) -> Result<Vec<AblationRow>> {
    create_dir(out)?;
    let mut session = match load_session(spec, out, seed) {
        Ok(s) => s,
        Err(HarnessError::NotFound { .. }) | Err(HarnessError::Manifest(_)) => {
            info!("no matching dataset in {}, generating in memory", out.display());
            Session::generate(spec, seed)?
        }
        Err(e) => return Err(e),
    };
    match load_models(&mut session, out, false) {
        Ok(()) | Err(HarnessError::NotFound { .. }) | Err(HarnessError::Manifest(_)) => {}
        Err(e) => return Err(e),
    }
    let rows = session.ablation()?;
    let path = out.join(ABLATION_FILE);
    write_ablation(&path, &rows)?;
    let mut manifest = Manifest::new(ABLATE, spec, seed);
    manifest.add(out, &path)?;
    manifest.write(out)?;
    Ok(rows)
}

/// Complexity estimate of one estimate: an FFT-based LS despread, or the
/// network's multiply-adds counted as two operations.
pub fn flops(spec: &ExperimentSpec, method: Method) -> f64 {
    let m = spec.system.num_bs_antennas;
    let c = spec.system.num_irs_elements + 1;
    let ls = 5.0 * (m * c) as f64 * ((m * c) as f64).log2();
    match method {
        Method::Ls => ls,
        Method::DrnStyle => ls + spec.drn_architecture().flops_per_sample(m, c),
        Method::Mismatch => ModelArchitecture::proposed().flops_per_sample(m, c),
    }
}

pub fn params(spec: &ExperimentSpec, method: Method) -> usize {
    match method {
        Method::Ls => 0,
        Method::DrnStyle => spec.drn_architecture().num_params(),
        Method::Mismatch => ModelArchitecture::proposed().num_params(),
    }
}

/// Repeated single-CSI timing of every estimator at the first sweep SNR.
pub fn bench(spec: &ExperimentSpec, out: &Path, seed: u64) -> Result<Vec<TimingRow>> {
    let mut session = load_session(spec, out, seed)?;
    load_models(&mut session, out, true)?;
    let snr = spec.experiment.snr_sweep_db[0];
    let methods = spec.estimators()?;
    let mut rows = Vec::new();
    for run in 0..spec.timing.runs {
        for &method in &methods {
            let t = session.time_method(snr, method, spec.timing.trials, spec.timing.warmup)?;
            info!("run {run} {method}: {:.4} ms (sd {:.4})", t.mean_ms, t.std_ms);
            rows.push(TimingRow {
                run,
                method: method.name().into(),
                mean_ms: t.mean_ms,
                std_ms: t.std_ms,
                trials: t.trials,
                params: params(spec, method),
                flops: flops(spec, method),
            });
        }
    }
    let path = out.join(TIMING_FILE);
    write_timing(&path, &rows)?;
    let mut manifest = Manifest::new(BENCH, spec, seed);
    manifest.add(out, &path)?;
    manifest.write(out)?;
    Ok(rows)
}
