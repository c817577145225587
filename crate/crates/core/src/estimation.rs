//! Least squares, the DRN-style denoiser and the mismatch estimator.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::channel::{ChannelState, CoherentSequence};
use crate::cmat::CMatrix;
use crate::config::SystemConfig;
use crate::error::{Error, Result};
use crate::nn::{adam_step, AdamConfig, Checkpoint, Model, ModelArchitecture, StoredReference, Tensor4};
use crate::pilot::{observe, PilotMatrix, ReflectionSchedule};
use crate::rng::ComplexGaussian;
use crate::Complex64;

/// `X P^H / C`.
pub fn estimate_ls(x: &CMatrix, schedule: &ReflectionSchedule) -> Result<CMatrix> {
    let c = schedule.num_subframes() as f64;
    Ok(x.matmul(&schedule.p.hermitian())?.scale_real(1.0 / c))
}

/// Stacks matrices into a `[B, 2, rows, cols]` tensor holding `s Re` and
/// `s Im`.
pub fn complex_to_tensor(mats: &[CMatrix], s: f64) -> Result<Tensor4<f32>> {
    let (rows, cols) = mats.first().map_or((0, 0), CMatrix::shape);
    let plane = rows * cols;
    let mut data = vec![0f32; mats.len() * 2 * plane];
    for (b, m) in mats.iter().enumerate() {
        if m.shape() != (rows, cols) {
            return Err(Error::DimensionMismatch {
                op: "complex_to_tensor",
                lhs: (rows, cols),
                rhs: m.shape(),
            });
        }
        let base = b * 2 * plane;
        for (i, z) in m.as_slice().iter().enumerate() {
            data[base + i] = (z.re * s) as f32;
            data[base + plane + i] = (z.im * s) as f32;
        }
    }
    Tensor4::from_vec([mats.len(), 2, rows, cols], data)
}

/// Inverse of [`complex_to_tensor`].
pub fn tensor_to_complex(t: &Tensor4<f32>, s: f64) -> Vec<CMatrix> {
    let [b, c, rows, cols] = t.dims();
    assert_eq!(c, 2, "expected real and imaginary channels");
    let plane = rows * cols;
    let data = t.as_slice();
    (0..b)
        .map(|k| {
            let base = k * 2 * plane;
            let v = (0..plane)
                .map(|i| Complex64::new(data[base + i] as f64 / s, data[base + plane + i] as f64 / s))
                .collect();
            CMatrix::from_vec(rows, cols, v).expect("plane size")
        })
        .collect()
}

/// `1 / mean |h|` over every entry of every matrix.
pub fn compute_scaling_constant<'a>(channels: impl IntoIterator<Item = &'a CMatrix>) -> Result<f64> {
    let (mut sum, mut count) = (0.0, 0usize);
    for h in channels {
        sum += h.as_slice().iter().map(|z| z.norm()).sum::<f64>();
        count += h.as_slice().len();
    }
    if count == 0 {
        return Err(Error::InvalidConfig("scaling constant of an empty dataset".into()));
    }
    if !(sum > 0.0) || !sum.is_finite() {
        return Err(Error::ZeroReference("dataset has no non-zero entries"));
    }
    Ok(count as f64 / sum)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Provenance {
    ExactCsi,
    Ls,
    DrnStyle,
}

impl Provenance {
    pub const ALL: [Provenance; 3] = [Provenance::ExactCsi, Provenance::Ls, Provenance::DrnStyle];

    pub fn code(self) -> u8 {
        match self {
            Provenance::ExactCsi => 0,
            Provenance::Ls => 1,
            Provenance::DrnStyle => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.code() == code)
            .ok_or_else(|| Error::Malformed {
                what: "checkpoint",
                detail: format!("provenance code {code}"),
            })
    }

    pub fn name(self) -> &'static str {
        match self {
            Provenance::ExactCsi => "exact",
            Provenance::Ls => "ls",
            Provenance::DrnStyle => "drn_style",
        }
    }
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Provenance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown reference provenance {s:?} (expected exact, ls or drn_style)")))
    }
}

/// Reference observation and channel per user.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferencePair {
    pub x_ref: Vec<CMatrix>,
    pub h_ref: Vec<CMatrix>,
    pub provenance: Provenance,
}

impl ReferencePair {
    pub fn new(x_ref: Vec<CMatrix>, h_ref: Vec<CMatrix>, provenance: Provenance) -> Result<Self> {
        if x_ref.len() != h_ref.len() || x_ref.is_empty() {
            return Err(Error::Shape(format!(
                "reference has {} observations and {} channels",
                x_ref.len(),
                h_ref.len()
            )));
        }
        for (x, h) in x_ref.iter().zip(&h_ref) {
            if x.shape() != x_ref[0].shape() || h.shape() != h_ref[0].shape() || x.rows() != h.rows() {
                return Err(Error::Shape(format!(
                    "inconsistent reference shapes {:?} and {:?}",
                    x.shape(),
                    h.shape()
                )));
            }
        }
        Ok(Self { x_ref, h_ref, provenance })
    }

    /// Uses the true reference channels.
    pub fn exact(x_ref: Vec<CMatrix>, h_true: Vec<CMatrix>) -> Result<Self> {
        Self::new(x_ref, h_true, Provenance::ExactCsi)
    }

    pub fn from_ls(x_ref: Vec<CMatrix>, schedule: &ReflectionSchedule) -> Result<Self> {
        let h = x_ref.iter().map(|x| estimate_ls(x, schedule)).collect::<Result<_>>()?;
        Self::new(x_ref, h, Provenance::Ls)
    }

    pub fn from_drn_style(x_ref: Vec<CMatrix>, drn: &DrnStyleModel, schedule: &ReflectionSchedule) -> Result<Self> {
        let h = x_ref
            .iter()
            .map(|x| estimate_drn_style(drn, x, schedule))
            .collect::<Result<_>>()?;
        Self::new(x_ref, h, Provenance::DrnStyle)
    }

    pub fn num_users(&self) -> usize {
        self.x_ref.len()
    }
}

/// One training example: a user's observation and true channel.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub user: usize,
    pub x: CMatrix,
    pub h: CMatrix,
}

/// Observes every time step of the per-user sequences jointly (all users
/// transmit their pilots in the same frames). Samples are time-major.
pub fn observe_samples(
    sequences: &[CoherentSequence],
    pilots: &PilotMatrix,
    schedule: &ReflectionSchedule,
    cfg: &SystemConfig,
    rng: &mut ComplexGaussian,
) -> Result<Vec<Sample>> {
    let len = sequences.first().map_or(0, |s| s.states.len());
    if sequences.iter().any(|s| s.states.len() != len) {
        return Err(Error::Shape("user sequences differ in length".into()));
    }
    let mut out = Vec::with_capacity(len * sequences.len());
    for t in 0..len {
        let states: Vec<ChannelState> = sequences.iter().map(|s| s.states[t].clone()).collect();
        for o in observe(&states, pilots, schedule, cfg, rng)? {
            out.push(Sample {
                user: o.user,
                h: states[o.user].h.clone(),
                x: o.x,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub eta_threshold: f64,
    pub patience: usize,
    /// Seeds weight initialization and batch shuffling.
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 128,
            max_epochs: 30,
            eta_threshold: 1e-4,
            patience: 3,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidConfig(format!("{what} must be positive")));
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad("learning_rate");
        }
        if self.batch_size < 2 {
            return Err(Error::InvalidConfig("batch_size must be at least 2 for batch normalization".into()));
        }
        if self.max_epochs == 0 {
            return bad("max_epochs");
        }
        if !(self.eta_threshold > 0.0) {
            return bad("eta_threshold");
        }
        if self.patience == 0 {
            return bad("patience");
        }
        Ok(())
    }
}

/// Outcome of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingLog {
    /// Epoch-average training NMSE.
    pub loss_curve: Vec<f64>,
    pub stopped_early: bool,
}

/// Regression data in network units: inputs, targets and per-sample loss
/// weights `1 / (s^2 ||H||^2)`.
struct Regression {
    inputs: Tensor4<f32>,
    targets: Tensor4<f32>,
    weights: Vec<f64>,
}

fn gather(t: &Tensor4<f32>, idx: &[usize]) -> Tensor4<f32> {
    let [_, c, h, w] = t.dims();
    let stride = c * h * w;
    let src = t.as_slice();
    let mut data = Vec::with_capacity(idx.len() * stride);
    for &i in idx {
        data.extend_from_slice(&src[i * stride..(i + 1) * stride]);
    }
    Tensor4::from_vec([idx.len(), c, h, w], data).expect("gathered size")
}

/// Batches of shuffled indices; a trailing batch of one joins its neighbour.
fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = Vec::new();
    let mut start = 0;
    while start < order.len() {
        let mut end = (start + size).min(order.len());
        if order.len() - end == 1 {
            end += 1;
        }
        out.push(&order[start..end]);
        start = end;
    }
    out
}

fn fit(model: &mut Model<f32>, data: &Regression, tcfg: &TrainingConfig) -> Result<TrainingLog> {
    tcfg.validate()?;
    let n = data.weights.len();
    if n < 2 {
        return Err(Error::InvalidConfig("training needs at least 2 samples".into()));
    }
    let adam = AdamConfig::with_lr(tcfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed ^ 0x5eed_0f_ba7c4);
    let mut order: Vec<usize> = (0..n).collect();
    let mut loss_curve = Vec::new();
    let mut calm_epochs = 0;
    let mut previous = f64::INFINITY;
    for epoch in 0..tcfg.max_epochs {
        order.shuffle(&mut rng);
        let (mut total, mut count) = (0.0, 0usize);
        for (bi, idx) in batches(&order, tcfg.batch_size).into_iter().enumerate() {
            let x = gather(&data.inputs, idx);
            let t = gather(&data.targets, idx);
            model.zero_grad();
            let out = model.forward_train(&x)?;
            let stride = out.as_slice().len() / idx.len();
            let b = idx.len() as f64;
            let mut grad = out.clone();
            let mut batch_loss = 0.0;
            for (j, &i) in idx.iter().enumerate() {
                let w = data.weights[i];
                let range = j * stride..(j + 1) * stride;
                let mut err = 0.0;
                for ((g, o), tv) in grad.as_mut_slice()[range.clone()]
                    .iter_mut()
                    .zip(&out.as_slice()[range.clone()])
                    .zip(&t.as_slice()[range])
                {
                    let d = (*o - *tv) as f64;
                    err += d * d;
                    *g = (2.0 * w * d / b) as f32;
                }
                batch_loss += w * err;
            }
            if !batch_loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: bi });
            }
            total += batch_loss;
            count += idx.len();
            model.backward(&grad);
            adam_step(model, &adam)?;
        }
        let f = total / count as f64;
        loss_curve.push(f);
        let improvement = if f > 0.0 { (previous - f) / f } else { 0.0 };
        if improvement <= tcfg.eta_threshold {
            calm_epochs += 1;
            if calm_epochs >= tcfg.patience {
                let stopped_early = epoch + 1 < tcfg.max_epochs;
                return Ok(TrainingLog { loss_curve, stopped_early });
            }
        } else {
            calm_epochs = 0;
        }
        previous = f;
    }
    Ok(TrainingLog {
        loss_curve,
        stopped_early: false,
    })
}

fn loss_weights(samples: &[Sample], s: f64) -> Result<Vec<f64>> {
    samples
        .iter()
        .map(|smp| {
            let p = smp.h.frobenius_norm_sqr();
            if p == 0.0 {
                Err(Error::ZeroReference("training channel is all zero"))
            } else {
                Ok(1.0 / (s * s * p))
            }
        })
        .collect()
}

fn check_samples(samples: &[Sample], x_shape: (usize, usize), h_shape: (usize, usize)) -> Result<()> {
    if x_shape != h_shape {
        return Err(Error::Shape(format!(
            "observation {x_shape:?} and channel {h_shape:?} must share a plane for the CNN"
        )));
    }
    for smp in samples {
        if smp.x.shape() != x_shape || smp.h.shape() != h_shape {
            return Err(Error::DimensionMismatch {
                op: "training sample",
                lhs: x_shape,
                rhs: smp.x.shape(),
            });
        }
    }
    Ok(())
}

/// Trained mismatch estimator: `H = H_ref + f(s (X - X_ref)) / s`.
#[derive(Debug, Clone, PartialEq)]
pub struct MismatchModel {
    pub model: Model<f32>,
    pub reference: ReferencePair,
    pub scaling: f64,
    pub log: TrainingLog,
}

/// Offline training on samples pooled over users.
pub fn train_mismatch_model(
    samples: &[Sample],
    reference: &ReferencePair,
    arch: ModelArchitecture,
    tcfg: &TrainingConfig,
) -> Result<MismatchModel> {
    let mut model = Model::new(arch, tcfg.seed)?;
    let log = continue_mismatch_training(&mut model, samples, reference, tcfg, None)?;
    let scaling = compute_scaling_constant(samples.iter().map(|s| &s.h))?;
    Ok(MismatchModel {
        model,
        reference: reference.clone(),
        scaling,
        log,
    })
}

/// Trains `model` further, e.g. after loading a checkpoint. `scaling` is
/// recomputed from the samples unless given.
pub fn continue_mismatch_training(
    model: &mut Model<f32>,
    samples: &[Sample],
    reference: &ReferencePair,
    tcfg: &TrainingConfig,
    scaling: Option<f64>,
) -> Result<TrainingLog> {
    if samples.is_empty() {
        return Err(Error::InvalidConfig("no training samples".into()));
    }
    check_samples(samples, reference.x_ref[0].shape(), reference.h_ref[0].shape())?;
    let s = match scaling {
        Some(s) => s,
        None => compute_scaling_constant(samples.iter().map(|s| &s.h))?,
    };
    let mut inputs = Vec::with_capacity(samples.len());
    let mut targets = Vec::with_capacity(samples.len());
    for smp in samples {
        let k = smp.user;
        if k >= reference.num_users() {
            return Err(Error::Shape(format!("sample of user {k} but reference has {}", reference.num_users())));
        }
        inputs.push(smp.x.sub(&reference.x_ref[k])?);
        targets.push(smp.h.sub(&reference.h_ref[k])?);
    }
    let data = Regression {
        inputs: complex_to_tensor(&inputs, s)?,
        targets: complex_to_tensor(&targets, s)?,
        weights: loss_weights(samples, s)?,
    };
    fit(model, &data, tcfg)
}

/// Online estimate for one user's observation.
pub fn estimate_mismatch(model: &MismatchModel, user: usize, x: &CMatrix) -> Result<CMatrix> {
    Ok(estimate_mismatch_batch(model, &[(user, x.clone())])?.remove(0))
}

/// Batched [`estimate_mismatch`]; results match single calls exactly.
pub fn estimate_mismatch_batch(model: &MismatchModel, inputs: &[(usize, CMatrix)]) -> Result<Vec<CMatrix>> {
    let r = &model.reference;
    let mut diffs = Vec::with_capacity(inputs.len());
    for (k, x) in inputs {
        let x_ref = r
            .x_ref
            .get(*k)
            .ok_or_else(|| Error::Shape(format!("user {k} has no reference")))?;
        if x.shape() != x_ref.shape() {
            return Err(Error::DimensionMismatch {
                op: "estimate_mismatch",
                lhs: x_ref.shape(),
                rhs: x.shape(),
            });
        }
        diffs.push(x.sub(x_ref)?);
    }
    if diffs.is_empty() {
        return Ok(Vec::new());
    }
    let out = model.model.forward(&complex_to_tensor(&diffs, model.scaling)?)?;
    tensor_to_complex(&out, model.scaling)
        .into_iter()
        .zip(inputs)
        .map(|(d, (k, _))| r.h_ref[*k].add(&d))
        .collect()
}

impl MismatchModel {
    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            scaling: self.scaling,
            reference: StoredReference {
                provenance: self.reference.provenance.code(),
                x_ref: self.reference.x_ref.clone(),
                h_ref: self.reference.h_ref.clone(),
            },
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        ck.model.arch().validate()?;
        let provenance = Provenance::from_code(ck.reference.provenance)?;
        let reference = ReferencePair::new(ck.reference.x_ref, ck.reference.h_ref, provenance)?;
        Ok(Self {
            model: ck.model,
            reference,
            scaling: ck.scaling,
            log: TrainingLog {
                loss_curve: Vec::new(),
                stopped_early: false,
            },
        })
    }
}

/// Provenance byte of checkpoints that hold a DRN-style denoiser, which has
/// no reference pair.
pub const DRN_CHECKPOINT_CODE: u8 = 0xff;

/// Residual CNN that denoises the LS estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct DrnStyleModel {
    pub model: Model<f32>,
    pub scaling: f64,
    pub log: TrainingLog,
}

/// Trains the DRN-style denoiser on pooled `(LS(X), H)` pairs.
pub fn train_drn_style(
    samples: &[Sample],
    schedule: &ReflectionSchedule,
    arch: ModelArchitecture,
    tcfg: &TrainingConfig,
) -> Result<DrnStyleModel> {
    if samples.is_empty() {
        return Err(Error::InvalidConfig("no training samples".into()));
    }
    let scaling = compute_scaling_constant(samples.iter().map(|s| &s.h))?;
    let mut drn = DrnStyleModel {
        model: Model::new(arch, tcfg.seed)?,
        scaling,
        log: TrainingLog {
            loss_curve: Vec::new(),
            stopped_early: false,
        },
    };
    drn.log = continue_drn_style_training(&mut drn, samples, schedule, tcfg)?;
    Ok(drn)
}

/// Trains a DRN-style model further with its stored scaling constant.
pub fn continue_drn_style_training(
    drn: &mut DrnStyleModel,
    samples: &[Sample],
    schedule: &ReflectionSchedule,
    tcfg: &TrainingConfig,
) -> Result<TrainingLog> {
    let first = samples
        .first()
        .ok_or_else(|| Error::InvalidConfig("no training samples".into()))?;
    let h_shape = first.h.shape();
    let ls: Vec<CMatrix> = samples
        .iter()
        .map(|s| estimate_ls(&s.x, schedule))
        .collect::<Result<_>>()?;
    for (l, smp) in ls.iter().zip(samples) {
        if l.shape() != h_shape || smp.h.shape() != h_shape {
            return Err(Error::DimensionMismatch {
                op: "train_drn_style",
                lhs: h_shape,
                rhs: smp.h.shape(),
            });
        }
    }
    let s = drn.scaling;
    let targets: Vec<CMatrix> = samples.iter().map(|s| s.h.clone()).collect();
    let data = Regression {
        inputs: complex_to_tensor(&ls, s)?,
        targets: complex_to_tensor(&targets, s)?,
        weights: loss_weights(samples, s)?,
    };
    fit(&mut drn.model, &data, tcfg)
}

/// `f_DRN(X P^H / C)`.
pub fn estimate_drn_style(model: &DrnStyleModel, x: &CMatrix, schedule: &ReflectionSchedule) -> Result<CMatrix> {
    Ok(estimate_drn_style_batch(model, std::slice::from_ref(x), schedule)?.remove(0))
}

pub fn estimate_drn_style_batch(
    model: &DrnStyleModel,
    xs: &[CMatrix],
    schedule: &ReflectionSchedule,
) -> Result<Vec<CMatrix>> {
    if xs.is_empty() {
        return Ok(Vec::new());
    }
    let ls: Vec<CMatrix> = xs.iter().map(|x| estimate_ls(x, schedule)).collect::<Result<_>>()?;
    let out = model.model.forward(&complex_to_tensor(&ls, model.scaling)?)?;
    Ok(tensor_to_complex(&out, model.scaling))
}

impl DrnStyleModel {
    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            scaling: self.scaling,
            reference: StoredReference {
                provenance: DRN_CHECKPOINT_CODE,
                x_ref: Vec::new(),
                h_ref: Vec::new(),
            },
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        ck.model.arch().validate()?;
        if ck.reference.provenance != DRN_CHECKPOINT_CODE {
            return Err(Error::Malformed {
                what: "checkpoint",
                detail: "not a DRN-style checkpoint".into(),
            });
        }
        Ok(Self {
            model: ck.model,
            scaling: ck.scaling,
            log: TrainingLog {
                loss_curve: Vec::new(),
                stopped_early: false,
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{make_dataset, GeometrySpec};
    use crate::pilot::{make_pilots, make_schedule};

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn small_arch() -> ModelArchitecture {
        ModelArchitecture {
            num_blocks: 1,
            middle_repeats: 1,
            middle_per_repeat: 1,
            width: 8,
            residual_skip: false,
        }
    }

    #[test]
    fn ls_two_by_two() {
        let x = CMatrix::from_rows(&[vec![c(5.0, 0.0), c(-1.0, 0.0)]]);
        let p = CMatrix::from_rows(&[vec![c(1.0, 0.0), c(1.0, 0.0)], vec![c(1.0, 0.0), c(-1.0, 0.0)]]);
        let h = estimate_ls(&x, &ReflectionSchedule { p }).unwrap();
        assert!((h[(0, 0)] - c(2.0, 0.0)).norm() < 1e-15);
        assert!((h[(0, 1)] - c(3.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn ls_noise_only_power() {
        // H = 0: E||Z P^H / C||^2 = M sigma^2 / (P_t L)
        let cfg = SystemConfig::from_snr(2, 4, 8, 2, 0.0, 0.0, 0).unwrap();
        let pilots = make_pilots(&cfg).unwrap();
        let schedule = make_schedule(&cfg).unwrap();
        let zero = |k| crate::channel::ChannelState {
            user: k,
            h: CMatrix::zeros(4, 9),
        };
        let mut rng = ComplexGaussian::new(8);
        let trials = 2000;
        let mut acc = 0.0;
        for _ in 0..trials {
            let obs = observe(&[zero(0), zero(1)], &pilots, &schedule, &cfg, &mut rng).unwrap();
            acc += estimate_ls(&obs[0].x, &schedule).unwrap().frobenius_norm_sqr();
        }
        let expected = 4.0 * cfg.noise_variance / (cfg.symbol_power * 2.0);
        let mean = acc / trials as f64;
        assert!((mean / expected - 1.0).abs() < 0.1, "{mean} vs {expected}");
    }

    #[test]
    fn tensor_examples() {
        let m = CMatrix::from_rows(&[vec![c(1.0, 2.0)]]);
        assert_eq!(complex_to_tensor(&[m], 1.0).unwrap().as_slice(), &[1.0, 2.0]);
        let m = CMatrix::from_rows(&[vec![c(0.3, -0.4)]]);
        let t = complex_to_tensor(&[m], 10.0).unwrap();
        assert!((t.as_slice()[0] - 3.0).abs() < 1e-6 && (t.as_slice()[1] + 4.0).abs() < 1e-6);
    }

    #[test]
    fn tensor_round_trip() {
        let mut rng = ComplexGaussian::new(3);
        let mats: Vec<CMatrix> = (0..5).map(|_| rng.matrix(4, 9)).collect();
        for s in [1.0, 11.3, 1e4] {
            let back = tensor_to_complex(&complex_to_tensor(&mats, s).unwrap(), s);
            for (a, b) in mats.iter().zip(&back) {
                for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
                    assert!((x - y).norm() / x.norm().max(1e-12) < 1e-6);
                }
            }
        }
    }

    #[test]
    fn scaling_constant_examples() {
        let tiny = CMatrix::from_fn(2, 3, |_, _| c(1e-4, 0.0));
        assert!((compute_scaling_constant([&tiny]).unwrap() - 1e4).abs() < 1e-6);
        let unit = CMatrix::from_fn(2, 2, |r, _| if r == 0 { c(0.0, 1.0) } else { c(-1.0, 0.0) });
        assert_eq!(compute_scaling_constant([&unit]).unwrap(), 1.0);
        let mixed = CMatrix::from_rows(&[vec![c(0.01, 0.0), c(0.0, 0.03), c(0.03, 0.04), c(-0.0, -0.0)]]);
        // mean of 0.01, 0.03, 0.05, 0
        assert!((compute_scaling_constant([&mixed]).unwrap() - 1.0 / 0.0225).abs() < 1e-9);
        let avg02 = CMatrix::from_rows(&[vec![c(0.01, 0.0), c(0.03, 0.0)]]);
        assert!((compute_scaling_constant([&avg02]).unwrap() - 50.0).abs() < 1e-9);
        assert!(compute_scaling_constant([&CMatrix::zeros(2, 2)]).is_err());
        assert!(compute_scaling_constant(std::iter::empty()).is_err());
    }

    #[test]
    fn provenance_names() {
        for p in Provenance::ALL {
            assert_eq!(p.name().parse::<Provenance>().unwrap(), p);
            assert_eq!(Provenance::from_code(p.code()).unwrap(), p);
        }
        assert!("dnn".parse::<Provenance>().is_err());
    }

    #[test]
    fn batching_never_leaves_singletons() {
        let order: Vec<usize> = (0..129).collect();
        let b = batches(&order, 128);
        assert_eq!(b.len(), 1);
        assert_eq!(b[0].len(), 129);
        let order: Vec<usize> = (0..130).collect();
        assert_eq!(batches(&order, 128).iter().map(|b| b.len()).collect::<Vec<_>>(), vec![128, 2]);
    }

    fn constant_problem(n: usize) -> (Vec<Sample>, ReferencePair) {
        let mut rng = ComplexGaussian::new(21);
        let x_ref = vec![rng.matrix(3, 4), rng.matrix(3, 4)];
        let h_ref = vec![rng.matrix(3, 4), rng.matrix(3, 4)];
        let samples = (0..n)
            .map(|i| Sample {
                user: i % 2,
                x: x_ref[i % 2].clone(),
                h: h_ref[i % 2].clone(),
            })
            .collect();
        (samples, ReferencePair::exact(x_ref, h_ref).unwrap())
    }

    #[test]
    fn infinite_threshold_stops_after_patience() {
        let (samples, reference) = constant_problem(16);
        let tcfg = TrainingConfig {
            eta_threshold: f64::INFINITY,
            patience: 3,
            max_epochs: 10,
            batch_size: 8,
            ..TrainingConfig::default()
        };
        let m = train_mismatch_model(&samples, &reference, small_arch(), &tcfg).unwrap();
        assert_eq!(m.log.loss_curve.len(), 3);
        assert!(m.log.stopped_early);
    }

    #[test]
    fn constant_target_learns_zero_mismatch() {
        let (samples, reference) = constant_problem(64);
        let tcfg = TrainingConfig {
            learning_rate: 1e-2,
            max_epochs: 200,
            batch_size: 16,
            eta_threshold: 1e-12,
            ..TrainingConfig::default()
        };
        let m = train_mismatch_model(&samples, &reference, small_arch(), &tcfg).unwrap();
        let last = *m.log.loss_curve.last().unwrap();
        assert!(last < 1e-3, "final train NMSE {last}");
        // X = X_ref gives H_ref + f(0)
        for k in 0..2 {
            let h = estimate_mismatch(&m, k, &reference.x_ref[k]).unwrap();
            let rel = h.sub(&reference.h_ref[k]).unwrap().frobenius_norm() / reference.h_ref[k].frobenius_norm();
            assert!(rel < 1e-2, "user {k}: {rel}");
        }
    }

    #[test]
    fn zero_mismatch_identity_is_structural() {
        let (samples, reference) = constant_problem(4);
        let model = Model::<f32>::new(small_arch(), 4).unwrap();
        let mm = MismatchModel {
            model: model.clone(),
            reference: reference.clone(),
            scaling: compute_scaling_constant(samples.iter().map(|s| &s.h)).unwrap(),
            log: TrainingLog {
                loss_curve: vec![],
                stopped_early: false,
            },
        };
        let f0 = model.forward(&Tensor4::zeros([1, 2, 3, 4])).unwrap();
        let f0 = tensor_to_complex(&f0, mm.scaling).remove(0);
        for k in 0..2 {
            let h = estimate_mismatch(&mm, k, &reference.x_ref[k]).unwrap();
            assert_eq!(h, reference.h_ref[k].add(&f0).unwrap());
            assert_eq!(h, estimate_mismatch(&mm, k, &reference.x_ref[k]).unwrap());
        }
    }

    #[test]
    fn batched_estimates_match_single() {
        let (_, reference) = constant_problem(2);
        let mm = MismatchModel {
            model: Model::new(small_arch(), 1).unwrap(),
            reference,
            scaling: 3.0,
            log: TrainingLog {
                loss_curve: vec![],
                stopped_early: false,
            },
        };
        let mut rng = ComplexGaussian::new(2);
        let inputs: Vec<(usize, CMatrix)> = (0..5).map(|i| (i % 2, rng.matrix(3, 4))).collect();
        let batch = estimate_mismatch_batch(&mm, &inputs).unwrap();
        for ((k, x), b) in inputs.iter().zip(&batch) {
            assert_eq!(&estimate_mismatch(&mm, *k, x).unwrap(), b);
        }
        assert!(estimate_mismatch(&mm, 0, &rng.matrix(3, 5)).is_err());
        assert!(estimate_mismatch(&mm, 2, &rng.matrix(3, 4)).is_err());
    }

    #[test]
    fn non_finite_loss_reports_position() {
        let (mut samples, reference) = constant_problem(8);
        samples[3].h[(0, 0)] = c(f64::NAN, 0.0);
        let tcfg = TrainingConfig {
            batch_size: 4,
            ..TrainingConfig::default()
        };
        let mut model = Model::new(small_arch(), 0).unwrap();
        let err = continue_mismatch_training(&mut model, &samples, &reference, &tcfg, Some(1.0)).unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss { epoch: 0, .. }), "{err}");
    }

    #[test]
    fn checkpoint_round_trip_keeps_scaling_and_reference() {
        let (samples, reference) = constant_problem(8);
        let tcfg = TrainingConfig {
            max_epochs: 2,
            batch_size: 4,
            ..TrainingConfig::default()
        };
        let m = train_mismatch_model(&samples, &reference, small_arch(), &tcfg).unwrap();
        let bytes = m.to_checkpoint().write_to(Vec::new()).unwrap();
        let back = MismatchModel::from_checkpoint(Checkpoint::read_from(bytes.as_slice()).unwrap()).unwrap();
        assert_eq!(back.scaling, m.scaling);
        assert_eq!(back.reference, m.reference);
        let x = &samples[1].x;
        assert_eq!(estimate_mismatch(&back, 1, x).unwrap(), estimate_mismatch(&m, 1, x).unwrap());
        assert!(DrnStyleModel::from_checkpoint(m.to_checkpoint()).is_err());
    }

    #[test]
    fn smoke_training_makes_progress() {
        let cfg = SystemConfig::from_snr(2, 4, 8, 2, 5.0, 0.4, 0).unwrap();
        let mut rng = ComplexGaussian::new(30);
        let (_, ds) = make_dataset(&cfg, &GeometrySpec::outdoor(2), 200, &mut rng).unwrap();
        let pilots = make_pilots(&cfg).unwrap();
        let schedule = make_schedule(&cfg).unwrap();
        let refs: Vec<_> = ds.references.clone();
        let x_ref: Vec<CMatrix> = observe(&refs, &pilots, &schedule, &cfg, &mut rng)
            .unwrap()
            .into_iter()
            .map(|o| o.x)
            .collect();
        let samples = observe_samples(&ds.sequences, &pilots, &schedule, &cfg, &mut rng).unwrap();
        assert_eq!(samples.len(), 400);
        assert_eq!((samples[0].user, samples[1].user), (0, 1));
        let reference = ReferencePair::from_ls(x_ref, &schedule).unwrap();
        let tcfg = TrainingConfig {
            max_epochs: 10,
            batch_size: 32,
            learning_rate: 1e-3,
            ..TrainingConfig::default()
        };
        let arch = ModelArchitecture {
            width: 16,
            ..ModelArchitecture::proposed()
        };
        let m = train_mismatch_model(&samples, &reference, arch, &tcfg).unwrap();
        let curve = &m.log.loss_curve;
        assert!(curve.last().unwrap() < &curve[0], "{curve:?}");
    }

    #[test]
    fn drn_style_resume_continues_step_counter() {
        let (samples, _) = constant_problem(8);
        let schedule = ReflectionSchedule {
            p: CMatrix::identity(samples[0].x.cols()),
        };
        let tcfg = TrainingConfig {
            max_epochs: 2,
            batch_size: 4,
            ..TrainingConfig::default()
        };
        let mut drn = train_drn_style(&samples, &schedule, small_arch(), &tcfg).unwrap();
        let steps = drn.model.step;
        assert_eq!(steps, 4);
        let log = continue_drn_style_training(&mut drn, &samples, &schedule, &tcfg).unwrap();
        assert_eq!(log.loss_curve.len(), 2);
        assert_eq!(drn.model.step, 2 * steps);
    }
}
