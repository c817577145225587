//! Experiment specifications.
//!
//! A spec file is TOML: a few top-level keys plus the sections `[system]`,
//! `[geometry]`, `[training]`, `[experiment]`, `[beamforming]`, `[timing]`
//! and `[ablation]`. Every key overrides the built-in scenario named by
//! `base` (default `desk`), so a file only lists what differs. Keys that
//! the base does not have are rejected.
//!
//! ```toml
//! scenario = "desk-high-rho"
//!
//! [system]
//! coherence_correlation = 0.9
//!
//! [experiment]
//! snr_sweep_db = [-5, 0, 5]
//! estimators = ["ls", "mismatch"]
//! ```

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use irs_core::channel::{db_to_linear, GainNormalization, GeometrySpec, Position};
use irs_core::estimation::{Provenance, TrainingConfig};
use irs_core::evaluation::BeamformerConfig;
use irs_core::nn::ModelArchitecture;
use irs_core::SystemConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{HarnessError, Result};

/// Estimators a spec can request.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Ls,
    DrnStyle,
    Mismatch,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Ls, Method::DrnStyle, Method::Mismatch];

    pub fn name(self) -> &'static str {
        match self {
            Method::Ls => "ls",
            Method::DrnStyle => "drn_style",
            Method::Mismatch => "mismatch",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| HarnessError::Validation(format!("unknown estimator `{s}` (expected ls, drn_style or mismatch)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSection {
    pub num_users: usize,
    pub num_bs_antennas: usize,
    pub num_irs_elements: usize,
    pub pilot_length: usize,
    /// 0 means N + 1, the only supported value.
    pub num_subframes: usize,
    pub symbol_power: f64,
    /// Default pilot SNR; sweeps and ablations override it.
    pub pilot_snr_db: f64,
    pub coherence_correlation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometrySection {
    pub bs_position: Position,
    pub irs_position: Position,
    /// Empty selects the default outdoor positions.
    pub user_positions: Vec<Position>,
    pub carrier_freq_hz: f64,
    pub rician_k_direct_db: f64,
    pub rician_k_irs_db: f64,
    pub pathloss_exponent_direct: f64,
    pub pathloss_exponent_irs: f64,
    pub shadowing_std_db: f64,
    /// `physical` or `mean_entry_power`.
    pub gain_normalization: String,
    pub normalized_entry_power: f64,
    pub random_los_phase: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub eta_threshold: f64,
    pub patience: usize,
    /// Middle-group repetitions of the DRN-style baseline.
    pub drn_depth: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub snr_sweep_db: Vec<f64>,
    /// Training instances per user.
    pub n_train: usize,
    /// Held-out test instances; each has one channel per user.
    pub n_test: usize,
    pub estimators: Vec<String>,
    pub reference_provenance: String,
    pub output_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BeamformingSection {
    pub power_budget: f64,
    pub max_rounds: usize,
    pub tol: f64,
    pub phase_levels: usize,
    pub shared_phases: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimingSection {
    /// Timed single-CSI estimates per measurement.
    pub trials: usize,
    pub warmup: usize,
    /// Repeated measurements by `bench`.
    pub runs: usize,
    /// Whether `sweep` fills `mean_time_ms`; otherwise the column is 0 and
    /// the results file is fully deterministic.
    pub in_sweep: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSection {
    pub snr_db: f64,
    pub provenances: Vec<String>,
    /// `[M, N]` pairs trained with an exact-CSI reference.
    pub sizes: Vec<[usize; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub scenario: String,
    /// Built-in scenario the file overrides.
    pub base: String,
    pub system: SystemSection,
    pub geometry: GeometrySection,
    pub training: TrainingSection,
    pub experiment: ExperimentSection,
    pub beamforming: BeamformingSection,
    pub timing: TimingSection,
    pub ablation: AblationSection,
}

fn invalid(msg: impl Into<String>) -> HarnessError {
    HarnessError::Validation(msg.into())
}

fn strings(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

impl ExperimentSpec {
    pub const BUILTINS: [&'static str; 3] = ["desk", "paper", "smoke"];

    /// K=2, M=4, N=8, L=2, 2000 training and 500 test instances, 30 epochs.
    pub fn desk() -> Self {
        let geo = GeometrySpec::outdoor(2);
        Self {
            scenario: "desk".into(),
            base: "desk".into(),
            system: SystemSection {
                num_users: 2,
                num_bs_antennas: 4,
                num_irs_elements: 8,
                pilot_length: 2,
                num_subframes: 0,
                symbol_power: 1.0,
                pilot_snr_db: 5.0,
                coherence_correlation: 0.4,
            },
            geometry: GeometrySection {
                bs_position: geo.bs_position,
                irs_position: geo.irs_position,
                user_positions: Vec::new(),
                carrier_freq_hz: geo.carrier_freq_hz,
                rician_k_direct_db: 3.0,
                rician_k_irs_db: 10.0,
                pathloss_exponent_direct: geo.pathloss_exponent_direct,
                pathloss_exponent_irs: geo.pathloss_exponent_irs,
                shadowing_std_db: geo.shadowing_std_db,
                gain_normalization: "mean_entry_power".into(),
                normalized_entry_power: 0.01,
                random_los_phase: geo.random_los_phase,
            },
            training: TrainingSection {
                learning_rate: 1e-4,
                batch_size: 128,
                max_epochs: 30,
                eta_threshold: 1e-4,
                patience: 3,
                drn_depth: 3,
            },
            experiment: ExperimentSection {
                snr_sweep_db: vec![-5.0, 0.0, 5.0, 10.0, 15.0],
                n_train: 2000,
                n_test: 500,
                estimators: strings(&["ls", "drn_style", "mismatch"]),
                reference_provenance: "ls".into(),
                output_dir: PathBuf::from("out/desk"),
            },
            beamforming: BeamformingSection {
                power_budget: 1.0,
                max_rounds: 20,
                tol: 1e-4,
                phase_levels: 32,
                shared_phases: false,
            },
            timing: TimingSection {
                trials: 1000,
                warmup: 100,
                runs: 5,
                in_sweep: true,
            },
            ablation: AblationSection {
                snr_db: 5.0,
                provenances: strings(&["exact", "ls", "drn_style"]),
                sizes: Vec::new(),
            },
        }
    }

    /// K=4, M=8, N=32 with 60k training and 20k test channels in total.
    pub fn paper() -> Self {
        let mut spec = Self::desk();
        spec.scenario = "paper".into();
        spec.base = "paper".into();
        spec.system.num_users = 4;
        spec.system.num_bs_antennas = 8;
        spec.system.num_irs_elements = 32;
        spec.system.pilot_length = 4;
        spec.experiment.n_train = 15000;
        spec.experiment.n_test = 5000;
        spec.experiment.output_dir = PathBuf::from("out/paper");
        spec.ablation.sizes = vec![[4, 16], [16, 16], [16, 32]];
        spec
    }

    /// Seconds-scale variant of `desk` for tests and quick checks.
    pub fn smoke() -> Self {
        let mut spec = Self::desk();
        spec.scenario = "smoke".into();
        spec.base = "smoke".into();
        spec.system.num_irs_elements = 4;
        spec.experiment.snr_sweep_db = vec![0.0, 10.0];
        spec.experiment.n_train = 64;
        spec.experiment.n_test = 8;
        spec.experiment.output_dir = PathBuf::from("out/smoke");
        spec.training.max_epochs = 3;
        spec.training.batch_size = 32;
        spec.training.learning_rate = 1e-3;
        spec.training.drn_depth = 2;
        spec.timing.trials = 100;
        spec.timing.warmup = 10;
        spec.timing.runs = 2;
        spec.ablation.snr_db = 10.0;
        spec
    }

    pub fn builtin(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            "smoke" => Ok(Self::smoke()),
            other => Err(invalid(format!(
                "unknown base scenario `{other}` (expected one of {})",
                Self::BUILTINS.join(", ")
            ))),
        }
    }

    /// Parses and validates spec text.
    pub fn parse(text: &str) -> Result<Self> {
        let overrides: toml::Table = text.parse().map_err(|e: toml::de::Error| invalid(e.to_string()))?;
        let base_name = match overrides.get("base") {
            None => "desk",
            Some(toml::Value::String(s)) => s.as_str(),
            Some(v) => return Err(invalid(format!("base: expected a string, found {}", v.type_str()))),
        };
        let mut base = toml::Table::try_from(Self::builtin(base_name)?).expect("built-in spec serializes");
        if !overrides.contains_key("scenario") {
            base.insert("scenario".into(), toml::Value::String(base_name.into()));
        }
        merge(&mut base, overrides, "")?;
        let spec: Self = toml::Value::Table(base)
            .try_into()
            .map_err(|e: toml::de::Error| invalid(e.message().to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => HarnessError::NotFound {
                what: "spec file",
                path: path.to_path_buf(),
            },
            _ => HarnessError::io(path)(e),
        })?;
        Self::parse(&text)
    }

    /// Full spec as TOML, every key included.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("spec serializes")
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("spec serializes");
        hex(&Sha256::digest(json))
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = self.system_config(self.system.pilot_snr_db, 0)?;
        self.geometry(&cfg)?;
        self.training_config(0).validate().map_err(|e| invalid(format!("training: {e}")))?;
        if self.training.drn_depth == 0 {
            return Err(invalid("training.drn_depth must be at least 1"));
        }
        let ex = &self.experiment;
        if ex.snr_sweep_db.is_empty() {
            return Err(invalid("experiment.snr_sweep_db must not be empty"));
        }
        if let Some(bad) = ex.snr_sweep_db.iter().find(|s| !s.is_finite()) {
            return Err(invalid(format!("experiment.snr_sweep_db contains {bad}")));
        }
        if ex.n_train == 0 {
            return Err(invalid("experiment.n_train must be at least 1"));
        }
        if ex.n_test == 0 {
            return Err(invalid("experiment.n_test must be at least 1"));
        }
        let methods = self.estimators()?;
        if methods.is_empty() {
            return Err(invalid("experiment.estimators must not be empty"));
        }
        self.reference_provenance()?;
        self.beamformer(1.0).validate().map_err(|e| invalid(format!("beamforming: {e}")))?;
        if self.timing.trials < 100 {
            return Err(invalid(format!("timing.trials must be at least 100, got {}", self.timing.trials)));
        }
        if self.timing.runs == 0 {
            return Err(invalid("timing.runs must be at least 1"));
        }
        if !self.ablation.snr_db.is_finite() {
            return Err(invalid("ablation.snr_db must be finite"));
        }
        self.ablation_provenances()?;
        for &[m, n] in &self.ablation.sizes {
            if m == 0 || n == 0 {
                return Err(invalid(format!("ablation.sizes entry [{m}, {n}] must be positive")));
            }
        }
        Ok(())
    }

    /// System parameters at a given pilot SNR.
    pub fn system_config(&self, snr_db: f64, seed: u64) -> Result<SystemConfig> {
        let s = &self.system;
        let n = s.num_irs_elements;
        if s.num_subframes != 0 && s.num_subframes != n + 1 {
            return Err(invalid(format!(
                "system.num_subframes must be 0 or num_irs_elements + 1 = {}, got {}",
                n + 1,
                s.num_subframes
            )));
        }
        if !snr_db.is_finite() {
            return Err(invalid(format!("pilot SNR must be finite, got {snr_db}")));
        }
        let cfg = SystemConfig {
            num_users: s.num_users,
            num_bs_antennas: s.num_bs_antennas,
            num_irs_elements: n,
            pilot_length: s.pilot_length,
            num_subframes: n + 1,
            symbol_power: s.symbol_power,
            noise_variance: s.symbol_power / db_to_linear(snr_db),
            pilot_snr_db: snr_db,
            coherence_correlation: s.coherence_correlation,
            rng_seed: seed,
        };
        cfg.validate().map_err(|e| invalid(format!("system: {e}")))?;
        Ok(cfg)
    }

    pub fn geometry(&self, cfg: &SystemConfig) -> Result<GeometrySpec> {
        let g = &self.geometry;
        let gain_normalization = match g.gain_normalization.as_str() {
            "physical" => GainNormalization::Physical,
            "mean_entry_power" => GainNormalization::MeanEntryPower(g.normalized_entry_power),
            other => {
                return Err(invalid(format!(
                    "geometry.gain_normalization: unknown value `{other}` (expected physical or mean_entry_power)"
                )))
            }
        };
        let user_positions = if g.user_positions.is_empty() {
            GeometrySpec::outdoor(cfg.num_users).user_positions
        } else {
            g.user_positions.clone()
        };
        let geo = GeometrySpec {
            bs_position: g.bs_position,
            irs_position: g.irs_position,
            user_positions,
            carrier_freq_hz: g.carrier_freq_hz,
            rician_k_direct: db_to_linear(g.rician_k_direct_db),
            rician_k_irs: db_to_linear(g.rician_k_irs_db),
            pathloss_exponent_direct: g.pathloss_exponent_direct,
            pathloss_exponent_irs: g.pathloss_exponent_irs,
            shadowing_std_db: g.shadowing_std_db,
            gain_normalization,
            random_los_phase: g.random_los_phase,
        };
        geo.validate(cfg).map_err(|e| invalid(format!("geometry: {e}")))?;
        Ok(geo)
    }

    pub fn training_config(&self, seed: u64) -> TrainingConfig {
        let t = &self.training;
        TrainingConfig {
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            max_epochs: t.max_epochs,
            eta_threshold: t.eta_threshold,
            patience: t.patience,
            seed,
        }
    }

    pub fn drn_architecture(&self) -> ModelArchitecture {
        ModelArchitecture::drn_style(self.training.drn_depth)
    }

    pub fn beamformer(&self, noise_variance: f64) -> BeamformerConfig {
        let b = &self.beamforming;
        BeamformerConfig {
            power_budget: b.power_budget,
            noise_variance,
            max_rounds: b.max_rounds,
            tol: b.tol,
            phase_levels: b.phase_levels,
            shared_phases: b.shared_phases,
        }
    }

    /// Requested estimators in canonical order, without duplicates.
    pub fn estimators(&self) -> Result<Vec<Method>> {
        let mut out: Vec<Method> = Vec::new();
        for name in &self.experiment.estimators {
            let m: Method = name.parse()?;
            if out.contains(&m) {
                return Err(invalid(format!("experiment.estimators lists `{name}` twice")));
            }
            out.push(m);
        }
        out.sort();
        Ok(out)
    }

    pub fn reference_provenance(&self) -> Result<Provenance> {
        parse_provenance(&self.experiment.reference_provenance, "experiment.reference_provenance")
    }

    pub fn ablation_provenances(&self) -> Result<Vec<Provenance>> {
        let mut out = Vec::new();
        for name in &self.ablation.provenances {
            let p = parse_provenance(name, "ablation.provenances")?;
            if out.contains(&p) {
                return Err(invalid(format!("ablation.provenances lists `{name}` twice")));
            }
            out.push(p);
        }
        if out.is_empty() && self.ablation.sizes.is_empty() {
            return Err(invalid("ablation needs at least one provenance or size"));
        }
        Ok(out)
    }

    /// Copy with a different array size, for the size ablation.
    pub fn with_size(&self, m: usize, n: usize) -> Self {
        let mut spec = self.clone();
        spec.system.num_bs_antennas = m;
        spec.system.num_irs_elements = n;
        spec.system.num_subframes = 0;
        spec
    }
}

fn parse_provenance(name: &str, key: &str) -> Result<Provenance> {
    name.parse::<Provenance>()
        .map_err(|_| invalid(format!("{key}: unknown provenance `{name}` (expected exact, ls or drn_style)")))
}

/// Overlays `over` onto `base`; every key must already exist in `base`.
fn merge(base: &mut toml::Table, over: toml::Table, path: &str) -> Result<()> {
    for (key, value) in over {
        let full = if path.is_empty() { key.clone() } else { format!("{path}.{key}") };
        match (base.get_mut(&key), value) {
            (None, _) => return Err(invalid(format!("unknown key `{full}`"))),
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o, &full)?,
            (Some(toml::Value::Table(_)), v) => {
                return Err(invalid(format!("`{full}` must be a section, found {}", v.type_str())))
            }
            (Some(toml::Value::Float(slot)), toml::Value::Integer(i)) => *slot = i as f64,
            (Some(slot), v) if slot.same_type(&v) => *slot = v,
            (Some(slot), v) => {
                return Err(invalid(format!(
                    "`{full}`: expected {}, found {}",
                    slot.type_str(),
                    v.type_str()
                )))
            }
        }
    }
    Ok(())
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_desk() {
        let spec = ExperimentSpec::parse("").unwrap();
        assert_eq!(spec, ExperimentSpec::desk());
    }

    #[test]
    fn builtins_validate() {
        for name in ExperimentSpec::BUILTINS {
            ExperimentSpec::builtin(name).unwrap().validate().unwrap();
        }
    }

    #[test]
    fn overrides_apply() {
        let spec = ExperimentSpec::parse(
            "scenario = \"x\"\n[system]\ncoherence_correlation = 0.9\n[experiment]\nsnr_sweep_db = [0.0]\nestimators = [\"mismatch\", \"ls\"]\n",
        )
        .unwrap();
        assert_eq!(spec.scenario, "x");
        assert_eq!(spec.system.coherence_correlation, 0.9);
        assert_eq!(spec.system.num_users, 2);
        assert_eq!(spec.estimators().unwrap(), vec![Method::Ls, Method::Mismatch]);
    }

    #[test]
    fn paper_base() {
        let spec = ExperimentSpec::parse("base = \"paper\"").unwrap();
        assert_eq!(spec.scenario, "paper");
        assert_eq!((spec.system.num_users, spec.system.num_bs_antennas, spec.system.num_irs_elements), (4, 8, 32));
    }

    #[test]
    fn unknown_keys_are_errors() {
        for text in ["[training]\nlerning_rate = 1.0", "colour = 1", "[nosuch]\na = 1"] {
            let err = ExperimentSpec::parse(text).unwrap_err();
            assert_eq!(err.exit_code(), 2);
            assert!(err.to_string().contains("unknown key"), "{err}");
        }
        let err = ExperimentSpec::parse("[training]\nlerning_rate = 1.0").unwrap_err();
        assert!(err.to_string().contains("training.lerning_rate"));
    }

    #[test]
    fn invalid_values_are_named() {
        let cases = [
            ("[experiment]\nn_train = 0", "n_train"),
            ("[experiment]\nn_test = 0", "n_test"),
            ("[experiment]\nsnr_sweep_db = []", "snr_sweep_db"),
            ("[experiment]\nestimators = []", "estimators"),
            ("[experiment]\nestimators = [\"cnn\"]", "cnn"),
            ("[experiment]\nreference_provenance = \"oracle\"", "oracle"),
            ("[ablation]\nprovenances = [\"oracle\"]", "oracle"),
            ("[system]\npilot_length = 1", "pilot"),
            ("[system]\nnum_subframes = 4", "num_subframes"),
            ("[geometry]\ngain_normalization = \"none\"", "gain_normalization"),
            ("[training]\nbatch_size = 1", "batch_size"),
            ("[timing]\ntrials = 10", "trials"),
            ("[system]\nnum_users = \"two\"", "num_users"),
        ];
        for (text, needle) in cases {
            let err = ExperimentSpec::parse(text).unwrap_err();
            assert_eq!(err.exit_code(), 2, "{text}");
            assert!(err.to_string().contains(needle), "{text}: {err}");
        }
    }

    #[test]
    fn noise_follows_snr() {
        let spec = ExperimentSpec::desk();
        let cfg = spec.system_config(-5.0, 3).unwrap();
        assert!((cfg.noise_variance - 10f64.powf(0.5)).abs() < 1e-12);
        assert_eq!(cfg.num_subframes, 9);
        assert_eq!(cfg.rng_seed, 3);
    }

    #[test]
    fn toml_round_trip_and_hash() {
        let spec = ExperimentSpec::paper();
        let back = ExperimentSpec::parse(&spec.to_toml()).unwrap();
        assert_eq!(back, spec);
        assert_eq!(back.hash(), spec.hash());
        assert_eq!(spec.hash().len(), 64);
        assert_ne!(ExperimentSpec::desk().hash(), spec.hash());
    }

    #[test]
    fn default_user_positions_follow_k() {
        let spec = ExperimentSpec::paper();
        let cfg = spec.system_config(0.0, 0).unwrap();
        assert_eq!(spec.geometry(&cfg).unwrap().user_positions.len(), 4);
    }
}
