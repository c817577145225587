//! CSV and gnuplot writers.
//!
//! CSV files are UTF-8 with a header row and `,` delimiters; floats carry
//! six significant digits.

use std::io::Write;
use std::path::Path;

use serde::Deserialize;

use crate::error::{HarnessError, Result};

/// Six significant digits: plain decimals for moderate magnitudes,
/// scientific notation otherwise.
pub fn fmt_sig(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let sci = format!("{x:.5e}");
    let exp: i32 = sci[sci.find('e').expect("exponent") + 1..].parse().expect("integer exponent");
    if (-4..6).contains(&exp) {
        format!("{:.*}", (5 - exp) as usize, x)
    } else {
        sci
    }
}

/// One line of a sweep results file. Column order is fixed.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct ResultRow {
    pub snr_db: f64,
    pub method: String,
    pub mean_nmse: f64,
    pub mean_se_bps_hz: f64,
    pub mean_time_ms: f64,
    pub n_samples: usize,
    pub seed: u64,
}

pub const RESULT_COLUMNS: [&str; 7] = [
    "snr_db",
    "method",
    "mean_nmse",
    "mean_se_bps_hz",
    "mean_time_ms",
    "n_samples",
    "seed",
];

impl ResultRow {
    fn record(&self) -> Vec<String> {
        vec![
            fmt_sig(self.snr_db),
            self.method.clone(),
            fmt_sig(self.mean_nmse),
            fmt_sig(self.mean_se_bps_hz),
            fmt_sig(self.mean_time_ms),
            self.n_samples.to_string(),
            self.seed.to_string(),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct AblationRow {
    pub snr_db: f64,
    pub m: usize,
    pub n: usize,
    pub provenance: String,
    pub mean_nmse: f64,
    pub n_samples: usize,
    pub seed: u64,
}

pub const ABLATION_COLUMNS: [&str; 7] = ["snr_db", "m", "n", "provenance", "mean_nmse", "n_samples", "seed"];

impl AblationRow {
    fn record(&self) -> Vec<String> {
        vec![
            fmt_sig(self.snr_db),
            self.m.to_string(),
            self.n.to_string(),
            self.provenance.clone(),
            fmt_sig(self.mean_nmse),
            self.n_samples.to_string(),
            self.seed.to_string(),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct TimingRow {
    pub run: usize,
    pub method: String,
    pub mean_ms: f64,
    pub std_ms: f64,
    pub trials: usize,
    pub params: usize,
    pub flops: f64,
}

pub const TIMING_COLUMNS: [&str; 7] = ["run", "method", "mean_ms", "std_ms", "trials", "params", "flops"];

impl TimingRow {
    fn record(&self) -> Vec<String> {
        vec![
            self.run.to_string(),
            self.method.clone(),
            fmt_sig(self.mean_ms),
            fmt_sig(self.std_ms),
            self.trials.to_string(),
            self.params.to_string(),
            fmt_sig(self.flops),
        ]
    }
}

fn write_csv(path: &Path, header: &[&str], records: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in records {
        w.write_record(&r)?;
    }
    w.flush().map_err(HarnessError::io(path))?;
    Ok(())
}

pub fn write_results(path: &Path, rows: &[ResultRow]) -> Result<()> {
    write_csv(path, &RESULT_COLUMNS, rows.iter().map(ResultRow::record))
}

pub fn write_ablation(path: &Path, rows: &[AblationRow]) -> Result<()> {
    write_csv(path, &ABLATION_COLUMNS, rows.iter().map(AblationRow::record))
}

pub fn write_timing(path: &Path, rows: &[TimingRow]) -> Result<()> {
    write_csv(path, &TIMING_COLUMNS, rows.iter().map(TimingRow::record))
}

/// `epoch,mean_nmse`, epochs counted from `first_epoch`.
pub fn write_loss_curve(path: &Path, curve: &[f64], first_epoch: usize) -> Result<()> {
    let rows = curve
        .iter()
        .enumerate()
        .map(|(i, l)| vec![(first_epoch + i).to_string(), fmt_sig(*l)]);
    write_csv(path, &["epoch", "mean_nmse"], rows)
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Whitespace-separated table for gnuplot: one row per SNR, one column per
/// method, `NaN` where a method has no value.
pub fn write_gnuplot(path: &Path, title: &str, rows: &[ResultRow], value: impl Fn(&ResultRow) -> f64) -> Result<()> {
    let mut snrs: Vec<f64> = Vec::new();
    let mut methods: Vec<&str> = Vec::new();
    for r in rows {
        if !snrs.contains(&r.snr_db) {
            snrs.push(r.snr_db);
        }
        if !methods.contains(&r.method.as_str()) {
            methods.push(&r.method);
        }
    }
    let mut out = format!("# {title}\n# snr_db {}\n", methods.join(" "));
    for snr in &snrs {
        out.push_str(&fmt_sig(*snr));
        for m in &methods {
            let v = rows
                .iter()
                .find(|r| r.snr_db == *snr && r.method == *m)
                .map_or_else(|| "NaN".to_string(), |r| fmt_sig(value(r)));
            out.push(' ');
            out.push_str(&v);
        }
        out.push('\n');
    }
    let mut f = std::fs::File::create(path).map_err(HarnessError::io(path))?;
    f.write_all(out.as_bytes()).map_err(HarnessError::io(path))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn six_significant_digits() {
        assert_eq!(fmt_sig(0.0), "0");
        assert_eq!(fmt_sig(21.867412), "21.8674");
        assert_eq!(fmt_sig(-5.0), "-5.00000");
        assert_eq!(fmt_sig(0.000123456789), "0.000123457");
        assert_eq!(fmt_sig(1.23456789e-7), "1.23457e-7");
        assert_eq!(fmt_sig(123456789.0), "1.23457e8");
        assert_eq!(fmt_sig(9.9999996), "10.0000");
        assert_eq!(fmt_sig(999999.7), "1.00000e6");
        for x in [3.14159265, 1e-12, 42.0, 0.5, 7.777777e5] {
            let back: f64 = fmt_sig(x).parse().unwrap();
            assert!((back - x).abs() / x.abs() < 5e-6, "{x}");
        }
    }

    #[test]
    fn results_csv_schema() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        let rows = vec![ResultRow {
            snr_db: -5.0,
            method: "ls".into(),
            mean_nmse: 21.8674,
            mean_se_bps_hz: 0.25,
            mean_time_ms: 0.0011,
            n_samples: 500,
            seed: 0,
        }];
        write_results(&p, &rows).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(
            text,
            "snr_db,method,mean_nmse,mean_se_bps_hz,mean_time_ms,n_samples,seed\n-5.00000,ls,21.8674,0.250000,0.00110000,500,0\n"
        );
        let back: Vec<ResultRow> = read_csv(&p).unwrap();
        assert_eq!(back, rows);
    }

    #[test]
    fn gnuplot_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.dat");
        let row = |snr: f64, method: &str, nmse: f64| ResultRow {
            snr_db: snr,
            method: method.into(),
            mean_nmse: nmse,
            mean_se_bps_hz: 0.0,
            mean_time_ms: 0.0,
            n_samples: 1,
            seed: 0,
        };
        let rows = vec![row(0.0, "ls", 1.0), row(0.0, "mismatch", 0.5), row(5.0, "ls", 0.25)];
        write_gnuplot(&p, "nmse", &rows, |r| r.mean_nmse).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text, "# nmse\n# snr_db ls mismatch\n0 1.00000 0.500000\n5.00000 0.250000 NaN\n");
    }
}
