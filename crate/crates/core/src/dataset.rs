//! Binary dataset files.
//!
//! Layout (all little-endian):
//!
//! ```text
//! magic      4 bytes   "IRSD" (channel states) or "IRSO" (observations)
//! version    u32
//! K, M, N    u32 each
//! n_samples  u32
//! samples    f64 (re, im) pairs, user-major, then sample-major, then row-major
//! references K matrices in the same layout
//! ```
//!
//! Every matrix is `M x (N + 1)`; observations have `C = N + 1` columns.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::binio::{Reader, Writer};
use crate::channel::{ChannelDataset, ChannelState, CoherentSequence};
use crate::cmat::CMatrix;
use crate::error::{Error, Result};
use crate::pilot::Observation;

pub const DATASET_VERSION: u32 = 1;
pub const CHANNEL_MAGIC: [u8; 4] = *b"IRSD";
pub const OBSERVATION_MAGIC: [u8; 4] = *b"IRSO";

/// Per-user sample matrices plus one reference matrix per user.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixSet {
    pub num_users: usize,
    pub m: usize,
    pub n: usize,
    /// `samples[k][t]`
    pub samples: Vec<Vec<CMatrix>>,
    pub references: Vec<CMatrix>,
}

impl MatrixSet {
    pub fn num_samples(&self) -> usize {
        self.samples.first().map_or(0, Vec::len)
    }

    fn check(&self) -> Result<()> {
        let shape = (self.m, self.n + 1);
        let n = self.num_samples();
        if self.samples.len() != self.num_users || self.references.len() != self.num_users {
            return Err(Error::Shape(format!(
                "expected {} users, found {} sequences and {} references",
                self.num_users,
                self.samples.len(),
                self.references.len()
            )));
        }
        for (k, seq) in self.samples.iter().enumerate() {
            if seq.len() != n {
                return Err(Error::Shape(format!("user {k} has {} samples, expected {n}", seq.len())));
            }
        }
        for mat in self.samples.iter().flatten().chain(&self.references) {
            if mat.shape() != shape {
                return Err(Error::Shape(format!("matrix {:?} in a {shape:?} dataset", mat.shape())));
            }
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, magic: [u8; 4], out: W) -> Result<W> {
        self.check()?;
        let mut w = Writer::new(out);
        w.bytes(&magic)?;
        w.u32(DATASET_VERSION)?;
        for v in [self.num_users, self.m, self.n, self.num_samples()] {
            w.u32(u32::try_from(v).map_err(|_| Error::Shape(format!("dimension {v} exceeds u32")))?)?;
        }
        for mat in self.samples.iter().flatten().chain(&self.references) {
            w.complexes(mat.as_slice())?;
        }
        w.finish()
    }

    pub fn read_from<R: Read>(magic: [u8; 4], input: R) -> Result<Self> {
        let mut r = Reader::new(input, "dataset");
        r.magic(magic)?;
        let version = r.u32()?;
        if version != DATASET_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                supported: DATASET_VERSION,
            });
        }
        let num_users = r.u32()? as usize;
        let m = r.u32()? as usize;
        let n = r.u32()? as usize;
        let n_samples = r.u32()? as usize;
        let entries = m * (n + 1);
        let read_matrix = |r: &mut Reader<R>| -> Result<CMatrix> {
            CMatrix::from_vec(m, n + 1, r.complexes(entries)?)
        };
        let mut samples = Vec::with_capacity(num_users);
        for _ in 0..num_users {
            let seq = (0..n_samples).map(|_| read_matrix(&mut r)).collect::<Result<Vec<_>>>()?;
            samples.push(seq);
        }
        let references = (0..num_users).map(|_| read_matrix(&mut r)).collect::<Result<Vec<_>>>()?;
        if !r.at_end()? {
            return Err(Error::Malformed {
                what: "dataset",
                detail: "trailing bytes after references".into(),
            });
        }
        Ok(Self {
            num_users,
            m,
            n,
            samples,
            references,
        })
    }

    pub fn save(&self, magic: [u8; 4], path: &Path) -> Result<()> {
        self.write_to(magic, BufWriter::new(File::create(path)?))?;
        Ok(())
    }

    pub fn load(magic: [u8; 4], path: &Path) -> Result<Self> {
        Self::read_from(magic, BufReader::new(File::open(path)?))
    }
}

impl From<&ChannelDataset> for MatrixSet {
    fn from(ds: &ChannelDataset) -> Self {
        let (m, cols) = ds.references.first().map_or((0, 1), |r| r.h.shape());
        MatrixSet {
            num_users: ds.num_users(),
            m,
            n: cols - 1,
            samples: ds
                .sequences
                .iter()
                .map(|s| s.states.iter().map(|st| st.h.clone()).collect())
                .collect(),
            references: ds.references.iter().map(|r| r.h.clone()).collect(),
        }
    }
}

impl MatrixSet {
    /// Reinterprets the set as channel states with the given AR coefficient.
    pub fn into_channels(self, rho: f64) -> ChannelDataset {
        let sequences = self
            .samples
            .into_iter()
            .enumerate()
            .map(|(k, seq)| CoherentSequence {
                states: seq.into_iter().map(|h| ChannelState { user: k, h }).collect(),
                rho,
            })
            .collect();
        let references = self
            .references
            .into_iter()
            .enumerate()
            .map(|(k, h)| ChannelState { user: k, h })
            .collect();
        ChannelDataset { sequences, references }
    }

    /// Observation samples per user (noise realizations are not stored).
    pub fn observations(&self) -> (Vec<Vec<Observation>>, Vec<Observation>) {
        let wrap = |k: usize, x: &CMatrix| Observation {
            user: k,
            x: x.clone(),
            noise: None,
        };
        let samples = self
            .samples
            .iter()
            .enumerate()
            .map(|(k, seq)| seq.iter().map(|x| wrap(k, x)).collect())
            .collect();
        let refs = self.references.iter().enumerate().map(|(k, x)| wrap(k, x)).collect();
        (samples, refs)
    }
}
