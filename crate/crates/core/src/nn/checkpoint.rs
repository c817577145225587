//! Model checkpoint file.
//!
//! ```text
//! magic            "IRSM"
//! version          u32
//! D                u32   middle-group repetitions
//! residual         u8
//! scaling          f64
//! num_blocks       u32
//! middle_per_rep   u32
//! width            u32
//! per convolution, in forward order:
//!     weights, bias, gamma, beta, running mean, running var
//!     each as u64 length + f32 values (batch-norm arrays are empty on
//!     output convolutions)
//! reference:
//!     provenance u8, K u32, then per user X_ref and H_ref, each as
//!     rows u32, cols u32, f64 (re, im) pairs row-major
//! optimizer:
//!     step u64, then per trainable parameter in order: m, v arrays
//! ```
//!
//! All integers and floats are little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::binio::{Reader, Writer};
use crate::cmat::CMatrix;
use crate::error::{Error, Result};

use super::{Model, ModelArchitecture};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"IRSM";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Reference pair stored alongside the weights.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredReference {
    pub provenance: u8,
    pub x_ref: Vec<CMatrix>,
    pub h_ref: Vec<CMatrix>,
}

/// Everything needed to run estimation from a file.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub scaling: f64,
    pub reference: StoredReference,
}

fn write_matrix<W: Write>(w: &mut Writer<W>, m: &CMatrix) -> Result<()> {
    w.u32(m.rows() as u32)?;
    w.u32(m.cols() as u32)?;
    w.complexes(m.as_slice())
}

fn read_matrix<R: Read>(r: &mut Reader<R>) -> Result<CMatrix> {
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    if rows.saturating_mul(cols) > 1 << 24 {
        return Err(Error::Malformed {
            what: "checkpoint",
            detail: format!("reference matrix of {rows}x{cols}"),
        });
    }
    CMatrix::from_vec(rows, cols, r.complexes(rows * cols)?)
}

impl Checkpoint {
    pub fn write_to<W: Write>(&self, out: W) -> Result<W> {
        let mut model = self.model.clone();
        let arch = *model.arch();
        let mut w = Writer::new(out);
        w.bytes(&CHECKPOINT_MAGIC)?;
        w.u32(CHECKPOINT_VERSION)?;
        w.u32(arch.middle_repeats as u32)?;
        w.u8(arch.residual_skip as u8)?;
        w.f64(self.scaling)?;
        w.u32(arch.num_blocks as u32)?;
        w.u32(arch.middle_per_repeat as u32)?;
        w.u32(arch.width as u32)?;
        for (conv, bn) in model.layers() {
            w.f32_array(&conv.weight.value)?;
            w.f32_array(&conv.bias.value)?;
            match bn {
                Some(bn) => {
                    w.f32_array(&bn.gamma.value)?;
                    w.f32_array(&bn.beta.value)?;
                    w.f32_array(&bn.running_mean)?;
                    w.f32_array(&bn.running_var)?;
                }
                None => {
                    for _ in 0..4 {
                        w.f32_array(&[])?;
                    }
                }
            }
        }
        let r = &self.reference;
        w.u8(r.provenance)?;
        w.u32(r.x_ref.len() as u32)?;
        for (x, h) in r.x_ref.iter().zip(&r.h_ref) {
            write_matrix(&mut w, x)?;
            write_matrix(&mut w, h)?;
        }
        w.u64(model.step)?;
        for (_, p) in model.named_params_mut() {
            w.f32_array(&p.m)?;
            w.f32_array(&p.v)?;
        }
        w.finish()
    }

    pub fn read_from<R: Read>(input: R) -> Result<Self> {
        let mut r = Reader::new(input, "checkpoint");
        r.magic(CHECKPOINT_MAGIC)?;
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                supported: CHECKPOINT_VERSION,
            });
        }
        let middle_repeats = r.u32()? as usize;
        let residual_skip = match r.u8()? {
            0 => false,
            1 => true,
            v => {
                return Err(Error::Malformed {
                    what: "checkpoint",
                    detail: format!("residual flag {v}"),
                })
            }
        };
        let scaling = r.f64()?;
        let arch = ModelArchitecture {
            num_blocks: r.u32()? as usize,
            middle_repeats,
            middle_per_repeat: r.u32()? as usize,
            width: r.u32()? as usize,
            residual_skip,
        };
        if arch.num_blocks * arch.layers_per_block() > 4096 || arch.width > 4096 {
            return Err(Error::Malformed {
                what: "checkpoint",
                detail: format!("implausible architecture {arch:?}"),
            });
        }
        let mut model = Model::<f32>::zeros(arch)?;
        let expect = |what: &str, got: Vec<f32>, len: usize| -> Result<Vec<f32>> {
            if got.len() != len {
                return Err(Error::Malformed {
                    what: "checkpoint",
                    detail: format!("{what} has {} values, expected {len}", got.len()),
                });
            }
            Ok(got)
        };
        for (conv, bn) in model.layers_mut() {
            let (wl, bl) = (conv.weight.len(), conv.bias.len());
            conv.weight.value = expect("weights", r.f32_array(wl)?, wl)?;
            conv.bias.value = expect("bias", r.f32_array(bl)?, bl)?;
            match bn {
                Some(bn) => {
                    let c = bn.channels();
                    bn.gamma.value = expect("gamma", r.f32_array(c)?, c)?;
                    bn.beta.value = expect("beta", r.f32_array(c)?, c)?;
                    bn.running_mean = expect("running mean", r.f32_array(c)?, c)?;
                    bn.running_var = expect("running var", r.f32_array(c)?, c)?;
                }
                None => {
                    for name in ["gamma", "beta", "running mean", "running var"] {
                        expect(name, r.f32_array(0)?, 0)?;
                    }
                }
            }
        }
        let provenance = r.u8()?;
        let users = r.u32()? as usize;
        if users > 1 << 16 {
            return Err(Error::Malformed {
                what: "checkpoint",
                detail: format!("{users} reference users"),
            });
        }
        let (mut x_ref, mut h_ref) = (Vec::with_capacity(users), Vec::with_capacity(users));
        for _ in 0..users {
            x_ref.push(read_matrix(&mut r)?);
            h_ref.push(read_matrix(&mut r)?);
        }
        model.step = r.u64()?;
        for (name, p) in model.named_params_mut() {
            let n = p.len();
            p.m = expect(&name, r.f32_array(n)?, n)?;
            p.v = expect(&name, r.f32_array(n)?, n)?;
        }
        if !r.at_end()? {
            return Err(Error::Malformed {
                what: "checkpoint",
                detail: "trailing bytes".into(),
            });
        }
        Ok(Self {
            model,
            scaling,
            reference: StoredReference {
                provenance,
                x_ref,
                h_ref,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{adam_step, AdamConfig, Tensor4};
    use crate::rng::ComplexGaussian;

    fn sample() -> Checkpoint {
        let arch = ModelArchitecture {
            num_blocks: 2,
            middle_repeats: 1,
            middle_per_repeat: 2,
            width: 4,
            residual_skip: true,
        };
        let mut model = Model::<f32>::new(arch, 5).unwrap();
        let mut rng = ComplexGaussian::new(2);
        let x = Tensor4::from_vec([3, 2, 3, 4], (0..72).map(|_| rng.standard_normal() as f32).collect()).unwrap();
        let out = model.forward_train(&x).unwrap();
        model.backward(&out);
        adam_step(&mut model, &AdamConfig::with_lr(1e-3)).unwrap();
        Checkpoint {
            model,
            scaling: 12.5,
            reference: StoredReference {
                provenance: 1,
                x_ref: vec![rng.matrix(3, 4), rng.matrix(3, 4)],
                h_ref: vec![rng.matrix(3, 4), rng.matrix(3, 4)],
            },
        }
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let ck = sample();
        let bytes = ck.write_to(Vec::new()).unwrap();
        let back = Checkpoint::read_from(bytes.as_slice()).unwrap();
        assert_eq!(back.scaling, ck.scaling);
        assert_eq!(back.reference, ck.reference);
        assert_eq!(back.model.step, 1);
        let x = Tensor4::filled([2, 2, 3, 4], 0.3f32);
        let a = ck.model.forward(&x).unwrap();
        let b = back.model.forward(&x).unwrap();
        assert!(a.as_slice().iter().zip(b.as_slice()).all(|(p, q)| p.to_bits() == q.to_bits()));
        // re-serializing yields the same bytes
        assert_eq!(back.write_to(Vec::new()).unwrap(), bytes);
    }

    #[test]
    fn header_prefix_layout() {
        let bytes = sample().write_to(Vec::new()).unwrap();
        assert_eq!(&bytes[..4], b"IRSM");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), CHECKPOINT_VERSION);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        assert_eq!(bytes[12], 1);
        assert_eq!(f64::from_le_bytes(bytes[13..21].try_into().unwrap()), 12.5);
    }

    #[test]
    fn truncated_file() {
        let bytes = sample().write_to(Vec::new()).unwrap();
        for cut in [3, 10, 100, bytes.len() - 1] {
            let err = Checkpoint::read_from(&bytes[..cut]).unwrap_err();
            assert!(err.to_string().contains("truncated checkpoint"), "{cut}: {err}");
        }
    }

    #[test]
    fn version_mismatch() {
        let mut bytes = sample().write_to(Vec::new()).unwrap();
        bytes[4..8].copy_from_slice(&7u32.to_le_bytes());
        let err = Checkpoint::read_from(bytes.as_slice()).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::VersionMismatch { found: 7, .. }));
        assert!(msg.contains('7') && msg.contains(&CHECKPOINT_VERSION.to_string()), "{msg}");
    }

    #[test]
    fn bad_magic() {
        let mut bytes = sample().write_to(Vec::new()).unwrap();
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::read_from(bytes.as_slice()), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.irsm");
        let ck = sample();
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.write_to(Vec::new()).unwrap(), ck.write_to(Vec::new()).unwrap());
    }
}
