//! Bit-exact binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!   magic "XMRD" | version u32 | meta_len u64 | metadata JSON |
//!   array_count u64 | per array: name_len u64, name bytes,
//!   ndim u64, dims u64 each, then one u64 bit pattern per f64 element
//!   (row-major).
//!
//! Values persist as 64-bit floats regardless of the compute precision;
//! widening f32 -> f64 -> f32 is exact, so round-trips are bitwise at
//! either precision. Arrays live in a sorted map, so serialization order
//! is a function of content alone and identical states produce identical
//! bytes.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::cca::CcaModel;
use crate::error::{Error, Result};
use crate::nn::Encoder;
use crate::scalar::{cast, to_f64, Scalar};
use crate::text::EmbeddingTable;
use crate::train::{JointClassifier, JointModel, ModelArch};
use crate::util::atomic_write;

pub const MAGIC: [u8; 4] = *b"XMRD";
pub const FORMAT_VERSION: u32 = 1;

/// Provenance block carried by every checkpoint.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Hash of the run configuration that produced this state.
    pub config_hash: String,
    pub seed: u64,
    pub stage: u32,
    pub epoch: u32,
    /// Free-form string pairs (strategy id, arch digest, ...).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, String>,
}

/// Named f64 arrays plus metadata; the unit of persistence.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    arrays: BTreeMap<String, (Vec<usize>, Vec<f64>)>,
}

impl Checkpoint {
    pub fn new(meta: CheckpointMeta) -> Self {
        Checkpoint {
            meta,
            arrays: BTreeMap::new(),
        }
    }

    pub fn put_raw(&mut self, name: &str, shape: Vec<usize>, data: Vec<f64>) -> Result<()> {
        let elems: usize = shape.iter().product();
        if elems != data.len() {
            return Err(Error::Config {
                reason: format!(
                    "array {name:?}: shape {shape:?} holds {elems} elements, got {}",
                    data.len()
                ),
            });
        }
        if self.arrays.contains_key(name) {
            return Err(Error::Config {
                reason: format!("duplicate checkpoint array {name:?}"),
            });
        }
        self.arrays.insert(name.to_string(), (shape, data));
        Ok(())
    }

    pub fn put_matrix<F: Scalar>(&mut self, name: &str, m: &Array2<F>) -> Result<()> {
        let data: Vec<f64> = m.iter().map(|&v| to_f64(v)).collect();
        self.put_raw(name, vec![m.nrows(), m.ncols()], data)
    }

    pub fn put_vector<F: Scalar>(&mut self, name: &str, v: &Array1<F>) -> Result<()> {
        let data: Vec<f64> = v.iter().map(|&x| to_f64(x)).collect();
        self.put_raw(name, vec![v.len()], data)
    }

    pub fn put_scalar(&mut self, name: &str, value: f64) -> Result<()> {
        self.put_raw(name, vec![1], vec![value])
    }

    pub fn raw(&self, name: &str) -> Result<(&[usize], &[f64])> {
        self.arrays
            .get(name)
            .map(|(s, d)| (s.as_slice(), d.as_slice()))
            .ok_or_else(|| Error::CorruptCheckpoint {
                reason: format!("missing array {name:?}"),
            })
    }

    pub fn matrix<F: Scalar>(&self, name: &str) -> Result<Array2<F>> {
        let (shape, data) = self.raw(name)?;
        if shape.len() != 2 {
            return Err(Error::CorruptCheckpoint {
                reason: format!("array {name:?} has rank {}, expected a matrix", shape.len()),
            });
        }
        let data: Vec<F> = data.iter().map(|&v| cast::<F>(v)).collect();
        Array2::from_shape_vec((shape[0], shape[1]), data).map_err(|e| Error::CorruptCheckpoint {
            reason: format!("array {name:?}: {e}"),
        })
    }

    pub fn vector<F: Scalar>(&self, name: &str) -> Result<Array1<F>> {
        let (shape, data) = self.raw(name)?;
        if shape.len() != 1 {
            return Err(Error::CorruptCheckpoint {
                reason: format!("array {name:?} has rank {}, expected a vector", shape.len()),
            });
        }
        Ok(Array1::from_iter(data.iter().map(|&v| cast::<F>(v))))
    }

    pub fn scalar(&self, name: &str) -> Result<f64> {
        let (shape, data) = self.raw(name)?;
        if data.len() != 1 {
            return Err(Error::CorruptCheckpoint {
                reason: format!("array {name:?} has shape {shape:?}, expected one element"),
            });
        }
        Ok(data[0])
    }

    pub fn contains(&self, name: &str) -> bool {
        self.arrays.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.arrays.keys().map(|s| s.as_str())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let meta = serde_json::to_vec(&self.meta)?;
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.arrays.len() as u64).to_le_bytes());
        for (name, (shape, data)) in &self.arrays {
            out.extend_from_slice(&(name.len() as u64).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(shape.len() as u64).to_le_bytes());
            for &dim in shape {
                out.extend_from_slice(&(dim as u64).to_le_bytes());
            }
            for &v in data {
                out.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(Error::BadMagic);
        }
        let version = u32::from_le_bytes(r.take(4, "version")?.try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion { version });
        }
        let meta_len = r.length("metadata length")?;
        let meta_bytes = r.take(meta_len, "metadata")?;
        let meta: CheckpointMeta =
            serde_json::from_slice(meta_bytes).map_err(|e| Error::CorruptCheckpoint {
                reason: format!("metadata is not valid JSON: {e}"),
            })?;
        let count = r.length("array count")?;
        let mut arrays = BTreeMap::new();
        for _ in 0..count {
            let name_len = r.length("array name length")?;
            let name_bytes = r.take(name_len, "array name")?;
            let name = std::str::from_utf8(name_bytes)
                .map_err(|_| Error::CorruptCheckpoint {
                    reason: "array name is not UTF-8".into(),
                })?
                .to_string();
            let ndim = r.length("array rank")?;
            if ndim > 8 {
                return Err(Error::CorruptCheckpoint {
                    reason: format!("array {name:?} claims rank {ndim}"),
                });
            }
            let mut shape = Vec::with_capacity(ndim);
            let mut elems = 1usize;
            for _ in 0..ndim {
                let dim = r.length("array dimension")?;
                elems = elems.checked_mul(dim).ok_or_else(|| Error::CorruptCheckpoint {
                    reason: format!("array {name:?} overflows its element count"),
                })?;
                shape.push(dim);
            }
            let raw = r.take(
                elems.checked_mul(8).ok_or_else(|| Error::CorruptCheckpoint {
                    reason: format!("array {name:?} overflows its byte count"),
                })?,
                "array data",
            )?;
            let data: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().expect("8 bytes"))))
                .collect();
            if arrays.insert(name.clone(), (shape, data)).is_some() {
                return Err(Error::CorruptCheckpoint {
                    reason: format!("duplicate array {name:?}"),
                });
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::CorruptCheckpoint {
                reason: format!("{} trailing bytes after the array table", bytes.len() - r.pos),
            });
        }
        Ok(Checkpoint { meta, arrays })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let slice = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(slice)
            }
            None => Err(Error::CorruptCheckpoint {
                reason: format!("file ends at byte {} while reading {what}", self.bytes.len()),
            }),
        }
    }

    /// A u64 field that must fit in usize.
    fn length(&mut self, what: &str) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| Error::CorruptCheckpoint {
            reason: format!("{what} {v} exceeds the platform size"),
        })
    }
}

/// Stores all four parameter groups of a joint model.
pub fn store_joint_model<F: Scalar>(ck: &mut Checkpoint, model: &JointModel<F>) -> Result<()> {
    for (name, shape, data) in model.vision.export_arrays("vision/") {
        ck.put_raw(&name, shape, data)?;
    }
    for (name, shape, data) in model.language.export_arrays("language/") {
        ck.put_raw(&name, shape, data)?;
    }
    ck.put_matrix("embedding/table", model.embedding.table())?;
    ck.put_scalar(
        "embedding/trainable",
        if model.embedding.trainable() { 1.0 } else { 0.0 },
    )?;
    ck.put_matrix("classifier/w", model.classifier.weights())?;
    Ok(())
}

/// Rebuilds a joint model from a checkpoint, given the architecture the
/// checkpoint was trained under.
pub fn load_joint_model<F: Scalar>(ck: &Checkpoint, arch: &ModelArch) -> Result<JointModel<F>> {
    let all: Vec<(String, Vec<usize>, Vec<f64>)> = ck
        .arrays
        .iter()
        .map(|(n, (s, d))| (n.clone(), s.clone(), d.clone()))
        .collect();
    let mut vision = Encoder::vision(arch.vision_input, &arch.vision, 0)?;
    vision.import_arrays("vision/", &all)?;
    let mut language = Encoder::language(arch.l_max, arch.e_dim, &arch.language, 0)?;
    language.import_arrays("language/", &all)?;
    let embedding = EmbeddingTable::from_table(
        ck.matrix("embedding/table")?,
        ck.scalar("embedding/trainable")? != 0.0,
    )?;
    let classifier = JointClassifier::from_weights(ck.matrix("classifier/w")?)?;
    JointModel::new(vision, language, embedding, classifier)
}

pub fn store_cca_model<F: Scalar>(ck: &mut Checkpoint, model: &CcaModel<F>) -> Result<()> {
    ck.put_matrix("cca/wx", model.wx())?;
    ck.put_matrix("cca/wy", model.wy())?;
    ck.put_vector("cca/correlations", model.correlations())?;
    ck.put_vector("cca/mean_x", model.mean_x())?;
    ck.put_vector("cca/mean_y", model.mean_y())?;
    let (r_x, r_y) = model.regularization();
    ck.put_scalar("cca/r_x", to_f64(r_x))?;
    ck.put_scalar("cca/r_y", to_f64(r_y))?;
    Ok(())
}

pub fn load_cca_model<F: Scalar>(ck: &Checkpoint) -> Result<CcaModel<F>> {
    CcaModel::from_parts(
        ck.matrix("cca/wx")?,
        ck.matrix("cca/wy")?,
        ck.vector("cca/correlations")?,
        ck.vector("cca/mean_x")?,
        ck.vector("cca/mean_y")?,
        cast::<F>(ck.scalar("cca/r_x")?),
        cast::<F>(ck.scalar("cca/r_y")?),
    )
}

/// True when a checkpoint holds a CCA model (vs an encoder state).
pub fn has_cca_model(ck: &Checkpoint) -> bool {
    ck.contains("cca/wx")
}
