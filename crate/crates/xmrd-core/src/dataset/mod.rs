//! Domain data model, JSON-lines ingestion with validation, and grouping
//! indexes shared by protocol construction, training, and evaluation.

mod protocol;
mod synth;

pub use protocol::{build_protocol, ProtocolMode, ProtocolReport, RetrievalProtocol, Shot};
pub use synth::{
    attribute_word, decode_sentence_latent, generate_attributes, generate_synthetic, level_center,
    parse_attribute_word, quantize_level, SyntheticSpec,
};

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sample modality.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Vision,
    Text,
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Modality::Vision => write!(f, "vision"),
            Modality::Text => write!(f, "text"),
        }
    }
}

/// Raw sample payload: a numeric vector for vision, a sentence for text.
#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Vision(Vec<f64>),
    Text(String),
}

/// One observation of one identity in one modality.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub sample_id: String,
    /// Dense class label assigned at ingestion, contiguous in `0..I`.
    pub identity: u32,
    pub modality: Modality,
    pub view_id: i64,
    pub payload: Payload,
}

/// Dataset role; training splits are validated more strictly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// A validated collection of samples with dense identity labels.
///
/// Labels run `0..identity_count()` in order of first appearance; the
/// original identifiers stay available through [`Dataset::identity_name`].
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    split: Split,
    samples: Vec<Sample>,
    identity_names: Vec<String>,
}

impl Dataset {
    /// Assembles a dataset from pre-labelled samples, re-checking the model
    /// invariants (unique ids, label contiguity, payload consistency).
    pub fn from_parts(split: Split, samples: Vec<Sample>, identity_names: Vec<String>) -> Result<Self> {
        let ds = Dataset {
            split,
            samples,
            identity_names,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn split(&self) -> Split {
        self.split
    }

    /// Partitions the dataset into a training split holding the first
    /// `train_identities` labels and a test split holding the rest.
    ///
    /// Test labels are re-based to `0..` while keeping their original names,
    /// so the two halves share a feature distribution but no identities.
    pub fn partition_identities(&self, train_identities: usize) -> Result<(Dataset, Dataset)> {
        let total = self.identity_names.len();
        if train_identities == 0 || train_identities >= total {
            return Err(Error::Config {
                reason: format!(
                    "cannot hold out {} of {total} identities for training",
                    train_identities
                ),
            });
        }
        let boundary = train_identities as u32;
        let mut train = Vec::new();
        let mut test = Vec::new();
        for s in &self.samples {
            if s.identity < boundary {
                train.push(s.clone());
            } else {
                let mut s = s.clone();
                s.identity -= boundary;
                test.push(s);
            }
        }
        let (train_names, test_names) = self.identity_names.split_at(train_identities);
        Ok((
            Dataset::from_parts(Split::Train, train, train_names.to_vec())?,
            Dataset::from_parts(Split::Test, test, test_names.to_vec())?,
        ))
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn identity_count(&self) -> usize {
        self.identity_names.len()
    }

    /// Original identifier behind a dense label.
    pub fn identity_name(&self, label: u32) -> &str {
        &self.identity_names[label as usize]
    }

    pub fn identity_names(&self) -> &[String] {
        self.identity_names.as_slice()
    }

    /// Shared dimensionality of vision payloads, if any vision sample exists.
    pub fn vision_dim(&self) -> Option<usize> {
        self.samples.iter().find_map(|s| match &s.payload {
            Payload::Vision(v) => Some(v.len()),
            Payload::Text(_) => None,
        })
    }

    pub fn sample_by_id(&self, sample_id: &str) -> Option<&Sample> {
        self.samples.iter().find(|s| s.sample_id == sample_id)
    }

    fn validate(&self) -> Result<()> {
        let mut seen = HashMap::with_capacity(self.samples.len());
        let mut vision_dim = None;
        for s in &self.samples {
            if seen.insert(s.sample_id.as_str(), ()).is_some() {
                return Err(Error::DuplicateSampleId {
                    sample_id: s.sample_id.clone(),
                });
            }
            if s.identity as usize >= self.identity_names.len() {
                return Err(Error::LabelOutOfRange {
                    label: s.identity,
                    classes: self.identity_names.len(),
                });
            }
            match &s.payload {
                Payload::Vision(v) => match vision_dim {
                    None => vision_dim = Some(v.len()),
                    Some(d) if d != v.len() => {
                        return Err(Error::ShapeMismatch {
                            context: format!("vision payload of {:?}", s.sample_id),
                            expected: d.to_string(),
                            actual: v.len().to_string(),
                        })
                    }
                    Some(_) => {}
                },
                Payload::Text(t) => {
                    if t.trim().is_empty() {
                        return Err(Error::EmptySentence {
                            sample_id: s.sample_id.clone(),
                        });
                    }
                }
            }
        }
        if self.split == Split::Train {
            check_modality_coverage(self)?;
        }
        Ok(())
    }
}

/// Outcome summary of an ingestion run.
#[derive(Debug, Clone, Serialize)]
pub struct IngestReport {
    pub samples: usize,
    pub vision_samples: usize,
    pub text_samples: usize,
    pub identities: usize,
    pub vision_dim: Option<usize>,
    /// Original identifier for each dense label, in label order.
    pub identity_mapping: Vec<String>,
    pub warnings: Vec<String>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RawIdentity {
    Int(i64),
    Str(String),
}

impl RawIdentity {
    fn canonical(self) -> String {
        match self {
            RawIdentity::Int(v) => v.to_string(),
            RawIdentity::Str(s) => s,
        }
    }
}

#[derive(Deserialize)]
struct RawRecord {
    sample_id: String,
    identity_id: RawIdentity,
    modality: Modality,
    view_id: i64,
    payload: serde_json::Value,
}

/// Reads a JSON-lines dataset file.
///
/// Relative binary vision payload paths resolve against the file's directory.
pub fn ingest_dataset(path: &Path, split: Split) -> Result<(Dataset, IngestReport)> {
    let file = std::fs::File::open(path)?;
    ingest_dataset_reader(BufReader::new(file), split, path.parent())
}

/// Reader-based ingestion; `base_dir` anchors binary payload paths.
pub fn ingest_dataset_reader<R: BufRead>(
    reader: R,
    split: Split,
    base_dir: Option<&Path>,
) -> Result<(Dataset, IngestReport)> {
    let mut samples = Vec::new();
    let mut identity_names: Vec<String> = Vec::new();
    let mut label_of: HashMap<String, u32> = HashMap::new();
    let mut seen_ids: HashMap<String, ()> = HashMap::new();
    let mut vision_dim: Option<usize> = None;

    for (line_no, line) in reader.lines().enumerate() {
        let line_no = line_no + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(&line).map_err(|e| Error::MalformedRecord {
            line: line_no,
            reason: e.to_string(),
        })?;
        if seen_ids.insert(raw.sample_id.clone(), ()).is_some() {
            return Err(Error::DuplicateSampleId {
                sample_id: raw.sample_id,
            });
        }
        let payload = decode_payload(&raw, base_dir, line_no)?;
        if let Payload::Vision(v) = &payload {
            match vision_dim {
                None => vision_dim = Some(v.len()),
                Some(d) if d != v.len() => {
                    return Err(Error::ShapeMismatch {
                        context: format!("vision payload of {:?} at line {line_no}", raw.sample_id),
                        expected: d.to_string(),
                        actual: v.len().to_string(),
                    })
                }
                Some(_) => {}
            }
        }
        let original = raw.identity_id.canonical();
        let label = match label_of.get(&original) {
            Some(&l) => l,
            None => {
                let l = identity_names.len() as u32;
                identity_names.push(original.clone());
                label_of.insert(original, l);
                l
            }
        };
        samples.push(Sample {
            sample_id: raw.sample_id,
            identity: label,
            modality: raw.modality,
            view_id: raw.view_id,
            payload,
        });
    }

    let dataset = Dataset {
        split,
        samples,
        identity_names,
    };
    let mut warnings = Vec::new();
    if split == Split::Train {
        check_modality_coverage(&dataset)?;
    } else {
        warnings.extend(modality_coverage_warnings(&dataset));
    }
    let report = IngestReport {
        samples: dataset.samples.len(),
        vision_samples: dataset
            .samples
            .iter()
            .filter(|s| s.modality == Modality::Vision)
            .count(),
        text_samples: dataset
            .samples
            .iter()
            .filter(|s| s.modality == Modality::Text)
            .count(),
        identities: dataset.identity_count(),
        vision_dim: dataset.vision_dim(),
        identity_mapping: dataset.identity_names.clone(),
        warnings,
    };
    Ok((dataset, report))
}

fn decode_payload(raw: &RawRecord, base_dir: Option<&Path>, line_no: usize) -> Result<Payload> {
    let malformed = |reason: String| Error::MalformedRecord {
        line: line_no,
        reason,
    };
    match raw.modality {
        Modality::Text => match &raw.payload {
            serde_json::Value::String(s) => {
                if s.trim().is_empty() {
                    Err(Error::EmptySentence {
                        sample_id: raw.sample_id.clone(),
                    })
                } else {
                    Ok(Payload::Text(s.clone()))
                }
            }
            _ => Err(malformed("text payload must be a string".into())),
        },
        Modality::Vision => match &raw.payload {
            serde_json::Value::Array(items) => {
                let mut v = Vec::with_capacity(items.len());
                for item in items {
                    let x = item
                        .as_f64()
                        .ok_or_else(|| malformed("vision payload entries must be numbers".into()))?;
                    v.push(x);
                }
                Ok(Payload::Vision(v))
            }
            serde_json::Value::String(rel) => {
                let base = base_dir.ok_or_else(|| {
                    malformed("binary vision payload needs a dataset directory".into())
                })?;
                let bytes = std::fs::read(base.join(rel))
                    .map_err(|e| malformed(format!("cannot read binary payload {rel:?}: {e}")))?;
                if bytes.len() % 8 != 0 {
                    return Err(malformed(format!(
                        "binary payload {rel:?} length {} is not a multiple of 8",
                        bytes.len()
                    )));
                }
                let mut v = Vec::with_capacity(bytes.len() / 8);
                for chunk in bytes.chunks_exact(8) {
                    let x = f64::from_le_bytes(chunk.try_into().expect("chunk of 8"));
                    if !x.is_finite() {
                        return Err(malformed(format!("non-finite value in binary payload {rel:?}")));
                    }
                    v.push(x);
                }
                Ok(Payload::Vision(v))
            }
            _ => Err(malformed(
                "vision payload must be a number array or a binary file path".into(),
            )),
        },
    }
}

fn per_identity_modality_counts(ds: &Dataset) -> Vec<[usize; 2]> {
    let mut counts = vec![[0usize; 2]; ds.identity_count()];
    for s in &ds.samples {
        let m = match s.modality {
            Modality::Vision => 0,
            Modality::Text => 1,
        };
        counts[s.identity as usize][m] += 1;
    }
    counts
}

fn check_modality_coverage(ds: &Dataset) -> Result<()> {
    for (label, c) in per_identity_modality_counts(ds).iter().enumerate() {
        let missing = if c[0] == 0 {
            Some(Modality::Vision)
        } else if c[1] == 0 {
            Some(Modality::Text)
        } else {
            None
        };
        if let Some(modality) = missing {
            return Err(Error::MissingModality {
                identity: ds.identity_names[label].clone(),
                modality,
            });
        }
    }
    Ok(())
}

fn modality_coverage_warnings(ds: &Dataset) -> Vec<String> {
    let mut warnings = Vec::new();
    for (label, c) in per_identity_modality_counts(ds).iter().enumerate() {
        if c[0] == 0 {
            warnings.push(format!(
                "identity {:?} has no vision samples",
                ds.identity_names[label]
            ));
        }
        if c[1] == 0 {
            warnings.push(format!(
                "identity {:?} has no text samples",
                ds.identity_names[label]
            ));
        }
    }
    warnings
}

#[derive(Serialize)]
struct SerRecord<'a> {
    sample_id: &'a str,
    identity_id: &'a str,
    modality: Modality,
    view_id: i64,
    payload: serde_json::Value,
}

/// Serializes a dataset back to the JSON-lines format with inline payloads.
/// Ingesting the output reproduces the same data model.
pub fn serialize_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    write_dataset(ds, &mut out)?;
    crate::util::atomic_write(path, &out)
}

/// Writer-based form of [`serialize_dataset`].
pub fn write_dataset<W: Write>(ds: &Dataset, mut writer: W) -> Result<()> {
    for s in &ds.samples {
        let payload = match &s.payload {
            Payload::Vision(v) => serde_json::to_value(v)?,
            Payload::Text(t) => serde_json::Value::String(t.clone()),
        };
        let record = SerRecord {
            sample_id: &s.sample_id,
            identity_id: ds.identity_name(s.identity),
            modality: s.modality,
            view_id: s.view_id,
            payload,
        };
        serde_json::to_writer(&mut writer, &record)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

/// Per-view sample positions for one identity, split by modality.
/// Indices point into `Dataset::samples`; each list is ordered by sample_id.
#[derive(Debug, Clone, Default)]
pub struct ViewSamples {
    pub vision: Vec<usize>,
    pub text: Vec<usize>,
}

/// Identity/view grouping of a dataset with the image-description
/// association used by training, protocols, and evaluation.
#[derive(Debug, Clone)]
pub struct DatasetIndex {
    groups: BTreeMap<u32, BTreeMap<i64, ViewSamples>>,
}

impl DatasetIndex {
    pub fn build(ds: &Dataset) -> Self {
        let mut groups: BTreeMap<u32, BTreeMap<i64, ViewSamples>> = BTreeMap::new();
        for (idx, s) in ds.samples().iter().enumerate() {
            let view = groups.entry(s.identity).or_default().entry(s.view_id).or_default();
            match s.modality {
                Modality::Vision => view.vision.push(idx),
                Modality::Text => view.text.push(idx),
            }
        }
        for views in groups.values_mut() {
            for view in views.values_mut() {
                view.vision.sort_by(|&a, &b| ds.samples()[a].sample_id.cmp(&ds.samples()[b].sample_id));
                view.text.sort_by(|&a, &b| ds.samples()[a].sample_id.cmp(&ds.samples()[b].sample_id));
            }
        }
        DatasetIndex { groups }
    }

    pub fn identities(&self) -> impl Iterator<Item = u32> + '_ {
        self.groups.keys().copied()
    }

    pub fn views(&self, identity: u32) -> Option<&BTreeMap<i64, ViewSamples>> {
        self.groups.get(&identity)
    }

    /// Text samples associated with a vision sample: within one
    /// (identity, view) group, description j belongs to image j mod n_images.
    pub fn associated_texts(&self, ds: &Dataset, vision_idx: usize) -> Vec<usize> {
        let s = &ds.samples()[vision_idx];
        let Some(view) = self.groups.get(&s.identity).and_then(|v| v.get(&s.view_id)) else {
            return Vec::new();
        };
        let Some(pos) = view.vision.iter().position(|&i| i == vision_idx) else {
            return Vec::new();
        };
        let n = view.vision.len();
        view.text
            .iter()
            .enumerate()
            .filter(|(j, _)| j % n == pos)
            .map(|(_, &t)| t)
            .collect()
    }

    /// All text sample positions of one identity, across views.
    pub fn identity_texts(&self, identity: u32) -> Vec<usize> {
        self.groups
            .get(&identity)
            .map(|views| views.values().flat_map(|v| v.text.iter().copied()).collect())
            .unwrap_or_default()
    }
}
