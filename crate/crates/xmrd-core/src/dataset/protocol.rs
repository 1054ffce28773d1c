//! Retrieval protocol construction: seeded single-shot gallery selection
//! with across-pose or within-pose query assignment.

use std::collections::HashSet;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, DatasetIndex, Split};
use crate::error::{Error, Result};
use crate::rng::substream;

/// Pose relation between the gallery and query sides.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolMode {
    /// Queries come only from views the identity does not expose in the
    /// gallery; identities with a single view are discarded.
    AcrossPose,
    /// Queries come from the same view as the identity's gallery samples.
    WithinPose,
}

impl FromStr for ProtocolMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "across_pose" => Ok(ProtocolMode::AcrossPose),
            "within_pose" => Ok(ProtocolMode::WithinPose),
            other => Err(Error::Config {
                reason: format!("unknown protocol mode {other:?}, expected across_pose or within_pose"),
            }),
        }
    }
}

impl std::fmt::Display for ProtocolMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ProtocolMode::AcrossPose => write!(f, "across_pose"),
            ProtocolMode::WithinPose => write!(f, "within_pose"),
        }
    }
}

/// Gallery cardinality rule. Only single-shot is defined: one vision gallery
/// sample per identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shot {
    SingleShot,
}

/// Disjoint gallery/query sample-id lists for one evaluation run.
///
/// The gallery holds, per retained identity, one seeded vision sample plus
/// the descriptions associated with it; scenario assembly derives text-side
/// gallery features from those descriptions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalProtocol {
    pub gallery: Vec<String>,
    pub query: Vec<String>,
    pub mode: ProtocolMode,
    pub shot: Shot,
    pub seed: u64,
}

/// Identities that could not enter the protocol, by original identifier.
#[derive(Debug, Clone, Serialize)]
pub struct ProtocolReport {
    pub retained: usize,
    pub discarded_identities: Vec<String>,
}

impl RetrievalProtocol {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        crate::util::atomic_write(path, &bytes)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    /// Re-checks the protocol invariants against a dataset: side disjointness,
    /// the across-pose view split, and the single-shot gallery constraint.
    pub fn check(&self, ds: &Dataset) -> Result<()> {
        let gallery: HashSet<&str> = self.gallery.iter().map(|s| s.as_str()).collect();
        for q in &self.query {
            if gallery.contains(q.as_str()) {
                return Err(Error::Config {
                    reason: format!("sample {q:?} appears on both protocol sides"),
                });
            }
        }
        let mut gallery_pairs = HashSet::new();
        let mut vision_per_identity: std::collections::BTreeMap<u32, usize> = Default::default();
        for id in &self.gallery {
            let s = ds.sample_by_id(id).ok_or_else(|| Error::Config {
                reason: format!("gallery sample {id:?} not in dataset"),
            })?;
            gallery_pairs.insert((s.identity, s.view_id));
            if s.modality == crate::dataset::Modality::Vision {
                *vision_per_identity.entry(s.identity).or_default() += 1;
            }
        }
        if self.mode == ProtocolMode::AcrossPose {
            for id in &self.query {
                let s = ds.sample_by_id(id).ok_or_else(|| Error::Config {
                    reason: format!("query sample {id:?} not in dataset"),
                })?;
                if gallery_pairs.contains(&(s.identity, s.view_id)) {
                    return Err(Error::Config {
                        reason: format!(
                            "identity {} view {} appears on both sides of an across_pose protocol",
                            ds.identity_name(s.identity),
                            s.view_id
                        ),
                    });
                }
            }
        }
        for (&identity, &n) in &vision_per_identity {
            if n != 1 {
                return Err(Error::Config {
                    reason: format!(
                        "identity {} holds {n} vision gallery samples, single_shot demands 1",
                        ds.identity_name(identity)
                    ),
                });
            }
        }
        Ok(())
    }
}

/// Builds a seeded single-shot protocol over a test split.
///
/// Per identity the gallery view is drawn uniformly among views that contain
/// a vision sample, then one vision sample is drawn within it. Across-pose
/// queries are all samples of the identity's other views; within-pose queries
/// are the remaining samples of the gallery view itself. Identities without a
/// usable gallery (and, across poses, identities with a single view) are
/// discarded and reported.
pub fn build_protocol(
    ds: &Dataset,
    mode: ProtocolMode,
    seed: u64,
) -> Result<(RetrievalProtocol, ProtocolReport)> {
    if ds.split() != Split::Test {
        return Err(Error::Config {
            reason: "retrieval protocols are built on test splits".into(),
        });
    }
    let index = DatasetIndex::build(ds);
    let mut rng = substream(seed, "protocol");
    let mut gallery = Vec::new();
    let mut query = Vec::new();
    let mut discarded = Vec::new();
    let mut retained = 0usize;

    for identity in index.identities() {
        let views = index.views(identity).expect("identity came from the index");
        let vision_views: Vec<i64> = views
            .iter()
            .filter(|(_, v)| !v.vision.is_empty())
            .map(|(&view_id, _)| view_id)
            .collect();
        let eligible = !vision_views.is_empty()
            && (mode == ProtocolMode::WithinPose || views.len() >= 2);
        if !eligible {
            discarded.push(ds.identity_name(identity).to_string());
            continue;
        }
        retained += 1;
        let gallery_view = vision_views[rng.random_range(0..vision_views.len())];
        let view = &views[&gallery_view];
        let gallery_vision = view.vision[rng.random_range(0..view.vision.len())];
        let gallery_texts = index.associated_texts(ds, gallery_vision);
        gallery.push(ds.samples()[gallery_vision].sample_id.clone());
        for &t in &gallery_texts {
            gallery.push(ds.samples()[t].sample_id.clone());
        }
        match mode {
            ProtocolMode::AcrossPose => {
                for (&view_id, v) in views {
                    if view_id == gallery_view {
                        continue;
                    }
                    for &i in v.vision.iter().chain(v.text.iter()) {
                        query.push(ds.samples()[i].sample_id.clone());
                    }
                }
            }
            ProtocolMode::WithinPose => {
                for &i in view.vision.iter().chain(view.text.iter()) {
                    if i != gallery_vision && !gallery_texts.contains(&i) {
                        query.push(ds.samples()[i].sample_id.clone());
                    }
                }
            }
        }
    }

    if retained < 2 {
        return Err(Error::TooFewIdentities { retained });
    }
    let protocol = RetrievalProtocol {
        gallery,
        query,
        mode,
        shot: Shot::SingleShot,
        seed,
    };
    protocol.check(ds).expect("construction satisfies its own invariants");
    Ok((protocol, ProtocolReport {
        retained,
        discarded_identities: discarded,
    }))
}
