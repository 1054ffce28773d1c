//! Cosine-similarity retrieval: scenario feature assembly, ranking with a
//! stable tie rule, the rank@K / mAP / medR metric suite, and the
//! attribute-flip sensitivity experiment.
//!
//! Scenario recipes (query vs gallery, with X = vision side and Y =
//! language side of a fitted CCA):
//!   VxV    f_img              vs f_img                    (d)
//!   LxL    f_txt              vs mean of gallery texts    (d)
//!   LxV    W*_txt f_txt       vs W*_img f_img             (k)
//!   VLxV   [f_img, W*_txt f_txt] vs [f_img, W*_img f_img] (d + k)
//!   VLxVL  [f_img, f_txt]     vs [f_img, mean texts]      (2d)
//!
//! Text-side gallery features (LxL, VLxVL) and the text half of a
//! multimodal query average the descriptions tied to one image; the
//! reduction is recorded in the assembly note. VLxVL concatenates raw
//! features without CCA while VLxV mixes raw and projected parts; the
//! asymmetry is intentional.

use std::collections::{BTreeMap, HashSet};
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cca::{project_vec, CcaModel, Side};
use crate::dataset::{Dataset, DatasetIndex, Modality, Payload, RetrievalProtocol};
use crate::error::{Error, Result};
use crate::nn::{Batch, Encoder};
use crate::rng::substream;
use crate::scalar::{cast, Scalar};
use crate::text::{encode_sentence, Dictionary, EmbeddingTable};

/// The five retrieval scenarios.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scenario {
    /// Image query against image gallery.
    VxV,
    /// Description query against gallery description means.
    LxL,
    /// CCA-projected description query against CCA-projected image gallery.
    LxV,
    /// Multimodal query [f_img, W*_txt f_txt] against [f_img, W*_img f_img].
    VLxV,
    /// Raw concatenation on both sides, no projection.
    VLxVL,
}

impl Scenario {
    pub const ALL: [Scenario; 5] = [
        Scenario::VxV,
        Scenario::LxL,
        Scenario::LxV,
        Scenario::VLxV,
        Scenario::VLxVL,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Scenario::VxV => "VxV",
            Scenario::LxL => "LxL",
            Scenario::LxV => "LxV",
            Scenario::VLxV => "VLxV",
            Scenario::VLxVL => "VLxVL",
        }
    }

    pub fn needs_cca(&self) -> bool {
        matches!(self, Scenario::LxV | Scenario::VLxV)
    }

    /// Assembled feature size given raw feature size `d` and `k` retained
    /// CCA components.
    pub fn feature_size(&self, d: usize, k: usize) -> usize {
        match self {
            Scenario::VxV | Scenario::LxL => d,
            Scenario::LxV => k,
            Scenario::VLxV => d + k,
            Scenario::VLxVL => 2 * d,
        }
    }
}

impl std::fmt::Display for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scenario::ALL
            .iter()
            .find(|sc| sc.name().eq_ignore_ascii_case(s))
            .copied()
            .ok_or_else(|| Error::UnknownScenario { name: s.to_string() })
    }
}

/// Per-sample feature vectors keyed by sample id, all of one dimension.
#[derive(Debug, Clone)]
pub struct FeatureStore<F> {
    features: BTreeMap<String, Array1<F>>,
    dim: usize,
}

impl<F: Scalar> FeatureStore<F> {
    pub fn new(dim: usize) -> Self {
        FeatureStore {
            features: BTreeMap::new(),
            dim,
        }
    }

    pub fn insert(&mut self, sample_id: &str, feature: Array1<F>) -> Result<()> {
        if feature.len() != self.dim {
            return Err(Error::ShapeMismatch {
                context: format!("feature of {sample_id:?}"),
                expected: format!("{} dims", self.dim),
                actual: format!("{} dims", feature.len()),
            });
        }
        self.features.insert(sample_id.to_string(), feature);
        Ok(())
    }

    pub fn get(&self, sample_id: &str) -> Option<&Array1<F>> {
        self.features.get(sample_id)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array1<F>)> {
        self.features.iter()
    }

    /// Stores raw vision payloads as features (no encoder).
    pub fn from_vision_payloads(ds: &Dataset) -> Result<Self> {
        let dim = ds.vision_dim().ok_or(Error::Config {
            reason: "dataset has no vision samples".into(),
        })?;
        let mut store = FeatureStore::new(dim);
        for s in ds.samples() {
            if let Payload::Vision(v) = &s.payload {
                let feat = Array1::from_iter(v.iter().map(|&x| cast::<F>(x)));
                store.insert(&s.sample_id, feat)?;
            }
        }
        Ok(store)
    }
}

/// Encodes every sample of a dataset with the trained branches in eval
/// mode (running statistics, no dropout); output is independent of batch
/// composition.
pub fn encode_dataset<F: Scalar>(
    ds: &Dataset,
    vision: &Encoder<F>,
    language: &Encoder<F>,
    embedding: &EmbeddingTable<F>,
    dict: &Dictionary,
    l_max: usize,
) -> Result<FeatureStore<F>> {
    if vision.feature_dim() != language.feature_dim() {
        return Err(Error::ShapeMismatch {
            context: "encoder feature dimensions".into(),
            expected: vision.feature_dim().to_string(),
            actual: language.feature_dim().to_string(),
        });
    }
    let mut store = FeatureStore::new(vision.feature_dim());

    let vision_samples: Vec<&crate::dataset::Sample> = ds
        .samples()
        .iter()
        .filter(|s| s.modality == Modality::Vision)
        .collect();
    if !vision_samples.is_empty() {
        let dim = match &vision_samples[0].payload {
            Payload::Vision(v) => v.len(),
            Payload::Text(_) => unreachable!("filtered to vision"),
        };
        let mut rows = Array2::zeros((vision_samples.len(), dim));
        for (r, s) in vision_samples.iter().enumerate() {
            let Payload::Vision(v) = &s.payload else { unreachable!() };
            for (slot, &x) in rows.row_mut(r).iter_mut().zip(v) {
                *slot = cast::<F>(x);
            }
        }
        let feats = vision.forward_eval(&Batch::from_vectors(rows))?;
        for (r, s) in vision_samples.iter().enumerate() {
            store.insert(&s.sample_id, feats.row(r).to_owned())?;
        }
    }

    let text_samples: Vec<&crate::dataset::Sample> = ds
        .samples()
        .iter()
        .filter(|s| s.modality == Modality::Text)
        .collect();
    if !text_samples.is_empty() {
        let mut mats = Vec::with_capacity(text_samples.len());
        let mut lengths = Vec::with_capacity(text_samples.len());
        for s in &text_samples {
            let Payload::Text(sentence) = &s.payload else { unreachable!() };
            let tokens = encode_sentence(sentence, dict, l_max)?;
            lengths.push(tokens.true_length);
            mats.push(embedding.embed(&tokens)?);
        }
        let batch = Batch::from_matrices(&mats, Some(lengths))?;
        let feats = language.forward_eval(&batch)?;
        for (r, s) in text_samples.iter().enumerate() {
            store.insert(&s.sample_id, feats.row(r).to_owned())?;
        }
    }

    Ok(store)
}

/// Column-paired (vision, text) feature matrices over a dataset: one column
/// per (image, associated description) pair, in sample order. This is the
/// training input for cross-modal alignment.
pub fn paired_training_features<F: Scalar>(
    ds: &Dataset,
    store: &FeatureStore<F>,
) -> Result<(Array2<F>, Array2<F>)> {
    let index = DatasetIndex::build(ds);
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    for (i, s) in ds.samples().iter().enumerate() {
        if s.modality != Modality::Vision {
            continue;
        }
        for t in index.associated_texts(ds, i) {
            pairs.push((i, t));
        }
    }
    if pairs.is_empty() {
        return Err(Error::Config {
            reason: "dataset yields no (image, description) pairs".into(),
        });
    }
    let fetch = |idx: usize| -> Result<&Array1<F>> {
        let s = &ds.samples()[idx];
        store.get(&s.sample_id).ok_or_else(|| Error::MissingFeature {
            sample_id: s.sample_id.clone(),
            modality: s.modality,
        })
    };
    let mut x = Array2::zeros((store.dim(), pairs.len()));
    let mut y = Array2::zeros((store.dim(), pairs.len()));
    for (j, &(i, t)) in pairs.iter().enumerate() {
        x.column_mut(j).assign(fetch(i)?);
        y.column_mut(j).assign(fetch(t)?);
    }
    Ok((x, y))
}

/// Query/gallery matrices for one scenario, rows aligned with the id and
/// identity vectors.
#[derive(Debug, Clone)]
pub struct AssembledFeatures<F> {
    pub scenario: Scenario,
    pub query: Array2<F>,
    pub query_identity: Vec<u32>,
    pub query_ids: Vec<String>,
    pub gallery: Array2<F>,
    pub gallery_identity: Vec<u32>,
    pub gallery_ids: Vec<String>,
    /// Reduction choices worth surfacing in reports.
    pub note: Option<String>,
}

fn lookup<'a, F: Scalar>(
    store: &'a FeatureStore<F>,
    sample_id: &str,
    modality: Modality,
) -> Result<&'a Array1<F>> {
    store.get(sample_id).ok_or_else(|| Error::MissingFeature {
        sample_id: sample_id.to_string(),
        modality,
    })
}

fn mean_of<F: Scalar>(vectors: &[&Array1<F>]) -> Array1<F> {
    let mut acc: Array1<F> = Array1::zeros(vectors[0].len());
    for v in vectors {
        acc += *v;
    }
    let n = cast::<F>(vectors.len() as f64);
    acc.mapv(|x| x / n)
}

fn concat<F: Scalar>(a: &Array1<F>, b: &Array1<F>) -> Array1<F> {
    let mut out = Array1::zeros(a.len() + b.len());
    out.slice_mut(ndarray::s![..a.len()]).assign(a);
    out.slice_mut(ndarray::s![a.len()..]).assign(b);
    out
}

fn rows_to_matrix<F: Scalar>(rows: Vec<Array1<F>>) -> Array2<F> {
    let dim = rows.first().map_or(0, |r| r.len());
    let mut out = Array2::zeros((rows.len(), dim));
    for (i, r) in rows.iter().enumerate() {
        out.row_mut(i).assign(r);
    }
    out
}

/// Builds scenario query and gallery features per the recipe table.
///
/// The gallery side always derives from each identity's single gallery
/// image plus its attached descriptions; the query side uses each query
/// sample of the scenario's query modality, with multimodal queries pairing
/// a query image with the mean feature of its associated query descriptions.
pub fn assemble_features<F: Scalar>(
    ds: &Dataset,
    protocol: &RetrievalProtocol,
    store: &FeatureStore<F>,
    scenario: Scenario,
    cca: Option<&CcaModel<F>>,
) -> Result<AssembledFeatures<F>> {
    let cca = if scenario.needs_cca() {
        Some(cca.ok_or_else(|| Error::MissingCcaModel {
            scenario: scenario.name().to_string(),
        })?)
    } else {
        None
    };
    let index = DatasetIndex::build(ds);
    let gallery_set: HashSet<&str> = protocol.gallery.iter().map(|s| s.as_str()).collect();
    let query_set: HashSet<&str> = protocol.query.iter().map(|s| s.as_str()).collect();

    let resolve = |sample_id: &String| {
        ds.sample_by_id(sample_id).ok_or_else(|| Error::Config {
            reason: format!("protocol sample {sample_id:?} not in dataset"),
        })
    };

    // Gallery images in protocol order, each with its attached descriptions.
    let mut gallery_images = Vec::new();
    for id in &protocol.gallery {
        let s = resolve(id)?;
        if s.modality == Modality::Vision {
            gallery_images.push(s);
        }
    }
    if gallery_images.is_empty() {
        return Err(Error::EmptyGallery);
    }
    let gallery_texts_of = |image: &crate::dataset::Sample| -> Vec<&str> {
        let idx = ds
            .samples()
            .iter()
            .position(|s| s.sample_id == image.sample_id)
            .expect("gallery image resolved from this dataset");
        index
            .associated_texts(ds, idx)
            .into_iter()
            .map(|t| ds.samples()[t].sample_id.as_str())
            .filter(|id| gallery_set.contains(id))
            .collect()
    };
    let gallery_text_mean = |image: &crate::dataset::Sample| -> Result<Array1<F>> {
        let ids = gallery_texts_of(image);
        if ids.is_empty() {
            return Err(Error::MissingFeature {
                sample_id: image.sample_id.clone(),
                modality: Modality::Text,
            });
        }
        let feats: Vec<&Array1<F>> = ids
            .iter()
            .map(|id| lookup(store, id, Modality::Text))
            .collect::<Result<_>>()?;
        Ok(mean_of(&feats))
    };

    // Query samples of each modality, in protocol order.
    let mut query_images = Vec::new();
    let mut query_texts = Vec::new();
    for id in &protocol.query {
        let s = resolve(id)?;
        match s.modality {
            Modality::Vision => query_images.push(s),
            Modality::Text => query_texts.push(s),
        }
    }
    // Text half of a multimodal query: mean feature of the query
    // descriptions associated with the image.
    let query_text_mean = |image: &crate::dataset::Sample| -> Result<Array1<F>> {
        let idx = ds
            .samples()
            .iter()
            .position(|s| s.sample_id == image.sample_id)
            .expect("query image resolved from this dataset");
        let ids: Vec<&str> = index
            .associated_texts(ds, idx)
            .into_iter()
            .map(|t| ds.samples()[t].sample_id.as_str())
            .filter(|id| query_set.contains(id))
            .collect();
        if ids.is_empty() {
            return Err(Error::MissingFeature {
                sample_id: image.sample_id.clone(),
                modality: Modality::Text,
            });
        }
        let feats: Vec<&Array1<F>> = ids
            .iter()
            .map(|id| lookup(store, id, Modality::Text))
            .collect::<Result<_>>()?;
        Ok(mean_of(&feats))
    };

    let mean_note = "text-side features average the descriptions attached to one image";
    let (query_rows, query_identity, query_ids, gallery_rows, gallery_identity, gallery_ids, note): (
        Vec<Array1<F>>,
        Vec<u32>,
        Vec<String>,
        Vec<Array1<F>>,
        Vec<u32>,
        Vec<String>,
        Option<String>,
    ) = match scenario {
        Scenario::VxV => {
            let q: Vec<Array1<F>> = query_images
                .iter()
                .map(|s| lookup(store, &s.sample_id, Modality::Vision).cloned())
                .collect::<Result<_>>()?;
            let g: Vec<Array1<F>> = gallery_images
                .iter()
                .map(|s| lookup(store, &s.sample_id, Modality::Vision).cloned())
                .collect::<Result<_>>()?;
            (
                q,
                query_images.iter().map(|s| s.identity).collect(),
                query_images.iter().map(|s| s.sample_id.clone()).collect(),
                g,
                gallery_images.iter().map(|s| s.identity).collect(),
                gallery_images.iter().map(|s| s.sample_id.clone()).collect(),
                None,
            )
        }
        Scenario::LxL => {
            let q: Vec<Array1<F>> = query_texts
                .iter()
                .map(|s| lookup(store, &s.sample_id, Modality::Text).cloned())
                .collect::<Result<_>>()?;
            let g: Vec<Array1<F>> = gallery_images
                .iter()
                .map(|s| gallery_text_mean(s))
                .collect::<Result<_>>()?;
            (
                q,
                query_texts.iter().map(|s| s.identity).collect(),
                query_texts.iter().map(|s| s.sample_id.clone()).collect(),
                g,
                gallery_images.iter().map(|s| s.identity).collect(),
                gallery_images.iter().map(|s| s.sample_id.clone()).collect(),
                Some(mean_note.to_string()),
            )
        }
        Scenario::LxV => {
            let model = cca.expect("checked above");
            let q: Vec<Array1<F>> = query_texts
                .iter()
                .map(|s| project_vec(model, lookup(store, &s.sample_id, Modality::Text)?, Side::Y))
                .collect::<Result<_>>()?;
            let g: Vec<Array1<F>> = gallery_images
                .iter()
                .map(|s| project_vec(model, lookup(store, &s.sample_id, Modality::Vision)?, Side::X))
                .collect::<Result<_>>()?;
            (
                q,
                query_texts.iter().map(|s| s.identity).collect(),
                query_texts.iter().map(|s| s.sample_id.clone()).collect(),
                g,
                gallery_images.iter().map(|s| s.identity).collect(),
                gallery_images.iter().map(|s| s.sample_id.clone()).collect(),
                None,
            )
        }
        Scenario::VLxV => {
            let model = cca.expect("checked above");
            let q: Vec<Array1<F>> = query_images
                .iter()
                .map(|s| {
                    let img = lookup(store, &s.sample_id, Modality::Vision)?;
                    let txt = project_vec(model, &query_text_mean(s)?, Side::Y)?;
                    Ok(concat(img, &txt))
                })
                .collect::<Result<_>>()?;
            let g: Vec<Array1<F>> = gallery_images
                .iter()
                .map(|s| {
                    let img = lookup(store, &s.sample_id, Modality::Vision)?;
                    let proj = project_vec(model, img, Side::X)?;
                    Ok(concat(img, &proj))
                })
                .collect::<Result<_>>()?;
            (
                q,
                query_images.iter().map(|s| s.identity).collect(),
                query_images.iter().map(|s| s.sample_id.clone()).collect(),
                g,
                gallery_images.iter().map(|s| s.identity).collect(),
                gallery_images.iter().map(|s| s.sample_id.clone()).collect(),
                Some(mean_note.to_string()),
            )
        }
        Scenario::VLxVL => {
            let q: Vec<Array1<F>> = query_images
                .iter()
                .map(|s| {
                    let img = lookup(store, &s.sample_id, Modality::Vision)?;
                    Ok(concat(img, &query_text_mean(s)?))
                })
                .collect::<Result<_>>()?;
            let g: Vec<Array1<F>> = gallery_images
                .iter()
                .map(|s| {
                    let img = lookup(store, &s.sample_id, Modality::Vision)?;
                    Ok(concat(img, &gallery_text_mean(s)?))
                })
                .collect::<Result<_>>()?;
            (
                q,
                query_images.iter().map(|s| s.identity).collect(),
                query_images.iter().map(|s| s.sample_id.clone()).collect(),
                g,
                gallery_images.iter().map(|s| s.identity).collect(),
                gallery_images.iter().map(|s| s.sample_id.clone()).collect(),
                Some(mean_note.to_string()),
            )
        }
    };

    Ok(AssembledFeatures {
        scenario,
        query: rows_to_matrix(query_rows),
        query_identity,
        query_ids,
        gallery: rows_to_matrix(gallery_rows),
        gallery_identity,
        gallery_ids,
        note,
    })
}

/// Normalized dot product in [-1, 1]; errors on a zero-norm side.
pub fn cosine_similarity<F: Scalar>(q: ArrayView1<F>, g: ArrayView1<F>) -> Result<F> {
    if q.len() != g.len() {
        return Err(Error::ShapeMismatch {
            context: "cosine similarity".into(),
            expected: format!("{} dims", q.len()),
            actual: format!("{} dims", g.len()),
        });
    }
    let nq = q.dot(&q).sqrt();
    let ng = g.dot(&g).sqrt();
    if nq == F::zero() {
        return Err(Error::ZeroNormFeature { id: "left".into() });
    }
    if ng == F::zero() {
        return Err(Error::ZeroNormFeature { id: "right".into() });
    }
    Ok(q.dot(&g) / (nq * ng))
}

/// Per-query gallery orderings and first-match ranks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankingResult {
    /// Per query: gallery indices sorted by descending similarity, ties
    /// broken by ascending gallery index.
    pub order: Vec<Vec<usize>>,
    /// 1-based rank of the first gallery item sharing the query identity.
    pub first_match_rank: Vec<usize>,
    pub query_identity: Vec<u32>,
    pub gallery_identity: Vec<u32>,
    pub query_ids: Vec<String>,
    pub gallery_ids: Vec<String>,
}

impl RankingResult {
    /// Gallery sample ids in ranked order for one query.
    pub fn ordered_ids(&self, query: usize) -> Vec<&str> {
        self.order[query]
            .iter()
            .map(|&g| self.gallery_ids[g].as_str())
            .collect()
    }
}

/// Ranks every query against the gallery by cosine similarity.
pub fn rank_gallery<F: Scalar>(assembled: &AssembledFeatures<F>) -> Result<RankingResult> {
    let n_g = assembled.gallery.nrows();
    if n_g == 0 {
        return Err(Error::EmptyGallery);
    }
    if assembled.query.ncols() != assembled.gallery.ncols() {
        return Err(Error::ShapeMismatch {
            context: "ranking".into(),
            expected: format!("{} query dims", assembled.gallery.ncols()),
            actual: format!("{} query dims", assembled.query.ncols()),
        });
    }

    let gallery_norms: Vec<F> = (0..n_g)
        .map(|g| {
            let row = assembled.gallery.row(g);
            row.dot(&row).sqrt()
        })
        .collect();
    for (g, &norm) in gallery_norms.iter().enumerate() {
        if norm == F::zero() {
            return Err(Error::ZeroNormFeature {
                id: assembled.gallery_ids[g].clone(),
            });
        }
    }

    let mut order = Vec::with_capacity(assembled.query.nrows());
    let mut first_match_rank = Vec::with_capacity(assembled.query.nrows());
    for q in 0..assembled.query.nrows() {
        let qrow = assembled.query.row(q);
        let qnorm = qrow.dot(&qrow).sqrt();
        if qnorm == F::zero() {
            return Err(Error::ZeroNormFeature {
                id: assembled.query_ids[q].clone(),
            });
        }
        let sims: Vec<F> = (0..n_g)
            .map(|g| qrow.dot(&assembled.gallery.row(g)) / (qnorm * gallery_norms[g]))
            .collect();
        let mut idx: Vec<usize> = (0..n_g).collect();
        idx.sort_by(|&a, &b| match sims[b].partial_cmp(&sims[a]) {
            Some(std::cmp::Ordering::Equal) | None => a.cmp(&b),
            Some(other) => other,
        });
        let identity = assembled.query_identity[q];
        let rank = idx
            .iter()
            .position(|&g| assembled.gallery_identity[g] == identity)
            .map(|p| p + 1)
            .ok_or_else(|| Error::NoRelevantItems {
                query_id: assembled.query_ids[q].clone(),
            })?;
        order.push(idx);
        first_match_rank.push(rank);
    }

    Ok(RankingResult {
        order,
        first_match_rank,
        query_identity: assembled.query_identity.clone(),
        gallery_identity: assembled.gallery_identity.clone(),
        query_ids: assembled.query_ids.clone(),
        gallery_ids: assembled.gallery_ids.clone(),
    })
}

/// The metric suite over one ranking.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Percent of queries whose first match lands at rank 1 / 5 / 10.
    #[serde(rename = "rank@1")]
    pub rank1: f64,
    #[serde(rename = "rank@5")]
    pub rank5: f64,
    #[serde(rename = "rank@10")]
    pub rank10: f64,
    /// Mean average precision, percent. AP averages precision at every
    /// relevant item, so single-shot APs reduce to reciprocal first-match
    /// ranks.
    #[serde(rename = "mAP")]
    pub map: f64,
    /// Median (lower, for even counts) first-match rank.
    #[serde(rename = "medR")]
    pub medr: usize,
    pub queries: usize,
}

/// Computes rank@K, mAP, and medR from a ranking.
pub fn evaluate(ranking: &RankingResult) -> Result<Metrics> {
    let n = ranking.first_match_rank.len();
    if n == 0 {
        return Err(Error::Config {
            reason: "cannot evaluate an empty query set".into(),
        });
    }
    let frac_within = |k: usize| {
        ranking.first_match_rank.iter().filter(|&&r| r <= k).count() as f64 / n as f64 * 100.0
    };

    let mut ap_sum = 0.0;
    for q in 0..n {
        let identity = ranking.query_identity[q];
        let mut relevant_seen = 0usize;
        let mut ap = 0.0;
        for (pos, &g) in ranking.order[q].iter().enumerate() {
            if ranking.gallery_identity[g] == identity {
                relevant_seen += 1;
                ap += relevant_seen as f64 / (pos + 1) as f64;
            }
        }
        if relevant_seen == 0 {
            return Err(Error::NoRelevantItems {
                query_id: ranking.query_ids[q].clone(),
            });
        }
        ap_sum += ap / relevant_seen as f64;
    }

    let mut ranks = ranking.first_match_rank.clone();
    ranks.sort_unstable();
    let medr = ranks[(n - 1) / 2];

    Ok(Metrics {
        rank1: frac_within(1),
        rank5: frac_within(5),
        rank10: frac_within(10),
        map: ap_sum / n as f64 * 100.0,
        medr,
        queries: n,
    })
}

/// One evaluation's full report row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub scenario: String,
    pub protocol: String,
    pub seed: u64,
    #[serde(flatten)]
    pub metrics: Metrics,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl EvaluationReport {
    pub fn new(
        scenario: Scenario,
        protocol: &str,
        seed: u64,
        metrics: Metrics,
        note: Option<String>,
    ) -> Self {
        EvaluationReport {
            scenario: scenario.name().to_string(),
            protocol: protocol.to_string(),
            seed,
            metrics,
            note,
        }
    }

    /// Stable CSV header matching [`EvaluationReport::csv_row`].
    pub fn csv_header() -> &'static str {
        "scenario,protocol,seed,rank1,rank5,rank10,map,medr,queries"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{:.4},{:.4},{:.4},{:.4},{},{}",
            self.scenario,
            self.protocol,
            self.seed,
            self.metrics.rank1,
            self.metrics.rank5,
            self.metrics.rank10,
            self.metrics.map,
            self.metrics.medr,
            self.metrics.queries
        )
    }
}

/// One point of an attribute-flip sensitivity curve.
#[derive(Debug, Clone, Serialize)]
pub struct FlipCurvePoint {
    pub n_flips: usize,
    pub mean_rank1: f64,
    pub per_seed_rank1: Vec<f64>,
}

/// Retrieval robustness against corrupted query attributes.
///
/// Both sides concatenate the identity's binary attribute vector onto the
/// vision feature; per query and seed, `n` attribute positions drawn
/// uniformly without replacement are flipped on the query side only. The
/// curve reports mean rank@1 over seeds for each flip count 0..=max_flips.
pub fn attribute_flip_experiment<F: Scalar>(
    ds: &Dataset,
    protocol: &RetrievalProtocol,
    store: &FeatureStore<F>,
    attributes: &BTreeMap<String, Vec<u8>>,
    max_flips: usize,
    seeds: &[u64],
) -> Result<Vec<FlipCurvePoint>> {
    let attrs_of = |identity: u32| -> Result<&Vec<u8>> {
        let name = ds.identity_name(identity);
        attributes.get(name).ok_or_else(|| Error::MissingAttributes {
            identity: name.to_string(),
        })
    };

    // Fixed gallery side: vision feature plus unflipped attributes.
    let base = assemble_features(ds, protocol, store, Scenario::VxV, None)?;
    let attr_len = attrs_of(base.gallery_identity[0])?.len();
    if max_flips > attr_len {
        return Err(Error::TooManyFlips {
            requested: max_flips,
            available: attr_len,
        });
    }
    let with_attrs = |rows: &Array2<F>, identities: &[u32]| -> Result<Array2<F>> {
        let mut out = Array2::zeros((rows.nrows(), rows.ncols() + attr_len));
        for (i, &identity) in identities.iter().enumerate() {
            let bits = attrs_of(identity)?;
            if bits.len() != attr_len {
                return Err(Error::Config {
                    reason: format!(
                        "attribute vectors disagree in length: {} vs {attr_len}",
                        bits.len()
                    ),
                });
            }
            out.row_mut(i).slice_mut(ndarray::s![..rows.ncols()]).assign(&rows.row(i));
            for (j, &b) in bits.iter().enumerate() {
                out[[i, rows.ncols() + j]] = cast::<F>(b as f64);
            }
        }
        Ok(out)
    };
    let gallery = with_attrs(&base.gallery, &base.gallery_identity)?;
    let query_clean = with_attrs(&base.query, &base.query_identity)?;
    let d = base.query.ncols();

    let mut curve = Vec::with_capacity(max_flips + 1);
    for n in 0..=max_flips {
        let mut per_seed = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let mut rng = substream(seed, &format!("attr-flips-n{n}"));
            let mut query = query_clean.clone();
            for i in 0..query.nrows() {
                let mut positions: Vec<usize> = (0..attr_len).collect();
                for k in 0..n {
                    let j = rng.random_range(k..attr_len);
                    positions.swap(k, j);
                }
                for &p in &positions[..n] {
                    let v = query[[i, d + p]];
                    query[[i, d + p]] = F::one() - v;
                }
            }
            let assembled = AssembledFeatures {
                scenario: Scenario::VxV,
                query,
                query_identity: base.query_identity.clone(),
                query_ids: base.query_ids.clone(),
                gallery: gallery.clone(),
                gallery_identity: base.gallery_identity.clone(),
                gallery_ids: base.gallery_ids.clone(),
                note: None,
            };
            let metrics = evaluate(&rank_gallery(&assembled)?)?;
            per_seed.push(metrics.rank1);
        }
        let mean = per_seed.iter().sum::<f64>() / per_seed.len().max(1) as f64;
        curve.push(FlipCurvePoint {
            n_flips: n,
            mean_rank1: mean,
            per_seed_rank1: per_seed,
        });
    }
    Ok(curve)
}
