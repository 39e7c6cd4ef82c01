//! Ranking collections for a clicked image set, and evaluating the rankings.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use log::warn;
use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coder::{CollectionDescriptor, Variant};
use crate::metric::{learn_metric, mahalanobis_distance, MetricModel, MetricOptions, MetricVariant, PairSets};
use crate::{Error, Result};

/// Category name of the model trained on every tuple.
pub const GLOBAL_CATEGORY: &str = "All";
/// Evaluation reports cover K = 1..=10.
pub const REPORT_MAX_K: usize = 10;

/// One mined training unit: a clicked set with the boards the user is and
/// is not interested in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceTuple {
    pub user_id: String,
    pub query: Vec<String>,
    /// Collection id of the clicked image set.
    pub clicked: String,
    pub positive: Vec<String>,
    pub negative: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
}

impl PreferenceTuple {
    pub fn validate(&self) -> Result<()> {
        if self.clicked.is_empty() {
            return Err(Error::InvalidConfig(format!("tuple of user {} has no clicked set", self.user_id)));
        }
        let pos: BTreeSet<&String> = self.positive.iter().collect();
        if let Some(both) = self.negative.iter().find(|b| pos.contains(b)) {
            return Err(Error::InvalidConfig(format!(
                "board {both} is both interesting and uninteresting for user {}",
                self.user_id
            )));
        }
        Ok(())
    }
}

/// Descriptors of a single variant, indexed by collection id.
#[derive(Debug, Clone)]
pub struct DescriptorSet {
    variant: Variant,
    dim: usize,
    by_id: HashMap<String, CollectionDescriptor>,
}

impl DescriptorSet {
    pub fn new(descriptors: Vec<CollectionDescriptor>) -> Result<Self> {
        let first = descriptors
            .first()
            .ok_or_else(|| Error::MissingInput("no descriptors".into()))?;
        let (variant, dim) = (first.variant, first.x.len());
        let mut by_id = HashMap::with_capacity(descriptors.len());
        for d in descriptors {
            if d.variant != variant {
                return Err(Error::MixedVariants(format!(
                    "descriptor {} is {}, expected {variant}",
                    d.collection_id, d.variant
                )));
            }
            if d.x.len() != dim {
                return Err(Error::DimensionMismatch { expected: dim, got: d.x.len() });
            }
            by_id.insert(d.collection_id.clone(), d);
        }
        Ok(DescriptorSet { variant, dim, by_id })
    }

    /// Rescales every nonzero descriptor to unit ℓ2 norm.
    pub fn normalized(mut self) -> Self {
        for d in self.by_id.values_mut() {
            let n = d.x.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 {
                d.x.iter_mut().for_each(|v| *v /= n);
            }
        }
        self
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.by_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_id.is_empty()
    }

    pub fn get(&self, id: &str) -> Result<&CollectionDescriptor> {
        self.by_id.get(id).ok_or_else(|| Error::MissingDescriptor(id.to_string()))
    }

    fn vector(&self, id: &str) -> Result<DVector<f64>> {
        Ok(DVector::from_column_slice(&self.get(id)?.x))
    }
}

/// Similar pairs `(c_i, b), b ∈ B⁺_i` and dissimilar pairs `(c_i, b), b ∈ B⁻_i`.
pub fn build_pairs(tuples: &[PreferenceTuple], descriptors: &DescriptorSet) -> Result<PairSets> {
    let mut pairs = PairSets::default();
    for t in tuples {
        t.validate()?;
        let c = descriptors.vector(&t.clicked)?;
        for b in &t.positive {
            pairs.similar.push((c.clone(), descriptors.vector(b)?));
        }
        for b in &t.negative {
            pairs.dissimilar.push((c.clone(), descriptors.vector(b)?));
        }
    }
    Ok(pairs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry {
    pub collection_id: String,
    pub distance: f64,
    /// Known label, when the candidate came from a preference tuple.
    pub relevant: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub user_id: String,
    pub entries: Vec<RankedEntry>,
}

impl RankedList {
    /// Relevance flags in rank order; unlabeled entries count as irrelevant.
    pub fn relevance(&self) -> Vec<bool> {
        self.entries.iter().map(|e| e.relevant.unwrap_or(false)).collect()
    }
}

/// Candidates sorted by ascending distance to the clicked set, ties by id.
pub fn rank_collections(
    user_id: &str,
    clicked: &CollectionDescriptor,
    candidates: &[&CollectionDescriptor],
    metric: &MetricModel,
) -> Result<RankedList> {
    let mut entries = candidates
        .iter()
        .map(|b| {
            Ok(RankedEntry {
                collection_id: b.collection_id.clone(),
                distance: mahalanobis_distance(&clicked.x, &b.x, metric)?,
                relevant: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    entries.sort_by(|a, b| a.distance.total_cmp(&b.distance).then_with(|| a.collection_id.cmp(&b.collection_id)));
    Ok(RankedList { user_id: user_id.to_string(), entries })
}

/// Ranks `B⁺ ∪ B⁻` of a tuple and labels each entry.
pub fn rank_for_tuple(t: &PreferenceTuple, descriptors: &DescriptorSet, metric: &MetricModel) -> Result<RankedList> {
    let clicked = descriptors.get(&t.clicked)?;
    let candidates = t
        .positive
        .iter()
        .chain(&t.negative)
        .map(|id| descriptors.get(id))
        .collect::<Result<Vec<_>>>()?;
    let mut list = rank_collections(&t.user_id, clicked, &candidates, metric)?;
    let positive: BTreeSet<&str> = t.positive.iter().map(String::as_str).collect();
    for e in &mut list.entries {
        e.relevant = Some(positive.contains(e.collection_id.as_str()));
    }
    Ok(list)
}

/// `AP@K = Σ_{i≤K} P(i)·rel(i) / K` with `P(i)` the precision at `i`.
///
/// Lists shorter than `K` are padded with irrelevant entries; the divisor
/// stays `K`. Returns 0 for `K = 0`.
pub fn ap_at_k(rel: &[bool], k: usize) -> f64 {
    if k == 0 {
        return 0.0;
    }
    let mut hits = 0usize;
    let mut acc = 0.0;
    for (i, &r) in rel.iter().take(k).enumerate() {
        if r {
            hits += 1;
            acc += hits as f64 / (i + 1) as f64;
        }
    }
    acc / k as f64
}

/// Mean of the per-list `AP@K`.
pub fn map_at_k(lists: &[RankedList], k: usize) -> Result<f64> {
    if lists.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    Ok(lists.iter().map(|l| ap_at_k(&l.relevance(), k)).sum::<f64>() / lists.len() as f64)
}

/// Monte-Carlo MAP@K of uniformly random rankings of `candidates` items of
/// which `relevant` are relevant.
pub fn random_baseline_map(candidates: usize, relevant: usize, k: usize, trials: usize, seed: u64) -> f64 {
    if trials == 0 {
        return 0.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rel: Vec<bool> = (0..candidates).map(|i| i < relevant).collect();
    let mut total = 0.0;
    for _ in 0..trials {
        rel.shuffle(&mut rng);
        total += ap_at_k(&rel, k);
    }
    total / trials as f64
}

/// Per-category metrics with a global fallback.
#[derive(Debug, Clone)]
pub struct QueryDependentModel {
    pub global: MetricModel,
    pub per_category: BTreeMap<String, MetricModel>,
}

impl QueryDependentModel {
    pub fn global_only(global: MetricModel) -> Self {
        QueryDependentModel { global, per_category: BTreeMap::new() }
    }

    /// Model of the tuple's category, or the global one.
    pub fn select(&self, category: Option<&str>) -> &MetricModel {
        category.and_then(|c| self.per_category.get(c)).unwrap_or(&self.global)
    }
}

pub fn train_global(tuples: &[PreferenceTuple], descriptors: &DescriptorSet, variant: MetricVariant, opts: &MetricOptions) -> Result<MetricModel> {
    if variant == MetricVariant::Eucl {
        return Ok(MetricModel::euclidean(descriptors.dim()));
    }
    let pairs = build_pairs(tuples, descriptors)?;
    Ok(learn_metric(&pairs, variant, opts)?.model)
}

/// Trains one metric per query category plus the global model. Categories
/// whose pairs cannot support training are skipped and fall back to global.
pub fn train_query_dependent(
    tuples: &[PreferenceTuple],
    descriptors: &DescriptorSet,
    variant: MetricVariant,
    opts: &MetricOptions,
) -> Result<QueryDependentModel> {
    let global = train_global(tuples, descriptors, variant, opts)?;
    let mut by_cat: BTreeMap<&str, Vec<PreferenceTuple>> = BTreeMap::new();
    for t in tuples {
        if let Some(c) = t.category.as_deref() {
            by_cat.entry(c).or_default().push(t.clone());
        }
    }
    let trained: Vec<(String, Result<MetricModel>)> = by_cat
        .into_par_iter()
        .map(|(cat, ts)| (cat.to_string(), train_global(&ts, descriptors, variant, opts)))
        .collect();
    let mut per_category = BTreeMap::new();
    for (cat, model) in trained {
        match model {
            Ok(m) => {
                per_category.insert(cat, m);
            }
            Err(e @ (Error::DegenerateObjective(_) | Error::Numeric(_))) => {
                warn!("category {cat:?} skipped, using the global metric: {e}");
            }
            Err(e) => return Err(e),
        }
    }
    Ok(QueryDependentModel { global, per_category })
}

/// MAP@K for K = 1..=10 over a set of ranked lists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapCurve {
    pub lists: usize,
    pub map_at_k: Vec<f64>,
}

impl MapCurve {
    pub fn from_lists(lists: &[RankedList]) -> Result<Self> {
        let map_at_k = (1..=REPORT_MAX_K).map(|k| map_at_k(lists, k)).collect::<Result<_>>()?;
        Ok(MapCurve { lists: lists.len(), map_at_k })
    }

    pub fn at(&self, k: usize) -> f64 {
        self.map_at_k[k - 1]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryEvaluation {
    /// Lists ranked with the category's own metric (global fallback).
    pub query_dependent: MapCurve,
    /// The same lists ranked with the global metric.
    pub global: MapCurve,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub variant: Variant,
    pub metric_variant: MetricVariant,
    pub global: MapCurve,
    pub per_category: BTreeMap<String, CategoryEvaluation>,
    pub map_at_5: f64,
}

/// Ranks every tuple with the global and the query-dependent model.
pub fn evaluate(
    tuples: &[PreferenceTuple],
    descriptors: &DescriptorSet,
    model: &QueryDependentModel,
) -> Result<(EvaluationReport, Vec<RankedList>)> {
    let ranked: Vec<(Option<String>, RankedList, RankedList)> = tuples
        .par_iter()
        .map(|t| {
            let g = rank_for_tuple(t, descriptors, &model.global)?;
            let q = rank_for_tuple(t, descriptors, model.select(t.category.as_deref()))?;
            Ok((t.category.clone(), g, q))
        })
        .collect::<Result<_>>()?;
    let global_lists: Vec<RankedList> = ranked.iter().map(|(_, g, _)| g.clone()).collect();
    let global = MapCurve::from_lists(&global_lists)?;
    let mut groups: BTreeMap<String, (Vec<RankedList>, Vec<RankedList>)> = BTreeMap::new();
    for (cat, g, q) in &ranked {
        let e = groups.entry(cat.clone().unwrap_or_else(|| GLOBAL_CATEGORY.to_string())).or_default();
        e.0.push(q.clone());
        e.1.push(g.clone());
    }
    let per_category = groups
        .into_iter()
        .map(|(cat, (q, g))| Ok((cat, CategoryEvaluation { query_dependent: MapCurve::from_lists(&q)?, global: MapCurve::from_lists(&g)? })))
        .collect::<Result<_>>()?;
    let report = EvaluationReport {
        variant: descriptors.variant(),
        metric_variant: model.global.variant(),
        map_at_5: global.at(5),
        global,
        per_category,
    };
    let lists = ranked.into_iter().map(|(_, _, q)| q).collect();
    Ok((report, lists))
}

/// CSV export: `user_id,rank,collection_id,distance,relevant`.
pub fn ranked_lists_csv(lists: &[RankedList]) -> String {
    let mut out = String::from("user_id,rank,collection_id,distance,relevant\n");
    for l in lists {
        for (i, e) in l.entries.iter().enumerate() {
            let rel = match e.relevant {
                Some(true) => "1",
                Some(false) => "0",
                None => "",
            };
            writeln!(out, "{},{},{},{:.12e},{}", l.user_id, i + 1, e.collection_id, e.distance, rel).unwrap();
        }
    }
    out
}

/// Majority vote among the `k` nearest labeled descriptors; ties go to the
/// label of the nearest tied neighbor.
pub fn knn_classify(train: &[(&[f64], &str)], query: &[f64], k: usize, metric: &MetricModel) -> Result<String> {
    if train.is_empty() || k == 0 {
        return Err(Error::EmptyEvaluation);
    }
    let mut dists = train
        .iter()
        .map(|(x, label)| Ok((mahalanobis_distance(query, x, metric)?, *label)))
        .collect::<Result<Vec<_>>>()?;
    dists.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1)));
    let neighbors = &dists[..k.min(dists.len())];
    let mut votes: BTreeMap<&str, usize> = BTreeMap::new();
    for (_, l) in neighbors {
        *votes.entry(l).or_default() += 1;
    }
    let top = *votes.values().max().unwrap();
    let label = neighbors.iter().find(|(_, l)| votes[l] == top).unwrap().1;
    Ok(label.to_string())
}

/// Fraction of `test` items whose kNN label matches their own.
pub fn knn_accuracy(train: &[(&[f64], &str)], test: &[(&[f64], &str)], k: usize, metric: &MetricModel) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    let correct = test
        .iter()
        .map(|(x, label)| Ok((knn_classify(train, x, k, metric)? == *label) as usize))
        .sum::<Result<usize>>()?;
    Ok(correct as f64 / test.len() as f64)
}
