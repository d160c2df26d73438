//! Exact nearest-neighbor ranking and recall at rank K.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{Image, ModificationKind, SplitData};
use crate::error::{Error, Result};
use crate::metric::{similarity, Kernel};
use crate::model::Model;
use crate::tensor::Tensor;

pub const DEFAULT_KS: [usize; 4] = [1, 5, 10, 50];

/// Database of image embeddings, one row per id.
#[derive(Clone, Debug)]
pub struct EmbeddedDatabase {
    ids: Vec<String>,
    index: HashMap<String, usize>,
    embeddings: Tensor,
    kernel: Kernel,
}

impl EmbeddedDatabase {
    pub fn new(ids: Vec<String>, embeddings: Tensor, kernel: Kernel) -> Result<Self> {
        if embeddings.shape().len() != 2 || embeddings.shape()[0] != ids.len() {
            return Err(Error::dim("embedded database", embeddings.shape(), &[ids.len()]));
        }
        let mut index = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(Error::Argument(format!("duplicate database id `{id}`")));
            }
        }
        Ok(EmbeddedDatabase {
            ids,
            index,
            embeddings,
            kernel,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn embeddings(&self) -> &Tensor {
        &self.embeddings
    }

    pub fn kernel(&self) -> Kernel {
        self.kernel
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    /// κ(query, row) for every row.
    pub fn scores(&self, query: &[f64]) -> Result<Vec<f64>> {
        (0..self.len())
            .map(|i| similarity(query, self.embeddings.row(i), self.kernel))
            .collect()
    }

    /// Whether item `a` ranks ahead of item `b`: higher score first, ties
    /// by ascending id.
    fn ahead(&self, scores: &[f64], a: usize, b: usize) -> Ordering {
        scores[b]
            .total_cmp(&scores[a])
            .then_with(|| self.ids[a].cmp(&self.ids[b]))
    }

    /// Database positions in ranked order, leaving out `exclude`.
    pub fn rank(&self, query: &[f64], exclude: Option<&str>) -> Result<Vec<usize>> {
        let scores = self.scores(query)?;
        let skip = exclude.and_then(|id| self.position(id));
        let mut order: Vec<usize> = (0..self.len()).filter(|&i| Some(i) != skip).collect();
        order.sort_by(|&a, &b| self.ahead(&scores, a, b));
        Ok(order)
    }

    /// Ids in ranked order.
    pub fn rank_ids(&self, query: &[f64], exclude: Option<&str>) -> Result<Vec<&str>> {
        Ok(self.rank(query, exclude)?.into_iter().map(|i| self.ids[i].as_str()).collect())
    }
}

/// What a query must retrieve.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EvalQuery {
    pub target: String,
    /// Id removed from this query's ranking (its reference image).
    pub exclude: Option<String>,
    pub kind: Option<ModificationKind>,
}

/// Zero-based position of each query's target in its ranking. Equivalent to
/// locating the target in [`EmbeddedDatabase::rank`] without sorting.
pub fn target_ranks(embeddings: &Tensor, queries: &[EvalQuery], db: &EmbeddedDatabase) -> Result<Vec<usize>> {
    if db.is_empty() {
        return Err(Error::Argument("empty database".into()));
    }
    if embeddings.shape().len() != 2 || embeddings.shape()[0] != queries.len() {
        return Err(Error::dim("target_ranks", embeddings.shape(), &[queries.len()]));
    }
    queries
        .iter()
        .enumerate()
        .map(|(qi, q)| {
            let t = db
                .position(&q.target)
                .ok_or_else(|| Error::Data(format!("query {qi}: target `{}` not in database", q.target)))?;
            let skip = q.exclude.as_deref().and_then(|id| db.position(id));
            if skip == Some(t) {
                return Err(Error::Data(format!("query {qi}: target `{}` is excluded", q.target)));
            }
            let scores = db.scores(embeddings.row(qi))?;
            Ok((0..db.len())
                .filter(|&j| Some(j) != skip && db.ahead(&scores, j, t) == Ordering::Less)
                .count())
        })
        .collect()
}

/// Percentage of ranks below `k`.
pub fn recall_from_ranks(ranks: &[usize], k: usize) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    100.0 * ranks.iter().filter(|&&r| r < k).count() as f64 / ranks.len() as f64
}

/// R@k for composed query embeddings against `db`.
pub fn recall_at_k(embeddings: &Tensor, queries: &[EvalQuery], db: &EmbeddedDatabase, k: usize) -> Result<f64> {
    Ok(recall_from_ranks(&target_ranks(embeddings, queries, db)?, k))
}

/// R@k per modification kind. Kinds without queries are absent.
pub fn breakdown_by_modification(ranks: &[usize], queries: &[EvalQuery], k: usize) -> BTreeMap<ModificationKind, f64> {
    let mut groups: BTreeMap<ModificationKind, Vec<usize>> = BTreeMap::new();
    for (r, q) in ranks.iter().zip(queries) {
        if let Some(kind) = q.kind {
            groups.entry(kind).or_default().push(*r);
        }
    }
    groups.into_iter().map(|(kind, rs)| (kind, recall_from_ranks(&rs, k))).collect()
}

/// Hex SHA-256 of a serialized configuration.
pub fn fingerprint(text: &str) -> String {
    Sha256::digest(text.as_bytes()).iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// R@k keyed by k.
    pub recall: BTreeMap<usize, f64>,
    /// R@1 per modification kind.
    pub recall_at_1_by_kind: BTreeMap<ModificationKind, f64>,
    pub queries: usize,
    pub database: usize,
    pub config_fingerprint: String,
}

impl EvalReport {
    pub fn from_ranks(ranks: &[usize], queries: &[EvalQuery], database: usize, ks: &[usize], fingerprint: String) -> Self {
        EvalReport {
            recall: ks.iter().map(|&k| (k, recall_from_ranks(ranks, k))).collect(),
            recall_at_1_by_kind: breakdown_by_modification(ranks, queries, 1),
            queries: ranks.len(),
            database,
            config_fingerprint: fingerprint,
        }
    }

    pub fn evaluate(
        embeddings: &Tensor,
        queries: &[EvalQuery],
        db: &EmbeddedDatabase,
        ks: &[usize],
        fingerprint: String,
    ) -> Result<Self> {
        let ranks = target_ranks(embeddings, queries, db)?;
        Ok(Self::from_ranks(&ranks, queries, db.len(), ks, fingerprint))
    }

    pub fn r_at(&self, k: usize) -> Option<f64> {
        self.recall.get(&k).copied()
    }

    /// Aligned plain-text table.
    pub fn to_table(&self) -> String {
        let mut out = format!("queries {}  database {}\n", self.queries, self.database);
        out.push_str("metric      value\n");
        for (k, v) in &self.recall {
            let _ = writeln!(out, "{:<10} {v:>6.2}", format!("R@{k}"));
        }
        for (kind, v) in &self.recall_at_1_by_kind {
            let _ = writeln!(out, "{:<10} {v:>6.2}", format!("R@1 {}", kind.name()));
        }
        out
    }
}

/// Evaluation protocol settings.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    /// Drop each query's own reference image from its ranking.
    pub exclude_reference: bool,
    /// Evaluate only the first queries of the split.
    pub max_queries: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            ks: DEFAULT_KS.to_vec(),
            exclude_reference: true,
            max_queries: None,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ks.is_empty() || self.ks.contains(&0) {
            return Err(Error::Config("eval ks must be a non-empty list of positive ranks".into()));
        }
        if self.max_queries == Some(0) {
            return Err(Error::Config("eval max_queries must be positive".into()));
        }
        Ok(())
    }

    fn query_count(&self, data: &SplitData) -> usize {
        self.max_queries.map_or(data.queries().len(), |m| m.min(data.queries().len()))
    }
}

/// Targets (and excluded references) of the first `n` queries of a split.
pub fn split_queries(data: &SplitData, n: usize, exclude_reference: bool) -> Vec<EvalQuery> {
    data.queries()[..n]
        .iter()
        .map(|q| EvalQuery {
            target: q.target.clone(),
            exclude: exclude_reference.then(|| q.base.clone()),
            kind: Some(q.modification.kind()),
        })
        .collect()
}

/// `(reference image, text)` pairs of the first `n` queries.
pub fn query_inputs(data: &SplitData, n: usize) -> Vec<(&Image, &str)> {
    (0..n).map(|i| (data.reference(i), data.queries()[i].text.as_str())).collect()
}

/// Embeds every image of the split as the database.
pub fn embed_database(model: &Model, data: &SplitData, kernel: Kernel) -> Result<EmbeddedDatabase> {
    let images: Vec<&Image> = data.images.iter().collect();
    EmbeddedDatabase::new(data.ids(), model.embed_images(&images)?, kernel)
}

/// Ranks of each evaluated query's target against the whole split.
pub fn model_ranks(model: &Model, data: &SplitData, kernel: Kernel, cfg: &EvalConfig) -> Result<(Vec<usize>, Vec<EvalQuery>, usize)> {
    cfg.validate()?;
    let n = cfg.query_count(data);
    let db = embed_database(model, data, kernel)?;
    let queries = split_queries(data, n, cfg.exclude_reference);
    let emb = model.embed_queries(&query_inputs(data, n))?;
    Ok((target_ranks(&emb, &queries, &db)?, queries, db.len()))
}

/// Full evaluation of `model` on a split.
pub fn evaluate_model(
    model: &Model,
    data: &SplitData,
    kernel: Kernel,
    cfg: &EvalConfig,
    fingerprint: String,
) -> Result<EvalReport> {
    let (ranks, queries, db_len) = model_ranks(model, data, kernel, cfg)?;
    Ok(EvalReport::from_ranks(&ranks, &queries, db_len, &cfg.ks, fingerprint))
}
