//! Averaged cosine distance, differentiable k-nearest selection, and the
//! hard / random baselines.
//!
//! Selection weights follow the iterated penalised softmax
//!
//! ```text
//! W_1 = softmax((1 - Dist) / tau)
//! W_k = softmax(((1 - Dist) + Σ_{l<k} log(1 - W_l)) / tau)
//! ```
//!
//! so mass already spent on an instance pushes later rows away from it.
//! `tau = 1` is the unscaled form.

use crate::autodiff::{cosine_similarity, AutodiffError, Graph, Var};
use crate::corpus::Instance;
use crate::encoder::InstanceEmbedding;
use crate::matrix::Matrix;
use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// `W` is clamped to at most this before `log(1 - W)`.
pub const WEIGHT_CLAMP: f64 = 1.0 - 1e-7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RetrieverError {
    #[error("embedding shapes differ: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
    #[error("temperature must be positive, got {0}")]
    BadTemperature(f64),
    #[error("K must be at least 1")]
    ZeroK,
    #[error("empty database subset")]
    EmptySubset,
    #[error("requested {requested} instances from {available}")]
    TooMany { requested: usize, available: usize },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type Result<T> = std::result::Result<T, RetrieverError>;

/// Retrieval database: the instances stored for reference, capped in size.
#[derive(Clone, Debug, PartialEq)]
pub struct Database {
    pub instances: Vec<Instance>,
    pub cap: usize,
}

impl Database {
    /// Keeps all of `instances` when within `cap`, otherwise a uniform
    /// sample of `cap` of them in original order.
    pub fn build(instances: &[Instance], cap: usize, rng: &mut impl Rng) -> Self {
        if instances.len() <= cap {
            return Database { instances: instances.to_vec(), cap };
        }
        let mut keep = index::sample(rng, instances.len(), cap).into_vec();
        keep.sort_unstable();
        Database { instances: keep.into_iter().map(|i| instances[i].clone()).collect(), cap }
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.instances.iter().position(|i| i.id == id)
    }
}

/// `(1/2L) Σ_l (1 - cos(E_in,l, E_d,l))`, in `[0, 1]`.
pub fn dist(e_in: &InstanceEmbedding, e_d: &InstanceEmbedding) -> Result<f64> {
    dist_rows(&e_in.rows, &e_d.rows)
}

pub fn dist_rows(a: &Matrix, b: &Matrix) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(RetrieverError::ShapeMismatch(a.shape(), b.shape()));
    }
    let l = a.rows();
    let total: f64 = (0..l).map(|r| 1.0 - cosine_similarity(a.row(r), b.row(r))).sum();
    Ok(total / (2.0 * l as f64))
}

/// Distances from one `l×N` query to `n` stacked `l×N` database rows
/// (`n·l × N`, instance-major), as a `1×n` row.
pub fn dist_graph(g: &mut Graph, query: Var, db: Var, l: usize) -> Result<Var> {
    let (ql, qn) = g.value(query).shape();
    let (dr, dn) = g.value(db).shape();
    if ql != l || qn != dn || dr % l != 0 || dr == 0 {
        return Err(RetrieverError::ShapeMismatch((ql, qn), (dr, dn)));
    }
    let n = dr / l;
    let tiled = g.gather_rows(query, (0..n).flat_map(|_| 0..l).collect())?;
    let cos = g.cosine_rows(tiled, db)?;
    let mean_cos = g.group_mean_rows(cos, (0..n).map(|i| (i * l..(i + 1) * l).collect()).collect())?;
    let neg = g.scale(mean_cos, -0.5);
    let d = g.add_scalar(neg, 0.5);
    Ok(g.transpose(d))
}

/// `K×n` selection weights from a `1×n` distance row.
pub fn soft_select_graph(g: &mut Graph, dists: Var, k: usize, tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(RetrieverError::BadTemperature(tau));
    }
    if k == 0 {
        return Err(RetrieverError::ZeroK);
    }
    let n = g.value(dists).cols();
    if n == 0 {
        return Err(RetrieverError::EmptySubset);
    }
    let neg = g.scale(dists, -1.0);
    let closeness = g.add_scalar(neg, 1.0);
    let mut logits = closeness;
    let mut rows = Vec::with_capacity(k);
    for step in 0..k {
        let scaled = g.scale(logits, 1.0 / tau);
        let w = g.softmax_rows(scaled);
        rows.push(w);
        if step + 1 < k {
            let clamped = g.clamp(w, 0.0, WEIGHT_CLAMP)?;
            let neg = g.scale(clamped, -1.0);
            let rest = g.add_scalar(neg, 1.0);
            let penalty = g.log(rest)?;
            logits = g.add(logits, penalty)?;
        }
    }
    Ok(g.concat_rows(&rows)?)
}

/// Selection weights for a plain distance vector.
pub fn soft_select(dists: &[f64], k: usize, tau: f64) -> Result<Matrix> {
    if dists.is_empty() {
        return Err(RetrieverError::EmptySubset);
    }
    let mut g = Graph::new();
    let d = g.constant(Matrix::row_vector(dists));
    let w = soft_select_graph(&mut g, d, k, tau)?;
    Ok(g.value(w).clone())
}

/// `S_k = Σ_d W_{k,d} E_d`, returned as the `K·l × N` stack in k-major,
/// l-minor order, i.e. already laid out as a soft prompt.
pub fn select_embeddings_graph(g: &mut Graph, weights: Var, db: Var, l: usize) -> Result<Var> {
    let (k, n) = g.value(weights).shape();
    let dr = g.value(db).rows();
    if dr != n * l {
        return Err(RetrieverError::ShapeMismatch((k, n), g.value(db).shape()));
    }
    let mut per_row = Vec::with_capacity(l);
    for r in 0..l {
        let slice = g.gather_rows(db, (0..n).map(|d| d * l + r).collect())?;
        per_row.push(g.matmul(weights, slice)?);
    }
    let stacked = g.concat_rows(&per_row)?;
    // stacked is l-major: row r*k + i holds S_{i, r}.
    let order = (0..k).flat_map(|i| (0..l).map(move |r| r * k + i)).collect();
    Ok(g.gather_rows(stacked, order)?)
}

/// Plain-value selection: one `L×N` matrix per selection row.
pub fn select_embeddings(weights: &Matrix, db: &[InstanceEmbedding]) -> Result<Vec<Matrix>> {
    let first = db.first().ok_or(RetrieverError::EmptySubset)?;
    if weights.cols() != db.len() {
        return Err(RetrieverError::ShapeMismatch(weights.shape(), (db.len(), first.rows.cols())));
    }
    let (l, n) = first.rows.shape();
    let mut out = Vec::with_capacity(weights.rows());
    for k in 0..weights.rows() {
        let mut s = Matrix::zeros(l, n);
        for (d, e) in db.iter().enumerate() {
            if e.rows.shape() != (l, n) {
                return Err(RetrieverError::ShapeMismatch((l, n), e.rows.shape()));
            }
            let w = weights.get(k, d);
            for (o, &x) in s.data_mut().iter_mut().zip(e.rows.data()) {
                *o += w * x;
            }
        }
        out.push(s);
    }
    Ok(out)
}

/// Indices of the `k` nearest database entries, ascending by distance, ties
/// broken by index.
pub fn hard_topk(e_in: &InstanceEmbedding, db: &[InstanceEmbedding], k: usize) -> Result<(Vec<usize>, Vec<f64>)> {
    if k > db.len() {
        return Err(RetrieverError::TooMany { requested: k, available: db.len() });
    }
    let mut scored: Vec<(f64, usize)> =
        db.iter().enumerate().map(|(i, e)| dist(e_in, e).map(|d| (d, i))).collect::<Result<_>>()?;
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    scored.truncate(k);
    Ok((scored.iter().map(|s| s.1).collect(), scored.iter().map(|s| s.0).collect()))
}

/// `k` distinct indices drawn uniformly without replacement.
pub fn random_select(db_len: usize, k: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    if k > db_len {
        return Err(RetrieverError::TooMany { requested: k, available: db_len });
    }
    Ok(index::sample(rng, db_len, k).into_vec())
}

/// `m` distinct indices from `0..db_len`, never `exclude`, ascending.
pub fn sample_subset(db_len: usize, m: usize, exclude: Option<usize>, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    let excluded = exclude.filter(|&e| e < db_len).is_some() as usize;
    let available = db_len - excluded;
    if m > available {
        return Err(RetrieverError::TooMany { requested: m, available });
    }
    let mut picked: Vec<usize> = index::sample(rng, available, m)
        .into_iter()
        .map(|i| match exclude {
            Some(e) if i >= e && excluded == 1 => i + 1,
            _ => i,
        })
        .collect();
    picked.sort_unstable();
    Ok(picked)
}
