//! Embedding tables and the scoring backend: centering, LDA, length
//! normalization, two-covariance PLDA and equal-weight score fusion.

use std::collections::hash_map::Entry;
use std::collections::{HashMap, HashSet};
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::Array1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Corpus, Trial};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::records::{write_atomic, Record, RecordFile};

pub const EMBEDDING_MAGIC: [u8; 4] = *b"AXEM";
pub const BACKEND_MAGIC: [u8; 4] = *b"AXBE";
/// Smallest eigenvalue kept in the within-class covariance.
pub const WITHIN_FLOOR: f64 = 1e-8;
/// Ridge added to the LDA within-class scatter, relative to its mean
/// eigenvalue.
pub const LDA_RIDGE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Default)]
pub struct EmbeddingTable {
    pub ids: Vec<String>,
    pub vectors: Vec<Array1<f64>>,
}

impl EmbeddingTable {
    pub fn new(ids: Vec<String>, vectors: Vec<Array1<f64>>) -> Result<Self> {
        if ids.len() != vectors.len() {
            return Err(Error::Shape(format!("{} ids for {} vectors", ids.len(), vectors.len())));
        }
        if let Some(v) = vectors.iter().find(|v| v.len() != vectors[0].len()) {
            return Err(Error::Shape(format!(
                "embedding dimensions {} and {} differ",
                vectors[0].len(),
                v.len()
            )));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(Error::InvalidArgument(format!("duplicate utterance id {dup}")));
        }
        Ok(Self { ids, vectors })
    }

    pub fn dim(&self) -> usize {
        self.vectors.first().map_or(0, |v| v.len())
    }

    pub fn index(&self) -> HashMap<&str, usize> {
        self.ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect()
    }

    pub fn get(&self, id: &str) -> Option<&Array1<f64>> {
        self.ids.iter().position(|i| i == id).map(|i| &self.vectors[i])
    }

    pub fn to_records(&self) -> RecordFile {
        let mut f = RecordFile::new(EMBEDDING_MAGIC, format!("{{\"dim\":{}}}", self.dim()));
        for (id, v) in self.ids.iter().zip(&self.vectors) {
            f.push(Record::new(id.clone(), vec![v.len()], v.to_vec()));
        }
        f
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_records().write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = RecordFile::read(path, EMBEDDING_MAGIC)?;
        let (ids, vectors) = f
            .records
            .into_iter()
            .map(|r| (r.name, Array1::from_vec(r.data)))
            .unzip();
        Self::new(ids, vectors)
    }
}

/// Embeds every utterance of `corpus` in inference mode, in corpus order.
pub fn extract_embeddings(model: &Model, corpus: &Corpus) -> Result<EmbeddingTable> {
    let min = model.config.min_frames();
    let short: Vec<&str> = corpus
        .utterances
        .iter()
        .filter(|u| u.features.nrows() < min)
        .map(|u| u.utt_id.as_str())
        .collect();
    if !short.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "utterances shorter than {min} frames: {}",
            short.join(", ")
        )));
    }
    let vectors = corpus
        .utterances
        .par_iter()
        .map(|u| model.embed(&u.features))
        .collect::<Result<Vec<_>>>()?;
    EmbeddingTable::new(corpus.utterances.iter().map(|u| u.utt_id.clone()).collect(), vectors)
}

fn to_dvector(v: &Array1<f64>) -> DVector<f64> {
    DVector::from_iterator(v.len(), v.iter().copied())
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Centering followed by an LDA projection; outputs are length-normalized.
#[derive(Clone, Debug, PartialEq)]
pub struct Preprocess {
    pub mean: DVector<f64>,
    /// `lda_dim × E`.
    pub projection: DMatrix<f64>,
}

impl Preprocess {
    pub fn fit(vectors: &[Array1<f64>], labels: &[usize], lda_dim: usize) -> Result<Self> {
        if vectors.is_empty() || vectors.len() != labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{} vectors with {} labels",
                vectors.len(),
                labels.len()
            )));
        }
        let e = vectors[0].len();
        let classes = group(labels);
        let max_dim = e.min(classes.len().saturating_sub(1));
        if lda_dim == 0 || lda_dim > max_dim {
            return Err(Error::InvalidArgument(format!(
                "lda_dim {lda_dim} must be in 1..={max_dim} for {e}-dimensional vectors of {} classes",
                classes.len()
            )));
        }
        let xs: Vec<DVector<f64>> = vectors.iter().map(to_dvector).collect();
        let n = xs.len() as f64;
        let mean = xs.iter().fold(DVector::zeros(e), |a, x| a + x) / n;
        let mut sw = DMatrix::zeros(e, e);
        let mut sb = DMatrix::zeros(e, e);
        for members in classes.values() {
            let m = members.iter().fold(DVector::zeros(e), |a, &i| a + &xs[i]) / members.len() as f64;
            for &i in members {
                let d = &xs[i] - &m;
                sw += &d * d.transpose();
            }
            let d = &m - &mean;
            sb += (&d * d.transpose()) * members.len() as f64;
        }
        sw /= n;
        sb /= n;
        let scale = sw.trace() / e as f64;
        let ridge = LDA_RIDGE * if scale > 0.0 { scale } else { 1.0 };
        for i in 0..e {
            sw[(i, i)] += ridge;
        }
        let chol = symmetrize(&sw)
            .cholesky()
            .ok_or_else(|| Error::InvalidArgument("within-class scatter is not positive definite".into()))?;
        let l_inv = chol
            .l()
            .solve_lower_triangular(&DMatrix::identity(e, e))
            .expect("cholesky factor is invertible");
        let whitened = symmetrize(&(&l_inv * &sb * l_inv.transpose()));
        let eig = SymmetricEigen::new(whitened);
        let mut order: Vec<usize> = (0..e).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
        let mut projection = DMatrix::zeros(lda_dim, e);
        for (row, &k) in order.iter().take(lda_dim).enumerate() {
            let mut w = l_inv.transpose() * eig.eigenvectors.column(k);
            // fix the sign so refits give identical outputs
            let pivot = w.iter().copied().fold(0.0, |a: f64, v| if v.abs() > a.abs() { v } else { a });
            if pivot < 0.0 {
                w.neg_mut();
            }
            projection.row_mut(row).copy_from(&w.transpose());
        }
        Ok(Self { mean, projection })
    }

    pub fn lda_dim(&self) -> usize {
        self.projection.nrows()
    }

    /// Centered projection, before length normalization.
    pub fn project(&self, v: &Array1<f64>) -> Result<DVector<f64>> {
        if v.len() != self.mean.len() {
            return Err(Error::Shape(format!(
                "vector of dimension {} for a {}-dimensional transform",
                v.len(),
                self.mean.len()
            )));
        }
        Ok(&self.projection * (to_dvector(v) - &self.mean))
    }

    pub fn apply(&self, v: &Array1<f64>) -> Result<DVector<f64>> {
        Ok(length_normalize(self.project(v)?))
    }
}

/// Scales to unit Euclidean norm; the zero vector is returned unchanged.
pub fn length_normalize(v: DVector<f64>) -> DVector<f64> {
    let n = v.norm();
    if n > 0.0 {
        v / n
    } else {
        v
    }
}

fn group(labels: &[usize]) -> std::collections::BTreeMap<usize, Vec<usize>> {
    let mut g: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (i, &l) in labels.iter().enumerate() {
        g.entry(l).or_default().push(i);
    }
    g
}

/// Two-covariance PLDA: `x = mean + s + e`, `s ~ N(0, B)`, `e ~ N(0, W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PldaModel {
    pub mean: DVector<f64>,
    pub between: DMatrix<f64>,
    pub within: DMatrix<f64>,
}

#[derive(Clone, Debug)]
pub struct PldaFit {
    pub model: PldaModel,
    /// Total log-likelihood after initialization and after each iteration.
    pub log_likelihood: Vec<f64>,
    pub warnings: Vec<String>,
}

/// Rebuilds a symmetric matrix with eigenvalues clamped at `floor`.
fn clamp_eigen(m: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(symmetrize(m));
    let vals = eig.eigenvalues.map(|v| v.max(floor));
    symmetrize(&(&eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()))
}

fn log_det(m: &DMatrix<f64>) -> Result<f64> {
    let chol = symmetrize(m)
        .cholesky()
        .ok_or_else(|| Error::InvalidArgument("covariance is not positive definite".into()))?;
    Ok(2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>())
}

fn inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let chol = symmetrize(m)
        .cholesky()
        .ok_or_else(|| Error::InvalidArgument("covariance is not positive definite".into()))?;
    Ok(symmetrize(&chol.inverse()))
}

struct ClassStats {
    n: usize,
    /// Centered class mean.
    mean: DVector<f64>,
    /// Scatter of the members around their class mean.
    scatter: DMatrix<f64>,
}

fn class_stats(xs: &[DVector<f64>], labels: &[usize], mu: &DVector<f64>) -> Vec<ClassStats> {
    let d = mu.len();
    group(labels)
        .values()
        .map(|members| {
            let m = members.iter().fold(DVector::zeros(d), |a, &i| a + &xs[i]) / members.len() as f64;
            let scatter = members.iter().fold(DMatrix::zeros(d, d), |a, &i| {
                let r = &xs[i] - &m;
                a + &r * r.transpose()
            });
            ClassStats {
                n: members.len(),
                mean: m - mu,
                scatter,
            }
        })
        .collect()
}

/// Marginal log-likelihood of all vectors, classes independent.
fn total_log_likelihood(stats: &[ClassStats], b: &DMatrix<f64>, w: &DMatrix<f64>) -> Result<f64> {
    let d = w.nrows() as f64;
    let w_inv = inverse(w)?;
    let w_logdet = log_det(w)?;
    let mut cache: HashMap<usize, (DMatrix<f64>, f64)> = HashMap::new();
    let mut total = 0.0;
    for c in stats {
        let n = c.n as f64;
        if let Entry::Vacant(slot) = cache.entry(c.n) {
            let m = w + b * n;
            slot.insert((inverse(&m)?, log_det(&m)?));
        }
        let (m_inv, m_logdet) = &cache[&c.n];
        let within = (&w_inv * &c.scatter).trace();
        let between = n * (c.mean.transpose() * m_inv * &c.mean)[(0, 0)];
        total += -0.5 * n * d * (2.0 * std::f64::consts::PI).ln()
            - 0.5 * (n - 1.0) * w_logdet
            - 0.5 * m_logdet
            - 0.5 * within
            - 0.5 * between;
    }
    Ok(total)
}

/// Fits the model by EM with the mean fixed to the global mean.
pub fn plda_train(vectors: &[DVector<f64>], labels: &[usize], iters: usize) -> Result<PldaFit> {
    if vectors.is_empty() || vectors.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} vectors with {} labels",
            vectors.len(),
            labels.len()
        )));
    }
    let d = vectors[0].len();
    if vectors.iter().any(|v| v.len() != d) {
        return Err(Error::Shape("vectors of differing dimension".into()));
    }
    let n = vectors.len() as f64;
    let mu = vectors.iter().fold(DVector::zeros(d), |a, x| a + x) / n;
    let stats = class_stats(vectors, labels, &mu);
    let k = stats.len() as f64;
    if stats.iter().all(|c| c.n < 2) {
        return Err(Error::InvalidArgument(
            "at least one class needs two or more vectors".into(),
        ));
    }
    let within_df: f64 = stats.iter().map(|c| (c.n - 1) as f64).sum();
    let mut w = clamp_eigen(
        &(stats.iter().fold(DMatrix::zeros(d, d), |a, c| a + &c.scatter) / within_df),
        WITHIN_FLOOR,
    );
    let mut warnings = Vec::new();
    if stats.len() < 2 {
        warnings.push("single class: between-class covariance set to zero".to_string());
        let model = PldaModel {
            mean: mu,
            between: DMatrix::zeros(d, d),
            within: w,
        };
        let ll = total_log_likelihood(&stats, &model.between, &model.within)?;
        return Ok(PldaFit {
            model,
            log_likelihood: vec![ll],
            warnings,
        });
    }
    let mut b = clamp_eigen(
        &(stats.iter().fold(DMatrix::zeros(d, d), |a, c| a + &c.mean * c.mean.transpose()) / k),
        0.0,
    );
    let mut trace = vec![total_log_likelihood(&stats, &b, &w)?];
    for _ in 0..iters {
        // E-step in the B (B + W/n)^-1 form, which stays valid for singular B.
        let mut gains: HashMap<usize, (DMatrix<f64>, DMatrix<f64>)> = HashMap::new();
        let mut b_acc = DMatrix::zeros(d, d);
        let mut w_acc = DMatrix::zeros(d, d);
        for c in &stats {
            let (gain, cov) = gains.entry(c.n).or_insert_with(|| {
                let m = &b + &w / c.n as f64;
                let m_inv = inverse(&m).expect("B + W/n is positive definite");
                let gain = &b * m_inv;
                let cov = symmetrize(&(&b - &gain * &b));
                (gain, cov)
            });
            let s = &*gain * &c.mean;
            let ss = &s * s.transpose();
            b_acc += &ss + &*cov;
            // Σ_i (x_i - s)(x_i - s)^T around the centered class mean.
            let r = &c.mean - &s;
            w_acc += &c.scatter + (&r * r.transpose() + &*cov) * c.n as f64;
        }
        b = clamp_eigen(&(b_acc / k), 0.0);
        w = clamp_eigen(&(w_acc / n), WITHIN_FLOOR);
        trace.push(total_log_likelihood(&stats, &b, &w)?);
    }
    Ok(PldaFit {
        model: PldaModel {
            mean: mu,
            between: b,
            within: w,
        },
        log_likelihood: trace,
        warnings,
    })
}

/// Closed-form same-versus-different-speaker log-likelihood ratio.
#[derive(Clone, Debug)]
pub struct PldaScorer {
    mean: DVector<f64>,
    /// Quadratic form applied to each side.
    q: DMatrix<f64>,
    /// Symmetric cross term.
    p: DMatrix<f64>,
    constant: f64,
}

impl PldaScorer {
    pub fn new(model: &PldaModel) -> Result<Self> {
        let d = model.mean.len();
        let total = &model.between + &model.within;
        let mut same = DMatrix::zeros(2 * d, 2 * d);
        same.view_mut((0, 0), (d, d)).copy_from(&total);
        same.view_mut((d, d), (d, d)).copy_from(&total);
        same.view_mut((0, d), (d, d)).copy_from(&model.between);
        same.view_mut((d, 0), (d, d)).copy_from(&model.between);
        let same_inv = inverse(&same)?;
        let total_inv = inverse(&total)?;
        let a = symmetrize(&(same_inv.view((0, 0), (d, d)) + same_inv.view((d, d), (d, d)))) * 0.5;
        let c = symmetrize(&(same_inv.view((0, d), (d, d)) + same_inv.view((d, 0), (d, d)).transpose())) * 0.5;
        Ok(Self {
            mean: model.mean.clone(),
            q: a - total_inv,
            p: c,
            constant: 0.5 * (2.0 * log_det(&total)? - log_det(&same)?),
        })
    }

    pub fn score(&self, enroll: &DVector<f64>, test: &DVector<f64>) -> Result<f64> {
        let d = self.mean.len();
        if enroll.len() != d || test.len() != d {
            return Err(Error::Shape(format!(
                "scoring vectors of dimension {} and {} with a {d}-dimensional model",
                enroll.len(),
                test.len()
            )));
        }
        let e = enroll - &self.mean;
        let t = test - &self.mean;
        let quad = e.dot(&(&self.q * &e)) + t.dot(&(&self.q * &t)) + 2.0 * e.dot(&(&self.p * &t));
        Ok(self.constant - 0.5 * quad)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackendConfig {
    /// Defaults to `min(100, classes - 1, E)`.
    pub lda_dim: Option<usize>,
    pub plda_iters: usize,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            lda_dim: None,
            plda_iters: 20,
        }
    }
}

/// Fitted preprocessing plus PLDA, ready to score trials.
#[derive(Clone, Debug)]
pub struct Backend {
    pub preprocess: Preprocess,
    pub plda: PldaModel,
    scorer: PldaScorer,
}

impl Backend {
    pub fn new(preprocess: Preprocess, plda: PldaModel) -> Result<Self> {
        let scorer = PldaScorer::new(&plda)?;
        Ok(Self {
            preprocess,
            plda,
            scorer,
        })
    }

    pub fn fit(table: &EmbeddingTable, labels: &[usize], cfg: &BackendConfig) -> Result<(Self, PldaFit)> {
        let classes = group(labels).len();
        let lda_dim = cfg
            .lda_dim
            .unwrap_or_else(|| 100.min(classes.saturating_sub(1)).min(table.dim()));
        let preprocess = Preprocess::fit(&table.vectors, labels, lda_dim)?;
        let projected = table
            .vectors
            .iter()
            .map(|v| preprocess.apply(v))
            .collect::<Result<Vec<_>>>()?;
        let fit = plda_train(&projected, labels, cfg.plda_iters)?;
        Ok((Self::new(preprocess, fit.model.clone())?, fit))
    }

    pub fn score_vectors(&self, enroll: &Array1<f64>, test: &Array1<f64>) -> Result<f64> {
        self.scorer
            .score(&self.preprocess.apply(enroll)?, &self.preprocess.apply(test)?)
    }

    /// Scores `trials` in order.
    pub fn score_trials(&self, table: &EmbeddingTable, trials: &[Trial]) -> Result<Vec<Score>> {
        let index = table.index();
        let lookup = |id: &str| {
            index
                .get(id)
                .map(|&i| &table.vectors[i])
                .ok_or_else(|| Error::Missing(format!("embedding for {id}")))
        };
        let projected: HashMap<&str, DVector<f64>> = trials
            .iter()
            .flat_map(|t| [t.enroll.as_str(), t.test.as_str()])
            .collect::<HashSet<_>>()
            .into_iter()
            .map(|id| Ok((id, self.preprocess.apply(lookup(id)?)?)))
            .collect::<Result<_>>()?;
        trials
            .par_iter()
            .map(|t| {
                Ok(Score {
                    enroll: t.enroll.clone(),
                    test: t.test.clone(),
                    score: self.scorer.score(&projected[t.enroll.as_str()], &projected[t.test.as_str()])?,
                })
            })
            .collect()
    }

    pub fn to_records(&self) -> RecordFile {
        let mut f = RecordFile::new(
            BACKEND_MAGIC,
            format!(
                "{{\"embedding_dim\":{},\"lda_dim\":{}}}",
                self.preprocess.mean.len(),
                self.preprocess.lda_dim()
            ),
        );
        let mat = |name: &str, m: &DMatrix<f64>| {
            // row-major on disk
            Record::new(name, vec![m.nrows(), m.ncols()], m.transpose().iter().copied().collect())
        };
        let vec = |name: &str, v: &DVector<f64>| Record::new(name, vec![v.len()], v.iter().copied().collect());
        f.push(vec("preprocess.mean", &self.preprocess.mean));
        f.push(mat("preprocess.projection", &self.preprocess.projection));
        f.push(vec("plda.mean", &self.plda.mean));
        f.push(mat("plda.between", &self.plda.between));
        f.push(mat("plda.within", &self.plda.within));
        f
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_records().write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = RecordFile::read(path, BACKEND_MAGIC)?;
        let get = |name: &str, rank: usize| {
            f.get(name)
                .filter(|r| r.shape.len() == rank)
                .ok_or_else(|| Error::format(path, format!("missing or malformed record {name}")))
        };
        let vec = |name: &str| get(name, 1).map(|r| DVector::from_vec(r.data.clone()));
        let mat = |name: &str| get(name, 2).map(|r| DMatrix::from_row_slice(r.shape[0], r.shape[1], &r.data));
        let preprocess = Preprocess {
            mean: vec("preprocess.mean")?,
            projection: mat("preprocess.projection")?,
        };
        let plda = PldaModel {
            mean: vec("plda.mean")?,
            between: mat("plda.between")?,
            within: mat("plda.within")?,
        };
        if preprocess.projection.ncols() != preprocess.mean.len()
            || plda.mean.len() != preprocess.lda_dim()
            || plda.between.shape() != (plda.mean.len(), plda.mean.len())
            || plda.within.shape() != (plda.mean.len(), plda.mean.len())
        {
            return Err(Error::format(path, "inconsistent backend dimensions"));
        }
        Self::new(preprocess, plda)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Score {
    pub enroll: String,
    pub test: String,
    pub score: f64,
}

pub fn scores_to_string(scores: &[Score]) -> String {
    scores
        .iter()
        .map(|s| format!("{} {} {:.6}\n", s.enroll, s.test, s.score))
        .collect()
}

pub fn write_scores(path: &Path, scores: &[Score]) -> Result<()> {
    write_atomic(path, scores_to_string(scores).as_bytes())
}

pub fn read_scores(path: &Path) -> Result<Vec<Score>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let f: Vec<&str> = l.split_whitespace().collect();
            let parsed = match f.as_slice() {
                [e, t, s] => s.parse::<f64>().ok().filter(|v| v.is_finite()).map(|v| (e, t, v)),
                _ => None,
            };
            let (e, t, score) =
                parsed.ok_or_else(|| Error::format(path, format!("line {} is not `enroll test score`", i + 1)))?;
            Ok(Score {
                enroll: e.to_string(),
                test: t.to_string(),
                score,
            })
        })
        .collect()
}

/// Per-trial mean over systems, in the trial order of the first list.
pub fn fuse_scores(lists: &[Vec<Score>]) -> Result<Vec<Score>> {
    let first = lists
        .first()
        .ok_or_else(|| Error::InvalidArgument("nothing to fuse".into()))?;
    let maps: Vec<HashMap<(&str, &str), f64>> = lists[1..]
        .iter()
        .map(|l| l.iter().map(|s| ((s.enroll.as_str(), s.test.as_str()), s.score)).collect())
        .collect();
    let keys: HashSet<(&str, &str)> = first.iter().map(|s| (s.enroll.as_str(), s.test.as_str())).collect();
    for (k, l) in lists.iter().enumerate().skip(1) {
        if let Some(extra) = l.iter().find(|s| !keys.contains(&(s.enroll.as_str(), s.test.as_str()))) {
            return Err(Error::Missing(format!(
                "trial {} {} of list {k} in list 0",
                extra.enroll, extra.test
            )));
        }
    }
    first
        .iter()
        .map(|s| {
            let mut sum = s.score;
            for (k, m) in maps.iter().enumerate() {
                sum += m.get(&(s.enroll.as_str(), s.test.as_str())).ok_or_else(|| {
                    Error::Missing(format!("trial {} {} in list {}", s.enroll, s.test, k + 1))
                })?;
            }
            Ok(Score {
                enroll: s.enroll.clone(),
                test: s.test.clone(),
                score: sum / lists.len() as f64,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(rng: &mut ChaCha8Rng, d: usize) -> DVector<f64> {
        DVector::from_fn(d, |_, _| StandardNormal.sample(rng))
    }

    fn randm(rng: &mut ChaCha8Rng, d: usize) -> DMatrix<f64> {
        DMatrix::from_fn(d, d, |_, _| StandardNormal.sample(rng))
    }

    fn random_orthogonal(rng: &mut ChaCha8Rng, d: usize) -> DMatrix<f64> {
        randm(rng, d).qr().q()
    }

    fn frob_rel(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        (a - b).norm() / b.norm()
    }

    #[test]
    fn lda_finds_the_separating_axis() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut vs = Vec::new();
        let mut labels = Vec::new();
        for c in 0..2 {
            for _ in 0..200 {
                let mut v = randn(&mut rng, 3);
                v[0] = v[0] * 0.3 + if c == 0 { -2.0 } else { 2.0 };
                v[1] *= 2.0;
                vs.push(Array1::from_iter(v.iter().copied()));
                labels.push(c);
            }
        }
        let p = Preprocess::fit(&vs, &labels, 1).unwrap();
        let w = p.projection.row(0).transpose();
        assert!((w[0] / w.norm()).abs() > 0.999);
        let mean = vs.iter().map(|v| p.project(v).unwrap()).fold(DVector::zeros(1), |a, x| a + x) / vs.len() as f64;
        assert!(mean.norm() < 1e-9);
        for v in &vs {
            assert!((p.apply(v).unwrap().norm() - 1.0).abs() < 1e-12);
        }
        assert!(Preprocess::fit(&vs, &labels, 2).is_err());
        assert!(Preprocess::fit(&vs, &labels, 0).is_err());
    }

    #[test]
    fn lda_survives_singular_scatter() {
        let vs: Vec<Array1<f64>> = (0..6).map(|i| array![(i / 3) as f64, 0.0, 1.0]).collect();
        let labels = [0, 0, 0, 1, 1, 1];
        let p = Preprocess::fit(&vs, &labels, 1).unwrap();
        assert!(p.projection.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn length_norm_ignores_scale_after_centering() {
        let vs: Vec<Array1<f64>> = (0..12).map(|i| array![i as f64 % 3.0, (i * i) as f64 % 5.0, i as f64]).collect();
        let labels: Vec<usize> = (0..12).map(|i| i % 3).collect();
        let p = Preprocess::fit(&vs, &labels, 2).unwrap();
        let v = array![1.0, -2.0, 0.5];
        let mean = Array1::from_iter(p.mean.iter().copied());
        let scaled = &mean + &((&v - &mean) * 3.7);
        assert!((p.apply(&v).unwrap() - p.apply(&scaled).unwrap()).norm() < 1e-12);
    }

    fn gaussian_pdf(x: f64, var: f64) -> f64 {
        (-0.5 * x * x / var).exp() / (2.0 * std::f64::consts::PI * var).sqrt()
    }

    #[test]
    fn one_dimensional_score_matches_quadrature() {
        let (b, w) = (1.7, 0.6);
        let model = PldaModel {
            mean: DVector::from_element(1, 0.3),
            between: DMatrix::from_element(1, 1, b),
            within: DMatrix::from_element(1, 1, w),
        };
        let scorer = PldaScorer::new(&model).unwrap();
        for (e, t) in [(0.5, 1.1), (-2.0, 1.5), (0.3, 0.3), (3.0, 2.5)] {
            let (ec, tc) = (e - 0.3, t - 0.3);
            // Simpson over the latent speaker variable.
            let (lo, hi, n) = (-15.0, 15.0, 20000);
            let h = (hi - lo) / n as f64;
            let f = |s: f64| gaussian_pdf(s, b) * gaussian_pdf(ec - s, w) * gaussian_pdf(tc - s, w);
            let mut same = f(lo) + f(hi);
            for i in 1..n {
                same += f(lo + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
            }
            same *= h / 3.0;
            let diff = gaussian_pdf(ec, b + w) * gaussian_pdf(tc, b + w);
            let expected = same.ln() - diff.ln();
            let got = scorer
                .score(&DVector::from_element(1, e), &DVector::from_element(1, t))
                .unwrap();
            assert!((got - expected).abs() < 1e-8, "{got} vs {expected}");
        }
    }

    #[test]
    fn score_is_symmetric_and_zero_without_speaker_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = randm(&mut rng, 4);
        let model = PldaModel {
            mean: randn(&mut rng, 4),
            between: &a * a.transpose(),
            within: DMatrix::identity(4, 4) * 0.5,
        };
        let s = PldaScorer::new(&model).unwrap();
        let zero = PldaScorer::new(&PldaModel {
            between: DMatrix::zeros(4, 4),
            ..model.clone()
        })
        .unwrap();
        for _ in 0..20 {
            let (e, t) = (randn(&mut rng, 4), randn(&mut rng, 4));
            assert!((s.score(&e, &t).unwrap() - s.score(&t, &e).unwrap()).abs() < 1e-12);
            assert!(zero.score(&e, &t).unwrap().abs() < 1e-12);
        }
        assert!(s.score(&randn(&mut rng, 3), &randn(&mut rng, 4)).is_err());
    }

    #[test]
    fn score_is_rotation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d = 5;
        let a = randm(&mut rng, d);
        let c = randm(&mut rng, d);
        let model = PldaModel {
            mean: randn(&mut rng, d),
            between: &a * a.transpose(),
            within: &c * c.transpose() + DMatrix::identity(d, d) * 0.1,
        };
        let q = random_orthogonal(&mut rng, d);
        let rotated = PldaModel {
            mean: &q * &model.mean,
            between: &q * &model.between * q.transpose(),
            within: &q * &model.within * q.transpose(),
        };
        let (s, r) = (PldaScorer::new(&model).unwrap(), PldaScorer::new(&rotated).unwrap());
        for _ in 0..20 {
            let (e, t) = (randn(&mut rng, d), randn(&mut rng, d));
            let want = s.score(&e, &t).unwrap();
            let got = r.score(&(&q * &e), &(&q * &t)).unwrap();
            assert!((want - got).abs() < 1e-9 * want.abs().max(1.0));
        }
    }

    #[test]
    fn single_class_gives_zero_between() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let vs: Vec<DVector<f64>> = (0..10).map(|_| randn(&mut rng, 3)).collect();
        let fit = plda_train(&vs, &[0; 10], 5).unwrap();
        assert_eq!(fit.model.between, DMatrix::zeros(3, 3));
        assert_eq!(fit.warnings.len(), 1);
        assert!(plda_train(&vs[..2], &[0, 1], 5).is_err());
    }

    #[test]
    fn em_recovers_known_covariances() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let d = 10;
        let q = random_orthogonal(&mut rng, d);
        let b_eig = DVector::from_fn(d, |i, _| 3.0 * 0.7f64.powi(i as i32));
        let w_eig = DVector::from_fn(d, |i, _| 0.2 + 0.1 * i as f64);
        let b0 = &q * DMatrix::from_diagonal(&b_eig) * q.transpose();
        let w0 = DMatrix::from_diagonal(&w_eig);
        let mean = randn(&mut rng, d);
        let (lb, lw) = (b0.clone().cholesky().unwrap().l(), w0.clone().cholesky().unwrap().l());
        let mut vs = Vec::new();
        let mut labels = Vec::new();
        for c in 0..1000 {
            let s = &lb * randn(&mut rng, d);
            for _ in 0..5 {
                vs.push(&mean + &s + &lw * randn(&mut rng, d));
                labels.push(c);
            }
        }
        let fit = plda_train(&vs, &labels, 30).unwrap();
        for w in fit.log_likelihood.windows(2) {
            assert!(w[1] >= w[0] - 1e-9 * w[0].abs(), "{} -> {}", w[0], w[1]);
        }
        assert!(frob_rel(&fit.model.between, &b0) < 0.1, "B {}", frob_rel(&fit.model.between, &b0));
        assert!(frob_rel(&fit.model.within, &w0) < 0.1, "W {}", frob_rel(&fit.model.within, &w0));
    }

    fn sc(e: &str, t: &str, s: f64) -> Score {
        Score {
            enroll: e.into(),
            test: t.into(),
            score: s,
        }
    }

    #[test]
    fn fusion_averages_and_names_missing_trials() {
        let a = vec![sc("x", "y", 1.0), sc("x", "z", -1.0)];
        let b = vec![sc("x", "z", 1.0), sc("x", "y", 3.0)];
        assert_eq!(fuse_scores(&[a.clone(), a.clone()]).unwrap(), a);
        let f = fuse_scores(&[a.clone(), b]).unwrap();
        assert_eq!(f, vec![sc("x", "y", 2.0), sc("x", "z", 0.0)]);
        let err = fuse_scores(&[a.clone(), vec![sc("x", "y", 3.0)]]).unwrap_err();
        assert!(err.to_string().contains("x z"), "{err}");
        let err = fuse_scores(&[a, vec![sc("x", "y", 3.0), sc("q", "r", 0.0)]]).unwrap_err();
        assert!(err.to_string().contains("q r"), "{err}");
    }

    #[test]
    fn files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let scores = vec![sc("a", "b", 1.23456789), sc("c", "d", -0.5)];
        let path = dir.path().join("scores");
        write_scores(&path, &scores).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "a b 1.234568\nc d -0.500000\n");
        let back = read_scores(&path).unwrap();
        assert_eq!(back[1], scores[1]);

        let table = EmbeddingTable::new(vec!["u1".into(), "u2".into()], vec![array![1.0, 2.0], array![3.0, 4.5]]).unwrap();
        let tp = dir.path().join("emb");
        table.save(&tp).unwrap();
        assert_eq!(EmbeddingTable::load(&tp).unwrap(), table);
        assert!(EmbeddingTable::new(vec!["u".into(), "u".into()], vec![array![1.0], array![2.0]]).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let vs: Vec<Array1<f64>> = (0..40).map(|_| Array1::from_iter(randn(&mut rng, 4).iter().copied())).collect();
        let labels: Vec<usize> = (0..40).map(|i| i % 5).collect();
        let table = EmbeddingTable::new((0..40).map(|i| format!("u{i}")).collect(), vs).unwrap();
        let (backend, _) = Backend::fit(&table, &labels, &BackendConfig::default()).unwrap();
        assert_eq!(backend.preprocess.lda_dim(), 4);
        let bp = dir.path().join("backend");
        backend.save(&bp).unwrap();
        let back = Backend::load(&bp).unwrap();
        let trials = vec![Trial {
            enroll: "u1".into(),
            test: "u7".into(),
            target: false,
        }];
        assert_eq!(
            back.score_trials(&table, &trials).unwrap(),
            backend.score_trials(&table, &trials).unwrap()
        );
        let missing = vec![Trial {
            enroll: "u1".into(),
            test: "nope".into(),
            target: false,
        }];
        assert!(backend.score_trials(&table, &missing).unwrap_err().to_string().contains("nope"));
    }
}
