//! Per-category linear SVMs.
//!
//! Training solves the L2-regularized L1-hinge problem in the dual by
//! coordinate descent with a seeded visiting order. The bias is folded into
//! the weight vector through a constant feature of value 1, so the objective
//! actually minimized (and recorded) is
//!
//! ```text
//! 0.5 * (|w|^2 + b^2) + C * sum_i max(0, 1 - y_i (w . x_i + b))
//! ```

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{FeatureError, FeatureVector};
use crate::seed;

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error("training data needs both positive and negative labels")]
    DegenerateLabels,
    #[error("non-finite value in training data (row {0})")]
    NonFinite(usize),
    #[error("inconsistent training data: {0}")]
    BadTrainSet(String),
    #[error("invalid solver setting: {0}")]
    BadParams(String),
    #[error("feature space mismatch: model {model:?}, features {features:?}")]
    SpaceMismatch { model: String, features: String },
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error("{0}")]
    Other(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad model file {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

/// Rows with ±1 labels and caller-defined ids.
#[derive(Clone, Debug, Default)]
pub struct TrainSet {
    pub space_id: String,
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<i8>,
    pub ids: Vec<String>,
}

impl TrainSet {
    pub fn new(space_id: impl Into<String>) -> Self {
        Self {
            space_id: space_id.into(),
            ..Self::default()
        }
    }

    pub fn push(&mut self, id: impl Into<String>, features: Vec<f64>, label: i8) {
        self.ids.push(id.into());
        self.features.push(features);
        self.labels.push(label);
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<(), DetectorError> {
        let n = self.labels.len();
        if self.features.len() != n || self.ids.len() != n {
            return Err(DetectorError::BadTrainSet("row counts differ".into()));
        }
        let d = self.dim();
        for (i, row) in self.features.iter().enumerate() {
            if row.len() != d {
                return Err(DetectorError::BadTrainSet(format!("row {i} has dim {}, expected {d}", row.len())));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(DetectorError::NonFinite(i));
            }
        }
        if self.labels.iter().any(|&y| y != 1 && y != -1) {
            return Err(DetectorError::BadTrainSet("labels must be +1 or -1".into()));
        }
        if !(self.labels.contains(&1) && self.labels.contains(&-1)) {
            return Err(DetectorError::DegenerateLabels);
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SvmParams {
    pub c: f64,
    pub tol: f64,
    pub max_epochs: usize,
    pub seed: u64,
}

impl Default for SvmParams {
    fn default() -> Self {
        Self {
            c: 0.01,
            tol: 1e-4,
            max_epochs: 1000,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub c: f64,
    pub tol: f64,
    pub seed: u64,
    pub epochs: usize,
    pub converged: bool,
    pub objective: f64,
    pub n_pos: usize,
    pub n_neg: usize,
    pub mining_rounds: usize,
    /// Per mining round: (objective of the grown set under the old weights,
    /// objective after retraining, negatives scoring above the margin).
    #[serde(default)]
    pub mining: Vec<(f64, f64, usize)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub category: String,
    pub space_id: String,
    pub bias: f64,
    pub weights: Vec<f64>,
    pub train: TrainRecord,
}

impl LinearModel {
    pub fn decision(&self, x: &[f64]) -> f64 {
        dot(&self.weights, x) + self.bias
    }

    pub fn read(path: &Path) -> Result<Self, DetectorError> {
        let text = fs::read_to_string(path).map_err(|source| DetectorError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|source| DetectorError::Json {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }

    pub fn write(&self, path: &Path) -> Result<(), DetectorError> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|source| DetectorError::Io {
                path: parent.display().to_string(),
                source,
            })?;
        }
        fs::write(path, self.to_json()).map_err(|source| DetectorError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `w . v + b`, refusing vectors from another feature space.
pub fn score(model: &LinearModel, v: &FeatureVector) -> Result<f64, DetectorError> {
    if model.space_id != v.space_id {
        return Err(DetectorError::SpaceMismatch {
            model: model.space_id.clone(),
            features: v.space_id.clone(),
        });
    }
    if model.weights.len() != v.values.len() {
        return Err(DetectorError::BadTrainSet(format!(
            "model dim {} vs feature dim {}",
            model.weights.len(),
            v.values.len()
        )));
    }
    Ok(model.decision(&v.values))
}

/// Objective with the bias regularized as an ordinary weight.
pub fn primal_objective(weights: &[f64], bias: f64, data: &TrainSet, c: f64) -> f64 {
    let reg = 0.5 * (dot(weights, weights) + bias * bias);
    let loss: f64 = data
        .features
        .iter()
        .zip(&data.labels)
        .map(|(x, &y)| (1.0 - y as f64 * (dot(weights, x) + bias)).max(0.0))
        .sum();
    reg + c * loss
}

/// Result of the dual solve, exposed for inspection in tests.
#[derive(Clone, Debug)]
pub struct DualSolution {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub alpha: Vec<f64>,
    pub epochs: usize,
    pub converged: bool,
}

pub fn solve_dual(data: &TrainSet, params: &SvmParams) -> Result<DualSolution, DetectorError> {
    if !(params.c > 0.0 && params.c.is_finite()) {
        return Err(DetectorError::BadParams(format!("C must be positive, got {}", params.c)));
    }
    if params.tol.is_nan() || params.tol <= 0.0 {
        return Err(DetectorError::BadParams(format!("tol must be positive, got {}", params.tol)));
    }
    data.validate()?;
    let n = data.len();
    let d = data.dim();
    let c = params.c;
    // Augmented squared norms (the constant bias feature contributes 1).
    let qd: Vec<f64> = data.features.iter().map(|x| dot(x, x) + 1.0).collect();
    let mut alpha = vec![0.0; n];
    let mut w = vec![0.0; d];
    let mut b = 0.0;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = seed::rng(params.seed);
    let mut converged = false;
    let mut epochs = 0;

    while epochs < params.max_epochs {
        epochs += 1;
        order.shuffle(&mut rng);
        let mut max_violation: f64 = 0.0;
        for &i in &order {
            let y = data.labels[i] as f64;
            let x = &data.features[i];
            let g = y * (dot(&w, x) + b) - 1.0;
            let pg = if alpha[i] == 0.0 {
                g.min(0.0)
            } else if alpha[i] == c {
                g.max(0.0)
            } else {
                g
            };
            max_violation = max_violation.max(pg.abs());
            if pg != 0.0 {
                let old = alpha[i];
                alpha[i] = (old - g / qd[i]).clamp(0.0, c);
                let delta = (alpha[i] - old) * y;
                if delta != 0.0 {
                    w.iter_mut().zip(x).for_each(|(wj, xj)| *wj += delta * xj);
                    b += delta;
                }
            }
        }
        if max_violation < params.tol {
            converged = true;
            break;
        }
    }
    Ok(DualSolution {
        weights: w,
        bias: b,
        alpha,
        epochs,
        converged,
    })
}

pub fn train_svm(category: &str, data: &TrainSet, params: &SvmParams) -> Result<LinearModel, DetectorError> {
    let sol = solve_dual(data, params)?;
    let objective = primal_objective(&sol.weights, sol.bias, data, params.c);
    if !sol.converged {
        log::warn!(
            "svm for {category:?} stopped after {} epochs without reaching tol {}",
            sol.epochs,
            params.tol
        );
    }
    Ok(LinearModel {
        category: category.to_string(),
        space_id: data.space_id.clone(),
        bias: sol.bias,
        weights: sol.weights,
        train: TrainRecord {
            c: params.c,
            tol: params.tol,
            seed: params.seed,
            epochs: sol.epochs,
            converged: sol.converged,
            objective,
            n_pos: data.labels.iter().filter(|&&y| y == 1).count(),
            n_neg: data.labels.iter().filter(|&&y| y == -1).count(),
            mining_rounds: 0,
            mining: Vec::new(),
        },
    })
}

/// A candidate negative for mining, identified by a patch key.
pub struct MiningCandidate {
    pub id: String,
    pub features: Vec<f64>,
}

/// Supplies the negative-eligible candidates for one category. Called once per
/// round so callers can stream features instead of holding them all.
pub trait NegativePool {
    fn for_each_candidate(&self, visit: &mut dyn FnMut(MiningCandidate)) -> Result<(), DetectorError>;
}

impl NegativePool for Vec<(String, Vec<f64>)> {
    fn for_each_candidate(&self, visit: &mut dyn FnMut(MiningCandidate)) -> Result<(), DetectorError> {
        for (id, f) in self {
            visit(MiningCandidate {
                id: id.clone(),
                features: f.clone(),
            });
        }
        Ok(())
    }
}

/// Grows the negative set with the highest-scoring false positives from the
/// pool and retrains, `rounds` times. Candidates already in the training set
/// (by id) are skipped; only candidates scoring above -1 (inside the margin)
/// are eligible.
pub fn mine_hard_negatives(
    model: &LinearModel,
    data: &mut TrainSet,
    pool: &dyn NegativePool,
    rounds: usize,
    cap: usize,
    params: &SvmParams,
) -> Result<LinearModel, DetectorError> {
    let mut current = model.clone();
    let mut present: HashSet<String> = data.ids.iter().cloned().collect();
    for round in 0..rounds {
        let mut hard: Vec<(f64, String, Vec<f64>)> = Vec::new();
        let mut above_margin = 0usize;
        pool.for_each_candidate(&mut |cand| {
            let s = current.decision(&cand.features);
            if s > -1.0 {
                above_margin += 1;
                if !present.contains(&cand.id) {
                    hard.push((s, cand.id, cand.features));
                }
            }
        })?;
        if hard.is_empty() {
            log::debug!("mining round {round} for {:?}: no new hard negatives", current.category);
            current.train.mining.push((current.train.objective, current.train.objective, above_margin));
            current.train.mining_rounds = current.train.mining.len();
            continue;
        }
        hard.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
        hard.truncate(cap);
        for (_, id, f) in hard {
            present.insert(id.clone());
            data.push(id, f, -1);
        }
        let before = primal_objective(&current.weights, current.bias, data, params.c);
        let mut retrained = train_svm(&current.category, data, params)?;
        let mut log = std::mem::take(&mut current.train.mining);
        log.push((before, retrained.train.objective, above_margin));
        retrained.train.mining_rounds = log.len();
        retrained.train.mining = log;
        current = retrained;
    }
    Ok(current)
}
