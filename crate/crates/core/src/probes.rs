//! Flip-prediction linear probes on decision-token hidden states.
//!
//! Each leave-one-out fold fits an L2-regularized logistic regression with an
//! unpenalized intercept, minimizing `0.5 * l2 * |w|^2 + sum_i c_i * loss_i`
//! where `c_i` are balanced class weights of the training fold. The optimal
//! `w` lies in the span of the training rows, so each fold is solved exactly
//! in the coordinates of a QR basis of that span (at most `n - 1` columns
//! regardless of the hidden width). Fold bases do not depend on labels and
//! are shared across permutation iterations.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::actstore::{ActivationDump, Condition};
use crate::behavior::CaseOutcome;
use crate::error::{Error, Result};
use crate::rng;
use crate::stats::average_ranks;

pub const DEFAULT_L2: f64 = 1.0;
pub const DEFAULT_PERMUTATIONS: usize = 1000;
const GRAD_TOL: f64 = 1e-8;
const MAX_NEWTON: usize = 100;
const DECREMENT_TOL: f64 = 1e-18;

/// Decision-token hidden states with binary flip labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeDataset {
    pub case_ids: Vec<String>,
    /// Row-major `n x d`.
    pub x: Vec<f64>,
    pub d: usize,
    pub y: Vec<bool>,
    pub layer: u32,
    /// e.g. `NL->NF`.
    pub transition: String,
}

impl ProbeDataset {
    pub fn new(case_ids: Vec<String>, x: Vec<f64>, d: usize, y: Vec<bool>, layer: u32, transition: impl Into<String>) -> Result<Self> {
        let n = y.len();
        if case_ids.len() != n || x.len() != n * d {
            return Err(Error::shape(format!(
                "probe data: {} ids, {} labels, {} values for width {d}",
                case_ids.len(),
                n,
                x.len()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("probe hidden states"));
        }
        Ok(ProbeDataset {
            case_ids,
            x,
            d,
            y,
            layer,
            transition: transition.into(),
        })
    }

    /// Decision rows of `dumps` labelled from `flips`; every dump needs a label.
    pub fn from_dumps(dumps: &[ActivationDump], flips: &BTreeMap<String, bool>, transition: impl Into<String>) -> Result<Self> {
        let first = dumps.first().ok_or(Error::Empty("probe dumps"))?;
        let mut sorted: Vec<&ActivationDump> = dumps.iter().collect();
        sorted.sort_by(|a, b| a.case_id.cmp(&b.case_id));
        let mut ids = Vec::new();
        let mut x = Vec::new();
        let mut y = Vec::new();
        for d in sorted {
            if d.dim != first.dim || d.layer != first.layer || d.condition != first.condition {
                return Err(Error::invariant(format!(
                    "probe dump {} differs in width, layer or condition",
                    d.case_id
                )));
            }
            let label = flips
                .get(&d.case_id)
                .ok_or_else(|| Error::missing(&d.case_id, "no flip label"))?;
            ids.push(d.case_id.clone());
            x.extend(d.decision_row().iter().map(|&v| f64::from(v)));
            y.push(*label);
        }
        ProbeDataset::new(ids, x, first.dim, y, first.layer, transition)
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn positives(&self) -> usize {
        self.y.iter().filter(|&&v| v).count()
    }

    pub fn prevalence(&self) -> f64 {
        self.positives() as f64 / self.n() as f64
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.d..(i + 1) * self.d]
    }
}

/// Per-case correctness of one condition.
pub fn correctness(outcomes: &[CaseOutcome], cond: Condition) -> Result<BTreeMap<String, bool>> {
    outcomes
        .iter()
        .map(|o| Ok((o.case_id.clone(), o.is_correct(cond)?)))
        .collect()
}

/// `y = correct(source) != correct(target)` per case.
pub fn build_flip_labels(
    source: &BTreeMap<String, bool>,
    target: &BTreeMap<String, bool>,
) -> Result<BTreeMap<String, bool>> {
    if let Some(c) = target.keys().find(|c| !source.contains_key(*c)) {
        return Err(Error::missing(c, "no source-condition correctness"));
    }
    source
        .iter()
        .map(|(c, &s)| {
            let t = target
                .get(c)
                .ok_or_else(|| Error::missing(c, "no target-condition correctness"))?;
            Ok((c.clone(), s != *t))
        })
        .collect()
}

/// Probe fitting options.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub l2: f64,
    pub balanced: bool,
    /// Standardize each dimension on the training fold.
    pub standardize: bool,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            l2: DEFAULT_L2,
            balanced: true,
            standardize: true,
        }
    }
}

struct Fold {
    train: Vec<usize>,
    /// Training rows in the reduced basis, `m x r`.
    feats: DMatrix<f64>,
    /// Held-out row in the reduced basis.
    test: DVector<f64>,
}

/// Label-independent LOOCV folds of a dataset.
pub struct LoocvPlan {
    folds: Vec<Fold>,
    config: ProbeConfig,
}

impl LoocvPlan {
    pub fn new(ds: &ProbeDataset, config: ProbeConfig) -> Result<Self> {
        let n = ds.n();
        if n < 3 {
            return Err(Error::Insufficient(format!("probe needs at least 3 cases, got {n}")));
        }
        if !(config.l2 > 0.0) || !config.l2.is_finite() {
            return Err(Error::invariant("l2 strength must be positive"));
        }
        let d = ds.d;
        let folds = (0..n)
            .into_par_iter()
            .map(|i| {
                let train: Vec<usize> = (0..n).filter(|&j| j != i).collect();
                let m = train.len();
                let (mut mu, mut sd) = (vec![0.0; d], vec![1.0; d]);
                if config.standardize {
                    for &j in &train {
                        for (a, &v) in mu.iter_mut().zip(ds.row(j)) {
                            *a += v;
                        }
                    }
                    mu.iter_mut().for_each(|a| *a /= m as f64);
                    let mut var = vec![0.0; d];
                    for &j in &train {
                        for ((s, &v), &u) in var.iter_mut().zip(ds.row(j)).zip(&mu) {
                            *s += (v - u) * (v - u);
                        }
                    }
                    for (s, v) in sd.iter_mut().zip(var) {
                        let std = (v / m as f64).sqrt();
                        *s = if std > 0.0 { std } else { 1.0 };
                    }
                }
                let z = |j: usize| ds.row(j).iter().zip(&mu).zip(&sd).map(|((&v, &u), &s)| (v - u) / s);
                // columns are training rows: d x m
                let zt = DMatrix::from_fn(d, m, |r, c| {
                    let j = train[c];
                    (ds.row(j)[r] - mu[r]) / sd[r]
                });
                let qr = zt.qr();
                let (q, r) = (qr.q(), qr.r());
                let feats = r.transpose();
                let zi = DVector::from_iterator(d, z(i));
                let test = q.transpose() * zi;
                Fold { train, feats, test }
            })
            .collect();
        Ok(LoocvPlan { folds, config })
    }

    /// Out-of-fold decision values for labels `y`.
    pub fn scores(&self, y: &[bool]) -> Result<Vec<f64>> {
        check_classes(y)?;
        self.folds
            .iter()
            .map(|f| {
                let yt: Vec<bool> = f.train.iter().map(|&j| y[j]).collect();
                let (w, b) = fit_logistic(&f.feats, &yt, self.config.l2, self.config.balanced)?;
                Ok(f.test.dot(&w) + b)
            })
            .collect()
    }
}

fn check_classes(y: &[bool]) -> Result<()> {
    let pos = y.iter().filter(|&&v| v).count();
    let neg = y.len() - pos;
    if pos < 2 || neg < 2 {
        return Err(Error::Insufficient(format!(
            "each class needs at least 2 cases for leave-one-out training ({pos} positive, {neg} negative)"
        )));
    }
    Ok(())
}

fn sigmoid(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(s)) - y * s`, stable for large `|s|`.
fn logistic_loss(s: f64, y: bool) -> f64 {
    let softplus = if s > 0.0 { s + (-s).exp().ln_1p() } else { s.exp().ln_1p() };
    softplus - if y { s } else { 0.0 }
}

/// Damped Newton solve of the weighted, L2-penalized logistic objective.
/// Returns `(w, intercept)`.
fn fit_logistic(x: &DMatrix<f64>, y: &[bool], l2: f64, balanced: bool) -> Result<(DVector<f64>, f64)> {
    let (m, r) = x.shape();
    let pos = y.iter().filter(|&&v| v).count();
    let weights: Vec<f64> = y
        .iter()
        .map(|&v| {
            if balanced {
                m as f64 / (2.0 * if v { pos } else { m - pos } as f64)
            } else {
                1.0
            }
        })
        .collect();
    let objective = |theta: &DVector<f64>| -> f64 {
        let w = theta.rows(0, r);
        let b = theta[r];
        let s = x * w + DVector::from_element(m, b);
        0.5 * l2 * w.norm_squared()
            + s.iter().zip(y).zip(&weights).map(|((&si, &yi), &c)| c * logistic_loss(si, yi)).sum::<f64>()
    };
    let mut theta = DVector::<f64>::zeros(r + 1);
    let mut f_cur = objective(&theta);
    for _ in 0..MAX_NEWTON {
        let w = theta.rows(0, r).into_owned();
        let s = x * &w + DVector::from_element(m, theta[r]);
        let p: Vec<f64> = s.iter().map(|&v| sigmoid(v)).collect();
        let mut grad = DVector::<f64>::zeros(r + 1);
        let mut hess = DMatrix::<f64>::zeros(r + 1, r + 1);
        for k in 0..r {
            grad[k] = l2 * w[k];
            hess[(k, k)] = l2;
        }
        for i in 0..m {
            let resid = weights[i] * (p[i] - f64::from(u8::from(y[i])));
            let curv = weights[i] * p[i] * (1.0 - p[i]);
            let row = x.row(i);
            for a in 0..r {
                grad[a] += resid * row[a];
                let ra = curv * row[a];
                for b in 0..=a {
                    hess[(a, b)] += ra * row[b];
                }
                hess[(r, a)] += ra;
            }
            grad[r] += resid;
            hess[(r, r)] += curv;
        }
        for a in 0..=r {
            for b in 0..a {
                hess[(b, a)] = hess[(a, b)];
            }
        }
        if grad.amax() < GRAD_TOL {
            break;
        }
        let step = match hess.clone().cholesky() {
            Some(ch) => ch.solve(&grad),
            None => {
                let mut h = hess;
                for a in 0..=r {
                    h[(a, a)] += 1e-10;
                }
                h.cholesky()
                    .ok_or_else(|| Error::Internal("probe Hessian is not positive definite".into()))?
                    .solve(&grad)
            }
        };
        let slope = grad.dot(&step);
        // half the squared Newton decrement bounds the remaining suboptimality
        if slope * 0.5 <= DECREMENT_TOL * (1.0 + f_cur.abs()) {
            theta -= step;
            break;
        }
        let mut t = 1.0;
        let mut improved = false;
        for _ in 0..60 {
            let cand = &theta - &step * t;
            let f_new = objective(&cand);
            if f_new <= f_cur - 1e-4 * t * slope {
                // a step that no longer lowers f means rounding is all that is left
                improved = f_new < f_cur;
                theta = cand;
                f_cur = f_new;
                break;
            }
            t *= 0.5;
        }
        if !improved {
            break;
        }
    }
    let w = theta.rows(0, r).into_owned();
    Ok((w, theta[r]))
}

/// ROC-AUC via the Mann-Whitney rank statistic with average ranks for ties.
pub fn roc_auc(scores: &[f64], y: &[bool]) -> Result<f64> {
    let (pos, neg) = class_counts(scores, y)?;
    let ranks = average_ranks(scores);
    let rank_sum: f64 = ranks.iter().zip(y).filter(|(_, &v)| v).map(|(r, _)| r).sum();
    let p = pos as f64;
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * neg as f64))
}

/// Area under the precision-recall curve using the precision envelope
/// (each recall step takes the best precision at that recall or beyond).
/// Tied scores form a single threshold.
pub fn pr_auc(scores: &[f64], y: &[bool]) -> Result<f64> {
    let (pos, _) = class_counts(scores, y)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points: Vec<(f64, f64)> = Vec::new();
    let (mut tp, mut seen) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            tp += usize::from(y[order[j]]);
            seen += 1;
            j += 1;
        }
        points.push((tp as f64 / pos as f64, tp as f64 / seen as f64));
        i = j;
    }
    let mut best = 0.0f64;
    for p in points.iter_mut().rev() {
        best = best.max(p.1);
        p.1 = best;
    }
    let mut area = 0.0;
    let mut prev_recall = 0.0;
    for (recall, precision) in points {
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(area)
}

fn class_counts(scores: &[f64], y: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != y.len() {
        return Err(Error::shape("scores and labels differ in length"));
    }
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("probe scores"));
    }
    let pos = y.iter().filter(|&&v| v).count();
    let neg = y.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Insufficient("AUC needs both classes".into()));
    }
    Ok((pos, neg))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeMetric {
    RocAuc,
    PrAuc,
}

/// Add-one permutation p-values of both metrics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PermutationP {
    pub roc_auc: f64,
    pub pr_auc: f64,
    pub iterations: usize,
    pub seed: u64,
}

impl PermutationP {
    pub fn get(&self, metric: ProbeMetric) -> f64 {
        match metric {
            ProbeMetric::RocAuc => self.roc_auc,
            ProbeMetric::PrAuc => self.pr_auc,
        }
    }
}

/// Reruns the full LOOCV pipeline under `iterations` label permutations.
/// Permutation `j` is drawn from the stream `(seed, "probe_permutation", j)`.
pub fn permutation_test_with_plan(
    plan: &LoocvPlan,
    y: &[bool],
    observed: (f64, f64),
    iterations: usize,
    seed: u64,
) -> Result<PermutationP> {
    if iterations == 0 {
        return Err(Error::invariant("permutation test needs at least one iteration"));
    }
    let null: Vec<(f64, f64)> = (0..iterations)
        .into_par_iter()
        .map(|j| {
            let mut perm = y.to_vec();
            perm.shuffle(&mut rng::stream(seed, "probe_permutation", j as u64));
            let s = plan.scores(&perm)?;
            Ok((roc_auc(&s, &perm)?, pr_auc(&s, &perm)?))
        })
        .collect::<Result<_>>()?;
    // tolerance keeps exact ties from flipping on summation-order noise
    let tol = 1e-12;
    let count = |k: usize, obs: f64| {
        null.iter()
            .filter(|v| if k == 0 { v.0 } else { v.1 } >= obs - tol)
            .count()
    };
    let p = |c: usize| (1 + c) as f64 / (iterations + 1) as f64;
    Ok(PermutationP {
        roc_auc: p(count(0, observed.0)),
        pr_auc: p(count(1, observed.1)),
        iterations,
        seed,
    })
}

/// Permutation p-value of one metric.
pub fn permutation_test(
    ds: &ProbeDataset,
    metric: ProbeMetric,
    iterations: usize,
    seed: u64,
    config: ProbeConfig,
) -> Result<f64> {
    let plan = LoocvPlan::new(ds, config)?;
    let s = plan.scores(&ds.y)?;
    let observed = (roc_auc(&s, &ds.y)?, pr_auc(&s, &ds.y)?);
    Ok(permutation_test_with_plan(&plan, &ds.y, observed, iterations, seed)?.get(metric))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeResult {
    pub layer: u32,
    pub transition: String,
    pub n: usize,
    pub positives: usize,
    /// Positive prevalence; the PR-AUC of an uninformative probe.
    pub prevalence: f64,
    pub case_ids: Vec<String>,
    /// Out-of-fold decision values.
    pub scores: Vec<f64>,
    pub roc_auc: f64,
    pub pr_auc: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub permutation: Option<PermutationP>,
    pub config: ProbeConfig,
    pub seed: u64,
}

/// LOOCV scores and AUCs, plus permutation p-values when `iterations > 0`.
pub fn train_loocv(ds: &ProbeDataset, config: ProbeConfig, iterations: usize, seed: u64) -> Result<ProbeResult> {
    check_classes(&ds.y)?;
    let plan = LoocvPlan::new(ds, config)?;
    let scores = plan.scores(&ds.y)?;
    let roc = roc_auc(&scores, &ds.y)?;
    let pr = pr_auc(&scores, &ds.y)?;
    let permutation = if iterations > 0 {
        Some(permutation_test_with_plan(&plan, &ds.y, (roc, pr), iterations, seed)?)
    } else {
        None
    };
    Ok(ProbeResult {
        layer: ds.layer,
        transition: ds.transition.clone(),
        n: ds.n(),
        positives: ds.positives(),
        prevalence: ds.prevalence(),
        case_ids: ds.case_ids.clone(),
        scores,
        roc_auc: roc,
        pr_auc: pr,
        permutation,
        config,
        seed,
    })
}
