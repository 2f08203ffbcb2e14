//! Correlation metrics, the PLCC training loss and rank-pair accuracy.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{invalid, Error, Result};
use crate::tensor::Matrix;

/// Guard added to the prediction variance inside [`plcc_loss`].
pub const PLCC_EPS: f64 = 1e-12;

fn check_pair(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(invalid(format!("length mismatch {} vs {}", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(invalid("correlation needs at least two samples"));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(invalid("non-finite value in correlation input"));
    }
    Ok(())
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson_raw(x: &[f64], y: &[f64]) -> Result<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("constant input".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

pub fn srocc(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    pearson_raw(&average_ranks(x), &average_ranks(y))
}

/// Pearson correlation, optionally after mapping `x` through a fitted
/// four-parameter logistic. A failed fit falls back to the raw value.
pub fn plcc(x: &[f64], y: &[f64], logistic_map: bool) -> Result<f64> {
    check_pair(x, y)?;
    let raw = pearson_raw(x, y)?;
    if !logistic_map {
        return Ok(raw);
    }
    match fit_logistic(x, y) {
        Some(fit) => {
            let mapped: Vec<f64> = x.iter().map(|&v| fit.eval(v)).collect();
            match pearson_raw(&mapped, y) {
                Ok(r) => Ok(r),
                Err(_) => {
                    log::warn!("logistic map collapsed to a constant; using raw PLCC");
                    Ok(raw)
                }
            }
        }
        None => {
            log::warn!("logistic fit did not converge; using raw PLCC");
            Ok(raw)
        }
    }
}

/// `f(x) = (b1 − b2) / (1 + exp(−(x − b3)/|b4|)) + b2`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Logistic4 {
    pub b: [f64; 4],
}

impl Logistic4 {
    pub fn eval(&self, x: f64) -> f64 {
        let [b1, b2, b3, b4] = self.b;
        (b1 - b2) / (1.0 + (-(x - b3) / b4.abs().max(1e-12)).exp()) + b2
    }
}

/// Levenberg–Marquardt least squares with a finite-difference Jacobian.
pub fn fit_logistic(x: &[f64], y: &[f64]) -> Option<Logistic4> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let sx = (x.iter().map(|v| (v - mx).powi(2)).sum::<f64>() / n).sqrt().max(1e-6);
    let ymax = y.iter().copied().fold(f64::MIN, f64::max);
    let ymin = y.iter().copied().fold(f64::MAX, f64::min);
    let mut fit = Logistic4 { b: [ymax, ymin, mx, sx] };
    let sse = |f: &Logistic4| x.iter().zip(y).map(|(&a, &b)| (f.eval(a) - b).powi(2)).sum::<f64>();
    let mut err = sse(&fit);
    let mut lambda = 1e-3;
    for _ in 0..500 {
        let mut jtj = [[0.0; 4]; 4];
        let mut jtr = [0.0; 4];
        for (&a, &b) in x.iter().zip(y) {
            let r = b - fit.eval(a);
            let mut row = [0.0; 4];
            for (p, rp) in row.iter_mut().enumerate() {
                let h = 1e-6 * fit.b[p].abs().max(1e-3);
                let mut plus = fit;
                plus.b[p] += h;
                let mut minus = fit;
                minus.b[p] -= h;
                *rp = (plus.eval(a) - minus.eval(a)) / (2.0 * h);
            }
            for i in 0..4 {
                jtr[i] += row[i] * r;
                for j in 0..4 {
                    jtj[i][j] += row[i] * row[j];
                }
            }
        }
        let mut a = jtj;
        for (i, ai) in a.iter_mut().enumerate() {
            ai[i] += lambda * (jtj[i][i] + 1e-12);
        }
        let Some(step) = solve4(a, jtr) else {
            lambda *= 10.0;
            continue;
        };
        let mut cand = fit;
        for i in 0..4 {
            cand.b[i] += step[i];
        }
        let cerr = sse(&cand);
        if cerr.is_finite() && cerr < err {
            let done = (err - cerr) <= 1e-12 * err.max(1e-300);
            fit = cand;
            err = cerr;
            lambda = (lambda / 10.0).max(1e-12);
            if done {
                return Some(fit);
            }
        } else {
            lambda *= 10.0;
            if lambda > 1e12 {
                return fit.b.iter().all(|v| v.is_finite()).then_some(fit);
            }
        }
    }
    None
}

fn solve4(mut a: [[f64; 4]; 4], mut b: [f64; 4]) -> Option<[f64; 4]> {
    for c in 0..4 {
        let p = (c..4).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs()))?;
        if a[p][c].abs() < 1e-300 {
            return None;
        }
        a.swap(c, p);
        b.swap(c, p);
        for r in c + 1..4 {
            let f = a[r][c] / a[c][c];
            for k in c..4 {
                a[r][k] -= f * a[c][k];
            }
            b[r] -= f * b[c];
        }
    }
    let mut x = [0.0; 4];
    for r in (0..4).rev() {
        let s: f64 = (r + 1..4).map(|k| a[r][k] * x[k]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// `(1 − r) / 2` between a `B × 1` prediction column and fixed targets.
pub fn plcc_loss(g: &Graph, pred: Var, mos: &[f64]) -> Result<Var> {
    let (b, c) = g.shape(pred);
    if c != 1 || b != mos.len() {
        return Err(invalid(format!("predictions {b}x{c} vs {} targets", mos.len())));
    }
    if b < 2 {
        return Err(invalid("PLCC loss needs a batch of at least two"));
    }
    let m = mos.iter().sum::<f64>() / b as f64;
    let centered: Vec<f64> = mos.iter().map(|v| v - m).collect();
    let norm = centered.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::UndefinedCorrelation("constant targets in batch".into()));
    }
    let unit = Matrix::col_vector(centered.iter().map(|v| v / norm).collect());
    let mean = g.mean_all(pred);
    let pc = g.sub(pred, g.mul_scalar_var(g.constant(Matrix::filled(b, 1, 1.0)), mean));
    let num = g.sum_all(g.mul(pc, g.constant(unit)));
    let den = g.sqrt(g.add_scalar(g.sum_all(g.square(pc)), PLCC_EPS));
    let r = g.div(num, den);
    Ok(g.add_scalar(g.scale(r, -0.5), 0.5))
}

/// Tape-free [`plcc_loss`].
pub fn plcc_loss_value(pred: &[f64], mos: &[f64]) -> Result<f64> {
    let g = Graph::new();
    let p = g.constant(Matrix::col_vector(pred.to_vec()));
    let l = plcc_loss(&g, p, mos)?;
    let v = g.value(l).item();
    Ok(v)
}

/// One annotated pair; `preferred` names the better clip.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankPair {
    pub clip_a: String,
    pub clip_b: String,
    pub preferred: String,
    pub homogeneous: bool,
}

impl RankPair {
    pub fn new(a: impl Into<String>, b: impl Into<String>, a_preferred: bool, homogeneous: bool) -> Self {
        let (clip_a, clip_b) = (a.into(), b.into());
        let preferred = if a_preferred { clip_a.clone() } else { clip_b.clone() };
        Self { clip_a, clip_b, preferred, homogeneous }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAccuracy {
    pub correct: usize,
    pub total: usize,
    /// `None` when the class has no pairs.
    pub accuracy: Option<f64>,
}

impl ClassAccuracy {
    fn new(correct: usize, total: usize) -> Self {
        Self { correct, total, accuracy: (total > 0).then(|| correct as f64 / total as f64) }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankAccuracy {
    pub all: ClassAccuracy,
    pub homogeneous: ClassAccuracy,
    pub non_homogeneous: ClassAccuracy,
}

/// Fraction of pairs whose predicted order matches the annotation; exact
/// ties count as wrong.
pub fn rank_accuracy(pairs: &[RankPair], predictions: &HashMap<String, f64>) -> Result<RankAccuracy> {
    let mut counts = [[0usize; 2]; 2];
    for p in pairs {
        let get = |id: &str| {
            predictions.get(id).copied().ok_or_else(|| invalid(format!("no prediction for clip {id}")))
        };
        let (a, b) = (get(&p.clip_a)?, get(&p.clip_b)?);
        let a_better = if p.preferred == p.clip_a {
            true
        } else if p.preferred == p.clip_b {
            false
        } else {
            return Err(invalid(format!("pair ({}, {}) prefers unknown clip {}", p.clip_a, p.clip_b, p.preferred)));
        };
        let correct = if a_better { a > b } else { b > a };
        let class = usize::from(p.homogeneous);
        counts[class][0] += usize::from(correct);
        counts[class][1] += 1;
    }
    Ok(RankAccuracy {
        all: ClassAccuracy::new(counts[0][0] + counts[1][0], counts[0][1] + counts[1][1]),
        homogeneous: ClassAccuracy::new(counts[1][0], counts[1][1]),
        non_homogeneous: ClassAccuracy::new(counts[0][0], counts[0][1]),
    })
}

#[derive(Serialize, Deserialize)]
struct PairRow {
    clip_a: String,
    clip_b: String,
    preferred: String,
    homogeneous_flag: u8,
}

pub fn write_pairs(path: impl AsRef<Path>, pairs: &[RankPair]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for p in pairs {
        w.serialize(PairRow {
            clip_a: p.clip_a.clone(),
            clip_b: p.clip_b.clone(),
            preferred: p.preferred.clone(),
            homogeneous_flag: u8::from(p.homogeneous),
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_pairs(path: impl AsRef<Path>) -> Result<Vec<RankPair>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize::<PairRow>()
        .map(|row| {
            let row = row?;
            Ok(RankPair {
                clip_a: row.clip_a,
                clip_b: row.clip_b,
                preferred: row.preferred,
                homogeneous: row.homogeneous_flag != 0,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn srocc_fixtures() {
        assert_eq!(srocc(&[1.0, 2.0, 3.0, 4.0], &[4.0, 3.0, 2.0, 1.0]).unwrap(), -1.0);
        // Rank differences (1,1,1,1,0): 1 − 6·4 / (5·24) = 0.8.
        assert!((srocc(&[1.0, 2.0, 3.0, 4.0, 5.0], &[2.0, 1.0, 4.0, 3.0, 5.0]).unwrap() - 0.8).abs() < 1e-12);
        let x = [0.1, 0.5, 0.3, 2.0];
        let y: Vec<f64> = x.iter().map(|v: &f64| v.exp() * 3.0).collect();
        assert_eq!(srocc(&x, &y).unwrap(), 1.0);
        assert!(matches!(srocc(&[1.0, 1.0], &[1.0, 2.0]), Err(Error::UndefinedCorrelation(_))));
    }

    #[test]
    fn ties_get_average_ranks() {
        assert_eq!(average_ranks(&[2.0, 1.0, 2.0, 3.0]), vec![2.5, 1.0, 2.5, 4.0]);
    }

    #[test]
    fn plcc_affine_and_logistic() {
        let x = [1.0, 2.0, 4.0, 8.0, 9.0];
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 3.0).collect();
        assert!((plcc(&x, &y, false).unwrap() - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((plcc(&x, &neg, false).unwrap() + 1.0).abs() < 1e-12);
        // A sigmoid relation is straightened by the logistic map.
        let xs: Vec<f64> = (0..40).map(|i| i as f64 / 4.0 - 5.0).collect();
        let ys: Vec<f64> = xs.iter().map(|v| 1.0 + 4.0 / (1.0 + (-1.5 * v).exp())).collect();
        let raw = plcc(&xs, &ys, false).unwrap();
        let mapped = plcc(&xs, &ys, true).unwrap();
        assert!(mapped > raw && mapped > 0.9999, "{raw} {mapped}");
    }

    #[test]
    fn plcc_loss_bounds_and_guards() {
        let mos = [1.0, 2.5, 3.0, 4.5];
        assert!(plcc_loss_value(&mos, &mos).unwrap().abs() < 1e-12);
        let neg: Vec<f64> = mos.iter().map(|v| -v).collect();
        assert!((plcc_loss_value(&neg, &mos).unwrap() - 1.0).abs() < 1e-12);
        assert!(plcc_loss_value(&[1.0], &[2.0]).is_err());
        assert!(plcc_loss_value(&[1.0, 2.0], &[2.0, 2.0]).is_err());
        // Constant predictions are guarded, not NaN.
        assert_eq!(plcc_loss_value(&[3.0, 3.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 0.5);
    }

    #[test]
    fn rank_accuracy_counts() {
        let preds: HashMap<String, f64> = (0..20).map(|i| (format!("c{i}"), i as f64)).collect();
        let pairs: Vec<RankPair> = (0..10)
            .map(|i| RankPair::new(format!("c{}", 2 * i), format!("c{}", 2 * i + 1), i >= 7, i % 2 == 0))
            .collect();
        let acc = rank_accuracy(&pairs, &preds).unwrap();
        assert_eq!(acc.all.accuracy, Some(0.7));
        assert_eq!(acc.homogeneous.total + acc.non_homogeneous.total, 10);
        let tied: HashMap<String, f64> = preds.keys().map(|k| (k.clone(), 0.0)).collect();
        assert_eq!(rank_accuracy(&pairs, &tied).unwrap().all.accuracy, Some(0.0));
        assert!(rank_accuracy(&[RankPair::new("x", "c1", true, false)], &preds).is_err());
    }
}
