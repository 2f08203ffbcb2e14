//! Cleaning of raw subjective ratings into per-video MOS.
//!
//! Order: observer correlation gate (flags only), BT.500 observer
//! screening (rejected observers lose all their ratings), 95% confidence
//! interval trimming per video, then the mean of the survivors.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::metrics::{plcc, srocc};

/// Observers × videos ratings with missing entries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatingMatrix {
    pub observers: Vec<String>,
    pub videos: Vec<String>,
    /// `scores[i][j]` is observer `i`'s rating of video `j`.
    pub scores: Vec<Vec<Option<f64>>>,
}

fn valid_score(s: f64) -> bool {
    (1.0..=5.0).contains(&s) && (s * 2.0).fract() == 0.0
}

impl RatingMatrix {
    pub fn new(observers: Vec<String>, videos: Vec<String>, scores: Vec<Vec<Option<f64>>>) -> Result<Self> {
        if scores.len() != observers.len() || scores.iter().any(|r| r.len() != videos.len()) {
            return Err(invalid("score matrix shape does not match observer/video ids"));
        }
        if let Some(bad) = scores.iter().flatten().flatten().find(|&&s| !valid_score(s)) {
            return Err(invalid(format!("score {bad} is not on the 1..5 half-point scale")));
        }
        Ok(Self { observers, videos, scores })
    }

    /// Dense matrix with ids `o{i}` / `v{j}`.
    pub fn from_dense(rows: &[Vec<f64>]) -> Result<Self> {
        let nv = rows.first().map_or(0, Vec::len);
        Self::new(
            (0..rows.len()).map(|i| format!("o{i}")).collect(),
            (0..nv).map(|j| format!("v{j}")).collect(),
            rows.iter().map(|r| r.iter().map(|&s| Some(s)).collect()).collect(),
        )
    }

    pub fn num_observers(&self) -> usize {
        self.observers.len()
    }

    pub fn num_videos(&self) -> usize {
        self.videos.len()
    }

    pub fn get(&self, observer: usize, video: usize) -> Option<f64> {
        self.scores[observer][video]
    }

    /// Present `(observer, score)` pairs of a video.
    pub fn column(&self, video: usize) -> Vec<(usize, f64)> {
        (0..self.num_observers()).filter_map(|i| self.scores[i][video].map(|s| (i, s))).collect()
    }

    pub fn num_ratings(&self) -> usize {
        self.scores.iter().flatten().filter(|s| s.is_some()).count()
    }

    /// Long-form `(observer, video, score)` rows in matrix order.
    pub fn records(&self) -> Vec<(String, String, f64)> {
        let mut out = Vec::new();
        for (i, o) in self.observers.iter().enumerate() {
            for (j, v) in self.videos.iter().enumerate() {
                if let Some(s) = self.scores[i][j] {
                    out.push((o.clone(), v.clone(), s));
                }
            }
        }
        out
    }
}

/// Mean and sample standard deviation (`N − 1`).
pub fn mean_and_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let ss = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>();
    (mean, (ss / (n - 1.0)).sqrt())
}

/// `m4 / m2²` with population moments; `None` for zero variance.
pub fn kurtosis(values: &[f64]) -> Option<f64> {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let m2 = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let m4 = values.iter().map(|v| (v - mean).powi(4)).sum::<f64>() / n;
    (m2 > 0.0).then(|| m4 / (m2 * m2))
}

/// Range multiplier: 2 for normal-like ratings (kurtosis in `[2, 4]`),
/// `√20` otherwise.
pub fn alpha_for(kurt: f64) -> f64 {
    if (2.0..=4.0).contains(&kurt) {
        2.0
    } else {
        20f64.sqrt()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateResult {
    pub observer: String,
    pub common_videos: usize,
    /// `None` when either side is constant.
    pub srocc: Option<f64>,
    pub plcc: Option<f64>,
    pub flagged: bool,
}

/// Correlation of each observer with the mean of all other observers on
/// the videos they share. Flags when either correlation is below
/// `threshold` or undefined.
pub fn observer_gate(rm: &RatingMatrix, threshold: f64) -> Result<Vec<GateResult>> {
    if rm.num_observers() < 3 {
        return Err(invalid("the observer gate needs at least three observers"));
    }
    (0..rm.num_observers())
        .map(|i| {
            let (mut own, mut others) = (Vec::new(), Vec::new());
            for j in 0..rm.num_videos() {
                let Some(s) = rm.scores[i][j] else { continue };
                let rest: Vec<f64> = rm.column(j).into_iter().filter(|&(k, _)| k != i).map(|(_, v)| v).collect();
                if !rest.is_empty() {
                    own.push(s);
                    others.push(rest.iter().sum::<f64>() / rest.len() as f64);
                }
            }
            if own.len() < 2 {
                return Err(Error::InsufficientOverlap { observer: rm.observers[i].clone(), common: own.len() });
            }
            let s = srocc(&own, &others).ok();
            let p = plcc(&own, &others, false).ok();
            let flagged = s.is_none_or(|v| v < threshold) || p.is_none_or(|v| v < threshold);
            Ok(GateResult { observer: rm.observers[i].clone(), common_videos: own.len(), srocc: s, plcc: p, flagged })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObserverScreening {
    pub observer: String,
    pub p: usize,
    pub q: usize,
    /// Videos rated by the observer that had at least two ratings.
    pub j: usize,
    /// `|P − Q| / (P + Q)`, 0 when `P + Q = 0`.
    pub ratio: f64,
    /// `(P + Q) / J`.
    pub fraction: f64,
    pub rejected: bool,
    pub reason: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoScreening {
    pub video: String,
    pub mean: f64,
    pub std: f64,
    pub kurtosis: Option<f64>,
    pub alpha: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScreeningReport {
    pub strict: bool,
    pub observers: Vec<ObserverScreening>,
    pub videos: Vec<VideoScreening>,
    /// Videos skipped because fewer than two observers rated them.
    pub skipped_videos: Vec<String>,
}

impl ScreeningReport {
    pub fn rejected(&self) -> Vec<usize> {
        self.observers.iter().enumerate().filter(|(_, o)| o.rejected).map(|(i, _)| i).collect()
    }
}

/// BT.500 observer screening.
///
/// `P` counts ratings at or above `ū + αS`. `Q` counts ratings at or below
/// `ū − αS`; with `strict` it counts ratings at or below `ū + αS`, the
/// condition exactly as printed in the source protocol. Zero-variance
/// videos contribute to `J` but never to `P` or `Q`.
pub fn bt500_screen(rm: &RatingMatrix, strict: bool) -> ScreeningReport {
    let no = rm.num_observers();
    let (mut p, mut q, mut jn) = (vec![0usize; no], vec![0usize; no], vec![0usize; no]);
    let mut videos = Vec::new();
    let mut skipped = Vec::new();
    for j in 0..rm.num_videos() {
        let col = rm.column(j);
        if col.len() < 2 {
            if !col.is_empty() {
                log::warn!("video {} has a single rating; skipped in screening", rm.videos[j]);
            }
            skipped.push(rm.videos[j].clone());
            continue;
        }
        let values: Vec<f64> = col.iter().map(|c| c.1).collect();
        let (mean, std) = mean_and_std(&values);
        let kurt = kurtosis(&values);
        let alpha = kurt.map_or(2.0, alpha_for);
        videos.push(VideoScreening { video: rm.videos[j].clone(), mean, std, kurtosis: kurt, alpha });
        for &(i, u) in &col {
            jn[i] += 1;
            if std == 0.0 {
                continue;
            }
            let upper = mean + alpha * std;
            if u >= upper {
                p[i] += 1;
            }
            let low = if strict { u <= upper } else { u <= mean - alpha * std };
            if low {
                q[i] += 1;
            }
        }
    }
    let observers = (0..no)
        .map(|i| {
            let total = p[i] + q[i];
            let ratio = if total == 0 { 0.0 } else { p[i].abs_diff(q[i]) as f64 / total as f64 };
            let fraction = if jn[i] == 0 { 0.0 } else { total as f64 / jn[i] as f64 };
            let rejected = total > 0 && ratio < 0.3 && fraction > 0.05;
            ObserverScreening {
                observer: rm.observers[i].clone(),
                p: p[i],
                q: q[i],
                j: jn[i],
                ratio,
                fraction,
                rejected,
                reason: rejected.then(|| {
                    format!("balanced out-of-range ratings: |P-Q|/(P+Q) = {ratio:.3} < 0.3, (P+Q)/J = {fraction:.3} > 0.05")
                }),
            }
        })
        .collect();
    ScreeningReport { strict, observers, videos, skipped_videos: skipped }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Removal {
    pub observer: String,
    pub video: String,
    pub score: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Drops ratings outside the open interval `(ū − δ, ū + δ)`,
/// `δ = 1.96·S/√N`, using pre-trim statistics in a single pass. Videos with
/// fewer than two ratings or zero spread keep everything.
pub fn ci_trim(rm: &RatingMatrix) -> (RatingMatrix, Vec<Removal>) {
    let mut out = rm.clone();
    let mut log = Vec::new();
    for j in 0..rm.num_videos() {
        let col = rm.column(j);
        if col.len() < 2 {
            continue;
        }
        let values: Vec<f64> = col.iter().map(|c| c.1).collect();
        let (mean, std) = mean_and_std(&values);
        if std == 0.0 {
            continue;
        }
        let delta = 1.96 * std / (values.len() as f64).sqrt();
        let (lower, upper) = (mean - delta, mean + delta);
        for &(i, u) in &col {
            if u <= lower || u >= upper {
                out.scores[i][j] = None;
                log.push(Removal { observer: rm.observers[i].clone(), video: rm.videos[j].clone(), score: u, lower, upper });
            }
        }
    }
    (out, log)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MosEntry {
    pub video: String,
    /// `None` when no rating survived.
    pub mos: Option<f64>,
    pub n: usize,
}

pub fn compute_mos(rm: &RatingMatrix) -> Vec<MosEntry> {
    (0..rm.num_videos())
        .map(|j| {
            let values: Vec<f64> = rm.column(j).into_iter().map(|c| c.1).collect();
            let mos = (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64);
            if mos.is_none() {
                log::warn!("video {} has no surviving ratings", rm.videos[j]);
            }
            MosEntry { video: rm.videos[j].clone(), mos, n: values.len() }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CleaningOptions {
    pub gate_threshold: f64,
    pub strict_bt500: bool,
}

impl Default for CleaningOptions {
    fn default() -> Self {
        Self { gate_threshold: 0.7, strict_bt500: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CleaningReport {
    pub options: CleaningOptions,
    pub gate: Vec<GateResult>,
    pub screening: ScreeningReport,
    pub rejected_observers: Vec<String>,
    /// Ratings dropped with rejected observers.
    pub screened_out: usize,
    pub removals: Vec<Removal>,
    pub mos: Vec<MosEntry>,
    pub input_ratings: usize,
    pub kept_ratings: usize,
}

/// Full cleaning pipeline; returns the cleaned matrix and the report.
pub fn clean(rm: &RatingMatrix, options: CleaningOptions) -> Result<(RatingMatrix, CleaningReport)> {
    let gate = observer_gate(rm, options.gate_threshold)?;
    let screening = bt500_screen(rm, options.strict_bt500);
    let mut screened = rm.clone();
    let mut screened_out = 0;
    for i in screening.rejected() {
        screened_out += screened.scores[i].iter().filter(|s| s.is_some()).count();
        screened.scores[i].iter_mut().for_each(|s| *s = None);
    }
    let (cleaned, removals) = ci_trim(&screened);
    let mos = compute_mos(&cleaned);
    let report = CleaningReport {
        options,
        gate,
        rejected_observers: screening.rejected().into_iter().map(|i| rm.observers[i].clone()).collect(),
        screening,
        screened_out,
        removals,
        mos,
        input_ratings: rm.num_ratings(),
        kept_ratings: cleaned.num_ratings(),
    };
    Ok((cleaned, report))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RowError {
    /// 1-based line number including the header.
    pub line: usize,
    pub message: String,
}

#[derive(Deserialize)]
struct RatingRow {
    observer_id: String,
    video_id: String,
    score: String,
}

/// Parses `(observer_id, video_id, score)` rows. Bad rows are reported and
/// skipped; ids keep first-appearance order.
pub fn read_ratings_csv<R: Read>(reader: R) -> Result<(RatingMatrix, Vec<RowError>, usize)> {
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut errors = Vec::new();
    let mut obs: Vec<String> = Vec::new();
    let mut vids: Vec<String> = Vec::new();
    let (mut oi, mut vi): (HashMap<String, usize>, HashMap<String, usize>) = (HashMap::new(), HashMap::new());
    let mut cells: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    let mut rows = 0;
    for (k, rec) in r.deserialize::<RatingRow>().enumerate() {
        rows += 1;
        let line = k + 2;
        let row = match rec {
            Ok(row) => row,
            Err(e) => {
                errors.push(RowError { line, message: e.to_string() });
                continue;
            }
        };
        let score = match row.score.parse::<f64>() {
            Ok(s) if valid_score(s) => s,
            _ => {
                errors.push(RowError { line, message: format!("score {:?} is not on the 1..5 half-point scale", row.score) });
                continue;
            }
        };
        if row.observer_id.is_empty() || row.video_id.is_empty() {
            errors.push(RowError { line, message: "empty id".into() });
            continue;
        }
        let o = *oi.entry(row.observer_id.clone()).or_insert_with(|| {
            obs.push(row.observer_id.clone());
            obs.len() - 1
        });
        let v = *vi.entry(row.video_id.clone()).or_insert_with(|| {
            vids.push(row.video_id.clone());
            vids.len() - 1
        });
        if cells.contains_key(&(o, v)) {
            errors.push(RowError { line, message: format!("duplicate rating for ({}, {}); first one kept", row.observer_id, row.video_id) });
            continue;
        }
        cells.insert((o, v), score);
    }
    let mut scores = vec![vec![None; vids.len()]; obs.len()];
    for ((o, v), s) in cells {
        scores[o][v] = Some(s);
    }
    Ok((RatingMatrix::new(obs, vids, scores)?, errors, rows))
}

pub fn write_ratings_csv<W: Write>(writer: W, rm: &RatingMatrix) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["observer_id", "video_id", "score"])?;
    for (o, v, s) in rm.records() {
        w.write_record([o, v, s.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_mos_csv<W: Write>(writer: W, mos: &[MosEntry]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["video_id", "mos", "n_ratings"])?;
    for m in mos {
        w.write_record([m.video.clone(), m.mos.map_or(String::new(), |v| v.to_string()), m.n.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_video(values: &[f64]) -> RatingMatrix {
        RatingMatrix::from_dense(&values.iter().map(|&v| vec![v]).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn ci_trim_worked_example() {
        let (out, log) = ci_trim(&single_video(&[3.0, 3.0, 3.0, 3.0, 5.0]));
        assert_eq!(log.len(), 1);
        assert_eq!(log[0].score, 5.0);
        assert!((log[0].lower - 2.616).abs() < 1e-3 && (log[0].upper - 4.184).abs() < 1e-3);
        assert_eq!(compute_mos(&out)[0].mos, Some(3.0));
        assert!(ci_trim(&single_video(&[2.0, 3.0, 4.0])).1.is_empty());
        assert!(ci_trim(&single_video(&[4.0, 4.0, 4.0])).1.is_empty());
    }

    #[test]
    fn mos_of_survivors() {
        let rm = single_video(&[3.5, 4.0, 4.5]);
        assert_eq!(compute_mos(&rm)[0].mos, Some(4.0));
        let mut one = single_video(&[2.5, 3.0]);
        one.scores[1][0] = None;
        assert_eq!(compute_mos(&one)[0].mos, Some(2.5));
        one.scores[0][0] = None;
        assert_eq!(compute_mos(&one)[0].mos, None);
    }

    #[test]
    fn uniform_spread_uses_wide_alpha() {
        let k = kurtosis(&[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert!((k - 1.7).abs() < 1e-12);
        assert_eq!(alpha_for(k), 20f64.sqrt());
        assert_eq!(alpha_for(3.0), 2.0);
    }

    #[test]
    fn mean_rater_is_never_rejected() {
        let rows: Vec<Vec<f64>> = (0..4)
            .map(|i| (0..6).map(|j| [2.0, 3.0, 4.0, 3.0][i] + (j % 2) as f64 * 0.5).collect())
            .collect();
        let rm = RatingMatrix::from_dense(&rows).unwrap();
        let rep = bt500_screen(&rm, false);
        assert_eq!(rep.observers[3].p + rep.observers[3].q, 0);
        assert!(!rep.observers[3].rejected);
    }

    #[test]
    fn gate_flags_contrarian() {
        let base: Vec<f64> = (0..10).map(|j| 1.0 + (j % 9) as f64 * 0.5).collect();
        let mut rows = vec![base.clone(); 4];
        rows.push(base.iter().map(|v| 6.0 - v).collect());
        let gate = observer_gate(&RatingMatrix::from_dense(&rows).unwrap(), 0.7).unwrap();
        assert!(gate[..4].iter().all(|g| !g.flagged));
        assert!(gate[4].flagged);
    }

    #[test]
    fn csv_round_trip_and_row_errors() {
        let text = "observer_id,video_id,score\na,v1,3\na,v2,4.5\nb,v1,7\nb,v2,x\nc,v1,2\n";
        let (rm, errors, rows) = read_ratings_csv(text.as_bytes()).unwrap();
        assert_eq!(rows, 5);
        assert_eq!(errors.iter().map(|e| e.line).collect::<Vec<_>>(), vec![4, 5]);
        assert_eq!(rm.num_ratings(), 3);
        let mut buf = Vec::new();
        write_ratings_csv(&mut buf, &rm).unwrap();
        let (back, e2, _) = read_ratings_csv(buf.as_slice()).unwrap();
        assert!(e2.is_empty());
        assert_eq!(back.records(), rm.records());
    }
}
