//! Evaluation metrics: Spearman rank correlation, relative L2 distance,
//! stage interval IoU and the thresholded average IoU.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::ScoreRange;
use crate::error::{Error, Result};
use crate::segmenter::StageBoundaries;

/// Thresholds reported by default.
pub const AIOU_THRESHOLDS: [f64; 2] = [0.5, 0.75];

/// Fractional ranks (1-based); tied values share the mean of their ranks.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && x[order[j]] == x[order[i]] {
            j += 1;
        }
        // Positions i..j (0-based) hold ranks i+1..=j.
        let rank = (i + j + 1) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = rank;
        }
        i = j;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    (saa > 0.0 && sbb > 0.0).then(|| (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman rank correlation with average ranks for ties.
pub fn srcc(truth: &[f64], pred: &[f64]) -> Result<f64> {
    if truth.len() != pred.len() || truth.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "srcc needs two equal lists of length >= 2, got {} and {}",
            truth.len(),
            pred.len()
        )));
    }
    if truth.iter().chain(pred).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("srcc input contains non-finite values".into()));
    }
    pearson(&average_ranks(truth), &average_ranks(pred))
        .ok_or_else(|| Error::UndefinedCorrelation("constant input list".into()))
}

/// `100 * mean((|s - s_hat| / (max - min))^2)`.
pub fn relative_l2(truth: &[f64], pred: &[f64], range: &ScoreRange) -> Result<f64> {
    if truth.is_empty() || truth.len() != pred.len() {
        return Err(Error::InvalidArgument(format!(
            "relative l2 needs equal non-empty lists, got {} and {}",
            truth.len(),
            pred.len()
        )));
    }
    let width = range.width();
    if !(width > 0.0) {
        return Err(Error::InvalidArgument(format!("degenerate score range {range:?}")));
    }
    let sum: f64 = truth
        .iter()
        .zip(pred)
        .map(|(t, p)| ((t - p).abs() / width).powi(2))
        .sum();
    Ok(100.0 * sum / truth.len() as f64)
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Mean stage IoU as a reduced fraction `(numerator, denominator)`.
pub fn interval_iou_ratio(pred: &StageBoundaries, gt: &StageBoundaries) -> Result<(u128, u128)> {
    if pred.num_stages() != gt.num_stages() || pred.num_frames() != gt.num_frames() {
        return Err(Error::InvalidArgument(format!(
            "cannot compare {} stages over {} frames with {} stages over {} frames",
            pred.num_stages(),
            pred.num_frames(),
            gt.num_stages(),
            gt.num_frames()
        )));
    }
    let (mut num, mut den) = (0u128, 1u128);
    for ((ps, pe), (gs, ge)) in pred.stages().into_iter().zip(gt.stages()) {
        let inter = pe.min(ge).saturating_sub(ps.max(gs)) as u128;
        let union = ((pe - ps) + (ge - gs)) as u128 - inter;
        if union == 0 {
            return Err(Error::InvalidArgument("empty stage in both boundary sets".into()));
        }
        num = num * union + inter * den;
        den *= union;
        let g = gcd(num, den);
        (num, den) = (num / g, den / g);
    }
    den *= pred.num_stages() as u128;
    let g = gcd(num, den);
    Ok((num / g, den / g))
}

/// Mean over stages of the IoU between predicted and ground-truth intervals.
pub fn interval_iou(pred: &StageBoundaries, gt: &StageBoundaries) -> Result<f64> {
    let (n, d) = interval_iou_ratio(pred, gt)?;
    Ok(n as f64 / d as f64)
}

/// Fraction of videos whose IoU is at least `d`.
pub fn aiou_at_d(per_video_iou: &[f64], d: f64) -> Result<f64> {
    if per_video_iou.is_empty() {
        return Err(Error::InvalidArgument("aiou of an empty list".into()));
    }
    if !(0.0..=1.0).contains(&d) {
        return Err(Error::InvalidArgument(format!("threshold {d} outside [0, 1]")));
    }
    let hits = per_video_iou.iter().filter(|&&v| v >= d).count();
    Ok(hits as f64 / per_video_iou.len() as f64)
}

/// Evaluation summary, serialized as JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    /// `None` when the correlation is undefined (constant predictions).
    pub srcc: Option<f64>,
    /// Why `srcc` is missing, if it is.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub srcc_note: Option<String>,
    pub r_l2_x100: f64,
    /// Keyed by the threshold as written, e.g. `"0.5"`.
    pub aiou: BTreeMap<String, f64>,
    pub per_video_iou: Vec<f64>,
    pub n: usize,
    pub video_ids: Vec<String>,
    pub true_scores: Vec<f64>,
    pub pred_scores: Vec<f64>,
    pub eval_seed: u64,
    /// Extra named values, e.g. a comparison run's SRCC.
    #[serde(default)]
    pub extra: BTreeMap<String, f64>,
}

impl MetricsReport {
    pub fn build(
        video_ids: Vec<String>,
        true_scores: Vec<f64>,
        pred_scores: Vec<f64>,
        per_video_iou: Vec<f64>,
        range: &ScoreRange,
        eval_seed: u64,
    ) -> Result<Self> {
        let n = true_scores.len();
        if video_ids.len() != n || per_video_iou.len() != n {
            return Err(Error::InvalidArgument("report columns differ in length".into()));
        }
        let (srcc, srcc_note) = match srcc(&true_scores, &pred_scores) {
            Ok(v) => (Some(v), None),
            Err(e @ Error::UndefinedCorrelation(_)) => (None, Some(e.to_string())),
            Err(e) => return Err(e),
        };
        let aiou = AIOU_THRESHOLDS
            .iter()
            .map(|&d| Ok((d.to_string(), aiou_at_d(&per_video_iou, d)?)))
            .collect::<Result<_>>()?;
        Ok(Self {
            srcc,
            srcc_note,
            r_l2_x100: relative_l2(&true_scores, &pred_scores, range)?,
            aiou,
            per_video_iou,
            n,
            video_ids,
            true_scores,
            pred_scores,
            eval_seed,
            extra: BTreeMap::new(),
        })
    }

    pub fn aiou_at(&self, d: f64) -> Option<f64> {
        self.aiou.get(&d.to_string()).copied()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Format(format!("metrics report: {e}")))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
