//! Benchmark metrics: temporal IoU, mean recall@1, mIoU, multi-binary
//! accuracy, SODA F1 over judge similarities, and judge-accuracy aggregation.
//!
//! Benchmark-facing aggregates are on a 0-100 scale.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::judge::{JudgeVerdict, Verdict};

pub const RECALL_IOU_THRESHOLDS: [f64; 4] = [0.3, 0.5, 0.7, 0.9];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TimeUnit {
    Seconds,
    #[default]
    Frames,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub start: f64,
    pub end: f64,
    #[serde(default)]
    pub unit: TimeUnit,
}

impl Interval {
    pub fn new(start: f64, end: f64, unit: TimeUnit) -> Self {
        Self { start, end, unit }
    }

    pub fn frames(start: f64, end: f64) -> Self {
        Self::new(start, end, TimeUnit::Frames)
    }

    pub fn seconds(start: f64, end: f64) -> Self {
        Self::new(start, end, TimeUnit::Seconds)
    }

    pub fn length(&self) -> f64 {
        self.end - self.start
    }

    pub fn is_valid(&self) -> bool {
        self.start.is_finite() && self.end.is_finite() && self.start <= self.end
    }
}

pub fn interval_iou(a: &Interval, b: &Interval) -> Result<f64> {
    if a.unit != b.unit {
        return Err(Error::invalid(format!(
            "cannot compare intervals in {:?} and {:?}",
            a.unit, b.unit
        )));
    }
    let inter = (a.end.min(b.end) - a.start.max(b.start)).max(0.0);
    let union = a.length() + b.length() - inter;
    if union <= 0.0 {
        return Ok(0.0);
    }
    Ok((inter / union).clamp(0.0, 1.0))
}

fn per_item_iou(preds: &[Option<Interval>], gts: &[Interval]) -> Result<Vec<f64>> {
    if preds.len() != gts.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} ground-truth items",
            preds.len(),
            gts.len()
        )));
    }
    if gts.is_empty() {
        return Err(Error::EmptyBenchmark("temporal localization"));
    }
    preds
        .iter()
        .zip(gts)
        .map(|(p, g)| match p {
            Some(p) => interval_iou(p, g),
            None => Ok(0.0),
        })
        .collect()
}

/// Recall@1 at each threshold, as fractions in `[0, 1]`.
pub fn recall_at_1(ious: &[f64], thresholds: &[f64]) -> Vec<f64> {
    thresholds
        .iter()
        .map(|&t| ious.iter().filter(|&&iou| iou >= t).count() as f64 / ious.len() as f64)
        .collect()
}

/// Mean of recall@1 over IoU thresholds, in percent. Missing predictions
/// count as IoU 0.
pub fn mean_recall_at_1(preds: &[Option<Interval>], gts: &[Interval], thresholds: &[f64]) -> Result<f64> {
    if thresholds.is_empty() {
        return Err(Error::invalid("at least one IoU threshold is required"));
    }
    let ious = per_item_iou(preds, gts)?;
    Ok(mean_recall_from_ious(&ious, thresholds))
}

pub fn mean_recall_from_ious(ious: &[f64], thresholds: &[f64]) -> f64 {
    let r = recall_at_1(ious, thresholds);
    100.0 * r.iter().sum::<f64>() / r.len() as f64
}

pub fn mean_iou(preds: &[Option<Interval>], gts: &[Interval]) -> Result<f64> {
    let ious = per_item_iou(preds, gts)?;
    Ok(100.0 * ious.iter().sum::<f64>() / ious.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryProbeResult {
    pub qa_id: String,
    pub probe_index: usize,
    pub correct: bool,
}

/// Multi-binary accuracy: a question counts only if every one of its probes
/// is answered correctly. Returns 0 for an empty table.
pub fn mbacc(results: &[BinaryProbeResult]) -> f64 {
    let mut per_q: BTreeMap<&str, bool> = BTreeMap::new();
    for r in results {
        let all = per_q.entry(r.qa_id.as_str()).or_insert(true);
        *all &= r.correct;
    }
    if per_q.is_empty() {
        return 0.0;
    }
    let ok = per_q.values().filter(|&&v| v).count();
    100.0 * ok as f64 / per_q.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionEvent {
    pub interval: Interval,
    pub text: String,
    #[serde(default)]
    pub out_of_frame: bool,
}

/// Ordered caption events for one subject, covering `horizon` with no gaps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseCaptionTrack {
    pub track_id: String,
    pub events: Vec<CaptionEvent>,
    pub horizon: Interval,
}

impl DenseCaptionTrack {
    /// Events that describe the subject, i.e. everything but out-of-frame spans.
    pub fn visible_events(&self) -> impl Iterator<Item = &CaptionEvent> {
        self.events.iter().filter(|e| !e.out_of_frame)
    }

    pub fn validate(&self) -> Result<()> {
        let mut cursor = self.horizon.start;
        for (i, e) in self.events.iter().enumerate() {
            if !e.interval.is_valid() {
                return Err(Error::invalid(format!("{}: event {i} has start > end", self.track_id)));
            }
            if e.interval.start != cursor {
                return Err(Error::invalid(format!(
                    "{}: event {i} starts at {} but coverage reached {cursor}",
                    self.track_id, e.interval.start
                )));
            }
            cursor = e.interval.end;
        }
        if cursor != self.horizon.end {
            return Err(Error::invalid(format!(
                "{}: events end at {cursor}, horizon ends at {}",
                self.track_id, self.horizon.end
            )));
        }
        Ok(())
    }
}

/// Pairwise caption similarity, `rows` predictions by `cols` ground truths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<Vec<f64>>,
}

impl SimilarityMatrix {
    pub fn new(values: Vec<Vec<f64>>, cols: usize) -> Result<Self> {
        if values.iter().any(|r| r.len() != cols) {
            return Err(Error::invalid(format!("similarity rows must all have {cols} columns")));
        }
        if values.iter().flatten().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("similarity entries must lie in [0, 1]"));
        }
        Ok(Self {
            rows: values.len(),
            cols,
            values,
        })
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i][j]
    }
}

/// Result of the order-preserving matching between two event lists.
#[derive(Debug, Clone, PartialEq)]
pub struct SodaAlignment {
    pub total: f64,
    /// Matched `(pred, gt)` index pairs, increasing in both coordinates.
    pub pairs: Vec<(usize, usize)>,
}

/// Maximum-score monotone one-to-one alignment of a `p x g` score table.
pub fn monotone_alignment(scores: &[Vec<f64>], g: usize) -> SodaAlignment {
    let p = scores.len();
    let mut dp = vec![vec![0.0f64; g + 1]; p + 1];
    for i in 1..=p {
        for j in 1..=g {
            let diag = dp[i - 1][j - 1] + scores[i - 1][j - 1];
            dp[i][j] = dp[i - 1][j].max(dp[i][j - 1]).max(diag);
        }
    }
    let mut pairs = Vec::new();
    let (mut i, mut j) = (p, g);
    while i > 0 && j > 0 {
        if dp[i][j] == dp[i - 1][j] {
            i -= 1;
        } else if dp[i][j] == dp[i][j - 1] {
            j -= 1;
        } else {
            pairs.push((i - 1, j - 1));
            i -= 1;
            j -= 1;
        }
    }
    pairs.reverse();
    SodaAlignment { total: dp[p][g], pairs }
}

/// Pair scores `tIoU(p_i, g_j) * sim[i][j]` over visible events.
pub fn soda_pair_scores(
    pred: &DenseCaptionTrack,
    gt: &DenseCaptionTrack,
    sim: &SimilarityMatrix,
) -> Result<Vec<Vec<f64>>> {
    let p: Vec<_> = pred.visible_events().collect();
    let g: Vec<_> = gt.visible_events().collect();
    if sim.rows != p.len() || sim.cols != g.len() {
        return Err(Error::invalid(format!(
            "similarity matrix is {}x{}, expected {}x{} (visible pred x gt events)",
            sim.rows,
            sim.cols,
            p.len(),
            g.len()
        )));
    }
    p.iter()
        .enumerate()
        .map(|(i, pe)| {
            g.iter()
                .enumerate()
                .map(|(j, ge)| Ok(interval_iou(&pe.interval, &ge.interval)? * sim.get(i, j)))
                .collect()
        })
        .collect()
}

/// SODA-style F1 in `[0, 1]` for one predicted track against its ground truth.
pub fn soda_f1(pred: &DenseCaptionTrack, gt: &DenseCaptionTrack, sim: &SimilarityMatrix) -> Result<f64> {
    let scores = soda_pair_scores(pred, gt, sim)?;
    let (p, g) = (sim.rows, sim.cols);
    if p == 0 || g == 0 {
        return Ok(0.0);
    }
    let total = monotone_alignment(&scores, g).total;
    if total <= 0.0 {
        return Ok(0.0);
    }
    // 2PR / (P + R) with P = total / p and R = total / g.
    Ok((2.0 * total / (p + g) as f64).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JudgeSummary {
    pub accuracy: f64,
    pub mean_score: f64,
}

/// Share of `yes` verdicts (percent) and the mean raw judge score.
pub fn judge_accuracy(verdicts: &[JudgeVerdict]) -> Result<JudgeSummary> {
    if verdicts.is_empty() {
        return Err(Error::EmptyBenchmark("judge verdicts"));
    }
    let n = verdicts.len() as f64;
    let yes = verdicts.iter().filter(|v| v.pred == Verdict::Yes).count() as f64;
    Ok(JudgeSummary {
        accuracy: 100.0 * yes / n,
        mean_score: verdicts.iter().map(|v| v.score).sum::<f64>() / n,
    })
}

/// Mean caption score with 0-10 judge scores mapped onto 0-100.
pub fn caption_score(scores: &[f64]) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::EmptyBenchmark("caption scores"));
    }
    Ok(scores.iter().map(|s| s * 10.0).sum::<f64>() / scores.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn f(a: f64, b: f64) -> Interval {
        Interval::frames(a, b)
    }

    #[test]
    fn iou_examples() {
        assert_eq!(interval_iou(&f(10.0, 20.0), &f(10.0, 20.0)).unwrap(), 1.0);
        assert_eq!(interval_iou(&f(0.0, 10.0), &f(20.0, 30.0)).unwrap(), 0.0);
        // unit grid: overlap cells 5..10 (5), union cells 0..15 (15)
        assert!((interval_iou(&f(0.0, 10.0), &f(5.0, 15.0)).unwrap() - 5.0 / 15.0).abs() < 1e-12);
        assert_eq!(interval_iou(&f(3.0, 3.0), &f(3.0, 3.0)).unwrap(), 0.0);
        assert!(interval_iou(&f(0.0, 1.0), &Interval::seconds(0.0, 1.0)).is_err());
    }

    #[test]
    fn recall_examples() {
        let gts = vec![f(0.0, 10.0), f(5.0, 9.0)];
        let preds: Vec<_> = gts.iter().copied().map(Some).collect();
        assert_eq!(mean_recall_at_1(&preds, &gts, &RECALL_IOU_THRESHOLDS).unwrap(), 100.0);
        let r = mean_recall_at_1(&[Some(f(0.0, 10.0))], &[f(5.0, 15.0)], &RECALL_IOU_THRESHOLDS).unwrap();
        assert!((r - 25.0).abs() < 1e-12);
        assert!(matches!(
            mean_recall_at_1(&[], &[], &RECALL_IOU_THRESHOLDS),
            Err(Error::EmptyBenchmark(_))
        ));
        assert!(mean_recall_at_1(&[None], &[f(0.0, 1.0), f(0.0, 1.0)], &RECALL_IOU_THRESHOLDS).is_err());
        assert_eq!(
            mean_recall_at_1(&[None], &[f(0.0, 1.0)], &RECALL_IOU_THRESHOLDS).unwrap(),
            0.0
        );
    }

    #[test]
    fn miou_examples() {
        assert_eq!(mean_iou(&[Some(f(1.0, 4.0))], &[f(1.0, 4.0)]).unwrap(), 100.0);
        let m = mean_iou(&[Some(f(0.0, 10.0))], &[f(5.0, 15.0)]).unwrap();
        assert!((m - 100.0 / 3.0).abs() < 1e-9);
        assert!(mean_iou(&[], &[]).is_err());
    }

    fn probe(q: &str, i: usize, c: bool) -> BinaryProbeResult {
        BinaryProbeResult {
            qa_id: q.into(),
            probe_index: i,
            correct: c,
        }
    }

    #[test]
    fn mbacc_examples() {
        assert_eq!(
            mbacc(&[probe("q", 0, true), probe("q", 1, true), probe("q", 2, true)]),
            100.0
        );
        assert_eq!(
            mbacc(&[probe("q", 0, true), probe("q", 1, true), probe("q", 2, false)]),
            0.0
        );
        let table = vec![
            probe("a", 0, true),
            probe("b", 0, true),
            probe("b", 1, false),
            probe("c", 0, true),
            probe("c", 1, true),
            probe("d", 0, false),
        ];
        assert_eq!(mbacc(&table), 50.0);
        assert_eq!(mbacc(&[]), 0.0);
    }

    fn track(events: &[(f64, f64, &str, bool)], horizon: f64) -> DenseCaptionTrack {
        DenseCaptionTrack {
            track_id: "t".into(),
            events: events
                .iter()
                .map(|&(a, b, t, oof)| CaptionEvent {
                    interval: f(a, b),
                    text: t.into(),
                    out_of_frame: oof,
                })
                .collect(),
            horizon: f(0.0, horizon),
        }
    }

    #[test]
    fn soda_examples() {
        let gt = track(&[(0.0, 10.0, "a", false)], 10.0);
        let sim = SimilarityMatrix::new(vec![vec![1.0]], 1).unwrap();
        assert_eq!(soda_f1(&gt, &gt, &sim).unwrap(), 1.0);

        let empty_pred = track(&[(0.0, 10.0, "out of frame", true)], 10.0);
        let sim0 = SimilarityMatrix::new(vec![], 1).unwrap();
        assert_eq!(soda_f1(&empty_pred, &gt, &sim0).unwrap(), 0.0);

        // g = 2, p = 1 with one perfect pair: P = 1, R = 1/2, F1 = 2/3.
        let gt2 = track(&[(0.0, 5.0, "a", false), (5.0, 10.0, "b", false)], 10.0);
        let pred = track(&[(0.0, 5.0, "a", false), (5.0, 10.0, "out of frame", true)], 10.0);
        let sim = SimilarityMatrix::new(vec![vec![1.0, 0.0]], 2).unwrap();
        assert!((soda_f1(&pred, &gt2, &sim).unwrap() - 2.0 / 3.0).abs() < 1e-12);

        assert!(soda_f1(&pred, &gt2, &SimilarityMatrix::new(vec![vec![1.0]], 1).unwrap()).is_err());
    }

    #[test]
    fn alignment_is_monotone() {
        let scores = vec![vec![0.1, 0.9, 0.0], vec![0.8, 0.0, 0.0], vec![0.0, 0.0, 0.5]];
        let a = monotone_alignment(&scores, 3);
        // Crossing pairs (0,1) and (1,0) cannot both be taken.
        assert!((a.total - 1.4).abs() < 1e-12);
        assert_eq!(a.pairs, vec![(0, 1), (2, 2)]);
    }

    #[test]
    fn judge_aggregation() {
        let v = |p: Verdict, s: f64| JudgeVerdict {
            pred: p,
            score: s,
            raw: String::new(),
            parse_failure: false,
        };
        assert_eq!(judge_accuracy(&[v(Verdict::Yes, 5.0)]).unwrap().accuracy, 100.0);
        let s = judge_accuracy(&[v(Verdict::Yes, 4.0), v(Verdict::No, 1.0)]).unwrap();
        assert_eq!((s.accuracy, s.mean_score), (50.0, 2.5));
        assert!(judge_accuracy(&[]).is_err());
        assert_eq!(caption_score(&[8.0, 6.0]).unwrap(), 70.0);
    }

    proptest::proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in -50i32..50, la in 0i32..40, b in -50i32..50, lb in 0i32..40) {
            let x = f(a as f64, (a + la) as f64);
            let y = f(b as f64, (b + lb) as f64);
            let i1 = interval_iou(&x, &y).unwrap();
            let i2 = interval_iou(&y, &x).unwrap();
            proptest::prop_assert_eq!(i1, i2);
            proptest::prop_assert!((0.0..=1.0).contains(&i1));
        }
    }
}
