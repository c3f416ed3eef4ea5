//! Temporal segment proposals from per-second clip features.
//!
//! The pipeline is: block-contrast boundary scores over the self-similarity
//! of neighbouring features, peak picking with non-maximum suppression,
//! greedy agglomerative merging toward a duration prior, and finally snapping
//! segment endpoints onto nearby shot boundaries.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const NORM_TOL: f64 = 1e-6;
const TIME_EPS: f64 = 1e-9;

fn default_stride() -> f64 {
    1.0
}

/// Per-second embeddings for one video. Vectors are unit-normalised on
/// construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSeries {
    pub video_id: String,
    #[serde(default = "default_stride")]
    pub stride_s: f64,
    pub dim: usize,
    pub vectors: Vec<Vec<f64>>,
}

impl FeatureSeries {
    pub fn new(video_id: impl Into<String>, stride_s: f64, vectors: Vec<Vec<f64>>) -> Result<Self> {
        let dim = vectors.first().map(Vec::len).unwrap_or(0);
        Self {
            video_id: video_id.into(),
            stride_s,
            dim,
            vectors,
        }
        .normalized()
    }

    /// Checks shape invariants and rescales every vector to unit L2 norm.
    pub fn normalized(mut self) -> Result<Self> {
        if !(self.stride_s > 0.0 && self.stride_s.is_finite()) {
            return Err(Error::invalid(format!(
                "{}: stride_s must be positive, got {}",
                self.video_id, self.stride_s
            )));
        }
        if self.dim == 0 {
            return Err(Error::invalid(format!("{}: dim must be positive", self.video_id)));
        }
        if self.vectors.is_empty() {
            return Err(Error::invalid(format!("{}: feature series is empty", self.video_id)));
        }
        for (i, v) in self.vectors.iter_mut().enumerate() {
            if v.len() != self.dim {
                return Err(Error::invalid(format!(
                    "{}: vector {i} has length {}, expected dim {}",
                    self.video_id,
                    v.len(),
                    self.dim
                )));
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if !norm.is_finite() || norm <= NORM_TOL {
                return Err(Error::invalid(format!(
                    "{}: vector {i} has zero or non-finite norm",
                    self.video_id
                )));
            }
            if (norm - 1.0).abs() > NORM_TOL {
                v.iter_mut().for_each(|x| *x /= norm);
            }
        }
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// Time span covered by the series, `[0, len * stride)`.
    pub fn duration_s(&self) -> f64 {
        self.vectors.len() as f64 * self.stride_s
    }

    /// Sample indices whose timestamps fall in `[start_s, end_s)`; never empty.
    fn index_range(&self, start_s: f64, end_s: f64) -> (usize, usize) {
        let n = self.vectors.len();
        let lo = ((start_s / self.stride_s).round().max(0.0) as usize).min(n - 1);
        let hi = ((end_s / self.stride_s).round().max(0.0) as usize).min(n);
        (lo, hi.max(lo + 1))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShotBoundaryList {
    pub video_id: String,
    pub times_s: Vec<f64>,
}

impl ShotBoundaryList {
    pub fn validate(&self, duration_s: Option<f64>) -> Result<()> {
        for w in self.times_s.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::invalid(format!(
                    "{}: shot times not strictly increasing ({} then {})",
                    self.video_id, w[0], w[1]
                )));
            }
        }
        if let Some(&t) = self.times_s.iter().find(|t| !t.is_finite() || **t < 0.0) {
            return Err(Error::invalid(format!("{}: shot time {t} is negative", self.video_id)));
        }
        if let (Some(d), Some(&last)) = (duration_s, self.times_s.last()) {
            if last > d + TIME_EPS {
                return Err(Error::invalid(format!(
                    "{}: shot time {last} beyond video duration {d}",
                    self.video_id
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentProposal {
    pub video_id: String,
    pub start_s: f64,
    pub end_s: f64,
    #[serde(default)]
    pub boundary_score: f64,
    #[serde(default)]
    pub scores: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

impl SegmentProposal {
    pub fn new(video_id: impl Into<String>, start_s: f64, end_s: f64) -> Self {
        Self {
            video_id: video_id.into(),
            start_s,
            end_s,
            boundary_score: 0.0,
            scores: BTreeMap::new(),
            label: None,
        }
    }

    pub fn duration_s(&self) -> f64 {
        self.end_s - self.start_s
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.start_s >= 0.0 && self.start_s < self.end_s && self.end_s.is_finite()) {
            return Err(Error::invalid(format!(
                "{}: segment needs 0 <= start_s < end_s, got ({}, {})",
                self.video_id, self.start_s, self.end_s
            )));
        }
        if let Some((k, v)) = self.scores.iter().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!(
                "{}: score {k} = {v} outside [0, 1]",
                self.video_id
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmenterConfig {
    /// Half window, in samples, of the boundary kernel.
    pub w: usize,
    pub theta_b: f64,
    pub min_sep_s: f64,
    pub target_dur_s: f64,
    pub max_dur_s: f64,
    pub snap_tol_s: f64,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        Self {
            w: 5,
            theta_b: 0.2,
            min_sep_s: 2.0,
            target_dur_s: 10.0,
            max_dur_s: 30.0,
            snap_tol_s: 1.0,
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Block-contrast boundary score for every sample index.
///
/// For index `t` with blocks `A = [t-w, t)` and `B = [t, t+w)` the score is the
/// mean similarity inside `A` and inside `B` minus the mean similarity across
/// `A x B`. Because vectors are unit-norm, block sums reduce this to norms and
/// dot products of prefix sums. Indices without a full window score 0.
pub fn boundary_scores(fs: &FeatureSeries, half_width_w: usize) -> Result<Vec<f64>> {
    let n = fs.len();
    let w = half_width_w;
    if w == 0 {
        return Err(Error::invalid("boundary kernel half width must be positive"));
    }
    if n < 2 * w {
        return Err(Error::invalid(format!(
            "{}: feature series has {n} samples, boundary kernel with w = {w} needs at least {}",
            fs.video_id,
            2 * w
        )));
    }

    let mut prefix = vec![vec![0.0; fs.dim]; n + 1];
    for (i, v) in fs.vectors.iter().enumerate() {
        let (head, tail) = prefix.split_at_mut(i + 1);
        for ((acc, prev), x) in tail[0].iter_mut().zip(&head[i]).zip(v) {
            *acc = prev + x;
        }
    }
    let block_sum =
        |lo: usize, hi: usize| -> Vec<f64> { prefix[hi].iter().zip(&prefix[lo]).map(|(a, b)| a - b).collect() };

    let w2 = (w * w) as f64;
    let mut scores = vec![0.0; n];
    for (t, score) in scores.iter_mut().enumerate().take(n - w + 1).skip(w) {
        let a = block_sum(t - w, t);
        let b = block_sum(t, t + w);
        let within = (dot(&a, &a) + dot(&b, &b)) / (2.0 * w2);
        let cross = dot(&a, &b) / w2;
        *score = within - cross;
    }
    Ok(scores)
}

/// Peak picking with non-maximum suppression. Returns boundary times sorted
/// ascending.
///
/// A peak is a strict local maximum; a flat run of equal values counts once,
/// at its first index, when it is strictly higher than both outer neighbours.
pub fn detect_boundaries(scores: &[f64], threshold_b: f64, min_separation_s: f64, stride_s: f64) -> Vec<f64> {
    let n = scores.len();
    let mut peaks: Vec<(usize, f64)> = Vec::new();
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && scores[j + 1] == scores[i] {
            j += 1;
        }
        let s = scores[i];
        let left_ok = i == 0 || scores[i - 1] < s;
        let right_ok = j + 1 == n || scores[j + 1] < s;
        if left_ok && right_ok && s > threshold_b {
            peaks.push((i, s));
        }
        i = j + 1;
    }

    // Highest score first, earlier time on ties.
    peaks.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut kept: Vec<usize> = Vec::new();
    for (idx, _) in peaks {
        let t = idx as f64 * stride_s;
        if kept
            .iter()
            .all(|&k| (k as f64 * stride_s - t).abs() >= min_separation_s)
        {
            kept.push(idx);
        }
    }
    kept.sort_unstable();
    kept.into_iter().map(|k| k as f64 * stride_s).collect()
}

/// Splits the full series span at the given boundary times.
pub fn segments_from_boundaries(fs: &FeatureSeries, boundaries: &[f64], scores: &[f64]) -> Vec<SegmentProposal> {
    let end = fs.duration_s();
    let mut cuts: Vec<f64> = boundaries
        .iter()
        .copied()
        .filter(|&t| t > TIME_EPS && t < end - TIME_EPS)
        .collect();
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();

    let mut out = Vec::with_capacity(cuts.len() + 1);
    let mut start = 0.0;
    let mut start_score = 0.0;
    for &c in &cuts {
        let mut seg = SegmentProposal::new(fs.video_id.clone(), start, c);
        seg.boundary_score = start_score;
        out.push(seg);
        start = c;
        let idx = (c / fs.stride_s).round() as usize;
        start_score = scores.get(idx).copied().unwrap_or(0.0);
    }
    let mut last = SegmentProposal::new(fs.video_id.clone(), start, end);
    last.boundary_score = start_score;
    out.push(last);
    out
}

fn check_contiguous(segments: &[SegmentProposal]) -> Result<()> {
    for (i, s) in segments.iter().enumerate() {
        s.validate()?;
        if let Some(next) = segments.get(i + 1) {
            if (next.start_s - s.end_s).abs() > TIME_EPS {
                return Err(Error::invalid(format!(
                    "{}: segments {i} and {} are not contiguous ({} vs {})",
                    s.video_id,
                    i + 1,
                    s.end_s,
                    next.start_s
                )));
            }
        }
    }
    Ok(())
}

fn mean_direction(fs: &FeatureSeries, seg: &SegmentProposal) -> Vec<f64> {
    let (lo, hi) = fs.index_range(seg.start_s, seg.end_s);
    let mut m = vec![0.0; fs.dim];
    for v in &fs.vectors[lo..hi] {
        m.iter_mut().zip(v).for_each(|(a, x)| *a += x);
    }
    let norm = dot(&m, &m).sqrt();
    if norm > 0.0 {
        m.iter_mut().for_each(|x| *x /= norm);
    }
    m
}

/// Greedy agglomerative merging of adjacent segments.
///
/// Repeatedly merges the adjacent pair whose re-normalised mean features are
/// most similar (earlier pair on ties), skipping pairs whose union would exceed
/// `max_duration_s`, until the mean duration reaches `target_duration_s`.
pub fn merge_to_duration_prior(
    segments: &[SegmentProposal],
    fs: &FeatureSeries,
    target_duration_s: f64,
    max_duration_s: f64,
) -> Result<Vec<SegmentProposal>> {
    check_contiguous(segments)?;
    let mut segs = segments.to_vec();
    if segs.len() <= 1 {
        return Ok(segs);
    }
    let span = segs.last().unwrap().end_s - segs[0].start_s;
    let mut dirs: Vec<Vec<f64>> = segs.iter().map(|s| mean_direction(fs, s)).collect();

    while span / (segs.len() as f64) < target_duration_s {
        let mut best: Option<(usize, f64)> = None;
        for i in 0..segs.len() - 1 {
            if segs[i + 1].end_s - segs[i].start_s > max_duration_s + TIME_EPS {
                continue;
            }
            let sim = dot(&dirs[i], &dirs[i + 1]);
            if best.is_none_or(|(_, b)| sim > b) {
                best = Some((i, sim));
            }
        }
        let Some((i, _)) = best else { break };
        let right = segs.remove(i + 1);
        dirs.remove(i + 1);
        segs[i].end_s = right.end_s;
        dirs[i] = mean_direction(fs, &segs[i]);
    }
    Ok(segs)
}

fn nearest_shot(t: f64, shots: &[f64], tol_s: f64) -> Option<f64> {
    let mut best: Option<(f64, f64)> = None;
    for &s in shots {
        let d = (s - t).abs();
        if d <= tol_s + TIME_EPS && best.is_none_or(|(bd, _)| d < bd) {
            best = Some((d, s));
        }
    }
    best.map(|(_, s)| s)
}

/// Moves segment endpoints onto shot boundaries within `tol_s`.
///
/// Endpoints shared by touching segments move together. Candidate snaps are
/// applied closest-first (earlier time on ties); a snap that would collapse a
/// segment or break ordering is skipped.
pub fn snap_to_shots(segments: &[SegmentProposal], shots: &ShotBoundaryList, tol_s: f64) -> Vec<SegmentProposal> {
    if segments.is_empty() || shots.times_s.is_empty() {
        return segments.to_vec();
    }

    // Distinct endpoint positions; `owners[k]` lists (segment, is_end) users.
    let mut points: Vec<f64> = Vec::new();
    let mut owners: Vec<Vec<(usize, bool)>> = Vec::new();
    for (i, s) in segments.iter().enumerate() {
        for (t, is_end) in [(s.start_s, false), (s.end_s, true)] {
            match points.last() {
                Some(&p) if (p - t).abs() <= TIME_EPS => owners.last_mut().unwrap().push((i, is_end)),
                _ => {
                    points.push(t);
                    owners.push(vec![(i, is_end)]);
                }
            }
        }
    }

    let mut candidates: Vec<(f64, usize, f64)> = points
        .iter()
        .enumerate()
        .filter_map(|(k, &p)| nearest_shot(p, &shots.times_s, tol_s).map(|s| ((s - p).abs(), k, s)))
        .filter(|&(d, _, _)| d > 0.0)
        .collect();
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(points[a.1].total_cmp(&points[b.1])));

    let mut out = segments.to_vec();
    for (_, k, target) in candidates {
        let trial = |out: &[SegmentProposal]| -> bool {
            owners[k].iter().all(|&(i, is_end)| {
                let s = &out[i];
                let (start, end) = if is_end { (s.start_s, target) } else { (target, s.end_s) };
                let prev_ok = i == 0 || out[i - 1].end_s <= start + TIME_EPS || owners[k].contains(&(i - 1, true));
                let next_ok =
                    i + 1 == out.len() || end <= out[i + 1].start_s + TIME_EPS || owners[k].contains(&(i + 1, false));
                start < end - TIME_EPS && start >= 0.0 && prev_ok && next_ok
            })
        };
        if trial(&out) {
            for &(i, is_end) in &owners[k] {
                if is_end {
                    out[i].end_s = target;
                } else {
                    out[i].start_s = target;
                }
            }
        }
    }
    out
}

/// Full proposal pipeline: scores, peaks, split, merge, snap.
pub fn propose_segments(
    fs: &FeatureSeries,
    shots: Option<&ShotBoundaryList>,
    cfg: &SegmenterConfig,
) -> Result<Vec<SegmentProposal>> {
    if cfg.min_sep_s < 0.0 || !cfg.theta_b.is_finite() {
        return Err(Error::invalid("theta_b must be finite and min_sep_s non-negative"));
    }
    let (scores, boundaries) = if fs.len() >= 2 * cfg.w {
        let scores = boundary_scores(fs, cfg.w)?;
        let b = detect_boundaries(&scores, cfg.theta_b, cfg.min_sep_s, fs.stride_s);
        (scores, b)
    } else {
        (vec![0.0; fs.len()], Vec::new())
    };
    let segments = segments_from_boundaries(fs, &boundaries, &scores);
    let merged = merge_to_duration_prior(&segments, fs, cfg.target_dur_s, cfg.max_dur_s)?;
    Ok(match shots {
        Some(s) => snap_to_shots(&merged, s, cfg.snap_tol_s),
        None => merged,
    })
}
