//! Relevance filtering of segment proposals from precomputed evidence.
//!
//! Talking-head coverage (ASD) is an upper-bound gate; hand-object
//! interaction, ASR groundability and the learned relevance classifier are
//! lower-bound gates. All active gates must pass.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::segmenter::SegmentProposal;

pub const ASR_THRESHOLD: f64 = 0.5;
pub const THRESHOLD_NAMES: [&str; 4] = ["asd_max", "hoi_min", "asr_min", "relevance_min"];

/// Evidence gathered by external detectors for one segment. Missing fields
/// are only an error when a threshold needs them.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SegmentEvidence {
    pub video_id: String,
    pub start_s: f64,
    pub end_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub asd_fraction: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hand_confidences: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hoi_frame_fraction: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub asr_alignment_scores: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pooled_feature: Option<Vec<f64>>,
}

fn check_unit(name: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::invalid(format!("{name} = {v} outside [0, 1]")))
    }
}

impl SegmentEvidence {
    pub fn validate(&self) -> Result<()> {
        if let Some(v) = self.asd_fraction {
            check_unit("asd_fraction", v)?;
        }
        if let Some(v) = self.hoi_frame_fraction {
            check_unit("hoi_frame_fraction", v)?;
        }
        for v in self.hand_confidences.iter().flatten() {
            check_unit("hand_confidences", *v)?;
        }
        for v in self.asr_alignment_scores.iter().flatten() {
            check_unit("asr_alignment_scores", *v)?;
        }
        if let Some(p) = &self.pooled_feature {
            if p.iter().any(|x| !x.is_finite()) {
                return Err(Error::invalid("pooled_feature has non-finite entries"));
            }
        }
        Ok(())
    }

    pub fn hoi(&self) -> Result<f64> {
        match (self.hoi_frame_fraction, &self.hand_confidences) {
            (Some(f), Some(c)) => Ok(hoi_score(f, c)),
            _ => Err(Error::invalid("hoi_min needs hoi_frame_fraction and hand_confidences")),
        }
    }
}

/// Mean of alignment scores strictly above `threshold`; 0 when none qualify.
pub fn asr_groundability(scores: &[f64], threshold: f64) -> Result<f64> {
    for &s in scores {
        check_unit("ASR alignment score", s)?;
    }
    let above: Vec<f64> = scores.iter().copied().filter(|&s| s > threshold).collect();
    if above.is_empty() {
        return Ok(0.0);
    }
    Ok(above.iter().sum::<f64>() / above.len() as f64)
}

/// Fraction of frames with interaction times the mean hand confidence.
pub fn hoi_score(hoi_frame_fraction: f64, hand_confidences: &[f64]) -> f64 {
    if hand_confidences.is_empty() {
        return 0.0;
    }
    let mean = hand_confidences.iter().sum::<f64>() / hand_confidences.len() as f64;
    hoi_frame_fraction * mean
}

/// Two-layer MLP relevance classifier, `sigmoid(w2 . relu(W1 x + b1) + b2)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevanceModel {
    pub d: usize,
    pub h: usize,
    #[serde(rename = "W1")]
    pub w1: Vec<Vec<f64>>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
}

impl RelevanceModel {
    pub fn validate(&self) -> Result<()> {
        if self.w1.len() != self.h || self.w1.iter().any(|r| r.len() != self.d) {
            return Err(Error::invalid(format!("W1 must be {} x {}", self.h, self.d)));
        }
        if self.b1.len() != self.h || self.w2.len() != self.h {
            return Err(Error::invalid(format!("b1 and w2 must have length {}", self.h)));
        }
        let finite = self
            .w1
            .iter()
            .flatten()
            .chain(&self.b1)
            .chain(&self.w2)
            .chain(std::iter::once(&self.b2))
            .all(|x| x.is_finite());
        if !finite {
            return Err(Error::invalid("relevance model has non-finite weights"));
        }
        Ok(())
    }

    pub fn hidden(&self, pooled: &[f64]) -> Result<Vec<f64>> {
        if pooled.len() != self.d {
            return Err(Error::invalid(format!(
                "pooled feature has dim {}, relevance model expects {}",
                pooled.len(),
                self.d
            )));
        }
        Ok(self
            .w1
            .iter()
            .zip(&self.b1)
            .map(|(row, b)| (row.iter().zip(pooled).map(|(w, x)| w * x).sum::<f64>() + b).max(0.0))
            .collect())
    }
}

fn sigmoid(z: f64) -> f64 {
    let p = if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    };
    // Keep the open interval even when exp saturates.
    p.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON)
}

pub fn relevance_score(model: &RelevanceModel, pooled: &[f64]) -> Result<f64> {
    let hidden = model.hidden(pooled)?;
    let z = hidden.iter().zip(&model.w2).map(|(a, w)| a * w).sum::<f64>() + model.b2;
    Ok(sigmoid(z))
}

/// Active cutoffs. Absent entries are inactive.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Thresholds {
    pub asd_max: Option<f64>,
    pub hoi_min: Option<f64>,
    pub asr_min: Option<f64>,
    pub relevance_min: Option<f64>,
}

impl Thresholds {
    pub fn from_map(map: &BTreeMap<String, f64>) -> Result<Self> {
        let mut t = Thresholds::default();
        for (k, &v) in map {
            if !v.is_finite() {
                return Err(Error::invalid(format!("threshold {k} is not finite")));
            }
            match k.as_str() {
                "asd_max" => t.asd_max = Some(v),
                "hoi_min" => t.hoi_min = Some(v),
                "asr_min" => t.asr_min = Some(v),
                "relevance_min" => t.relevance_min = Some(v),
                other => {
                    return Err(Error::invalid(format!(
                        "unknown threshold {other:?}; expected one of {THRESHOLD_NAMES:?}"
                    )))
                }
            }
        }
        Ok(t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankRecord {
    pub video_id: String,
    pub start_s: f64,
    pub end_s: f64,
    pub kept: bool,
    pub scores: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failed: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FilterOutcome {
    pub kept: Vec<SegmentProposal>,
    pub report: Vec<RankRecord>,
}

fn evaluate(
    ev: &SegmentEvidence,
    t: &Thresholds,
    relevance: Option<&RelevanceModel>,
) -> (BTreeMap<String, f64>, Option<String>, Option<String>) {
    let mut scores = BTreeMap::new();
    let mut errors: Vec<String> = Vec::new();

    if let Some(a) = ev.asd_fraction {
        scores.insert("asd".to_string(), a);
    }
    match ev.hoi() {
        Ok(h) => {
            scores.insert("hoi".to_string(), h);
        }
        Err(e) if t.hoi_min.is_some() => errors.push(e.to_string()),
        Err(_) => {}
    }
    match ev
        .asr_alignment_scores
        .as_deref()
        .map(|s| asr_groundability(s, ASR_THRESHOLD))
    {
        Some(Ok(a)) => {
            scores.insert("asr".to_string(), a);
        }
        Some(Err(e)) => errors.push(e.to_string()),
        None if t.asr_min.is_some() => errors.push("asr_min needs asr_alignment_scores".into()),
        None => {}
    }
    if let Some(model) = relevance {
        match ev.pooled_feature.as_deref().map(|p| relevance_score(model, p)) {
            Some(Ok(r)) => {
                scores.insert("relevance".to_string(), r);
            }
            Some(Err(e)) => errors.push(e.to_string()),
            None => errors.push("relevance model needs pooled_feature".into()),
        }
    }
    if t.asd_max.is_some() && ev.asd_fraction.is_none() {
        errors.push("asd_max needs asd_fraction".into());
    }
    if let Err(e) = ev.validate() {
        errors.push(e.to_string());
    }
    if !errors.is_empty() {
        return (scores, None, Some(errors.join("; ")));
    }

    let failed = [
        ("asd_max", t.asd_max.zip(scores.get("asd")).is_some_and(|(m, &s)| s > m)),
        ("hoi_min", t.hoi_min.zip(scores.get("hoi")).is_some_and(|(m, &s)| s < m)),
        ("asr_min", t.asr_min.zip(scores.get("asr")).is_some_and(|(m, &s)| s < m)),
        (
            "relevance_min",
            t.relevance_min
                .zip(scores.get("relevance"))
                .is_some_and(|(m, &s)| s < m),
        ),
    ]
    .into_iter()
    .find(|(_, f)| *f)
    .map(|(n, _)| n.to_string());
    (scores, failed, None)
}

/// Keeps segments that pass every active gate. Items whose evidence cannot
/// support an active gate are dropped with an error in the report.
pub fn filter_segments(
    items: &[(SegmentProposal, SegmentEvidence)],
    thresholds: &Thresholds,
    relevance: Option<&RelevanceModel>,
) -> Result<FilterOutcome> {
    if let Some(m) = relevance {
        m.validate()?;
        if thresholds.relevance_min.is_none() {
            return Err(Error::invalid("a relevance model was given without relevance_min"));
        }
    }
    let mut out = FilterOutcome::default();
    for (seg, ev) in items {
        let (scores, failed, error) = evaluate(ev, thresholds, relevance);
        let kept = failed.is_none() && error.is_none();
        if kept {
            let mut s = seg.clone();
            s.scores.extend(scores.iter().map(|(k, v)| (k.clone(), *v)));
            out.kept.push(s);
        }
        out.report.push(RankRecord {
            video_id: seg.video_id.clone(),
            start_s: seg.start_s,
            end_s: seg.end_s,
            kept,
            scores,
            failed,
            error,
        });
    }
    Ok(out)
}
