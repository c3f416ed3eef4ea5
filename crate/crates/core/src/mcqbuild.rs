//! Multiple-choice benchmark construction: binary-probe expansion, blind
//! text-only filtering and type/domain balancing.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::judge::ChatClient;
use crate::protocol::{format_prompt, parse_option, PromptFields, Task};
use crate::template;

pub const DEFAULT_SLACK: f64 = 1.5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MCQItem {
    pub qa_id: String,
    pub video_ref: String,
    pub question: String,
    pub options: Vec<String>,
    pub answer_index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question_type: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verified: Option<bool>,
}

impl MCQItem {
    pub fn validate(&self) -> Result<()> {
        if self.options.len() < 2 {
            return Err(Error::invalid(format!("{}: needs at least 2 options", self.qa_id)));
        }
        if self.answer_index >= self.options.len() {
            return Err(Error::invalid(format!(
                "{}: answer_index {} out of range for {} options",
                self.qa_id,
                self.answer_index,
                self.options.len()
            )));
        }
        let distinct: BTreeSet<&String> = self.options.iter().collect();
        if distinct.len() != self.options.len() {
            return Err(Error::invalid(format!(
                "{}: options are not pairwise distinct",
                self.qa_id
            )));
        }
        Ok(())
    }

    pub fn answer(&self) -> &str {
        &self.options[self.answer_index]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Side {
    A,
    B,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryProbe {
    pub qa_id: String,
    pub probe_index: usize,
    pub option_a: String,
    pub option_b: String,
    pub correct_is: Side,
}

impl BinaryProbe {
    /// Id used to key predictions for this probe.
    pub fn probe_id(&self) -> String {
        probe_id(&self.qa_id, self.probe_index)
    }

    pub fn options(&self) -> Vec<String> {
        vec![self.option_a.clone(), self.option_b.clone()]
    }

    pub fn correct_index(&self) -> usize {
        match self.correct_is {
            Side::A => 0,
            Side::B => 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.option_a == self.option_b {
            return Err(Error::invalid(format!(
                "{}: probe options are identical",
                self.probe_id()
            )));
        }
        Ok(())
    }
}

pub fn probe_id(qa_id: &str, probe_index: usize) -> String {
    format!("{qa_id}#{probe_index}")
}

/// Deterministic generator keyed by a seed and a list of labels.
pub fn keyed_rng(seed: u64, labels: &[&str]) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for l in labels {
        h.update((l.len() as u64).to_le_bytes());
        h.update(l.as_bytes());
    }
    let digest: [u8; 32] = h.finalize().into();
    ChaCha8Rng::from_seed(digest)
}

/// One probe per distractor, in option order. The correct answer's side is a
/// seeded coin flip per probe.
pub fn expand_binary(item: &MCQItem, seed: u64) -> Result<Vec<BinaryProbe>> {
    item.validate()?;
    let correct = item.answer().to_string();
    let mut out = Vec::with_capacity(item.options.len() - 1);
    for (_, distractor) in item.options.iter().enumerate().filter(|(j, _)| *j != item.answer_index) {
        let k = out.len();
        let mut rng = keyed_rng(seed, &[&item.qa_id, &k.to_string()]);
        let correct_first: bool = rng.random();
        let (option_a, option_b, correct_is) = if correct_first {
            (correct.clone(), distractor.clone(), Side::A)
        } else {
            (distractor.clone(), correct.clone(), Side::B)
        };
        out.push(BinaryProbe {
            qa_id: item.qa_id.clone(),
            probe_index: k,
            option_a,
            option_b,
            correct_is,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlindStatus {
    /// The text-only model answered correctly.
    Dropped,
    Kept,
    /// Unparseable output or endpoint failure; kept and flagged.
    Unfiltered,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlindRecord {
    pub qa_id: String,
    pub status: BlindStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub blind_answer: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BlindOutcome {
    pub kept: Vec<MCQItem>,
    pub records: Vec<BlindRecord>,
}

pub fn blind_prompt(item: &MCQItem) -> Result<String> {
    let fields = PromptFields {
        question: Some(item.question.clone()),
        options: Some(item.options.clone()),
        ..Default::default()
    };
    Ok(format_prompt(Task::Fgqa, &fields)?.filled_text)
}

/// Asks every question with its options and no video. Items the blind
/// model gets right are dropped.
pub fn blind_filter(items: &[MCQItem], client: &ChatClient) -> Result<BlindOutcome> {
    for it in items {
        it.validate()?;
    }
    let records = client.map_bounded(items, |item| -> Result<BlindRecord> {
        let prompt = blind_prompt(item)?;
        let mut rec = BlindRecord {
            qa_id: item.qa_id.clone(),
            status: BlindStatus::Unfiltered,
            blind_answer: None,
            raw: None,
            reason: None,
        };
        match client.complete(template::FGQA.id, &prompt) {
            Ok(raw) => {
                match parse_option(&raw, item.options.len()) {
                    Ok(i) => {
                        rec.blind_answer = Some(i);
                        rec.status = if i == item.answer_index {
                            BlindStatus::Dropped
                        } else {
                            BlindStatus::Kept
                        };
                    }
                    Err(f) => rec.reason = Some(f.reason),
                }
                rec.raw = Some(raw);
            }
            Err(e) => rec.reason = Some(e.to_string()),
        }
        Ok(rec)
    });
    let records = records.into_iter().collect::<Result<Vec<_>>>()?;
    let kept = items
        .iter()
        .zip(&records)
        .filter(|(_, r)| r.status != BlindStatus::Dropped)
        .map(|(i, _)| i.clone())
        .collect();
    Ok(BlindOutcome { kept, records })
}

/// Undersamples every (question_type, domain) cell to at most
/// `ceil(smallest non-empty cell * slack)` items. Output keeps input order.
pub fn balance(items: &[MCQItem], seed: u64, slack: f64) -> Result<Vec<MCQItem>> {
    if !(slack.is_finite() && slack > 0.0) {
        return Err(Error::invalid(format!("slack must be positive, got {slack}")));
    }
    let missing: Vec<&str> = items
        .iter()
        .filter(|i| i.question_type.is_none() || i.domain.is_none())
        .map(|i| i.qa_id.as_str())
        .collect();
    if !missing.is_empty() {
        return Err(Error::invalid(format!(
            "items missing question_type or domain: {}",
            missing.join(", ")
        )));
    }
    let mut cells: BTreeMap<(&str, &str), Vec<usize>> = BTreeMap::new();
    for (i, it) in items.iter().enumerate() {
        let key = (it.question_type.as_deref().unwrap(), it.domain.as_deref().unwrap());
        cells.entry(key).or_default().push(i);
    }
    let Some(smallest) = cells.values().map(Vec::len).min() else {
        return Ok(Vec::new());
    };
    let cap = (smallest as f64 * slack).ceil().max(1.0) as usize;
    let mut keep = vec![false; items.len()];
    for ((qt, dom), idx) in &cells {
        if idx.len() <= cap {
            idx.iter().for_each(|&i| keep[i] = true);
            continue;
        }
        let mut rng = keyed_rng(seed, &[qt, dom]);
        for pick in rand::seq::index::sample(&mut rng, idx.len(), cap) {
            keep[idx[pick]] = true;
        }
    }
    Ok(items
        .iter()
        .zip(keep)
        .filter(|(_, k)| *k)
        .map(|(i, _)| i.clone())
        .collect())
}

pub fn generation_prompt(question: &str, answer: &str, n_distractors: usize) -> Result<String> {
    let mut v = BTreeMap::new();
    v.insert("question", question.to_string());
    v.insert("answer", answer.to_string());
    v.insert("n", n_distractors.to_string());
    template::MCQ_GENERATION.fill(&v)
}

/// Pulls list items (`- text`, `* text`, `1. text`, `(A) text`) out of a
/// generator response.
pub fn parse_generated_options(raw: &str) -> Vec<String> {
    let re = regex::Regex::new(r"^\s*(?:[-*]|\d+[.)]|\(?[A-Z]\))\s+(.+?)\s*$").unwrap();
    raw.lines()
        .filter_map(|l| re.captures(l).map(|c| c[1].to_string()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::judge::{EndpointConfig, ResponseCache, TransportError};
    use crate::metrics::{mbacc, BinaryProbeResult};

    fn item(id: &str, n: usize, answer: usize) -> MCQItem {
        MCQItem {
            qa_id: id.into(),
            video_ref: "v".into(),
            question: format!("question {id}?"),
            options: (0..n).map(|i| format!("option {i}")).collect(),
            answer_index: answer,
            question_type: None,
            domain: None,
            verified: None,
        }
    }

    #[test]
    fn probe_counts() {
        assert_eq!(expand_binary(&item("a", 2, 0), 1).unwrap().len(), 1);
        let p = expand_binary(&item("a", 4, 2), 1).unwrap();
        assert_eq!(p.len(), 3);
        for probe in &p {
            let correct = if probe.correct_is == Side::A {
                &probe.option_a
            } else {
                &probe.option_b
            };
            assert_eq!(correct, "option 2");
        }
        assert_eq!(p, expand_binary(&item("a", 4, 2), 1).unwrap());
    }

    #[test]
    fn coin_uses_both_sides() {
        let sides: BTreeSet<Side> = (0..40)
            .flat_map(|i| expand_binary(&item(&format!("q{i}"), 4, 0), 7).unwrap())
            .map(|p| p.correct_is)
            .collect();
        assert_eq!(sides.len(), 2);
    }

    #[test]
    fn invalid_items_rejected() {
        assert!(item("a", 1, 0).validate().is_err());
        assert!(item("a", 3, 3).validate().is_err());
        let mut dup = item("a", 3, 0);
        dup.options[1] = dup.options[0].clone();
        assert!(dup.validate().is_err());
    }

    #[test]
    fn mbacc_composition() {
        let items: Vec<_> = (0..5).map(|i| item(&format!("q{i}"), 4, i % 4)).collect();
        let probes: Vec<_> = items.iter().flat_map(|i| expand_binary(i, 3).unwrap()).collect();
        let perfect: Vec<_> = probes
            .iter()
            .map(|p| BinaryProbeResult {
                qa_id: p.qa_id.clone(),
                probe_index: p.probe_index,
                correct: true,
            })
            .collect();
        assert_eq!(mbacc(&perfect), 100.0);
        let one_wrong: Vec<_> = probes
            .iter()
            .map(|p| BinaryProbeResult {
                qa_id: p.qa_id.clone(),
                probe_index: p.probe_index,
                correct: p.probe_index != 1,
            })
            .collect();
        assert_eq!(mbacc(&one_wrong), 0.0);
    }

    fn tagged(id: usize, qt: &str, dom: &str) -> MCQItem {
        MCQItem {
            question_type: Some(qt.into()),
            domain: Some(dom.into()),
            ..item(&format!("q{id}"), 2, 0)
        }
    }

    #[test]
    fn balance_examples() {
        let mut items = Vec::new();
        for i in 0..10 {
            items.push(tagged(i, "count", "cooking"));
        }
        for i in 10..20 {
            items.push(tagged(i, "count", "diy"));
        }
        for i in 20..120 {
            items.push(tagged(i, "action", "diy"));
        }
        let out = balance(&items, 9, DEFAULT_SLACK).unwrap();
        let count = |qt: &str, d: &str| {
            out.iter()
                .filter(|i| i.question_type.as_deref() == Some(qt) && i.domain.as_deref() == Some(d))
                .count()
        };
        assert_eq!(
            (count("count", "cooking"), count("count", "diy"), count("action", "diy")),
            (10, 10, 15)
        );
        let pos: Vec<usize> = out.iter().map(|o| items.iter().position(|i| i == o).unwrap()).collect();
        assert!(pos.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(out, balance(&items, 9, DEFAULT_SLACK).unwrap());
        assert_ne!(out, balance(&items, 10, DEFAULT_SLACK).unwrap());

        let uniform: Vec<_> = (0..6)
            .map(|i| tagged(i, if i % 2 == 0 { "a" } else { "b" }, "x"))
            .collect();
        assert_eq!(balance(&uniform, 1, DEFAULT_SLACK).unwrap(), uniform);
    }

    #[test]
    fn balance_reports_missing_tags() {
        let items = vec![tagged(0, "a", "x"), item("untagged", 2, 0)];
        let err = balance(&items, 0, DEFAULT_SLACK).unwrap_err().to_string();
        assert!(err.contains("untagged"), "{err}");
    }

    fn scripted(answer: &'static str) -> ChatClient {
        let t = move |req: &crate::judge::ChatRequest| -> std::result::Result<String, TransportError> {
            if req.prompt_text().contains("question fail?") {
                Err(TransportError("down".into()))
            } else {
                Ok(answer.to_string())
            }
        };
        let cfg = EndpointConfig {
            max_retries: 1,
            backoff_ms: 0,
            ..Default::default()
        };
        ChatClient::new(cfg, Box::new(t), ResponseCache::in_memory()).unwrap()
    }

    #[test]
    fn blind_filter_policy() {
        let items = vec![item("right", 4, 1), item("wrong", 4, 2), item("fail", 4, 0)];
        let out = blind_filter(&items, &scripted("(B)")).unwrap();
        let ids: Vec<_> = out.kept.iter().map(|i| i.qa_id.as_str()).collect();
        assert_eq!(ids, vec!["wrong", "fail"]);
        assert_eq!(out.records[0].status, BlindStatus::Dropped);
        assert_eq!(out.records[1].blind_answer, Some(1));
        assert_eq!(out.records[2].status, BlindStatus::Unfiltered);

        let out = blind_filter(&items[..1], &scripted("I cannot tell")).unwrap();
        assert_eq!(out.kept.len(), 1);
        assert_eq!(out.records[0].status, BlindStatus::Unfiltered);
    }

    #[test]
    fn generation_helpers() {
        let p = generation_prompt("What color?", "Red.", 3).unwrap();
        assert!(p.contains("Q: What color?\nA: Red.") && p.contains("provide 3 distractor"));
        let opts = parse_generated_options("Here:\n- one\n2. two\n(C) three\nnoise");
        assert_eq!(opts, vec!["one", "two", "three"]);
    }

    proptest::proptest! {
        #[test]
        fn balance_never_grows_or_empties_cells(cells in proptest::collection::vec(1usize..30, 1..6), seed in 0u64..1000) {
            let mut items = Vec::new();
            for (c, &n) in cells.iter().enumerate() {
                for _ in 0..n {
                    items.push(tagged(items.len(), &format!("t{c}"), "d"));
                }
            }
            let out = balance(&items, seed, DEFAULT_SLACK).unwrap();
            for (c, &n) in cells.iter().enumerate() {
                let k = out.iter().filter(|i| i.question_type.as_deref() == Some(&format!("t{c}"))).count();
                proptest::prop_assert!(k >= 1 && k <= n);
            }
        }
    }
}
