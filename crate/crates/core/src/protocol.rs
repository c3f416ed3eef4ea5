//! Task prompts and model-output parsers for the five video benchmark tasks.
//!
//! Parsers are total: any input string yields either a value or a
//! [`ParseFailure`]. Canonical emitters produce the answer formats the
//! parsers accept, which the oracle mocks and round-trip tests rely on.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{CaptionEvent, DenseCaptionTrack, Interval};
use crate::template::{self, Template};

pub const DEFAULT_FRAMES: usize = 32;
pub const OUT_OF_FRAME: &str = "Out of frame";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Fgqa,
    Sgqa,
    Rdcap,
    Rcap,
    Rtloc,
}

impl Task {
    pub const ALL: [Task; 5] = [Task::Fgqa, Task::Sgqa, Task::Rdcap, Task::Rcap, Task::Rtloc];

    pub fn name(self) -> &'static str {
        match self {
            Task::Fgqa => "fgqa",
            Task::Sgqa => "sgqa",
            Task::Rdcap => "rdcap",
            Task::Rcap => "rcap",
            Task::Rtloc => "rtloc",
        }
    }

    pub fn template(self) -> Template {
        match self {
            Task::Fgqa => template::FGQA,
            Task::Sgqa => template::SGQA,
            Task::Rdcap => template::RDCAP,
            Task::Rcap => template::RCAP,
            Task::Rtloc => template::RTLOC,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::invalid(format!("unknown task {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskPrompt {
    pub task: Task,
    pub template_id: String,
    pub filled_text: String,
}

/// Values substituted into a task template. Only the fields a task uses
/// are required.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PromptFields {
    pub question: Option<String>,
    pub options: Option<Vec<String>>,
    pub event: Option<String>,
    pub start_frame: Option<u32>,
    pub end_frame: Option<u32>,
    pub n_frames: Option<usize>,
    /// Overlay color named in region prompts; defaults to red.
    pub color: Option<String>,
}

pub fn option_letter(i: usize) -> char {
    (b'A' + i as u8) as char
}

fn render_options(options: &[String]) -> String {
    options
        .iter()
        .enumerate()
        .map(|(i, o)| format!("({}) {o}", option_letter(i)))
        .collect::<Vec<_>>()
        .join("\n")
}

fn required<T: Clone>(v: &Option<T>, placeholder: &str, task: Task) -> Result<T> {
    v.clone()
        .ok_or_else(|| Error::invalid(format!("{task} prompt: missing value for placeholder [{placeholder}]")))
}

pub fn format_prompt(task: Task, fields: &PromptFields) -> Result<TaskPrompt> {
    let n_frames = fields.n_frames.unwrap_or(DEFAULT_FRAMES);
    if n_frames == 0 {
        return Err(Error::invalid("n_frames must be positive"));
    }
    let color = fields.color.clone().unwrap_or_else(|| "red".into());
    let mut values: BTreeMap<&str, String> = BTreeMap::new();
    match task {
        Task::Fgqa => {
            values.insert("question", required(&fields.question, "question", task)?);
            let options = required(&fields.options, "options", task)?;
            if options.len() < 2 || options.len() > 26 {
                return Err(Error::invalid(format!(
                    "fgqa prompt: need between 2 and 26 options, got {}",
                    options.len()
                )));
            }
            values.insert("options", render_options(&options));
        }
        Task::Sgqa => {
            values.insert("question", required(&fields.question, "question", task)?);
        }
        Task::Rdcap => {
            values.insert("color", color);
            values.insert("max_frame", (n_frames - 1).to_string());
            values.insert("n_frames", n_frames.to_string());
        }
        Task::Rcap => {
            values.insert("color", color);
            values.insert(
                "start_frame",
                required(&fields.start_frame, "start frame", task)?.to_string(),
            );
            values.insert("end_frame", required(&fields.end_frame, "end frame", task)?.to_string());
            values.insert("n_frames", n_frames.to_string());
        }
        Task::Rtloc => {
            values.insert("color", color);
            values.insert("event", required(&fields.event, "event", task)?);
            values.insert("max_frame", (n_frames - 1).to_string());
            values.insert("n_frames", n_frames.to_string());
        }
    }
    let t = task.template();
    Ok(TaskPrompt {
        task,
        template_id: t.id.to_string(),
        filled_text: t.fill(&values)?,
    })
}

/// Optional suffixes appended to prompts for models that tend to refuse or
/// hallucinate outside the frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptAddendum {
    NoExternalKnowledge,
    NoRefusal,
}

impl PromptAddendum {
    pub fn text(self) -> &'static str {
        match self {
            PromptAddendum::NoExternalKnowledge => template::ADDENDUM_NO_EXTERNAL_KNOWLEDGE.body(),
            PromptAddendum::NoRefusal => template::ADDENDUM_NO_REFUSAL.body(),
        }
    }
}

pub fn with_addenda(prompt: &TaskPrompt, addenda: &[PromptAddendum]) -> TaskPrompt {
    let mut out = prompt.clone();
    for a in addenda {
        out.filled_text.push('\n');
        out.filled_text.push_str(a.text());
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseFailure {
    pub reason: String,
}

impl ParseFailure {
    fn new(reason: impl Into<String>) -> Self {
        Self { reason: reason.into() }
    }
}

impl fmt::Display for ParseFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "parse failure: {}", self.reason)
    }
}

impl std::error::Error for ParseFailure {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptionParseMode {
    /// First standalone capital letter anywhere in the response.
    #[default]
    Lenient,
    /// The response must open with the letter, optionally parenthesised.
    Strict,
}

/// Extracts the chosen option as a 0-based index.
pub fn parse_option(raw: &str, n_options: usize) -> std::result::Result<usize, ParseFailure> {
    parse_option_with(raw, n_options, OptionParseMode::Lenient)
}

pub fn parse_option_with(
    raw: &str,
    n_options: usize,
    mode: OptionParseMode,
) -> std::result::Result<usize, ParseFailure> {
    let in_range = |c: char| c.is_ascii_uppercase() && ((c as u8 - b'A') as usize) < n_options;
    match mode {
        OptionParseMode::Strict => {
            let s = raw.trim_start();
            let s = s.strip_prefix('(').unwrap_or(s);
            let mut it = s.chars();
            match (it.next(), it.next()) {
                (Some(c), next) if in_range(c) && next.is_none_or(|n| !n.is_alphanumeric()) => {
                    Ok((c as u8 - b'A') as usize)
                }
                _ => Err(ParseFailure::new("response does not open with an option letter")),
            }
        }
        OptionParseMode::Lenient => {
            let chars: Vec<char> = raw.chars().collect();
            for (i, &c) in chars.iter().enumerate() {
                if !in_range(c) {
                    continue;
                }
                let prev_ok = i == 0 || !chars[i - 1].is_alphanumeric();
                let next_ok = chars.get(i + 1).is_none_or(|n| !n.is_alphanumeric());
                if prev_ok && next_ok {
                    return Ok((c as u8 - b'A') as usize);
                }
            }
            Err(ParseFailure::new(format!(
                "no option letter A-{} found",
                option_letter(n_options.saturating_sub(1).min(25))
            )))
        }
    }
}

fn bracket_pair_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"[\(\[]\s*(\d+(?:\.\d+)?)\s*,\s*(\d+(?:\.\d+)?)\s*[\)\]]").unwrap())
}

fn number_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\d+(?:\.\d+)?").unwrap())
}

fn frame_value(s: &str, max_frame: f64) -> f64 {
    let v: f64 = s.parse().unwrap_or(f64::INFINITY);
    v.round().clamp(0.0, max_frame)
}

fn ordered(a: f64, b: f64) -> (f64, f64) {
    if a > b {
        (b, a)
    } else {
        (a, b)
    }
}

/// Extracts a frame interval. Prefers the first `(a, b)` or `[a, b]` pair,
/// falling back to the first two numbers in the text. Values are rounded,
/// clamped to `[0, max_frame]`, and swapped if reversed.
pub fn parse_interval_answer(raw: &str, max_frame: u32) -> std::result::Result<Interval, ParseFailure> {
    let max = max_frame as f64;
    let (a, b) = if let Some(c) = bracket_pair_re().captures(raw) {
        (frame_value(&c[1], max), frame_value(&c[2], max))
    } else {
        let mut nums = number_re().find_iter(raw);
        match (nums.next(), nums.next()) {
            (Some(a), Some(b)) => (frame_value(a.as_str(), max), frame_value(b.as_str(), max)),
            _ => return Err(ParseFailure::new("fewer than two frame numbers in response")),
        }
    };
    let (start, end) = ordered(a, b);
    Ok(Interval::frames(start, end))
}

fn dense_line_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?i)^\s*(?:frames?\s*)?[\(\[]\s*(\d+(?:\.\d+)?)\s*,\s*(\d+(?:\.\d+)?)\s*[\)\]]\s*:\s*(.*?)\s*$")
            .unwrap()
    })
}

pub fn is_out_of_frame(text: &str) -> bool {
    text.to_lowercase().contains("out of frame")
}

/// One `(start, end, text)` entry before normalisation.
#[derive(Debug, Clone, PartialEq)]
pub struct RawEvent {
    pub start: f64,
    pub end: f64,
    pub text: String,
}

/// Sorts events, truncates each overlapped event at the start of the next,
/// and fills gaps in `[0, max_frame]` with out-of-frame events.
pub fn normalize_track(track_id: &str, mut events: Vec<RawEvent>, max_frame: f64) -> DenseCaptionTrack {
    for e in &mut events {
        e.start = e.start.clamp(0.0, max_frame);
        e.end = e.end.clamp(0.0, max_frame);
        (e.start, e.end) = ordered(e.start, e.end);
    }
    events.sort_by(|a, b| a.start.total_cmp(&b.start).then(a.end.total_cmp(&b.end)));

    let mut kept: Vec<RawEvent> = Vec::with_capacity(events.len());
    for e in events {
        while let Some(last) = kept.last_mut() {
            if last.end <= e.start {
                break;
            }
            let was_point = last.start == last.end;
            last.end = e.start;
            if last.start == last.end && !was_point {
                kept.pop();
            } else {
                break;
            }
        }
        kept.push(e);
    }

    let mut out: Vec<CaptionEvent> = Vec::with_capacity(kept.len() + 2);
    let gap = |a: f64, b: f64| CaptionEvent {
        interval: Interval::frames(a, b),
        text: OUT_OF_FRAME.to_string(),
        out_of_frame: true,
    };
    let mut cursor = 0.0;
    for e in kept {
        if e.start > cursor {
            out.push(gap(cursor, e.start));
        }
        cursor = e.end;
        out.push(CaptionEvent {
            interval: Interval::frames(e.start, e.end),
            out_of_frame: is_out_of_frame(&e.text),
            text: e.text,
        });
    }
    if cursor < max_frame || out.is_empty() {
        out.push(gap(cursor, max_frame));
    }
    DenseCaptionTrack {
        track_id: track_id.to_string(),
        events: out,
        horizon: Interval::frames(0.0, max_frame),
    }
}

/// Parses `[a, b]: text` lines (optionally prefixed by `Frame`) into a
/// track covering `[0, max_frame]`.
pub fn parse_dense_captions(raw: &str, max_frame: u32) -> std::result::Result<DenseCaptionTrack, ParseFailure> {
    let max = max_frame as f64;
    let events: Vec<RawEvent> = raw
        .lines()
        .filter_map(|line| dense_line_re().captures(line))
        .map(|c| RawEvent {
            start: frame_value(&c[1], max),
            end: frame_value(&c[2], max),
            text: c[3].to_string(),
        })
        .collect();
    if events.is_empty() {
        return Err(ParseFailure::new("no `[start, end]: description` lines found"));
    }
    Ok(normalize_track("pred", events, max))
}

pub fn emit_option(index: usize) -> String {
    format!("({})", option_letter(index))
}

pub fn emit_interval(iv: &Interval) -> String {
    format!("({}, {})", iv.start, iv.end)
}

pub fn emit_dense_captions(track: &DenseCaptionTrack) -> String {
    track
        .events
        .iter()
        .map(|e| {
            let text = e.text.replace(['\n', '\r'], " ");
            format!("[{}, {}]: {}", e.interval.start, e.interval.end, text.trim())
        })
        .collect::<Vec<_>>()
        .join("\n")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn option_examples() {
        assert_eq!(parse_option("(A)", 4), Ok(0));
        assert_eq!(parse_option("Answer: (B) 1.0.", 4), Ok(1));
        assert_eq!(parse_option("The best option is C because...", 4), Ok(2));
        assert!(parse_option("I cannot tell", 4).is_err());
        assert!(parse_option("(E)", 4).is_err());
        assert_eq!(parse_option("E or B", 4), Ok(1));
    }

    #[test]
    fn strict_option_mode() {
        assert_eq!(parse_option_with(" (B) sure", 4, OptionParseMode::Strict), Ok(1));
        assert_eq!(parse_option_with("C.", 4, OptionParseMode::Strict), Ok(2));
        assert!(parse_option_with("The answer is C", 4, OptionParseMode::Strict).is_err());
    }

    #[test]
    fn interval_examples() {
        assert_eq!(
            parse_interval_answer("[23, 26]", 31).unwrap(),
            Interval::frames(23.0, 26.0)
        );
        assert_eq!(
            parse_interval_answer("(0, 31)", 31).unwrap(),
            Interval::frames(0.0, 31.0)
        );
        assert_eq!(
            parse_interval_answer("from frame 30 to 5", 31).unwrap(),
            Interval::frames(5.0, 30.0)
        );
        assert_eq!(
            parse_interval_answer("(12, 99)", 31).unwrap(),
            Interval::frames(12.0, 31.0)
        );
        assert!(parse_interval_answer("frame 4", 31).is_err());
        assert_eq!(
            parse_interval_answer("at 3 s it starts, answer [10, 12]", 31).unwrap(),
            Interval::frames(10.0, 12.0)
        );
    }

    #[test]
    fn dense_example_from_answer_format() {
        let t = parse_dense_captions("Frame [0, 6]: Out of frame\nFrame [6, 15]: A woman is walking", 31).unwrap();
        assert_eq!(t.events.len(), 3);
        assert!(t.events[0].out_of_frame);
        assert_eq!(t.events[1].text, "A woman is walking");
        assert!(!t.events[1].out_of_frame);
        assert_eq!(t.events[2].interval, Interval::frames(15.0, 31.0));
        assert!(t.events[2].out_of_frame);
        t.validate().unwrap();
    }

    #[test]
    fn dense_single_event_and_overlap() {
        let t = parse_dense_captions("[0, 31]: one event", 31).unwrap();
        assert_eq!(t.events.len(), 1);
        let t = parse_dense_captions("[0,10]: a\n[5,20]: b", 31).unwrap();
        assert_eq!(t.events[0].interval, Interval::frames(0.0, 5.0));
        assert_eq!(t.events[1].interval, Interval::frames(5.0, 20.0));
        assert!(t.events[2].out_of_frame);
        assert!(parse_dense_captions("nothing here", 31).is_err());
    }

    #[test]
    fn fgqa_prompt_shape() {
        let p = format_prompt(
            Task::Fgqa,
            &PromptFields {
                question: Some("What is held?".into()),
                options: Some(vec!["a cup".into(), "a pen".into()]),
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(
            p.filled_text,
            "Question: What is held?\nOptions:\n(A) a cup\n(B) a pen\nOnly give the best option."
        );
        let err = format_prompt(Task::Fgqa, &PromptFields::default())
            .unwrap_err()
            .to_string();
        assert!(err.contains("[question]"), "{err}");
        let err = format_prompt(
            Task::Fgqa,
            &PromptFields {
                question: Some("q".into()),
                ..Default::default()
            },
        )
        .unwrap_err()
        .to_string();
        assert!(err.contains("[options]"), "{err}");
    }

    #[test]
    fn rtloc_prompt_bounds_sentence() {
        let p = format_prompt(
            Task::Rtloc,
            &PromptFields {
                event: Some("the dog jumps".into()),
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(
            p.filled_text,
            "Given the region marked by the red rectangle in the video, please provide the start and end frame of when 'the dog jumps' happens. Use the format (start, end), where start and end are frame numbers between 0 and 31 in this 32 frame video."
        );
    }

    #[test]
    fn rcap_and_rdcap_prompts() {
        let p = format_prompt(
            Task::Rcap,
            &PromptFields {
                start_frame: Some(6),
                end_frame: Some(15),
                color: Some("blue".into()),
                ..Default::default()
            },
        )
        .unwrap();
        assert!(p
            .filled_text
            .contains("blue rectangle within frames (6, 15) in this 32 frame video"));
        let p = format_prompt(Task::Rdcap, &PromptFields::default()).unwrap();
        assert!(p.filled_text.contains("[start, end]: [description]"));
        assert!(p.filled_text.ends_with("between 0 and 31 in this 32 frame video."));
        assert!(format_prompt(Task::Rcap, &PromptFields::default()).is_err());
    }

    #[test]
    fn addenda_append() {
        let p = format_prompt(
            Task::Sgqa,
            &PromptFields {
                question: Some("where?".into()),
                ..Default::default()
            },
        )
        .unwrap();
        let q = with_addenda(&p, &[PromptAddendum::NoRefusal]);
        assert!(q.filled_text.starts_with(&p.filled_text));
        assert!(q.filled_text.ends_with("not possible to determine"));
    }

    proptest::proptest! {
        #[test]
        fn parsers_total(bytes in proptest::collection::vec(proptest::num::u8::ANY, 0..64)) {
            let s = String::from_utf8_lossy(&bytes);
            let _ = parse_option(&s, 4);
            if let Ok(iv) = parse_interval_answer(&s, 31) {
                proptest::prop_assert!(0.0 <= iv.start && iv.start <= iv.end && iv.end <= 31.0);
            }
            if let Ok(t) = parse_dense_captions(&s, 31) {
                proptest::prop_assert!(t.validate().is_ok());
            }
        }
    }
}
