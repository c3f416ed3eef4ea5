//! End-to-end benchmark runs: prompts, predictions, parsing, scoring and
//! the `report.json` summary.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io::{read_jsonl, Prediction, RcapRecord, RdcapRecord, RtlocRecord, SgqaRecord};
use crate::judge::{map_bounded, ChatClient, EndpointConfig, Judge, JudgeVerdict, ResponseCache, Verdict};
use crate::mcqbuild::{expand_binary, probe_id, BinaryProbe, MCQItem};
use crate::metrics::{self, BinaryProbeResult, DenseCaptionTrack, Interval};
use crate::protocol::{
    self, emit_dense_captions, emit_interval, emit_option, format_prompt, normalize_track, parse_dense_captions,
    parse_interval_answer, parse_option_with, OptionParseMode, PromptAddendum, PromptFields, RawEvent, Task,
    DEFAULT_FRAMES,
};

pub const DEFAULT_THRESHOLDS: [f64; 4] = [0.3, 0.5, 0.7, 0.9];

fn default_frames() -> usize {
    DEFAULT_FRAMES
}

fn default_thresholds() -> Vec<f64> {
    DEFAULT_THRESHOLDS.to_vec()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JudgeMode {
    /// Token-F1 stand-in that needs no endpoint.
    #[default]
    Lexical,
    Endpoint,
}

/// One benchmark to score: ground truth plus, optionally, a static
/// predictions file. Without one, predictions come from the model endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskInput {
    pub task: Task,
    pub ground_truth: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predictions: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub tasks: Vec<TaskInput>,
    /// Seed for probe side assignment.
    pub seed: u64,
    #[serde(default = "default_frames")]
    pub n_frames: usize,
    #[serde(default = "default_thresholds")]
    pub iou_thresholds: Vec<f64>,
    #[serde(default)]
    pub judge: JudgeMode,
    #[serde(default)]
    pub option_parse_mode: OptionParseMode,
    #[serde(default)]
    pub addenda: Vec<PromptAddendum>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_endpoint: Option<EndpointConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub judge_endpoint: Option<EndpointConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_path: Option<PathBuf>,
}

impl RunConfig {
    pub fn new(seed: u64) -> Self {
        RunConfig {
            tasks: Vec::new(),
            seed,
            n_frames: DEFAULT_FRAMES,
            iou_thresholds: default_thresholds(),
            judge: JudgeMode::Lexical,
            option_parse_mode: OptionParseMode::Lenient,
            addenda: Vec::new(),
            model_endpoint: None,
            judge_endpoint: None,
            cache_path: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(Error::Config("no tasks selected".into()));
        }
        if self.n_frames == 0 {
            return Err(Error::Config("n_frames must be at least 1".into()));
        }
        if self.iou_thresholds.is_empty() || self.iou_thresholds.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::Config(
                "iou_thresholds must be non-empty values in [0, 1]".into(),
            ));
        }
        let mut seen = BTreeSet::new();
        for t in &self.tasks {
            if !seen.insert(t.task) {
                return Err(Error::Config(format!("task {} selected twice", t.task)));
            }
            if !t.ground_truth.is_file() {
                return Err(Error::Config(format!(
                    "{}: ground truth {} does not exist",
                    t.task,
                    t.ground_truth.display()
                )));
            }
            match &t.predictions {
                Some(p) if !p.is_file() => {
                    return Err(Error::Config(format!(
                        "{}: predictions {} do not exist",
                        t.task,
                        p.display()
                    )))
                }
                None if self.model_endpoint.is_none() => {
                    return Err(Error::Config(format!(
                        "{}: needs a predictions file or a model endpoint",
                        t.task
                    )))
                }
                _ => {}
            }
        }
        if self.judge == JudgeMode::Endpoint && self.judge_endpoint.is_none() {
            return Err(Error::Config("judge = \"endpoint\" needs a judge endpoint".into()));
        }
        for e in self.model_endpoint.iter().chain(&self.judge_endpoint) {
            e.validate()?;
        }
        Ok(())
    }

    /// sha256 over the canonical JSON form of the config.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }
}

/// Live handles a run needs; tests build these around scripted transports.
#[derive(Clone)]
pub struct EvalContext {
    pub model: Option<Arc<ChatClient>>,
    pub judge: Judge,
}

impl EvalContext {
    /// HTTP clients from the config, sharing one response cache file.
    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        let open_cache = || match &cfg.cache_path {
            Some(p) => ResponseCache::open(p),
            None => Ok(ResponseCache::in_memory()),
        };
        let model = match &cfg.model_endpoint {
            Some(e) => Some(Arc::new(ChatClient::http(e.clone(), open_cache()?)?)),
            None => None,
        };
        let judge = match (cfg.judge, &cfg.judge_endpoint) {
            (JudgeMode::Endpoint, Some(e)) => Judge::Endpoint(Arc::new(ChatClient::http(e.clone(), open_cache()?)?)),
            (JudgeMode::Endpoint, None) => return Err(Error::Config("judge endpoint missing".into())),
            (JudgeMode::Lexical, _) => Judge::Lexical,
        };
        Ok(EvalContext { model, judge })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemRecord {
    pub id: String,
    pub parsed: Value,
    /// Item score on the 0-100 scale.
    pub score: f64,
    pub parse_failure: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iou: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub judge_score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl ItemRecord {
    fn new(id: &str) -> Self {
        ItemRecord {
            id: id.to_string(),
            parsed: Value::Null,
            score: 0.0,
            parse_failure: false,
            iou: None,
            judge_score: None,
            error: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub task: Task,
    pub template_id: String,
    pub n_items: usize,
    pub parse_failures: usize,
    pub transport_failures: usize,
    pub metrics: BTreeMap<String, f64>,
    pub items: Vec<ItemRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub config_hash: String,
    pub template_ids: Vec<String>,
    pub judge: String,
    pub model: String,
    pub seed: u64,
    pub n_frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub meta: ReportMeta,
    pub tasks: Vec<TaskReport>,
}

impl EvalReport {
    pub fn transport_failures(&self) -> usize {
        self.tasks.iter().map(|t| t.transport_failures).sum()
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

/// Source of raw model text for one prompt id.
enum Source<'a> {
    File(BTreeMap<String, String>),
    Model(&'a ChatClient),
}

fn load_predictions(path: &Path) -> Result<BTreeMap<String, String>> {
    let preds: Vec<Prediction> = read_jsonl(path)?;
    let mut map = BTreeMap::new();
    for p in preds {
        if map.contains_key(&p.id) {
            return Err(Error::invalid(format!(
                "{}: duplicate prediction id {:?}",
                path.display(),
                p.id
            )));
        }
        map.insert(p.id, p.raw_text);
    }
    Ok(map)
}

/// One model query: prediction id, video reference and prompt text.
struct Job {
    id: String,
    video: Option<String>,
    prompt: String,
}

impl Job {
    fn new(id: &str, video: Option<&str>, prompt: String) -> Self {
        Job {
            id: id.to_string(),
            video: video.map(str::to_string),
            prompt,
        }
    }
}

/// Raw text per job, `Err` when the prediction is missing or the endpoint
/// gave up. Endpoint calls run concurrently in job order.
fn fetch(
    source: &Source<'_>,
    task: Task,
    jobs: &[Job],
    addenda: &[PromptAddendum],
) -> Vec<std::result::Result<String, String>> {
    match source {
        Source::File(map) => jobs
            .iter()
            .map(|j| {
                map.get(&j.id)
                    .cloned()
                    .ok_or_else(|| format!("no prediction for id {:?}", j.id))
            })
            .collect(),
        Source::Model(client) => {
            let template_id = task.template().id;
            client.map_bounded(jobs, |job| {
                let mut text = job.prompt.clone();
                for a in addenda {
                    text.push('\n');
                    text.push_str(a.text());
                }
                client
                    .complete_with_video(template_id, job.video.as_deref(), &text)
                    .map_err(|e| e.to_string())
            })
        }
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn missing_prediction(err: &str) -> bool {
    err.starts_with("no prediction")
}

struct Ctx<'a> {
    cfg: &'a RunConfig,
    source: Source<'a>,
    judge: &'a Judge,
}

fn run_fgqa(ctx: &Ctx<'_>, gt: &Path) -> Result<TaskReport> {
    let items: Vec<MCQItem> = read_jsonl(gt)?;
    if items.is_empty() {
        return Err(Error::EmptyBenchmark("fgqa ground truth"));
    }
    let probes: Vec<Vec<BinaryProbe>> = items
        .iter()
        .map(|i| expand_binary(i, ctx.cfg.seed))
        .collect::<Result<_>>()?;
    let jobs: Vec<Job> = items
        .iter()
        .zip(&probes)
        .flat_map(|(item, ps)| {
            ps.iter().map(move |p| {
                let fields = PromptFields {
                    question: Some(item.question.clone()),
                    options: Some(p.options()),
                    ..Default::default()
                };
                format_prompt(Task::Fgqa, &fields)
                    .map(|tp| Job::new(&p.probe_id(), Some(&item.video_ref), tp.filled_text))
            })
        })
        .collect::<Result<_>>()?;
    let raws = fetch(&ctx.source, Task::Fgqa, &jobs, &ctx.cfg.addenda);

    let mut raw_iter = raws.into_iter();
    let mut results = Vec::new();
    let mut records = Vec::new();
    let (mut parse_failures, mut transport_failures) = (0, 0);
    for (item, ps) in items.iter().zip(&probes) {
        let mut rec = ItemRecord::new(&item.qa_id);
        let mut parsed = Vec::new();
        let mut all = true;
        for p in ps {
            let raw = raw_iter.next().expect("one response per probe");
            let choice = match raw {
                Ok(text) => parse_option_with(&text, 2, ctx.cfg.option_parse_mode).ok(),
                Err(e) => {
                    if !missing_prediction(&e) {
                        transport_failures += 1;
                    }
                    rec.error.get_or_insert(e);
                    None
                }
            };
            rec.parse_failure |= choice.is_none();
            let correct = choice == Some(p.correct_index());
            all &= correct;
            parsed.push(choice.map_or(Value::Null, |c| json!(protocol::option_letter(c).to_string())));
            results.push(BinaryProbeResult {
                qa_id: item.qa_id.clone(),
                probe_index: p.probe_index,
                correct,
            });
        }
        parse_failures += usize::from(rec.parse_failure);
        rec.parsed = Value::Array(parsed);
        rec.score = if all { 100.0 } else { 0.0 };
        records.push(rec);
    }
    let mut m = BTreeMap::new();
    m.insert("mbacc".to_string(), metrics::mbacc(&results));
    Ok(TaskReport {
        task: Task::Fgqa,
        template_id: Task::Fgqa.template().id.into(),
        n_items: records.len(),
        parse_failures,
        transport_failures,
        metrics: m,
        items: records,
    })
}

fn run_sgqa(ctx: &Ctx<'_>, gt: &Path) -> Result<TaskReport> {
    let items: Vec<SgqaRecord> = read_jsonl(gt)?;
    if items.is_empty() {
        return Err(Error::EmptyBenchmark("sgqa ground truth"));
    }
    let jobs: Vec<Job> = items
        .iter()
        .map(|r| {
            let fields = PromptFields {
                question: Some(r.question.clone()),
                ..Default::default()
            };
            format_prompt(Task::Sgqa, &fields).map(|tp| Job::new(&r.id, r.video_ref.as_deref(), tp.filled_text))
        })
        .collect::<Result<_>>()?;
    let raws = fetch(&ctx.source, Task::Sgqa, &jobs, &ctx.cfg.addenda);
    let judged: Vec<std::result::Result<JudgeVerdict, String>> = map_bounded(
        judge_workers(ctx.judge),
        &items.iter().zip(&raws).collect::<Vec<_>>(),
        |(r, raw)| {
            let answer = raw.as_ref().map_err(Clone::clone)?;
            ctx.judge
                .judge_qa(&r.question, &r.answer, answer.trim())
                .map_err(|e| e.to_string())
        },
    );

    let mut verdicts = Vec::new();
    let mut records = Vec::new();
    let (mut parse_failures, mut transport_failures) = (0, 0);
    for ((r, raw), j) in items.iter().zip(&raws).zip(judged) {
        let mut rec = ItemRecord::new(&r.id);
        let v = match j {
            Ok(v) => v,
            Err(e) => {
                if raw.is_ok() || !missing_prediction(&e) {
                    transport_failures += 1;
                }
                rec.error = Some(e.clone());
                JudgeVerdict {
                    pred: Verdict::No,
                    score: 0.0,
                    raw: String::new(),
                    parse_failure: true,
                }
            }
        };
        rec.parse_failure = v.parse_failure;
        parse_failures += usize::from(v.parse_failure);
        rec.parsed = json!({ "pred": v.pred, "score": v.score });
        rec.judge_score = Some(v.score);
        rec.score = if v.pred == Verdict::Yes { 100.0 } else { 0.0 };
        verdicts.push(v);
        records.push(rec);
    }
    let summary = metrics::judge_accuracy(&verdicts)?;
    let mut m = BTreeMap::new();
    m.insert("accuracy".to_string(), summary.accuracy);
    m.insert("mean_score".to_string(), summary.mean_score);
    Ok(TaskReport {
        task: Task::Sgqa,
        template_id: Task::Sgqa.template().id.into(),
        n_items: records.len(),
        parse_failures,
        transport_failures,
        metrics: m,
        items: records,
    })
}

fn judge_workers(judge: &Judge) -> usize {
    match judge {
        Judge::Lexical => 1,
        Judge::Endpoint(c) => c.config().max_in_flight,
    }
}

fn region_fields(ctx: &Ctx<'_>) -> PromptFields {
    PromptFields {
        n_frames: Some(ctx.cfg.n_frames),
        ..Default::default()
    }
}

fn run_rcap(ctx: &Ctx<'_>, gt: &Path) -> Result<TaskReport> {
    let items: Vec<RcapRecord> = read_jsonl(gt)?;
    if items.is_empty() {
        return Err(Error::EmptyBenchmark("rcap ground truth"));
    }
    let jobs: Vec<Job> = items
        .iter()
        .map(|r| {
            let fields = PromptFields {
                start_frame: Some(r.start_frame),
                end_frame: Some(r.end_frame),
                ..region_fields(ctx)
            };
            format_prompt(Task::Rcap, &fields).map(|tp| Job::new(&r.id, Some(&r.video_ref), tp.filled_text))
        })
        .collect::<Result<_>>()?;
    let raws = fetch(&ctx.source, Task::Rcap, &jobs, &ctx.cfg.addenda);
    let judged = map_bounded(
        judge_workers(ctx.judge),
        &items.iter().zip(&raws).collect::<Vec<_>>(),
        |(r, raw)| {
            let caption = raw.as_ref().map_err(Clone::clone)?;
            ctx.judge
                .judge_caption_pair(&r.caption, caption.trim())
                .map_err(|e| e.to_string())
        },
    );

    let mut scores = Vec::new();
    let mut records = Vec::new();
    let (mut parse_failures, mut transport_failures) = (0, 0);
    for ((r, raw), j) in items.iter().zip(&raws).zip(judged) {
        let mut rec = ItemRecord::new(&r.id);
        let (score, failed) = match j {
            Ok(c) => (c.score, c.parse_failure),
            Err(e) => {
                if raw.is_ok() || !missing_prediction(&e) {
                    transport_failures += 1;
                }
                rec.error = Some(e);
                (0.0, true)
            }
        };
        rec.parse_failure = failed;
        parse_failures += usize::from(failed);
        rec.parsed = raw.as_ref().map_or(Value::Null, |t| json!(t.trim()));
        rec.judge_score = Some(score);
        rec.score = score * 10.0;
        scores.push(score);
        records.push(rec);
    }
    let mut m = BTreeMap::new();
    m.insert("score".to_string(), metrics::caption_score(&scores)?);
    Ok(TaskReport {
        task: Task::Rcap,
        template_id: Task::Rcap.template().id.into(),
        n_items: records.len(),
        parse_failures,
        transport_failures,
        metrics: m,
        items: records,
    })
}

fn max_frame(cfg: &RunConfig) -> u32 {
    (cfg.n_frames - 1) as u32
}

fn threshold_key(t: f64) -> String {
    format!("recall@{t}")
}

fn run_rtloc(ctx: &Ctx<'_>, gt: &Path) -> Result<TaskReport> {
    let items: Vec<RtlocRecord> = read_jsonl(gt)?;
    if items.is_empty() {
        return Err(Error::EmptyBenchmark("rtloc ground truth"));
    }
    let jobs: Vec<Job> = items
        .iter()
        .map(|r| {
            let fields = PromptFields {
                event: Some(r.event.clone()),
                ..region_fields(ctx)
            };
            format_prompt(Task::Rtloc, &fields).map(|tp| Job::new(&r.id, Some(&r.video_ref), tp.filled_text))
        })
        .collect::<Result<_>>()?;
    let raws = fetch(&ctx.source, Task::Rtloc, &jobs, &ctx.cfg.addenda);

    let mut preds = Vec::new();
    let mut gts = Vec::new();
    let mut records = Vec::new();
    let (mut parse_failures, mut transport_failures) = (0, 0);
    for (r, raw) in items.iter().zip(raws) {
        let mut rec = ItemRecord::new(&r.id);
        let gt_iv = Interval::frames(r.start_frame as f64, r.end_frame as f64);
        let pred = match raw {
            Ok(text) => parse_interval_answer(&text, max_frame(ctx.cfg)).ok(),
            Err(e) => {
                if !missing_prediction(&e) {
                    transport_failures += 1;
                }
                rec.error = Some(e);
                None
            }
        };
        let iou = match &pred {
            Some(p) => metrics::interval_iou(p, &gt_iv)?,
            None => 0.0,
        };
        rec.parse_failure = pred.is_none();
        parse_failures += usize::from(pred.is_none());
        rec.parsed = pred.as_ref().map_or(Value::Null, |p| json!([p.start, p.end]));
        rec.iou = Some(iou);
        rec.score = 100.0 * iou;
        preds.push(pred);
        gts.push(gt_iv);
        records.push(rec);
    }
    let th = &ctx.cfg.iou_thresholds;
    let mut m = BTreeMap::new();
    m.insert("mean_recall".to_string(), metrics::mean_recall_at_1(&preds, &gts, th)?);
    m.insert("miou".to_string(), metrics::mean_iou(&preds, &gts)?);
    let ious: Vec<f64> = records.iter().map(|r| r.iou.unwrap_or(0.0)).collect();
    for (t, r) in th.iter().zip(metrics::recall_at_1(&ious, th)) {
        m.insert(threshold_key(*t), 100.0 * r);
    }
    Ok(TaskReport {
        task: Task::Rtloc,
        template_id: Task::Rtloc.template().id.into(),
        n_items: records.len(),
        parse_failures,
        transport_failures,
        metrics: m,
        items: records,
    })
}

pub fn gt_track(r: &RdcapRecord, max_frame: u32) -> DenseCaptionTrack {
    let events = r
        .events
        .iter()
        .map(|e| RawEvent {
            start: e.start,
            end: e.end,
            text: e.text.clone(),
        })
        .collect();
    normalize_track(&r.id, events, max_frame as f64)
}

fn run_rdcap(ctx: &Ctx<'_>, gt: &Path) -> Result<TaskReport> {
    let items: Vec<RdcapRecord> = read_jsonl(gt)?;
    if items.is_empty() {
        return Err(Error::EmptyBenchmark("rdcap ground truth"));
    }
    for r in &items {
        r.validate().map_err(|e| Error::invalid(format!("{}: {e}", r.id)))?;
    }
    let jobs: Vec<Job> = items
        .iter()
        .map(|r| {
            format_prompt(Task::Rdcap, &region_fields(ctx))
                .map(|tp| Job::new(&r.id, Some(&r.video_ref), tp.filled_text))
        })
        .collect::<Result<_>>()?;
    let raws = fetch(&ctx.source, Task::Rdcap, &jobs, &ctx.cfg.addenda);
    let mf = max_frame(ctx.cfg);

    let mut records = Vec::new();
    let (mut parse_failures, mut transport_failures) = (0, 0);
    for (r, raw) in items.iter().zip(raws) {
        let mut rec = ItemRecord::new(&r.id);
        let gt = gt_track(r, mf);
        let pred = match raw {
            Ok(text) => parse_dense_captions(&text, mf).ok(),
            Err(e) => {
                if !missing_prediction(&e) {
                    transport_failures += 1;
                }
                rec.error = Some(e);
                None
            }
        };
        let f1 = match &pred {
            Some(p) => {
                let pt: Vec<String> = p.visible_events().map(|e| e.text.clone()).collect();
                let gtx: Vec<String> = gt.visible_events().map(|e| e.text.clone()).collect();
                match ctx.judge.pairwise_similarity(&pt, &gtx) {
                    Ok(sim) => metrics::soda_f1(p, &gt, &sim)?,
                    Err(e) => {
                        transport_failures += 1;
                        rec.error = Some(e.to_string());
                        0.0
                    }
                }
            }
            None => 0.0,
        };
        rec.parse_failure = pred.is_none();
        parse_failures += usize::from(pred.is_none());
        rec.parsed = pred.as_ref().map_or(Value::Null, |p| json!(emit_dense_captions(p)));
        rec.score = 100.0 * f1;
        records.push(rec);
    }
    let mut m = BTreeMap::new();
    m.insert(
        "soda".to_string(),
        mean(&records.iter().map(|r| r.score).collect::<Vec<_>>()),
    );
    Ok(TaskReport {
        task: Task::Rdcap,
        template_id: Task::Rdcap.template().id.into(),
        n_items: records.len(),
        parse_failures,
        transport_failures,
        metrics: m,
        items: records,
    })
}

/// Scores every selected task. Per-item failures are recorded in the
/// report; only config and ground-truth problems abort the run.
pub fn run_eval(cfg: &RunConfig, ectx: &EvalContext) -> Result<EvalReport> {
    cfg.validate()?;
    let mut tasks = Vec::new();
    let mut template_ids: BTreeSet<String> = ectx.judge.template_ids().into_iter().map(String::from).collect();
    for input in &cfg.tasks {
        let source = match &input.predictions {
            Some(p) => Source::File(load_predictions(p)?),
            None => match &ectx.model {
                Some(m) => Source::Model(m),
                None => return Err(Error::Config(format!("{}: no prediction source", input.task))),
            },
        };
        let ctx = Ctx {
            cfg,
            source,
            judge: &ectx.judge,
        };
        let report = match input.task {
            Task::Fgqa => run_fgqa(&ctx, &input.ground_truth)?,
            Task::Sgqa => run_sgqa(&ctx, &input.ground_truth)?,
            Task::Rcap => run_rcap(&ctx, &input.ground_truth)?,
            Task::Rtloc => run_rtloc(&ctx, &input.ground_truth)?,
            Task::Rdcap => run_rdcap(&ctx, &input.ground_truth)?,
        };
        template_ids.insert(report.template_id.clone());
        tasks.push(report);
    }
    tasks.sort_by_key(|t| t.task);
    Ok(EvalReport {
        meta: ReportMeta {
            config_hash: cfg.hash(),
            template_ids: template_ids.into_iter().collect(),
            judge: ectx.judge.name(),
            model: match (&ectx.model, cfg.tasks.iter().all(|t| t.predictions.is_some())) {
                (_, true) => "predictions-file".into(),
                (Some(m), false) => m.config().model_name.clone(),
                (None, false) => "none".into(),
            },
            seed: cfg.seed,
            n_frames: cfg.n_frames,
        },
        tasks,
    })
}

/// Recomputes a task's metrics from its per-item records.
pub fn reaggregate(t: &TaskReport, thresholds: &[f64]) -> BTreeMap<String, f64> {
    let scores: Vec<f64> = t.items.iter().map(|r| r.score).collect();
    let mut m = BTreeMap::new();
    match t.task {
        Task::Fgqa => {
            m.insert("mbacc".into(), mean(&scores));
        }
        Task::Sgqa => {
            m.insert("accuracy".into(), mean(&scores));
            let js: Vec<f64> = t.items.iter().map(|r| r.judge_score.unwrap_or(0.0)).collect();
            m.insert("mean_score".into(), mean(&js));
        }
        Task::Rcap => {
            m.insert("score".into(), mean(&scores));
        }
        Task::Rtloc => {
            let ious: Vec<f64> = t.items.iter().map(|r| r.iou.unwrap_or(0.0)).collect();
            m.insert("mean_recall".into(), metrics::mean_recall_from_ious(&ious, thresholds));
            m.insert("miou".into(), mean(&scores));
            for (th, r) in thresholds.iter().zip(metrics::recall_at_1(&ious, thresholds)) {
                m.insert(threshold_key(*th), 100.0 * r);
            }
        }
        Task::Rdcap => {
            m.insert("soda".into(), mean(&scores));
        }
    }
    m
}

pub fn render_table(report: &EvalReport) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<8} {:<14} {:>9} {:>7} {:>9}",
        "task", "metric", "value", "items", "failures"
    );
    for t in &report.tasks {
        for (k, v) in &t.metrics {
            let _ = writeln!(
                s,
                "{:<8} {:<14} {:>9.2} {:>7} {:>9}",
                t.task.name(),
                k,
                v,
                t.n_items,
                t.parse_failures
            );
        }
    }
    s
}

/// Canonical answers that reproduce the ground truth exactly.
pub fn oracle_predictions(task: Task, gt: &Path, seed: u64, n_frames: usize) -> Result<Vec<Prediction>> {
    let mf = n_frames.saturating_sub(1) as u32;
    let pred = |id: String, raw_text: String| Prediction { id, raw_text };
    Ok(match task {
        Task::Fgqa => {
            let items: Vec<MCQItem> = read_jsonl(gt)?;
            let mut out = Vec::new();
            for item in &items {
                for p in expand_binary(item, seed)? {
                    out.push(pred(probe_id(&p.qa_id, p.probe_index), emit_option(p.correct_index())));
                }
            }
            out
        }
        Task::Sgqa => read_jsonl::<SgqaRecord>(gt)?
            .into_iter()
            .map(|r| pred(r.id, r.answer))
            .collect(),
        Task::Rcap => read_jsonl::<RcapRecord>(gt)?
            .into_iter()
            .map(|r| pred(r.id, r.caption))
            .collect(),
        Task::Rtloc => read_jsonl::<RtlocRecord>(gt)?
            .into_iter()
            .map(|r| {
                let iv = Interval::frames(r.start_frame as f64, r.end_frame as f64);
                pred(r.id, emit_interval(&iv))
            })
            .collect(),
        Task::Rdcap => read_jsonl::<RdcapRecord>(gt)?
            .into_iter()
            .map(|r| {
                let text = emit_dense_captions(&gt_track(&r, mf));
                pred(r.id, text)
            })
            .collect(),
    })
}

/// Prediction ids a task expects for a ground-truth file.
pub fn expected_ids(task: Task, gt: &Path, seed: u64) -> Result<Vec<String>> {
    Ok(match task {
        Task::Fgqa => {
            let items: Vec<MCQItem> = read_jsonl(gt)?;
            let mut ids = Vec::new();
            for i in &items {
                ids.extend(expand_binary(i, seed)?.iter().map(BinaryProbe::probe_id));
            }
            ids
        }
        _ => oracle_predictions(task, gt, seed, DEFAULT_FRAMES)?
            .into_iter()
            .map(|p| p.id)
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::write_jsonl;
    use crate::io::RdcapEvent;

    fn fixture(dir: &Path) -> RunConfig {
        let fgqa: Vec<MCQItem> = (0..3)
            .map(|i| MCQItem {
                qa_id: format!("f{i}"),
                video_ref: "v".into(),
                question: format!("What happens in step {i}?"),
                options: vec!["cut".into(), "stir".into(), "pour".into(), "wash".into()],
                answer_index: i % 4,
                question_type: None,
                domain: None,
                verified: None,
            })
            .collect();
        let rtloc = vec![RtlocRecord {
            id: "t0".into(),
            video_ref: "v".into(),
            event: "picks up the cup".into(),
            start_frame: 3,
            end_frame: 9,
        }];
        let rdcap = vec![RdcapRecord {
            id: "d0".into(),
            video_ref: "v".into(),
            events: vec![
                RdcapEvent {
                    start: 0.0,
                    end: 6.0,
                    text: "Out of frame.".into(),
                },
                RdcapEvent {
                    start: 6.0,
                    end: 20.0,
                    text: "The man opens the fridge.".into(),
                },
            ],
        }];
        let sgqa = vec![SgqaRecord {
            id: "s0".into(),
            video_ref: None,
            question: "Where did I leave my keys?".into(),
            answer: "On the kitchen table".into(),
        }];
        let rcap = vec![RcapRecord {
            id: "c0".into(),
            video_ref: "v".into(),
            start_frame: 2,
            end_frame: 8,
            caption: "The dog runs across the yard".into(),
        }];
        write_jsonl(&dir.join("fgqa.jsonl"), &fgqa).unwrap();
        write_jsonl(&dir.join("rtloc.jsonl"), &rtloc).unwrap();
        write_jsonl(&dir.join("rdcap.jsonl"), &rdcap).unwrap();
        write_jsonl(&dir.join("sgqa.jsonl"), &sgqa).unwrap();
        write_jsonl(&dir.join("rcap.jsonl"), &rcap).unwrap();
        let mut cfg = RunConfig::new(7);
        for task in Task::ALL {
            let gt = dir.join(format!("{}.jsonl", task.name()));
            let preds = dir.join(format!("{}.pred.jsonl", task.name()));
            write_jsonl(&preds, &oracle_predictions(task, &gt, 7, 32).unwrap()).unwrap();
            cfg.tasks.push(TaskInput {
                task,
                ground_truth: gt,
                predictions: Some(preds),
            });
        }
        cfg
    }

    #[test]
    fn oracle_scores_perfectly() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = fixture(dir.path());
        let ctx = EvalContext {
            model: None,
            judge: Judge::Lexical,
        };
        let rep = run_eval(&cfg, &ctx).unwrap();
        for t in &rep.tasks {
            for (k, v) in &t.metrics {
                if k != "mean_score" {
                    assert_eq!(*v, 100.0, "{} {k}", t.task);
                }
            }
            assert_eq!(t.parse_failures, 0);
            assert_eq!(reaggregate(t, &cfg.iou_thresholds), t.metrics);
        }
        let again = run_eval(&cfg, &ctx).unwrap();
        assert_eq!(rep.to_json(), again.to_json());
    }

    #[test]
    fn refusals_score_zero() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = fixture(dir.path());
        for t in &mut cfg.tasks {
            let ids = expected_ids(t.task, &t.ground_truth, cfg.seed).unwrap();
            let preds: Vec<Prediction> = ids
                .into_iter()
                .map(|id| Prediction {
                    id,
                    raw_text: "I cannot tell".into(),
                })
                .collect();
            write_jsonl(t.predictions.as_ref().unwrap(), &preds).unwrap();
        }
        let ctx = EvalContext {
            model: None,
            judge: Judge::Lexical,
        };
        let rep = run_eval(&cfg, &ctx).unwrap();
        for t in &rep.tasks {
            if matches!(t.task, Task::Fgqa | Task::Rtloc | Task::Rdcap) {
                assert!(t.metrics.values().all(|v| *v == 0.0), "{}", t.task);
                assert_eq!(t.parse_failures, t.n_items);
            }
        }
    }

    #[test]
    fn missing_files_are_config_errors() {
        let mut cfg = RunConfig::new(0);
        cfg.tasks.push(TaskInput {
            task: Task::Fgqa,
            ground_truth: "/nope.jsonl".into(),
            predictions: None,
        });
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        assert!(matches!(RunConfig::new(0).validate(), Err(Error::Config(_))));
    }
}
