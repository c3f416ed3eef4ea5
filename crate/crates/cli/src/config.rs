use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Deserialize;
use vidbench::eval::{JudgeMode, RunConfig, TaskInput, DEFAULT_THRESHOLDS};
use vidbench::judge::EndpointConfig;
use vidbench::mcqbuild::DEFAULT_SLACK;
use vidbench::protocol::{OptionParseMode, PromptAddendum, DEFAULT_FRAMES};
use vidbench::segmenter::SegmenterConfig;

/// Contents of the TOML config file. Relative paths resolve against the
/// directory of the file.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub n_frames: Option<usize>,
    pub judge: Option<JudgeMode>,
    pub cache: Option<PathBuf>,
    pub option_parse_mode: Option<OptionParseMode>,
    #[serde(default)]
    pub addenda: Vec<PromptAddendum>,
    pub iou_thresholds: Option<Vec<f64>>,
    pub endpoint: Option<EndpointConfig>,
    pub judge_endpoint: Option<EndpointConfig>,
    #[serde(default)]
    pub segment: SegmenterConfig,
    #[serde(default)]
    pub rank: BTreeMap<String, f64>,
    #[serde(default)]
    pub mcq: McqSection,
    #[serde(default)]
    pub scaling: ScalingSection,
    #[serde(default)]
    pub tasks: Vec<TaskInput>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct McqSection {
    pub slack: f64,
}

impl Default for McqSection {
    fn default() -> Self {
        McqSection { slack: DEFAULT_SLACK }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScalingSection {
    pub fit_all_points: bool,
    pub baselines: BTreeMap<String, f64>,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(FileConfig::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: FileConfig =
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let Some(c) = &cfg.cache {
            cfg.cache = Some(resolve(base, c));
        }
        for t in &mut cfg.tasks {
            t.ground_truth = resolve(base, &t.ground_truth);
            if let Some(p) = &t.predictions {
                t.predictions = Some(resolve(base, p));
            }
        }
        Ok(cfg)
    }

    /// Seeds must be explicit: from the flag or the config file.
    pub fn seed(&self, flag: Option<u64>) -> Result<u64> {
        flag.or(self.seed)
            .context("a seed is required (pass --seed or set `seed` in the config)")
    }

    pub fn run_config(&self, seed: u64, tasks: Vec<TaskInput>) -> RunConfig {
        RunConfig {
            tasks,
            seed,
            n_frames: self.n_frames.unwrap_or(DEFAULT_FRAMES),
            iou_thresholds: self
                .iou_thresholds
                .clone()
                .unwrap_or_else(|| DEFAULT_THRESHOLDS.to_vec()),
            judge: self.judge.unwrap_or_default(),
            option_parse_mode: self.option_parse_mode.unwrap_or_default(),
            addenda: self.addenda.clone(),
            model_endpoint: self.endpoint.clone(),
            judge_endpoint: self.judge_endpoint.clone(),
            cache_path: self.cache.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_full_config() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vidbench.toml");
        std::fs::write(
            &path,
            r#"
seed = 3
judge = "endpoint"
cache = "judge_cache.jsonl"

[judge_endpoint]
base_url = "http://127.0.0.1:9/v1"
max_in_flight = 2

[segment]
w = 4

[rank]
asd_max = 0.3

[[tasks]]
task = "rtloc"
ground_truth = "rtloc.jsonl"
predictions = "preds.jsonl"
"#,
        )
        .unwrap();
        let cfg = FileConfig::load(Some(&path)).unwrap();
        assert_eq!(cfg.seed(None).unwrap(), 3);
        assert_eq!(cfg.segment.w, 4);
        assert_eq!(cfg.segment.theta_b, SegmenterConfig::default().theta_b);
        assert_eq!(cfg.judge_endpoint.as_ref().unwrap().max_in_flight, 2);
        assert_eq!(cfg.tasks[0].ground_truth, dir.path().join("rtloc.jsonl"));
        assert_eq!(cfg.cache, Some(dir.path().join("judge_cache.jsonl")));
    }

    #[test]
    fn unknown_keys_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.toml");
        std::fs::write(&path, "seeed = 1\n").unwrap();
        assert!(FileConfig::load(Some(&path)).is_err());
    }

    #[test]
    fn seed_is_mandatory() {
        assert!(FileConfig::default().seed(None).is_err());
        assert_eq!(FileConfig::default().seed(Some(5)).unwrap(), 5);
    }
}
