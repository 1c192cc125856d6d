//! Run directories: the files written by pre-training and read back by
//! fine-tuning, evaluation and reporting.
//!
//! | file                   | written by | content                               |
//! |------------------------|------------|---------------------------------------|
//! | `run.json`             | pretrain   | dataset location and digest, seed     |
//! | `config.toml`          | pretrain   | the training configuration            |
//! | `split.json`           | pretrain   | held-out edges and non-edges          |
//! | `history.jsonl`        | pretrain   | one loss record per step              |
//! | `checkpoint/`          | pretrain   | final parameters                      |
//! | `checkpoints/epoch-N/` | pretrain   | periodic parameters                   |
//! | `timing.json`          | all        | wall-clock seconds per command        |
//! | `finetune-<task>.json` | finetune   | probe metrics and slice ablation      |
//! | `eval.json`            | eval       | modality alignment statistics         |
//! | `link-auc.json`        | eval       | held-out link-prediction AUC          |
//! | `report.json`, `plots/`| report     | summary and loss curves               |

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::{self, DatasetConfig, TrainConfig};
use crate::dataset::{file_digest, generate_dataset, load_dataset, save_dataset, split_edges, Dataset, Manifest};
use crate::error::{Error, Result};
use crate::eval::{
    alignment_gap, eval_link_auc, finetune, finetune_unfrozen, pair_set, user_modalities, user_representation,
    AlignmentStats, FinetuneReport, ProbeConfig, Task,
};
use crate::graph::SocialGraph;
use crate::model::graph_encoder::encode_graph;
use crate::model::{ModelConfig, ParamStore};
use crate::objectives::COMPONENTS;
use crate::plot::line_plot_svg;
use crate::train::checkpoint::{load_checkpoint, save_checkpoint};
use crate::train::{node_features, pretrain, HistoryRecord, TrainData, TrainState};

pub const RUN_INFO: &str = "run.json";
pub const HISTORY: &str = "history.jsonl";
pub const SPLIT: &str = "split.json";
pub const CHECKPOINT: &str = "checkpoint";
pub const TIMING: &str = "timing.json";
pub const EVAL: &str = "eval.json";
pub const LINK_AUC: &str = "link-auc.json";
pub const REPORT: &str = "report.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub data_dir: PathBuf,
    /// SHA-256 of the dataset's `manifest.json`.
    pub data_digest: String,
    pub seed: u64,
    pub epochs: usize,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitFile {
    pub heldout_pos: Vec<(u32, u32)>,
    pub heldout_neg: Vec<(u32, u32)>,
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    write(path, text.as_bytes())
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

fn record_timing(run: &Path, command: &str, seconds: f64) -> Result<()> {
    let path = run.join(TIMING);
    let mut t: BTreeMap<String, f64> = if path.exists() { read_json(&path)? } else { BTreeMap::new() };
    t.insert(command.to_string(), seconds);
    write_json(&path, &t)
}

/// Generate a dataset from a config file's contents and write it to `out`.
pub fn gen_data(cfg: &DatasetConfig, out: &Path) -> Result<Manifest> {
    let (ds, graph) = generate_dataset(cfg, cfg.seed)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    save_dataset(&ds, &graph, out)
}

fn data_digest(dir: &Path) -> Result<String> {
    let path = dir.join("manifest.json");
    Ok(file_digest(&fs::read(&path).map_err(|e| Error::io(&path, e))?))
}

pub fn history_jsonl(history: &[HistoryRecord]) -> String {
    let mut out = String::new();
    for r in history {
        out.push_str(&serde_json::to_string(r).expect("serializable"));
        out.push('\n');
    }
    out
}

pub fn read_history(run: &Path) -> Result<Vec<HistoryRecord>> {
    let path = run.join(HISTORY);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    text.lines()
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::format(&path, format!("line {}: {e}", i + 1))))
        .collect()
}

/// Pre-train on the dataset in `data_dir` and populate the run directory.
pub fn pretrain_run(data_dir: &Path, cfg: &TrainConfig, out: &Path) -> Result<RunInfo> {
    let started = Instant::now();
    cfg.validate()?;
    let (ds, graph) = load_dataset(data_dir)?;
    let model = ModelConfig::new(cfg, &ds.meta)?;
    let split = split_edges(&graph, cfg.holdout_frac, cfg.seed)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write(&out.join("config.toml"), config::render(cfg).as_bytes())?;
    write_json(
        &out.join(SPLIT),
        &SplitFile {
            heldout_pos: split.heldout_pos.clone(),
            heldout_neg: split.heldout_neg.clone(),
        },
    )?;
    let data = TrainData::new(&ds, split.train_graph.clone(), pair_set(&split.heldout_pos))?;
    let mut state = TrainState::new(model, cfg);
    let train_echo = serde_json::to_value(cfg).expect("serializable");
    let history = pretrain(&mut state, &data, cfg, |epoch, st, hist| {
        let done = epoch + 1;
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done < cfg.epochs {
            let digest = file_digest(history_jsonl(hist).as_bytes());
            let dir = out.join("checkpoints").join(format!("epoch-{done}"));
            save_checkpoint(&dir, &st.model, &st.params, st.step, Some(train_echo.clone()), Some(digest))?;
        }
        Ok(())
    })?;
    let text = history_jsonl(&history);
    write(&out.join(HISTORY), text.as_bytes())?;
    save_checkpoint(
        &out.join(CHECKPOINT),
        &state.model,
        &state.params,
        state.step,
        Some(train_echo),
        Some(file_digest(text.as_bytes())),
    )?;
    let info = RunInfo {
        data_dir: fs::canonicalize(data_dir).map_err(|e| Error::io(data_dir, e))?,
        data_digest: data_digest(data_dir)?,
        seed: cfg.seed,
        epochs: cfg.epochs,
        steps: state.step,
    };
    write_json(&out.join(RUN_INFO), &info)?;
    record_timing(out, "pretrain", started.elapsed().as_secs_f64())?;
    Ok(info)
}

/// Everything a finished run provides.
pub struct LoadedRun {
    pub info: RunInfo,
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub params: ParamStore,
    pub ds: Dataset,
    pub graph: SocialGraph,
    pub split: SplitFile,
}

impl LoadedRun {
    pub fn open(run: &Path) -> Result<Self> {
        let info: RunInfo = read_json(&run.join(RUN_INFO))?;
        let train: TrainConfig = config::load(&run.join("config.toml"))?;
        let (manifest, params) = load_checkpoint(&run.join(CHECKPOINT), None)?;
        let (ds, graph) = load_dataset(&info.data_dir)?;
        if data_digest(&info.data_dir)? != info.data_digest {
            return Err(Error::Digest(info.data_dir.join("manifest.json")));
        }
        let split: SplitFile = read_json(&run.join(SPLIT))?;
        Ok(LoadedRun {
            info,
            train,
            model: manifest.model,
            params,
            ds,
            graph,
            split,
        })
    }

    pub fn train_graph(&self) -> SocialGraph {
        self.graph.without_edges(&self.split.heldout_pos)
    }

    pub fn probe_config(&self) -> ProbeConfig {
        ProbeConfig {
            seed: self.info.seed,
            ..ProbeConfig::default()
        }
    }
}

/// Options of the unfrozen fine-tuning variant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Unfreeze {
    pub steps: usize,
    pub learning_rate: f64,
}

/// Probe the run's representation on `task` and write `finetune-<task>.json`.
pub fn finetune_run(run: &Path, task: Task, unfreeze: Option<Unfreeze>) -> Result<FinetuneReport> {
    let started = Instant::now();
    let r = LoadedRun::open(run)?;
    let cfg = r.probe_config();
    let report = match unfreeze {
        None => finetune(&user_representation(&r.params, &r.model, &r.ds, &r.graph)?, &r.ds, task, &cfg)?,
        Some(u) => finetune_unfrozen(&r.params, &r.model, &r.ds, &r.graph, task, &cfg, u.steps, u.learning_rate)?.2,
    };
    write_json(&run.join(format!("finetune-{}.json", task.name())), &report)?;
    record_timing(run, &format!("finetune-{}", task.name()), started.elapsed().as_secs_f64())?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalFile {
    pub image_alignment: AlignmentStats,
    pub text_alignment: AlignmentStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkAucFile {
    pub trained: f64,
    /// Same model freshly initialized.
    pub untrained: f64,
    pub n_pos: usize,
    pub n_neg: usize,
}

fn link_auc_of(params: &ParamStore, r: &LoadedRun, train_graph: &SocialGraph) -> Result<f64> {
    let (ri, rt) = user_modalities(params, &r.model, &r.ds)?;
    let rg = encode_graph(params, &r.model, &node_features(&r.ds), train_graph, &ri, &rt)?;
    eval_link_auc(&rg, &r.split.heldout_pos, &r.split.heldout_neg)
}

/// Alignment statistics, plus held-out link AUC when `link_auc` is set.
pub fn eval_run(run: &Path, link_auc: bool) -> Result<(EvalFile, Option<LinkAucFile>)> {
    let started = Instant::now();
    let r = LoadedRun::open(run)?;
    let (ri, rt) = user_modalities(&r.params, &r.model, &r.ds)?;
    let eval = EvalFile {
        image_alignment: alignment_gap(&ri, &r.graph, r.info.seed)?,
        text_alignment: alignment_gap(&rt, &r.graph, r.info.seed)?,
    };
    write_json(&run.join(EVAL), &eval)?;
    let auc = if link_auc {
        let g = r.train_graph();
        let fresh = ParamStore::init(&r.model, r.info.seed);
        let file = LinkAucFile {
            trained: link_auc_of(&r.params, &r, &g)?,
            untrained: link_auc_of(&fresh, &r, &g)?,
            n_pos: r.split.heldout_pos.len(),
            n_neg: r.split.heldout_neg.len(),
        };
        write_json(&run.join(LINK_AUC), &file)?;
        Some(file)
    } else {
        None
    };
    record_timing(run, "eval", started.elapsed().as_secs_f64())?;
    Ok((eval, auc))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub config: TrainConfig,
    pub seed: u64,
    pub data_digest: String,
    pub history_digest: String,
    pub steps: usize,
    /// Mean of each component and the total per epoch.
    pub epoch_means: BTreeMap<String, Vec<f64>>,
    pub final_losses: Option<HistoryRecord>,
    pub finetune: BTreeMap<String, FinetuneReport>,
    pub eval: Option<EvalFile>,
    pub link_auc: Option<LinkAucFile>,
    pub plots: Vec<String>,
}

/// Removes the lock file when dropped.
struct RunLock(PathBuf);

impl RunLock {
    fn acquire(run: &Path) -> Result<Self> {
        let path = run.join(".report.lock");
        fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(RunLock(path))
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

fn optional<T: DeserializeOwned>(path: &Path) -> Result<Option<T>> {
    if path.exists() {
        read_json(path).map(Some)
    } else {
        Ok(None)
    }
}

/// Write `report.json` and one loss plot per component plus the total.
pub fn report_run(run: &Path) -> Result<Report> {
    let info: RunInfo = read_json(&run.join(RUN_INFO))?;
    let config: TrainConfig = config::load(&run.join("config.toml"))?;
    let history = read_history(run)?;
    let history_text = fs::read(run.join(HISTORY)).map_err(|e| Error::io(run.join(HISTORY), e))?;
    let _lock = RunLock::acquire(run)?;

    let names: Vec<&str> = COMPONENTS.iter().copied().chain(["total"]).collect();
    let mut epoch_means = BTreeMap::new();
    let mut plots = Vec::new();
    for name in &names {
        let mut sums = vec![(0.0, 0usize); info.epochs];
        for rec in &history {
            if let Some(slot) = sums.get_mut(rec.epoch) {
                slot.0 += rec.get(name).expect("known component");
                slot.1 += 1;
            }
        }
        epoch_means.insert(
            name.to_string(),
            sums.iter().map(|&(s, k)| if k == 0 { 0.0 } else { s / k as f64 }).collect(),
        );
        let series: Vec<f64> = history.iter().map(|r| r.get(name).expect("known component")).collect();
        let file = format!("plots/loss-{name}.svg");
        write(&run.join(&file), line_plot_svg(&format!("{name} loss"), &series).as_bytes())?;
        plots.push(file);
    }
    let mut finetune = BTreeMap::new();
    for task in [Task::Content, Task::Fans] {
        if let Some(f) = optional::<FinetuneReport>(&run.join(format!("finetune-{}.json", task.name())))? {
            finetune.insert(task.name().to_string(), f);
        }
    }
    let report = Report {
        config,
        seed: info.seed,
        data_digest: info.data_digest,
        history_digest: file_digest(&history_text),
        steps: history.len(),
        epoch_means,
        final_losses: history.last().cloned(),
        finetune,
        eval: optional(&run.join(EVAL))?,
        link_auc: optional(&run.join(LINK_AUC))?,
        plots,
    };
    write_json(&run.join(REPORT), &report)?;
    Ok(report)
}
