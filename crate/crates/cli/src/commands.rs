use std::path::{Path, PathBuf};

use log::info;
use rayon::prelude::*;
use serde_json::{json, Map, Value};
use sslvit::config::RunConfig;
use sslvit::data::{read_dataset, read_embeddings, synth_dataset, write_dataset, write_embeddings, Dataset, EmbeddingStore};
use sslvit::distill::pretrain as run_pretrain;
use sslvit::fewshot::{class_statistics, evaluate_fewshot, group_by_class, EmbeddingTasks};
use sslvit::retrieval::{
    embed_images, finetune, recall_curve, EmbeddingBatch, LossKind, RetrievalModel,
};
use sslvit::tensor::Tensor;
use sslvit::vit::{encode, read_checkpoint, write_checkpoint, Checkpoint, Image};

use crate::Common;

#[derive(Debug)]
pub enum CliError {
    /// Bad flags or configuration: exit code 2.
    Usage(String),
    /// Anything that fails while running: exit code 1.
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

/// `--threads`, else `SSLVIT_THREADS`, else 1.
pub fn thread_count(flag: Option<usize>) -> Result<usize, CliError> {
    let n = match flag {
        Some(n) => n,
        None => match std::env::var("SSLVIT_THREADS") {
            Ok(v) => v
                .trim()
                .parse()
                .map_err(|_| usage(format!("SSLVIT_THREADS={v:?} is not a thread count")))?,
            Err(_) => 1,
        },
    };
    if n == 0 {
        return Err(usage("thread count must be at least 1"));
    }
    Ok(n)
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, CliError> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    RunConfig::from_json(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
}

/// Config file plus the `--seed` override; the seed must be set somewhere.
fn resolve(common: &Common) -> Result<(RunConfig, u64), CliError> {
    let mut cfg = load_config(common.config.as_deref())?;
    if common.seed.is_some() {
        cfg.seed = common.seed;
    }
    let seed = cfg
        .seed
        .ok_or_else(|| usage("this command trains or samples: pass --seed or set \"seed\" in the config"))?;
    Ok((cfg, seed))
}

fn load_dataset(path: &Path) -> Result<Dataset, CliError> {
    read_dataset(path).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    read_checkpoint(path).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn to_value(v: &impl serde::Serialize) -> Value {
    serde_json::to_value(v).expect("serializable")
}

pub fn synth(common: &Common, out: &Path) -> Result<Value, CliError> {
    let (cfg, seed) = resolve(common)?;
    let ds = synth_dataset(&cfg.data, seed).map_err(usage)?;
    write_dataset(&ds, out).map_err(runtime)?;
    info!("wrote {} images to {}", ds.len(), out.display());
    Ok(json!({
        "command": "synth",
        "out": out,
        "classes": ds.classes().len(),
        "samples": ds.len(),
        "channels": ds.channels(),
        "height": ds.height(),
        "width": ds.width(),
        "config": {"data": to_value(&cfg.data), "seed": seed},
    }))
}

pub fn pretrain(common: &Common, data: &Path, out: &Path, log: Option<&Path>) -> Result<Value, CliError> {
    let (cfg, seed) = resolve(common)?;
    cfg.vit.validate().map_err(usage)?;
    cfg.distill.validate().map_err(usage)?;
    let ds = load_dataset(data)?;
    let (state, training) = run_pretrain(&ds.images(), &cfg.vit, &cfg.distill, seed).map_err(runtime)?;
    write_checkpoint(
        out,
        &Checkpoint {
            params: state.teacher.clone(),
            projection: None,
        },
    )
    .map_err(runtime)?;
    let log_path: PathBuf = match log {
        Some(p) => p.to_path_buf(),
        None => {
            let mut name = out.as_os_str().to_owned();
            name.push(".log.json");
            name.into()
        }
    };
    let text = serde_json::to_string(&training).expect("log serializes");
    std::fs::write(&log_path, text + "\n").map_err(runtime)?;
    let last = training.steps.last();
    Ok(json!({
        "command": "pretrain",
        "checkpoint": out,
        "log": log_path,
        "steps": training.steps.len(),
        "final_loss": last.map(|s| s.loss),
        "final_teacher_entropy": last.map(|s| s.teacher_entropy),
        "parameters": state.teacher.num_params(),
        "config": {"vit": to_value(&cfg.vit), "distill": to_value(&cfg.distill), "seed": seed},
    }))
}

fn backbone_rows(ckpt: &Checkpoint, images: &[Image], normalize: bool) -> Result<Vec<Vec<f64>>, CliError> {
    let size = ckpt.params.config.image_size;
    images
        .par_iter()
        .map(|im| {
            let mut v = encode(&ckpt.params, &im.center_crop(size)).map_err(runtime)?.into_data();
            if normalize {
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.iter_mut().for_each(|x| *x /= n);
            }
            Ok(v)
        })
        .collect()
}

pub fn embed(model: &Path, data: &Path, out: &Path, retrieval_head: bool) -> Result<Value, CliError> {
    let ckpt = load_checkpoint(model)?;
    let ds = load_dataset(data)?;
    let images = ds.images();
    let rows: Vec<Vec<f64>> = if retrieval_head {
        let model = RetrievalModel::from_checkpoint(ckpt).map_err(usage)?;
        let batch = embed_images(&model, &images, ds.labels()).map_err(runtime)?;
        (0..batch.len()).map(|i| batch.row(i).to_vec()).collect()
    } else {
        backbone_rows(&ckpt, &images, false)?
    };
    let store = if rows.is_empty() {
        EmbeddingStore::new(1, Vec::new(), Vec::new())
    } else {
        EmbeddingStore::from_rows(&rows, ds.labels())
    }
    .map_err(runtime)?;
    write_embeddings(&store, out).map_err(runtime)?;
    Ok(json!({
        "command": "embed",
        "out": out,
        "rows": store.len(),
        "dim": store.dim(),
        "head": if retrieval_head { "retrieval" } else { "backbone" },
    }))
}

fn load_store(path: &Path) -> Result<EmbeddingStore, CliError> {
    read_embeddings(path).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

pub fn fewshot(
    common: &Common,
    base: &Path,
    novel: &Path,
    way: Option<usize>,
    shot: Option<usize>,
    tasks: Option<usize>,
) -> Result<Value, CliError> {
    let (mut cfg, seed) = resolve(common)?;
    let fs = &mut cfg.fewshot;
    fs.way = way.unwrap_or(fs.way);
    fs.shot = shot.unwrap_or(fs.shot);
    fs.tasks = tasks.unwrap_or(fs.tasks);
    fs.validate().map_err(usage)?;
    let base = load_store(base)?;
    let novel = load_store(novel)?;
    if base.dim() != novel.dim() {
        return Err(runtime(format!(
            "base embeddings have dimension {}, novel {}",
            base.dim(),
            novel.dim()
        )));
    }
    let stats = class_statistics(&group_by_class(&base)).map_err(runtime)?;
    let summary = evaluate_fewshot(&EmbeddingTasks::new(&novel), &stats, fs, seed).map_err(runtime)?;
    Ok(json!({
        "command": "fewshot",
        "tasks": summary.tasks,
        "way": fs.way,
        "shot": fs.shot,
        "mean_accuracy": summary.mean,
        "ci95": summary.ci95,
        "config": {"fewshot": to_value(fs), "seed": seed},
    }))
}

fn recall_report(batch: &EmbeddingBatch, ks: &[usize]) -> Result<Map<String, Value>, CliError> {
    let curve = recall_curve(batch, batch, ks, true).map_err(runtime)?;
    Ok(curve
        .into_iter()
        .map(|(k, r)| (format!("recall@{k}"), json!(r)))
        .collect())
}

pub fn retrieval_train(
    common: &Common,
    model: &Path,
    data: &Path,
    out: &Path,
    eval_data: Option<&Path>,
    loss: Option<LossKind>,
    k: Option<Vec<usize>>,
) -> Result<Value, CliError> {
    let (mut cfg, seed) = resolve(common)?;
    let rc = &mut cfg.retrieval;
    rc.loss = loss.unwrap_or(rc.loss);
    if let Some(k) = k {
        rc.recall_k = k;
    }
    rc.validate().map_err(usage)?;
    let teacher = load_checkpoint(model)?.params;
    let train = load_dataset(data)?;
    let (state, log) = finetune(&teacher, &train, rc, seed).map_err(runtime)?;
    write_checkpoint(out, &state.model.to_checkpoint()).map_err(runtime)?;
    let eval = match eval_data {
        Some(p) => load_dataset(p)?,
        None => train,
    };
    let batch = embed_images(&state.model, &eval.images(), eval.labels()).map_err(runtime)?;
    let mut report = Map::new();
    report.insert("command".into(), json!("retrieval-train"));
    report.insert("checkpoint".into(), json!(out));
    report.insert("loss_kind".into(), json!(rc.loss.name()));
    report.insert("epochs".into(), json!(rc.epochs));
    report.insert("steps".into(), json!(log.steps.len()));
    report.insert("final_loss".into(), json!(log.steps.last().map(|s| s.loss)));
    report.extend(recall_report(&batch, &rc.recall_k)?);
    report.insert("config".into(), json!({"retrieval": to_value(rc), "seed": seed}));
    Ok(Value::Object(report))
}

pub fn retrieval_eval(config: Option<&Path>, model: &Path, data: &Path, k: Option<Vec<usize>>) -> Result<Value, CliError> {
    let mut cfg = load_config(config)?;
    if let Some(k) = k {
        cfg.retrieval.recall_k = k;
    }
    cfg.retrieval.validate().map_err(usage)?;
    let ckpt = load_checkpoint(model)?;
    let ds = load_dataset(data)?;
    let images = ds.images();
    let head = ckpt.projection.is_some();
    let batch = if head {
        let model = RetrievalModel::from_checkpoint(ckpt).map_err(runtime)?;
        embed_images(&model, &images, ds.labels()).map_err(runtime)?
    } else {
        let rows = backbone_rows(&ckpt, &images, true)?;
        let dim = rows.first().map_or(1, Vec::len);
        let t = Tensor::new(&[rows.len(), dim], rows.concat()).map_err(runtime)?;
        EmbeddingBatch::new(t, ds.labels()).map_err(runtime)?
    };
    let mut report = Map::new();
    report.insert("command".into(), json!("retrieval-eval"));
    report.insert("head".into(), json!(if head { "retrieval" } else { "backbone" }));
    report.insert("loss_kind".into(), Value::Null);
    report.insert("epochs".into(), json!(0));
    report.extend(recall_report(&batch, &cfg.retrieval.recall_k)?);
    report.insert("config".into(), json!({"retrieval": to_value(&cfg.retrieval)}));
    Ok(Value::Object(report))
}
