//! End-to-end stages driven by a resolved [`RunConfig`]: dataset
//! generation, tokenizer training, cached tokenization, transformer
//! training, sampling and evaluation.
//!
//! Every artifact embeds the path-free configuration snapshot, so two runs
//! with the same configuration and seed produce identical bytes.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codec::CodeGrid;
use crate::config::RunConfig;
use crate::datagen::{load_dataset, make_dataset, Dataset, DatasetManifest};
use crate::error::{io_at, Error, Result};
use crate::metrics::{eval_report, label_conditions, EvalReport};
use crate::persist::Checkpoint;
use crate::sampler::generate_image;
use crate::tokenizer::{train_tokenizer, Tokenizer, TokenizerEpoch, TokenizerLog};
use crate::transformer::{train_transformer, TrainLog, Transformer};

/// Log written next to a checkpoint: `model.dndk` gets `model.csv`.
pub fn log_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("csv")
}

fn write_config(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let path = dir.join("config.json");
    let text = serde_json::to_string_pretty(&cfg.snapshot()).expect("serializable");
    std::fs::write(&path, text).map_err(io_at(&path))
}

fn save_grid(grid: &CodeGrid, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    grid.write_to(&mut buf)?;
    std::fs::write(path, buf).map_err(io_at(path))
}

fn create_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => std::fs::create_dir_all(p).map_err(io_at(p)),
        _ => Ok(()),
    }
}

fn load_checked_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let data = load_dataset(&cfg.paths.dataset)?;
    let meta = std::fs::read_to_string(cfg.paths.dataset.join("dataset.json")).map_err(io_at(&cfg.paths.dataset))?;
    let manifest: DatasetManifest = serde_json::from_str(&meta).map_err(|e| Error::Format(e.to_string()))?;
    if manifest.spec != cfg.dataset {
        return Err(Error::Config(format!(
            "dataset at {} was generated from a different [dataset] section",
            cfg.paths.dataset.display()
        )));
    }
    Ok(data)
}

pub fn run_datagen(cfg: &RunConfig) -> Result<DatasetManifest> {
    make_dataset(&cfg.dataset, &cfg.paths.dataset)
}

pub fn run_train_tokenizer(cfg: &RunConfig, on_epoch: impl FnMut(&TokenizerEpoch)) -> Result<TokenizerLog> {
    let data = load_checked_dataset(cfg)?;
    let (tok, log) = train_tokenizer(data.train_images(), cfg.autoencoder, &cfg.tokenizer_train, on_epoch)?;
    let mut ck = tok.to_checkpoint(Some(&cfg.tokenizer_train))?;
    ck.config["run"] = cfg.snapshot();
    create_parent(&cfg.paths.tokenizer)?;
    ck.save(&cfg.paths.tokenizer)?;
    log.save_csv(&log_path(&cfg.paths.tokenizer))?;
    Ok(log)
}

/// Identity of a token cache: which tokenizer, dataset and depth made it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenCacheKey {
    pub tokenizer_sha256: String,
    pub dataset_hash: String,
    pub depth: usize,
    pub count: usize,
}

/// Grids of the whole dataset (train then validation) at the tokenizer's
/// depth, read from `paths.tokens` when the cache matches and rebuilt
/// otherwise. Files are `{id}.dndc` plus `key.json`.
pub fn tokenize_cached(cfg: &RunConfig, tokenizer: &Tokenizer, data: &Dataset) -> Result<Vec<CodeGrid>> {
    let bytes = std::fs::read(&cfg.paths.tokenizer).map_err(io_at(&cfg.paths.tokenizer))?;
    let key = TokenCacheKey {
        tokenizer_sha256: hex::encode(Sha256::digest(&bytes)),
        dataset_hash: cfg.dataset.hash(),
        depth: tokenizer.spec.depth,
        count: data.len(),
    };
    let dir = &cfg.paths.tokens;
    let key_path = dir.join("key.json");
    if let Ok(text) = std::fs::read_to_string(&key_path) {
        if serde_json::from_str::<TokenCacheKey>(&text).ok().as_ref() == Some(&key) {
            let cached: Result<Vec<CodeGrid>> = (0..data.len())
                .map(|id| {
                    let p = dir.join(format!("{id}.dndc"));
                    CodeGrid::read_from(&std::fs::read(&p).map_err(io_at(&p))?[..])
                })
                .collect();
            if let Ok(grids) = cached {
                return Ok(grids);
            }
        }
    }
    std::fs::create_dir_all(dir).map_err(io_at(dir))?;
    let _ = std::fs::remove_file(&key_path);
    let grids = tokenizer.tokenize_batch(&data.images, tokenizer.spec.depth)?;
    for (id, g) in grids.iter().enumerate() {
        let p = dir.join(format!("{id}.dndc"));
        save_grid(g, &p)?;
    }
    std::fs::write(&key_path, serde_json::to_string_pretty(&key).expect("serializable")).map_err(io_at(&key_path))?;
    Ok(grids)
}

fn model_grids(grids: &[CodeGrid], depth: usize) -> Result<Vec<CodeGrid>> {
    grids.iter().map(|g| g.truncate_depth(depth)).collect()
}

fn train_conditions(cfg: &RunConfig, data: &Dataset) -> Vec<Option<u32>> {
    let conds = label_conditions(data.train_labels());
    if cfg.backbone.classes == 0 {
        vec![None; conds.len()]
    } else {
        conds
    }
}

pub fn run_train_ar(cfg: &RunConfig, on_epoch: impl FnMut(usize, &[f64])) -> Result<TrainLog> {
    let data = load_checked_dataset(cfg)?;
    let tokenizer = Tokenizer::load(&cfg.paths.tokenizer)?;
    if tokenizer.spec != cfg.autoencoder {
        return Err(Error::Config("tokenizer checkpoint does not match the [autoencoder] section".into()));
    }
    let grids = tokenize_cached(cfg, &tokenizer, &data)?;
    let train = model_grids(&grids[..data.train], cfg.model.depth)?;
    let conds = train_conditions(cfg, &data);
    let mut model = Transformer::init(cfg.backbone, cfg.placement()?, cfg.train.seed)?;
    let log = train_transformer(&mut model, &train, &conds, &cfg.train, on_epoch)?;
    let mut ck = model.to_checkpoint(Some(&cfg.train))?;
    ck.config["run"] = cfg.snapshot();
    create_parent(&cfg.paths.model)?;
    ck.save(&cfg.paths.model)?;
    log.save_csv(&log_path(&cfg.paths.model))?;
    Ok(log)
}

fn load_models(cfg: &RunConfig) -> Result<(Tokenizer, Transformer)> {
    let tokenizer = Tokenizer::load(&cfg.paths.tokenizer)?;
    let model = Transformer::from_checkpoint(&Checkpoint::load(&cfg.paths.model)?)?;
    if model.depth() != cfg.model.depth {
        return Err(Error::Config(format!(
            "model checkpoint predicts {} depths, config says {}",
            model.depth(),
            cfg.model.depth
        )));
    }
    Ok((tokenizer, model))
}

/// Writes `{i}.ppm` and `{i}.dndc` for every requested sample and returns
/// the image paths.
pub fn run_sample(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let (tokenizer, model) = load_models(cfg)?;
    let dir = &cfg.paths.samples;
    std::fs::create_dir_all(dir).map_err(io_at(dir))?;
    write_config(cfg, dir)?;
    let mut out = Vec::with_capacity(cfg.sample.count);
    for i in 0..cfg.sample.count {
        let (image, grid) = generate_image(&tokenizer, &model, &cfg.sample_request(i))?;
        let img_path = dir.join(format!("{i}.ppm"));
        image.save_ppm(&img_path)?;
        let grid_path = dir.join(format!("{i}.dndc"));
        save_grid(&grid, &grid_path)?;
        out.push(img_path);
    }
    Ok(out)
}

/// Evaluates the tokenizer and, when its checkpoint exists, the model.
pub fn run_eval(cfg: &RunConfig) -> Result<EvalReport> {
    let data = load_checked_dataset(cfg)?;
    let tokenizer = Tokenizer::load(&cfg.paths.tokenizer)?;
    let model = if cfg.paths.model.exists() { Some(load_models(cfg)?.1) } else { None };
    let report = eval_report(&tokenizer, model.as_ref(), &data, &cfg.dataset.text, &cfg.eval)?;
    report.save(&cfg.paths.report)?;
    write_config(cfg, &cfg.paths.report)?;
    Ok(report)
}
