use std::path::Path;

use dnd_core::config::{Paths, RunConfig};
use dnd_core::persist::Checkpoint;
use dnd_core::pipeline::{log_path, run_datagen, run_eval, run_sample, run_train_ar, run_train_tokenizer};

const TINY: &str = r#"
seed = 3

[dataset]
size = 24
val_fraction = 0.25

[dataset.shapes]
size = 16

[autoencoder]
height = 16
width = 16
latent_dim = 4
base_width = 4
res_blocks = 1
codebook_size = 16
depth = 2

[tokenizer_train]
lr = 0.002
batch_size = 8
epochs = 2
dead_after = 4

[backbone]
layers = 2
hidden = 16
heads = 2
max_seq_len = 16

[model]
variant = "dnd"
depth = 2
head_layers = [1, 2]

[train]
base_lr = 0.01
batch_size = 6
epochs = 2

[sample]
count = 2
class = 1
cfg_scale = 2.0

[eval]
samples = 0
"#;

fn run(root: &Path) -> RunConfig {
    let mut cfg = RunConfig::from_toml(TINY).unwrap().resolve(None).unwrap();
    cfg.paths = Paths::under(root);
    run_datagen(&cfg).unwrap();
    run_train_tokenizer(&cfg, |_| {}).unwrap();
    run_train_ar(&cfg, |_, _| {}).unwrap();
    run_sample(&cfg).unwrap();
    run_eval(&cfg).unwrap();
    cfg
}

fn artifacts(cfg: &RunConfig) -> Vec<std::path::PathBuf> {
    let p = &cfg.paths;
    vec![
        p.tokenizer.clone(),
        log_path(&p.tokenizer),
        p.model.clone(),
        log_path(&p.model),
        p.tokens.join("0.dndc"),
        p.samples.join("0.ppm"),
        p.samples.join("1.dndc"),
        p.samples.join("config.json"),
        p.report.join("report.csv"),
        p.report.join("report.txt"),
    ]
}

#[test]
fn smoke_run_writes_valid_artifacts_and_is_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ca = run(a.path());
    let cb = run(b.path());
    for (x, y) in artifacts(&ca).iter().zip(artifacts(&cb)) {
        let bx = std::fs::read(x).unwrap_or_else(|e| panic!("{}: {e}", x.display()));
        assert_eq!(bx, std::fs::read(&y).unwrap(), "{} differs between runs", x.display());
    }
    for ck in [&ca.paths.tokenizer, &ca.paths.model] {
        let loaded = Checkpoint::load(ck).unwrap();
        assert_eq!(loaded.config["run"]["seed"], 3);
    }
    // a second training run reuses the token cache
    let before = std::fs::metadata(ca.paths.tokens.join("key.json")).unwrap().modified().unwrap();
    run_train_ar(&ca, |_, _| {}).unwrap();
    let after = std::fs::metadata(ca.paths.tokens.join("key.json")).unwrap().modified().unwrap();
    assert_eq!(before, after);
}

#[test]
fn stale_dataset_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::from_toml(TINY).unwrap().resolve(None).unwrap();
    cfg.paths = Paths::under(dir.path());
    run_datagen(&cfg).unwrap();
    cfg.dataset.size = 30;
    assert!(run_train_tokenizer(&cfg, |_| {}).is_err());
}
