use std::path::Path;
use std::process::{Command, Output};

use dnd_core::persist::Checkpoint;

const TINY: &str = r#"
seed = 11

[dataset]
size = 20
val_fraction = 0.2

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

[backbone]
layers = 2
hidden = 16
heads = 2
max_seq_len = 16

[model]
depth = 2
head_layers = [1, 2]

[train]
batch_size = 8
epochs = 2

[sample]
count = 2
class = 0
cfg_scale = 1.5

[eval]
samples = 0
"#;

fn dnd(args: &[&str], env_seed: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_dnd"));
    cmd.args(args).env_remove("DND_SEED");
    if let Some(s) = env_seed {
        cmd.env("DND_SEED", s);
    }
    cmd.output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn icr_table_reports_reference_ratios() {
    let out = dnd(&["icr"], None);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("# resolved configuration"));
    let row = text.lines().find(|l| l.starts_with("N=8192 f=16 d=1 ")).expect("default row");
    assert!(row.trim_end().ends_with("0.21%"), "{row}");
    let row = text.lines().find(|l| l.starts_with("continuous 128 bits f=8")).expect("continuous row");
    assert!(row.trim_end().ends_with("8.33%"), "{row}");
    let custom = dnd(&["icr", "--code", "8192,16,4"], None);
    assert!(stdout(&custom).contains("0.85%"));
}

#[test]
fn invalid_configuration_exits_with_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[train]\nlearning_rate = 3\n").unwrap();
    let cases: Vec<(Vec<String>, Option<&str>)> = vec![
        (vec!["datagen".into(), "--config".into(), bad.display().to_string()], None),
        (vec!["datagen".into(), "--set".into(), "model.depth=7".into()], None),
        (vec!["train-ar".into(), "--set".into(), "model.depth=1".into(), "--set".into(), "model.head_layers=[6,8]".into()], None),
        (vec!["datagen".into()], Some("not-a-number")),
        (vec!["sample".into(), "--temperature".into(), "0".into()], None),
    ];
    for (args, seed) in cases {
        let args: Vec<&str> = args.iter().map(String::as_str).collect();
        let out = dnd(&args, seed);
        assert_eq!(out.status.code(), Some(2), "{args:?}: {}", stderr(&out));
        let err = stderr(&out);
        assert_eq!(err.trim_end().lines().count(), 1, "{args:?}: {err}");
        assert!(err.starts_with("error:"));
    }
}

#[test]
fn dnd_with_one_depth_needs_one_head() {
    let out = dnd(&["train-ar", "--set", "model.depth=1", "--set", "model.head_layers=[8]"], None);
    // passes validation, then fails on the missing dataset rather than the config
    assert_eq!(out.status.code(), Some(1), "{}", stderr(&out));
    assert!(stdout(&out).contains("head_layers = [8]"));
}

fn pipeline(root: &Path, config: &Path, env_seed: Option<&str>) {
    let root = root.display().to_string();
    let config = config.display().to_string();
    for cmd in ["datagen", "train-tokenizer", "train-ar", "sample", "eval"] {
        let out = dnd(&[cmd, "--config", &config, "--root", &root], env_seed);
        assert!(out.status.success(), "{cmd}: {}", stderr(&out));
        assert!(stdout(&out).contains("[autoencoder]"), "{cmd} must print the resolved config");
    }
}

#[test]
fn end_to_end_smoke_run() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("tiny.toml");
    std::fs::write(&config, TINY).unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    pipeline(&a, &config, None);
    pipeline(&b, &config, None);
    for rel in ["tokenizer.dndk", "model.dndk", "tokenizer.csv", "model.csv", "samples/0.ppm", "samples/1.dndc", "report/report.csv"] {
        let x = std::fs::read(a.join(rel)).unwrap_or_else(|e| panic!("{rel}: {e}"));
        assert_eq!(x, std::fs::read(b.join(rel)).unwrap(), "{rel} differs");
    }
    for ck in ["tokenizer.dndk", "model.dndk"] {
        Checkpoint::load(&a.join(ck)).unwrap();
    }
    assert!(std::fs::read_to_string(a.join("report/report.txt")).unwrap().contains("recon_l2"));
    let header = std::fs::read(a.join("samples/0.ppm")).unwrap();
    assert!(header.starts_with(b"P6\n16 16\n255\n"));

    let c = dir.path().join("c");
    pipeline(&c, &config, Some("12"));
    assert_ne!(std::fs::read(a.join("model.dndk")).unwrap(), std::fs::read(c.join("model.dndk")).unwrap());
}
