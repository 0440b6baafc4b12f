//! Running the `histgen` binary against small configs in temporary
//! directories.
#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn bin() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_histgen"))
}

/// Runs the binary; `Err` carries stdout and stderr on a nonzero exit.
pub fn histgen(args: &[&str]) -> Result<Output, String> {
    let out = Command::new(bin())
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(out)
    } else {
        Err(format!(
            "histgen {} exited with {:?}\nstdout: {}\nstderr: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stdout),
            String::from_utf8_lossy(&out.stderr)
        ))
    }
}

pub fn exit_code(args: &[&str]) -> Option<i32> {
    Command::new(bin()).args(args).output().unwrap().status.code()
}

/// A config small enough for a full pipeline in seconds: 20 report pairs,
/// 16-wide features, `d_model` 16 and few epochs.
pub fn small_config(dir: &Path, epochs: usize) -> PathBuf {
    let text = format!(
        r#"seed = 11
vocab_min_freq = 1

[paths]
data_dir = "{data}"
run_dir = "{run}"

[synth]
num_wsis = 20
themes = 4
d_in = 16
min_patches = 4
max_patches = 12
split = [0.6, 0.2, 0.2]
task_wsis = 16

[model.encoder]
region_size = 4
d_model = 16
d_in = 16
heads = 2
ff_dim = 32
dropout = 0.1

[model.cmc]
memory_slots = 8
prototypes = 4
heads = 2

[model.decoder]
layers = 1
heads = 2
d_model = 16
ff_dim = 32
max_len = 24
beam_size = 2
dropout = 0.1

[train]
learning_rate = 1e-3
decay_every = 2
epochs = {epochs}
batch_size = 4
eval_every = 1

[finetune]
learning_rate = 1e-3
epochs = 2
batch_size = 4
monte_carlo_folds = 2
"#,
        data = dir.join("data").display(),
        run = dir.join("run").display(),
    );
    let path = dir.join("small.toml");
    fs::write(&path, text).unwrap();
    path
}

pub fn read(path: &Path) -> String {
    fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

/// Header and data rows of a comma-separated file.
pub fn csv_rows(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let text = read(path);
    let mut lines = text.lines().map(|l| l.split(',').map(str::to_string).collect::<Vec<_>>());
    let header = lines.next().unwrap_or_default();
    (header, lines.collect())
}

/// Every command of the pipeline against `config`, with the run directory
/// under `dir`. Returns the metric CSVs written, relative to `dir`.
pub fn full_pipeline(config: &Path, dir: &Path) -> Result<Vec<PathBuf>, String> {
    let c = config.to_str().unwrap();
    let data = dir.join("data");
    let run = dir.join("run");
    let (d, r) = (data.to_str().unwrap(), run.to_str().unwrap());
    histgen(&["synth", "-c", c, "--data-dir", d])?;
    histgen(&["train", "-c", c, "--data-dir", d, "--run-dir", r])?;
    histgen(&["generate", "-c", c, "--data-dir", d, "--run-dir", r])?;
    histgen(&["eval-nlg", "-c", c, "--data-dir", d, "--run-dir", r])?;
    histgen(&["finetune-cls", "-c", c, "--data-dir", d, "--run-dir", r])?;
    histgen(&["finetune-surv", "-c", c, "--data-dir", d, "--run-dir", r])?;
    let ablate = dir.join("ablate");
    histgen(&["ablate", "-c", c, "--data-dir", d, "--run-dir", ablate.to_str().unwrap(), "--epochs", "2"])?;
    let sweep = dir.join("sweep");
    histgen(&["ablate", "-c", c, "--data-dir", d, "--run-dir", sweep.to_str().unwrap(), "--epochs", "1", "--region-sweep"])?;
    Ok([
        "run/metrics.csv",
        "run/nlg_metrics.csv",
        "run/finetune_cls.csv",
        "run/finetune_surv.csv",
        "ablate/ablation.csv",
        "sweep/region_sweep.csv",
    ]
    .iter()
    .map(PathBuf::from)
    .collect())
}
