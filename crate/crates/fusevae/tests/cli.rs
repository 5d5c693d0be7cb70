//! End-to-end checks of the command surface: artifacts on disk, byte
//! determinism, resume numbering and exit codes.

use std::path::{Path, PathBuf};
use std::process::Command as Proc;

use clap::Parser;
use fusevae::cli::{run, Cli};
use fusevae::config::RunConfig;
use fusevae::model::{HierSpec, LevelSpec};
use fusevae::synthdata::import;
use tempfile::TempDir;

fn tiny_config() -> RunConfig {
    let mut cfg = RunConfig::desk(5);
    cfg.dataset.modalities = 2;
    cfg.dataset.side = 16;
    cfg.dataset.train = 6;
    cfg.dataset.val = 2;
    cfg.dataset.test = 3;
    cfg.dataset.missingness = vec![
        ("11".parse().unwrap(), 0.4),
        ("10".parse().unwrap(), 0.3),
        ("01".parse().unwrap(), 0.3),
    ];
    cfg.model.modalities = 2;
    cfg.model.hier = HierSpec {
        side: 16,
        levels: vec![
            LevelSpec { spatial: 16, channels: 3 },
            LevelSpec { spatial: 4, channels: 4 },
            LevelSpec { spatial: 1, channels: 8 },
        ],
    };
    cfg.model.base_width = 2;
    cfg.model.decoder_blocks = 1;
    cfg.train.epochs = 2;
    cfg.train.batch_size = 3;
    cfg.train.mixture_draws = 1;
    cfg.train.gp_pairs = 1;
    cfg.train.bank_capacity = 8;
    cfg.eval.montage_samples = 1;
    cfg.eval.pca_samples = 2;
    cfg.checkpoint_every = 1;
    cfg
}

fn write_config(dir: &Path, cfg: &RunConfig) -> PathBuf {
    let path = dir.join("run.json");
    std::fs::write(&path, cfg.to_json().unwrap()).unwrap();
    path
}

fn run_ok(args: &[&str]) {
    let cli = Cli::try_parse_from(args).unwrap();
    run(cli).unwrap();
}

fn s(p: &Path) -> String {
    p.to_str().unwrap().to_string()
}

fn csv_lines(path: &Path) -> Vec<String> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(str::to_string)
        .collect()
}

#[test]
fn generate_data_is_deterministic_and_importable() {
    let tmp = TempDir::new().unwrap();
    let cfg = tiny_config();
    let cfg_path = write_config(tmp.path(), &cfg);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run_ok(&["fusevae", "generate-data", "--config", &s(&cfg_path), "--out", &s(&a)]);
    run_ok(&["fusevae", "generate-data", "--config", &s(&cfg_path), "--out", &s(&b)]);

    let dataset = import(&a).unwrap();
    assert_eq!(dataset.samples.len(), 11);
    assert_eq!(dataset.config.modalities, 2);

    // Identical bytes apart from the wall-clock sidecar.
    assert_eq!(
        std::fs::read(a.join("dataset.json")).unwrap(),
        std::fs::read(b.join("dataset.json")).unwrap()
    );
    let mut names: Vec<_> = std::fs::read_dir(a.join("images"))
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    assert!(!names.is_empty());
    for name in &names {
        assert_eq!(
            std::fs::read(a.join("images").join(name)).unwrap(),
            std::fs::read(b.join("images").join(name)).unwrap()
        );
    }
    assert!(a.join("run_meta.json").exists());
}

#[test]
fn pipeline_covers_train_evaluate_synthesize() {
    let tmp = TempDir::new().unwrap();
    let cfg = tiny_config();
    let cfg_path = write_config(tmp.path(), &cfg);
    let data = tmp.path().join("data");
    run_ok(&["fusevae", "generate-data", "--config", &s(&cfg_path), "--out", &s(&data)]);

    let run_dir = tmp.path().join("run");
    run_ok(&[
        "fusevae", "train",
        "--config", &s(&cfg_path),
        "--data", &s(&data),
        "--out", &s(&run_dir),
    ]);
    // 6 samples / batch 3 = 2 steps per epoch, 2 epochs.
    let log = csv_lines(&run_dir.join("train_log.csv"));
    assert_eq!(log.len(), 5);
    assert!(log[0].starts_with("step,epoch,"));
    assert!(log[1].starts_with("1,0,"));
    assert!(log[4].starts_with("4,1,"));
    assert!(run_dir.join("checkpoint-final/manifest.json").exists());
    assert!(run_dir.join("checkpoint-final/params.bin").exists());
    // checkpoint_every = 1 checkpoints after the first epoch; the final
    // epoch only writes checkpoint-final.
    assert!(run_dir.join("checkpoints/epoch-0001").exists());
    assert!(!run_dir.join("checkpoints/epoch-0002").exists());

    let eval_dir = tmp.path().join("eval");
    let ckpt = run_dir.join("checkpoint-final");
    run_ok(&[
        "fusevae", "evaluate",
        "--checkpoint", &s(&ckpt),
        "--data", &s(&data),
        "--out", &s(&eval_dir),
        "--config", &s(&cfg_path),
    ]);
    // M = 2: subsets 10, 01, 11, each scored against both targets.
    let grid = csv_lines(&eval_dir.join("grid.csv"));
    assert_eq!(grid.len(), 7);
    assert!(grid[0].starts_with("inputs,target,"));
    for f in ["grid.json", "summary.json", "pca.csv", "montage-00008.pgm"] {
        assert!(eval_dir.join(f).exists(), "missing {f}");
    }
    let summary = std::fs::read_to_string(eval_dir.join("summary.json")).unwrap();
    for key in ["cross_modal_psnr", "alignment", "spectral"] {
        assert!(summary.contains(key), "summary lacks {key}");
    }

    // Any modality-0 image works as the observed input; test ids sort last
    // and the test split is complete.
    let mut inputs: Vec<_> = std::fs::read_dir(data.join("images"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| s(p).ends_with("_0.pgm"))
        .collect();
    inputs.sort();
    let observed = inputs.last().unwrap().clone();

    let (syn_a, syn_b) = (tmp.path().join("syn-a"), tmp.path().join("syn-b"));
    for out in [&syn_a, &syn_b] {
        run_ok(&[
            "fusevae", "synthesize",
            "--checkpoint", &s(&ckpt),
            "--inputs", &s(&observed),
            "--temperature", "0.0", "0.5", "1.0",
            "--out", &s(out),
            "--seed", "9",
        ]);
    }
    for t in ["0.00", "0.50", "1.00"] {
        for name in [format!("panel-t{t}.pgm"), format!("synth-t{t}-m0.pgm"), format!("synth-t{t}-m1.pgm")] {
            assert!(syn_a.join(&name).exists(), "missing {name}");
            assert_eq!(
                std::fs::read(syn_a.join(&name)).unwrap(),
                std::fs::read(syn_b.join(&name)).unwrap(),
                "{name} differs between identical runs"
            );
        }
    }
}

#[test]
fn resume_continues_step_numbering() {
    let tmp = TempDir::new().unwrap();
    let cfg = tiny_config();
    let cfg_path = write_config(tmp.path(), &cfg);
    let data = tmp.path().join("data");
    run_ok(&["fusevae", "generate-data", "--config", &s(&cfg_path), "--out", &s(&data)]);

    let first = tmp.path().join("first");
    run_ok(&[
        "fusevae", "train",
        "--config", &s(&cfg_path),
        "--data", &s(&data),
        "--out", &s(&first),
    ]);

    let second = tmp.path().join("second");
    run_ok(&[
        "fusevae", "train",
        "--config", &s(&cfg_path),
        "--data", &s(&data),
        "--out", &s(&second),
        "--resume", &s(&first.join("checkpoints/epoch-0001")),
    ]);
    let log = csv_lines(&second.join("train_log.csv"));
    // Only the second epoch runs, and steps carry on from the checkpoint.
    assert_eq!(log.len(), 3);
    assert!(log[1].starts_with("3,1,"));
    assert!(log[2].starts_with("4,1,"));
}

#[test]
fn ablate_writes_a_comparison_table() {
    let tmp = TempDir::new().unwrap();
    let mut cfg = tiny_config();
    cfg.train.epochs = 1;
    cfg.eval.montage_samples = 1;
    cfg.eval.pca_samples = 1;
    let cfg_path = write_config(tmp.path(), &cfg);
    let data = tmp.path().join("data");
    run_ok(&["fusevae", "generate-data", "--config", &s(&cfg_path), "--out", &s(&data)]);

    let out = tmp.path().join("ab");
    run_ok(&[
        "fusevae", "ablate",
        "--axis", "fusion",
        "--config", &s(&cfg_path),
        "--data", &s(&data),
        "--out", &s(&out),
    ]);
    let table = csv_lines(&out.join("comparison.csv"));
    assert_eq!(table.len(), 4);
    assert!(table[0].starts_with("variant,cross_modal_psnr,"));
    for (i, label) in ["poe", "average", "concat-zeros"].iter().enumerate() {
        assert!(table[i + 1].starts_with(&format!("{label},")));
        assert!(out.join(label).join("grid.csv").exists());
        assert!(out.join(label).join("checkpoint-final").exists());
    }
}

#[test]
fn exit_codes_follow_the_documented_contract() {
    let bin = env!("CARGO_BIN_EXE_fusevae");
    let tmp = TempDir::new().unwrap();

    // Usage error: no subcommand.
    let out = Proc::new(bin).output().unwrap();
    assert_eq!(out.status.code(), Some(2));

    // Config error: missingness weights that do not sum to one.
    let mut bad = tiny_config();
    bad.dataset.missingness = vec![("11".parse().unwrap(), 0.4)];
    let bad_path = write_config(tmp.path(), &bad);
    let out = Proc::new(bin)
        .args(["generate-data", "--config", &s(&bad_path), "--out", &s(&tmp.path().join("x"))])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("missingness_table"), "stderr was: {stderr}");

    // Numeric error: an absurd learning rate blows the objective up; the
    // partial log must survive the abort.
    let mut cfg = tiny_config();
    cfg.train.lr = 1e12;
    cfg.train.epochs = 8;
    let cfg_path = tmp.path().join("hot.json");
    std::fs::write(&cfg_path, cfg.to_json().unwrap()).unwrap();
    let data = tmp.path().join("data");
    run_ok(&["fusevae", "generate-data", "--config", &s(&cfg_path), "--out", &s(&data)]);
    let run_dir = tmp.path().join("hot-run");
    let out = Proc::new(bin)
        .args([
            "train",
            "--config", &s(&cfg_path),
            "--data", &s(&data),
            "--out", &s(&run_dir),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let log = csv_lines(&run_dir.join("train_log.csv"));
    assert!(log.len() >= 2, "log should keep the steps before the abort");
}
