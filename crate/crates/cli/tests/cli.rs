use std::path::Path;
use std::process::{Command, Output};

use datprl_cli::commands::{CHECKPOINT_FILE, HISTORY_FILE, METRICS_FILE};
use datprl_cli::RunConfig;
use datprl_core::trainer::{Checkpoint, Trainer};

const TINY: &str = "\
[backbone]
channels = 4,8,12

[data]
train_size = 16
eval_size = 16
eval_per_cell = 1

[pools]
dim = 8

[trainer]
batch_size = 3
steps = 6
";

fn datprl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_datprl"))
        .args(args)
        .env("DATPRL_OUTPUT_ROOT", std::env::temp_dir())
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn config_text_round_trips() {
    let cfg = RunConfig::parse(TINY).unwrap();
    assert_eq!(cfg.train.model.backbone.channels, vec![4, 8, 12]);
    assert_eq!(cfg.get("trainer.steps").as_deref(), Some("6"));
    let again = RunConfig::parse(&cfg.to_canonical()).unwrap();
    assert_eq!(again, cfg);
    assert_eq!(RunConfig::parse(&cfg.to_documented()).unwrap(), cfg);
    assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
}

#[test]
fn config_errors_name_the_line() {
    let err = RunConfig::parse("[trainer]\nsteps = 5\nstepz = 3\n").unwrap_err().to_string();
    assert!(err.contains("line 3") && err.contains("trainer.stepz"), "{err}");
    let err = RunConfig::parse("[trainer]\nsteps = 5\nsteps = 6\n").unwrap_err().to_string();
    assert!(err.contains("line 3") && err.contains("duplicate"), "{err}");
    let err = RunConfig::parse("[loss]\npix = nan\n").unwrap_err().to_string();
    assert!(err.contains("line 2"), "{err}");
    let err = RunConfig::parse("[data]\nroster = natural:nothing\n").unwrap_err().to_string();
    assert!(err.contains("line 2"), "{err}");

    let mut cfg = RunConfig::default();
    cfg.apply_overrides(&["pools.task.N=15", "loss.div = 0.5"]).unwrap();
    assert_eq!(cfg.train.model.task_pool.size, 15);
    assert_eq!(cfg.train.weights.div, 0.5);
    let err = cfg.apply_overrides(&["nope=1"]).unwrap_err().to_string();
    assert!(!err.contains("line"), "{err}");
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(datprl(&["frobnicate"]).status.code(), Some(1));
    let o = datprl(&["config", "--set", "trainer.nope=1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("trainer.nope"));
    let o = datprl(&["eval", "--checkpoint", "/nonexistent/checkpoint.bin"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(datprl(&["gradcheck", "--inject-fault", "no_such_op"]).status.code(), Some(1));
    assert_eq!(datprl(&["--help"]).status.code(), Some(0));
}

#[test]
fn injected_fault_exits_with_three() {
    let o = datprl(&["gradcheck", "--seeds", "2", "--inject-fault", "conv2d"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    let o = datprl(&["gradcheck", "--seeds", "2"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap()
}

#[test]
fn train_eval_analyze_resume() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.cfg");
    std::fs::write(&cfg, TINY).unwrap();
    let run = dir.path().join("run");
    let run_s = run.to_str().unwrap();
    let cfg_s = cfg.to_str().unwrap();

    let o = datprl(&["train", "--config", cfg_s, "--out", run_s]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(read(&run.join(HISTORY_FILE)).lines().count(), 6);
    for f in ["config.resolved", "metrics.csv", "baseline.csv", "grad_audit.csv", CHECKPOINT_FILE] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let metrics = read(&run.join(METRICS_FILE));
    assert!(metrics.starts_with("domain,task,psnr_db,ssim,n"));
    assert_eq!(metrics.lines().count(), 7);

    let ckpt = run.join(CHECKPOINT_FILE);
    let ckpt_s = ckpt.to_str().unwrap();
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    assert_eq!(datprl(&["eval", "--checkpoint", ckpt_s, "--csv", a.to_str().unwrap()]).status.code(), Some(0));
    assert_eq!(datprl(&["eval", "--checkpoint", ckpt_s, "--csv", b.to_str().unwrap()]).status.code(), Some(0));
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(read(&a), metrics);

    let analytics = dir.path().join("analytics");
    let o = datprl(&["analyze", "--checkpoint", ckpt_s, "--out", analytics.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for f in ["selection_task.csv", "selection_domain.csv", "gates.csv", "anchor_cosine.csv"] {
        assert!(analytics.join(f).exists(), "{f} missing");
    }

    // an interrupted copy: full history on disk, checkpoint from step 4
    let cut = dir.path().join("cut");
    std::fs::create_dir_all(&cut).unwrap();
    std::fs::copy(run.join(HISTORY_FILE), cut.join(HISTORY_FILE)).unwrap();
    let parsed = RunConfig::parse(TINY).unwrap();
    let mut t = Trainer::new(parsed.train.clone()).unwrap();
    t.run(4, |_, _| Ok(())).unwrap();
    t.checkpoint(&parsed.to_canonical()).save(&cut.join(CHECKPOINT_FILE)).unwrap();
    let o = datprl(&["train", "--config", cfg_s, "--out", cut.to_str().unwrap(), "--resume"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(read(&cut.join(HISTORY_FILE)), read(&run.join(HISTORY_FILE)));
    // identical state; the embedded config differs only in output.dir
    let (x, y) = (Checkpoint::load(&cut.join(CHECKPOINT_FILE)).unwrap(), Checkpoint::load(&ckpt).unwrap());
    assert_eq!((x.step, &x.rng, &x.params, x.adam_t, &x.moments), (y.step, &y.rng, &y.params, y.adam_t, &y.moments));
    assert_eq!(read(&cut.join(METRICS_FILE)), metrics);
}
