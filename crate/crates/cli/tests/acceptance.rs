//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the lines appear in order as each
//! check finishes. Criteria 5 to 8 train five models at full length, which
//! takes the better part of an hour on one core, so they only run when
//! `DATPRL_ACCEPTANCE=full` is set and print SKIP otherwise.

use std::f64::consts::PI;
use std::path::Path;
use std::time::Instant;

use datprl_cli::commands::{cmd_analyze, cmd_eval, cmd_train, CHECKPOINT_FILE};
use datprl_cli::gradcheck::{run_gradcheck, GradcheckOptions};
use datprl_cli::RunConfig;
use datprl_core::data::Domain;
use datprl_core::nn::Ctx;
use datprl_core::prompt_pool::{select_top_k, PoolKind, PromptPool};
use datprl_core::regularizers::{balance_loss, diversity_loss};
use datprl_core::tensor::{cosine, ParamStore, Tape, Tensor};
use datprl_core::trainer::{mse, psnr, ssim, Checkpoint, StepRecord, TrainConfig, Trainer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn report(id: usize, name: &str, o: &Outcome, secs: f64) -> bool {
    let tag = if o.pass { "PASS" } else { "FAIL" };
    println!("criterion {id} {tag}  {name}: {} ({secs:.1}s)", o.detail);
    o.pass
}

fn c1_gradients() -> Outcome {
    let t0 = Instant::now();
    let r = match run_gradcheck(&GradcheckOptions::default()) {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("suite error: {e}")),
    };
    let secs = t0.elapsed().as_secs_f64();
    let worst = r
        .components
        .iter()
        .map(|c| format!("{} {:.1e}/{:.0e}", c.name, c.max_rel_err, c.tolerance))
        .collect::<Vec<_>>()
        .join(", ");
    let fails = r.failing();
    let pass = fails.is_empty() && secs < 120.0;
    outcome(pass, format!("20 seeds, {worst}; failing {fails:?}; {secs:.1}s < 120s"))
}

fn brute_force_top_k(sims: &[f64], k: usize) -> Vec<usize> {
    let mut all: Vec<(f64, usize)> = sims.iter().copied().zip(0..).collect();
    all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    all.into_iter().take(k).map(|(_, i)| i).collect()
}

fn c2_retrieval() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut mismatches, mut ties) = (0, 0);
    for case in 0..1000 {
        let n = rng.random_range(1..=16);
        let d = rng.random_range(1..=8);
        let k = rng.random_range(1..=n);
        let mut keys = Tensor::randn(&[n, d], 1.0, &mut rng);
        if case % 3 == 0 && n > 1 {
            for _ in 0..rng.random_range(1..=n) {
                let (a, b) = (rng.random_range(0..n), rng.random_range(0..n));
                let row = keys.data()[a * d..(a + 1) * d].to_vec();
                keys.data_mut()[b * d..(b + 1) * d].copy_from_slice(&row);
            }
        }
        let mut store = ParamStore::new();
        let pool = PromptPool::init(&mut store, PoolKind::Domain, n, 1, d, 1.0, &mut rng).unwrap();
        store.set_value(pool.keys, keys.clone()).unwrap();
        let query = Tensor::randn(&[d], 1.0, &mut rng);
        let tape = Tape::new();
        let r = select_top_k(Ctx::new(&tape, &store), &pool, tape.constant(query.clone()).unwrap(), k).unwrap();
        let sims: Vec<f64> = (0..n).map(|j| cosine(query.data(), &keys.data()[j * d..(j + 1) * d])).collect();
        let mut sorted = sims.clone();
        sorted.sort_by(f64::total_cmp);
        ties += sorted.windows(2).filter(|w| w[0] == w[1]).count();
        if r.selection.indices != brute_force_top_k(&sims, k) {
            mismatches += 1;
        }
    }
    outcome(mismatches == 0 && ties > 0, format!("1000 instances, {mismatches} mismatches, {ties} tied pairs"))
}

fn c3_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst_sum: f64 = 0.0;
    let mut monotone = true;
    for _ in 0..500 {
        let n = rng.random_range(2..=12);
        let k = rng.random_range(1..=n);
        let sims: Vec<f64> = (0..n).map(|_| rng.random_range(-0.99..0.99)).collect();
        let keys: Vec<f64> = sims.iter().flat_map(|&s| [s, (1.0 - s * s).sqrt()]).collect();
        let mut store = ParamStore::new();
        let temperature = rng.random_range(0.05..4.0);
        let pool = PromptPool::init(&mut store, PoolKind::Task, n, 1, 2, temperature, &mut rng).unwrap();
        store.set_value(pool.keys, Tensor::new(&[n, 2], keys).unwrap()).unwrap();
        let tape = Tape::new();
        let q = tape.constant(Tensor::vector(vec![1.0, 0.0])).unwrap();
        let sel = select_top_k(Ctx::new(&tape, &store), &pool, q, k).unwrap().selection;
        worst_sum = worst_sum.max((sel.weights.iter().sum::<f64>() - 1.0).abs());
        for i in 1..k {
            let (s0, s1) = (sel.similarities[i - 1], sel.similarities[i]);
            if s0 > s1 && !(sel.weights[i - 1] > sel.weights[i]) {
                monotone = false;
            }
        }
    }

    let bal = |p: Vec<f64>| {
        let tape = Tape::new();
        balance_loss(tape.constant(Tensor::vector(p)).unwrap()).unwrap().item()
    };
    let mut bal_ok = true;
    for _ in 0..500 {
        let n = rng.random_range(2..=16);
        let raw: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let s: f64 = raw.iter().sum();
        let p: Vec<f64> = raw.iter().map(|v| v / s).collect();
        let uniform = p.iter().all(|v| (v - 1.0 / n as f64).abs() < 1e-12);
        let l = bal(p);
        bal_ok &= (-1e-9..=(n as f64).ln() + 1e-9).contains(&l) && (uniform || l > 1e-9);
        bal_ok &= bal(vec![1.0 / n as f64; n]).abs() <= 1e-9;
        let mut one_hot = vec![0.0; n];
        one_hot[0] = 1.0;
        bal_ok &= (bal(one_hot) - (n as f64).ln()).abs() <= 1e-9;
    }

    let div = |t: Tensor| {
        let tape = Tape::new();
        diversity_loss(tape.constant(t).unwrap(), 0.1).unwrap().item()
    };
    let mut div_ok = true;
    for _ in 0..200 {
        let n = rng.random_range(2..=5);
        let mut data = vec![0.0; n * 12];
        for i in 0..n {
            data[i * 12 + i] = rng.random_range(0.1..5.0);
            for j in 0..12 {
                data[i * 12 + j] += rng.random_range(-0.02..0.02);
            }
        }
        let max_cos = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| cosine(&data[i * 12..(i + 1) * 12], &data[j * 12..(j + 1) * 12]))
            .fold(f64::NEG_INFINITY, f64::max);
        if max_cos <= 0.1 {
            div_ok &= div(Tensor::new(&[n, 2, 6], data).unwrap()) == 0.0;
        }
    }
    let v = Tensor::randn(&[1, 2, 6], 1.0, &mut rng);
    let twin = div(Tensor::new(&[2, 2, 6], v.data().repeat(2)).unwrap());
    let pass = worst_sum <= 1e-12 && monotone && bal_ok && div_ok && (twin - 0.9).abs() < 1e-12;
    outcome(
        pass,
        format!(
            "PCM |sum-1| max {worst_sum:.1e}, monotone {monotone}; L_bal range/zero {bal_ok}; L_div zero {div_ok}, twin {twin:.12}"
        ),
    )
}

fn c4_dft() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut err, mut parseval): (f64, f64) = (0.0, 0.0);
    for _ in 0..50 {
        let img = Tensor::uniform(&[8, 8], -1.0, 1.0, &mut rng);
        let tape = Tape::new();
        let (re, im) = tape.constant(img.clone()).unwrap().dft2().unwrap();
        let (re, im) = (re.value(), im.value());
        for u in 0..8 {
            for v in 0..8 {
                let (mut sr, mut si) = (0.0, 0.0);
                for y in 0..8 {
                    for x in 0..8 {
                        let ph = -2.0 * PI * ((u * y + v * x) as f64 / 8.0);
                        sr += img.data()[y * 8 + x] * ph.cos();
                        si += img.data()[y * 8 + x] * ph.sin();
                    }
                }
                err = err.max((re.data()[u * 8 + v] - sr).abs()).max((im.data()[u * 8 + v] - si).abs());
            }
        }
        let spec: f64 = re.data().iter().chain(im.data()).map(|v| v * v).sum();
        let space: f64 = 64.0 * img.data().iter().map(|v| v * v).sum::<f64>();
        parseval = parseval.max((spec - space).abs() / space);
    }
    outcome(err <= 1e-9 && parseval <= 1e-6, format!("max abs error {err:.1e}, Parseval rel {parseval:.1e}"))
}

fn c9_metrics() -> Outcome {
    let a = Tensor::zeros(&[3, 8, 8]);
    let b = Tensor::full(&[3, 8, 8], 0.1);
    let m = mse(&a, &b).unwrap();
    let p = psnr(&a, &b, 1.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (mut ident, mut asym, mut range_ok): (f64, f64, bool) = (0.0, 0.0, true);
    for _ in 0..100 {
        let x = Tensor::uniform(&[3, 16, 16], 0.0, 1.0, &mut rng);
        let y = Tensor::uniform(&[3, 16, 16], 0.0, 1.0, &mut rng);
        ident = ident.max((ssim(&x, &x).unwrap() - 1.0).abs());
        let (s, t) = (ssim(&x, &y).unwrap(), ssim(&y, &x).unwrap());
        asym = asym.max((s - t).abs());
        range_ok &= (-1.0..=1.0).contains(&s);
    }
    let pass = (m - 0.01).abs() < 1e-15 && (p - 20.0).abs() < 5e-4 && ident < 1e-12 && asym < 1e-12 && range_ok;
    outcome(
        pass,
        format!("MSE {m} -> {p:.3} dB; |SSIM(x,x)-1| {ident:.1e}; asymmetry {asym:.1e}; range ok {range_ok}"),
    )
}

/// Training run shared by criteria 5, 7 and 8.
struct MainRun {
    dir: tempfile::TempDir,
    records: Vec<StepRecord>,
    gains: Vec<(String, f64, f64, f64)>,
    mean_psnr: f64,
    secs: f64,
}

fn main_train_config() -> TrainConfig {
    let mut c = TrainConfig::default();
    c.model.backbone.channels = vec![12, 24, 48];
    c
}

fn main_run_config(dir: &Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.train = main_train_config();
    cfg.output_dir = dir.display().to_string();
    cfg
}

fn train_main() -> Result<MainRun, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = main_run_config(dir.path());
    let t0 = Instant::now();
    let out = cmd_train(&cfg, false).map_err(|e| e.to_string())?;
    let secs = t0.elapsed().as_secs_f64();
    let gains = out
        .metrics
        .iter()
        .zip(&out.baseline)
        .map(|(m, b)| (format!("{}/{}", m.domain, m.task), b.psnr_db, m.psnr_db, m.psnr_db - b.psnr_db))
        .collect();
    let mean_psnr = out.metrics.iter().map(|m| m.psnr_db).sum::<f64>() / out.metrics.len() as f64;
    Ok(MainRun {
        dir,
        records: out.records,
        gains,
        mean_psnr,
        secs,
    })
}

fn c5_training(run: &MainRun) -> Outcome {
    let first = run.records[0].total;
    let tail = &run.records[run.records.len() - 100..];
    let smoothed = tail.iter().map(|r| r.total).sum::<f64>() / tail.len() as f64;
    let ratio = smoothed / first;
    let min_gain = run.gains.iter().map(|g| g.3).fold(f64::INFINITY, f64::min);
    let all_better = run.gains.iter().all(|g| g.2 > g.1);
    let cells = run
        .gains
        .iter()
        .map(|(c, b, m, g)| format!("{c} {b:.2}->{m:.2} (+{g:.2})"))
        .collect::<Vec<_>>()
        .join(", ");
    let pass = ratio <= 0.5 && min_gain >= 2.0 && all_better && run.secs < 900.0;
    outcome(
        pass,
        format!(
            "{} steps in {:.0}s; loss {first:.4} -> {smoothed:.4} (last-100 mean, ratio {ratio:.3}); min gain {min_gain:.2} dB; {cells}",
            run.records.len(),
            run.secs
        ),
    )
}

fn c7_specialisation(run: &MainRun) -> Outcome {
    let ckpt = run.dir.path().join(CHECKPOINT_FILE);
    let analysis = match cmd_analyze(&ckpt, &[], None) {
        Ok(a) => a,
        Err(e) => return outcome(false, e.to_string()),
    };
    let mut per_domain: Vec<(Domain, Vec<f64>)> = Vec::new();
    for h in &analysis.domain_selection {
        let counts: Vec<f64> = h.counts.iter().map(|&c| c as f64).collect();
        match per_domain.iter_mut().find(|(d, _)| *d == h.domain) {
            Some((_, acc)) => acc.iter_mut().zip(&counts).for_each(|(a, c)| *a += c),
            None => per_domain.push((h.domain, counts)),
        }
    }
    for (_, c) in &mut per_domain {
        let s: f64 = c.iter().sum();
        c.iter_mut().for_each(|v| *v /= s);
    }
    let mut max_tv: f64 = 0.0;
    let mut pairs = Vec::new();
    for i in 0..per_domain.len() {
        for j in i + 1..per_domain.len() {
            let tv = 0.5 * per_domain[i].1.iter().zip(&per_domain[j].1).map(|(a, b)| (a - b).abs()).sum::<f64>();
            pairs.push(format!("{}-{} {tv:.3}", per_domain[i].0, per_domain[j].0));
            max_tv = max_tv.max(tv);
        }
    }
    let mut own_best = true;
    let mut rows = Vec::new();
    for (d, row) in &analysis.anchor_cosine {
        let own = row.iter().find(|(a, _)| a == d).map(|x| x.1).unwrap_or(f64::NEG_INFINITY);
        own_best &= row.iter().all(|(a, c)| a == d || own > *c);
        let others = row
            .iter()
            .filter(|(a, _)| a != d)
            .map(|(a, c)| format!("{a} {c:.3}"))
            .collect::<Vec<_>>()
            .join(" ");
        rows.push(format!("{d}: own {own:.3} vs {others}"));
    }
    outcome(
        max_tv >= 0.1 && own_best,
        format!("TV {}; max {max_tv:.3}; anchor cosine {}", pairs.join(", "), rows.join("; ")),
    )
}

fn losses(t: &mut Trainer, until: usize) -> Vec<f64> {
    let mut out = Vec::new();
    t.run(until, |_, r| {
        out.push(r.total);
        Ok(())
    })
    .expect("training step");
    out
}

fn c8_persistence(run: &MainRun) -> Outcome {
    let ckpt_path = run.dir.path().join(CHECKPOINT_FILE);
    let bytes = std::fs::read(&ckpt_path).unwrap();
    let again = Checkpoint::from_bytes(&bytes).and_then(|c| c.to_bytes());
    let round_trip = again.as_ref().is_ok_and(|b| *b == bytes);

    // resume: a shorter copy of the main configuration
    let mut cfg = main_train_config();
    cfg.steps = 150;
    let mut full = Trainer::new(cfg.clone()).unwrap();
    let reference = losses(&mut full, 150);
    let mut first = Trainer::new(cfg.clone()).unwrap();
    let mut resumed = losses(&mut first, 50);
    let ckpt = Checkpoint::from_bytes(&first.checkpoint("").to_bytes().unwrap()).unwrap();
    let mut second = Trainer::from_checkpoint(cfg, &ckpt).unwrap();
    resumed.extend(losses(&mut second, 150));
    let identical = resumed.len() == reference.len() && resumed.iter().zip(&reference).all(|(a, b)| a.to_bits() == b.to_bits());

    let (a, b) = (run.dir.path().join("eval_a.csv"), run.dir.path().join("eval_b.csv"));
    let evals = cmd_eval(&ckpt_path, &[], Some(&a)).and_then(|_| cmd_eval(&ckpt_path, &[], Some(&b)));
    let same_csv = evals.is_ok() && std::fs::read(&a).ok() == std::fs::read(&b).ok();
    outcome(
        round_trip && identical && same_csv,
        format!(
            "save->load->save identical {round_trip} ({} bytes); resumed at 50, {} losses bit-identical {identical}; eval CSV identical {same_csv}",
            bytes.len(),
            reference.len() - 50
        ),
    )
}

fn ablation_psnr(task: bool, domain: bool) -> f64 {
    let mut c = main_train_config();
    c.model.task_pool.enabled = task;
    c.model.domain_pool.enabled = domain;
    let mut t = Trainer::new(c).unwrap();
    t.run(usize::MAX, |_, _| Ok(())).unwrap();
    let m = t.evaluate(&t.eval_set().unwrap()).unwrap();
    m.iter().map(|c| c.psnr_db).sum::<f64>() / m.len() as f64
}

/// `both` is the criterion 5 run: same configuration, seed and step count.
fn c6_ablation(both: f64) -> Outcome {
    let task = ablation_psnr(true, false);
    let domain = ablation_psnr(false, true);
    let none = ablation_psnr(false, false);
    let pass = both >= task && both >= domain && task >= none && domain >= none && both - none >= 0.1;
    outcome(
        pass,
        format!(
            "mean eval PSNR both {both:.3}, task-only {task:.3}, domain-only {domain:.3}, none {none:.3}; both-none {:+.3} dB",
            both - none
        ),
    )
}

fn timed(id: usize, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let t0 = Instant::now();
    let o = f();
    report(id, name, &o, t0.elapsed().as_secs_f64())
}

const TRAINING: [(usize, &str); 4] = [
    (5, "end-to-end training"),
    (6, "ablation direction"),
    (7, "domain specialisation"),
    (8, "determinism and persistence"),
];

fn main() {
    let mut all = timed(1, "gradient suite", c1_gradients);
    all &= timed(2, "retrieval oracle", c2_retrieval);
    all &= timed(3, "formula invariants", c3_invariants);
    all &= timed(4, "DFT oracle", c4_dft);
    all &= timed(9, "metric correctness", c9_metrics);
    if std::env::var("DATPRL_ACCEPTANCE").as_deref() != Ok("full") {
        for (id, name) in TRAINING {
            println!("criterion {id} SKIP  {name}: set DATPRL_ACCEPTANCE=full to train");
        }
    } else {
        match train_main() {
            Ok(run) => {
                all &= timed(5, "end-to-end training", || c5_training(&run));
                all &= timed(7, "domain specialisation", || c7_specialisation(&run));
                all &= timed(8, "determinism and persistence", || c8_persistence(&run));
                all &= timed(6, "ablation direction", || c6_ablation(run.mean_psnr));
            }
            Err(e) => {
                for (id, name) in TRAINING {
                    all &= report(id, name, &outcome(false, format!("training failed: {e}")), 0.0);
                }
            }
        }
    }
    println!("acceptance: {}", if all { "all run criteria PASS" } else { "FAILURES above" });
    if !all {
        std::process::exit(1);
    }
}
