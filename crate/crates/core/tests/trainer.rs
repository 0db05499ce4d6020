use datprl_core::tensor::{ParamStore, Tensor};
use datprl_core::trainer::{adam_update, lr_schedule, mse, psnr, ssim, Adam, Checkpoint, OptimConfig, TrainConfig, Trainer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small(steps: usize) -> TrainConfig {
    let mut c = TrainConfig::default();
    c.model.backbone.channels = vec![4, 8, 12];
    c.model.dim = 8;
    c.data.train_size = 16;
    c.data.eval_size = 16;
    c.data.eval_per_cell = 2;
    c.batch_size = 3;
    c.steps = steps;
    c.optim.lr_init = 2e-3;
    c
}

#[test]
fn adam_first_step_moves_by_lr() {
    let mut p = [1.0, -2.0];
    let (mut m, mut v) = ([0.0; 2], [0.0; 2]);
    adam_update(&mut p, &[1.0, -3.0], &mut m, &mut v, 0.1, 0.9, 0.99, 1e-8, 1);
    assert!((p[0] - 0.9).abs() < 1e-7);
    assert!((p[1] + 1.9).abs() < 1e-7);

    let mut store = ParamStore::new();
    let id = store.add("w", Tensor::vector(vec![0.5]));
    let mut adam = Adam::new(&store, &OptimConfig::default());
    store.get_mut(id).grad = Tensor::vector(vec![1.0]);
    adam.step(&mut store, 0.1).unwrap();
    assert!((store.value(id).data()[0] - 0.4).abs() < 1e-7);
    assert_eq!(adam.t, 1);
}

#[test]
fn cosine_schedule() {
    let (hi, lo) = (4e-4, 1e-6);
    assert_eq!(lr_schedule(0, 100, hi, lo).unwrap(), hi);
    assert!((lr_schedule(100, 100, hi, lo).unwrap() - lo).abs() < 1e-18);
    assert!((lr_schedule(50, 100, hi, lo).unwrap() - (hi + lo) / 2.0).abs() < 1e-18);
    let lrs: Vec<f64> = (0..=100).map(|s| lr_schedule(s, 100, hi, lo).unwrap()).collect();
    assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    assert!(lr_schedule(101, 100, hi, lo).is_err());
}

#[test]
fn psnr_closed_forms() {
    let a = Tensor::zeros(&[3, 4, 4]);
    let b = Tensor::full(&[3, 4, 4], 0.1);
    assert!((mse(&a, &b).unwrap() - 0.01).abs() < 1e-15);
    assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-12);
    let c = Tensor::full(&[3, 4, 4], 0.01);
    assert!((psnr(&a, &c, 1.0).unwrap() - 40.0).abs() < 1e-9);
    assert!(psnr(&a, &b, 0.0).is_err());
    assert!(psnr(&a, &Tensor::zeros(&[3, 4, 5]), 1.0).is_err());
}

#[test]
fn ssim_properties() {
    let mut rng = ChaCha8Rng::seed_from_u64(60);
    for i in 0..100 {
        let x = Tensor::uniform(&[3, 16, 16], 0.0, 1.0, &mut rng);
        let y = if i % 4 == 0 {
            x.map(|v| 1.0 - v)
        } else {
            Tensor::uniform(&[3, 16, 16], 0.0, 1.0, &mut rng)
        };
        assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        let (a, b) = (ssim(&x, &y).unwrap(), ssim(&y, &x).unwrap());
        assert!((a - b).abs() < 1e-12);
        assert!((-1.0..=1.0).contains(&a));
    }
    assert!(ssim(&Tensor::zeros(&[3, 8, 8]), &Tensor::zeros(&[3, 8, 8])).is_err());
}

#[test]
fn breakdown_reconstructs_the_objective() {
    let mut t = Trainer::new(small(10)).unwrap();
    t.model.perturb_parameters(0.1, &mut ChaCha8Rng::seed_from_u64(3));
    let batch = t.next_batch().unwrap();
    let (total, terms, _) = t.accumulate_gradients(&batch).unwrap();
    assert!((terms.total(&t.config.weights) - total).abs() < 1e-12);
    assert!((t.objective(&batch).unwrap() - total).abs() < 1e-12);
    assert!(terms.pix > 0.0 && terms.fft > 0.0 && terms.align > 0.0);
    assert!(terms.bal_task >= 0.0 && terms.bal_domain >= 0.0);
}

fn losses(t: &mut Trainer, until: usize) -> Vec<f64> {
    let mut out = Vec::new();
    t.run(until, |_, r| {
        out.push(r.total);
        Ok(())
    })
    .unwrap();
    out
}

#[test]
fn checkpoint_round_trip_and_resume() {
    let cfg = small(120);
    let mut full = Trainer::new(cfg.clone()).unwrap();
    let reference = losses(&mut full, 120);

    let mut first = Trainer::new(cfg.clone()).unwrap();
    let mut resumed_losses = losses(&mut first, 20);
    let bytes = first.checkpoint("cfg").to_bytes().unwrap();
    let ckpt = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(ckpt.to_bytes().unwrap(), bytes);
    let mut second = Trainer::from_checkpoint(cfg, &ckpt).unwrap();
    assert_eq!(second.step(), 20);
    resumed_losses.extend(losses(&mut second, 120));
    assert_eq!(resumed_losses.len(), 120);
    for (a, b) in reference.iter().zip(&resumed_losses) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
    assert_eq!(second.checkpoint("cfg").to_bytes().unwrap(), full.checkpoint("cfg").to_bytes().unwrap());
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let t = Trainer::new(small(5)).unwrap();
    let bytes = t.checkpoint("x").to_bytes().unwrap();
    let mut flipped = bytes.clone();
    flipped[bytes.len() / 2] ^= 0x10;
    assert!(Checkpoint::from_bytes(&flipped).unwrap_err().to_string().contains("checksum"));
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 9]).is_err());
    assert!(Checkpoint::from_bytes(b"NOPE").is_err());

    let mut big = small(5);
    big.model.domain_pool.size = 15;
    let ckpt = Trainer::new(big).unwrap().checkpoint("x");
    let err = Trainer::from_checkpoint(small(5), &ckpt).err().unwrap().to_string();
    assert!(err.contains("pools.domain"), "{err}");
}

#[test]
fn short_run_reduces_the_loss() {
    let mut t = Trainer::new(small(150)).unwrap();
    let l = losses(&mut t, 150);
    let head: f64 = l[..10].iter().sum::<f64>() / 10.0;
    let tail: f64 = l[140..].iter().sum::<f64>() / 10.0;
    assert!(tail < 0.8 * head, "{head} -> {tail}");
    assert!(l.iter().all(|v| v.is_finite()));
}
