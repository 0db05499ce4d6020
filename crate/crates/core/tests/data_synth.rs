use datprl_core::data::{degrade, generate_hq, Domain, SyntheticSuite, TaskKind, TaskParams, TextOracle, MAX_ANCHOR_COSINE};
use datprl_core::tensor::cosine;
use datprl_core::trainer::{psnr, DataConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn suite() -> SyntheticSuite {
    SyntheticSuite::new(&DataConfig::default_roster(), TaskParams::default(), 64, 2024, 0.1).unwrap()
}

#[test]
fn images_are_well_formed() {
    let s = suite();
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    for d in Domain::ALL {
        let hq = generate_hq(d, 32, &mut rng).unwrap();
        assert_eq!(hq.shape(), &[3, 32, 32]);
        assert!(hq.data().iter().all(|v| (0.0..=1.0).contains(v)));
        for t in TaskKind::ALL {
            let lq = degrade(&hq, &s.task_spec(t), &mut rng).unwrap();
            assert_eq!(lq.shape(), hq.shape(), "{d:?} {t:?}");
            assert!(lq.data().iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
            assert_ne!(lq, hq, "{d:?} {t:?} left the image unchanged");
        }
    }
    assert!(generate_hq(Domain::Natural, 2, &mut rng).is_err());
}

#[test]
fn samples_are_reproducible() {
    let s = suite();
    let a = s.sample(Domain::Remote, TaskKind::Mask, 32, 9).unwrap();
    let b = s.sample(Domain::Remote, TaskKind::Mask, 32, 9).unwrap();
    assert_eq!((a.lq, a.hq, a.text_feature), (b.lq, b.hq, b.text_feature));
    let e1 = s.eval_set(16, 2, 1234).unwrap();
    let e2 = s.eval_set(16, 2, 1234).unwrap();
    assert_eq!(e1.len(), 12);
    for (x, y) in e1.iter().zip(&e2) {
        assert_eq!(x.lq, y.lq);
    }
}

#[test]
fn anchors_are_separated_and_recognisable() {
    for seed in 0..20 {
        let oracle = TextOracle::new(64, seed).unwrap();
        for (i, (_, a)) in oracle.anchors.iter().enumerate() {
            assert!((a.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-12);
            for (_, b) in &oracle.anchors[i + 1..] {
                assert!(cosine(a, b) < MAX_ANCHOR_COSINE);
            }
        }
    }
    let s = suite();
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let (mut hits, mut total) = (0, 0);
    for (d, t) in s.cells() {
        for _ in 0..100 {
            let f = s.oracle.text_feature(d, t, &mut rng, s.jitter).unwrap();
            let nearest = Domain::ALL
                .iter()
                .max_by(|x, y| {
                    cosine(f.data(), s.oracle.anchor(**x))
                        .partial_cmp(&cosine(f.data(), s.oracle.anchor(**y)))
                        .unwrap()
                })
                .unwrap();
            hits += (*nearest == d) as usize;
            total += 1;
        }
    }
    assert!(hits as f64 >= 0.95 * total as f64, "{hits}/{total}");
}

#[test]
fn batches_are_domain_balanced() {
    let s = suite();
    let mut rng = ChaCha8Rng::seed_from_u64(52);
    let count = |batch: &[datprl_core::data::SyntheticSample]| {
        Domain::ALL.map(|d| batch.iter().filter(|x| x.domain == d).count())
    };
    for _ in 0..5 {
        assert_eq!(count(&s.balanced_batch(12, 8, &mut rng).unwrap()), [4, 4, 4]);
        let mut c = count(&s.balanced_batch(7, 8, &mut rng).unwrap()).to_vec();
        c.sort();
        assert_eq!(c, vec![2, 2, 3]);
    }
    assert!(s.balanced_batch(2, 8, &mut rng).is_err());
    let batch = s.balanced_batch(12, 8, &mut rng).unwrap();
    for x in &batch {
        let spec = s.domains.iter().find(|d| d.domain == x.domain).unwrap();
        assert!(spec.tasks.contains(&x.task));
    }
}

#[test]
fn identity_psnr_is_in_a_learnable_band() {
    let s = suite();
    for size in [32, 64] {
        for (d, t) in s.cells() {
            let mean: f64 = (0..100)
                .map(|i| {
                    let x = s.sample(d, t, size, 1000 + i).unwrap();
                    psnr(&x.lq, &x.hq, 1.0).unwrap()
                })
                .sum::<f64>()
                / 100.0;
            assert!((12.0..=35.0).contains(&mean), "{d:?} {t:?} at {size}px: {mean:.2} dB");
        }
    }
}
