use std::f64::consts::PI;

use datprl_core::tensor::{check_gradient, cosine, finite_diff_grad, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn softmax_of(x: &[f64], t: f64) -> Vec<f64> {
    let tape = Tape::new();
    let v = tape.constant(Tensor::vector(x.to_vec())).unwrap();
    v.softmax(t).unwrap().value().data().to_vec()
}

/// exp ratios evaluated directly, shifted by the max for stability
fn softmax_oracle(x: &[f64], t: f64) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| ((v - m) / t).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

#[test]
fn softmax_reference_values() {
    let p = softmax_of(&[0.9, 0.5, 0.1], 1.0);
    // the quoted 5-digit values are approximate in the last digit
    for (got, want) in p.iter().zip([0.47179, 0.31624, 0.21199]) {
        assert!((got - want).abs() < 2e-5, "{got} vs {want}");
    }
    for (got, want) in p.iter().zip(softmax_oracle(&[0.9, 0.5, 0.1], 1.0)) {
        assert!((got - want).abs() < 1e-15);
    }
    for t in [0.1, 1.0, 7.0] {
        for v in softmax_of(&[0.4, 0.4, 0.4], t) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }
    // two-entry logistic: 1 / (1 + e^{-1000})
    let p = softmax_of(&[10.0, 0.0], 0.01);
    assert!(p[0] > 1.0 - 1e-8);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (m, k, n) in [(3, 3, 3), (1, 5, 2), (4, 7, 6)] {
        let a = Tensor::randn(&[m, k], 1.0, &mut rng);
        let b = Tensor::randn(&[k, n], 1.0, &mut rng);
        let tape = Tape::new();
        let c = tape
            .constant(a.clone())
            .unwrap()
            .matmul(tape.constant(b.clone()).unwrap())
            .unwrap()
            .value();
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.data()[i * k + p] * b.data()[p * n + j];
                }
                assert!((c.data()[i * n + j] - s).abs() < 1e-12);
            }
        }
    }
    let tape = Tape::new();
    let eye = tape.constant(Tensor::eye(2)).unwrap();
    let x = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap()).unwrap();
    assert_eq!(eye.matmul(x).unwrap().value().data(), &[1.0, 2.0, 3.0, 4.0]);
}

/// Literal `Σ_y Σ_x f(y,x) e^{-2πi(uy/h + vx/w)}`.
fn dft_oracle(img: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let mut re = vec![0.0; h * w];
    let mut im = vec![0.0; h * w];
    for u in 0..h {
        for v in 0..w {
            for y in 0..h {
                for x in 0..w {
                    let ph = -2.0 * PI * ((u * y) as f64 / h as f64 + (v * x) as f64 / w as f64);
                    re[u * w + v] += img[y * w + x] * ph.cos();
                    im[u * w + v] += img[y * w + x] * ph.sin();
                }
            }
        }
    }
    (re, im)
}

fn dft(img: &Tensor) -> (Tensor, Tensor) {
    let tape = Tape::new();
    let (re, im) = tape.constant(img.clone()).unwrap().dft2().unwrap();
    ((*re.value()).clone(), (*im.value()).clone())
}

#[test]
fn dft_matches_double_sum_on_fifty_images() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for _ in 0..50 {
        let img = Tensor::uniform(&[8, 8], -1.0, 1.0, &mut rng);
        let (re, im) = dft(&img);
        let (ore, oim) = dft_oracle(img.data(), 8, 8);
        for i in 0..64 {
            assert!((re.data()[i] - ore[i]).abs() < 1e-9);
            assert!((im.data()[i] - oim[i]).abs() < 1e-9);
        }
        // Parseval: Σ|F|² = hw Σ|f|²
        let spec: f64 = re.data().iter().chain(im.data()).map(|v| v * v).sum();
        let space: f64 = 64.0 * img.data().iter().map(|v| v * v).sum::<f64>();
        assert!((spec - space).abs() / space < 1e-6);
    }
}

#[test]
fn dft_special_images() {
    let (re, im) = dft(&Tensor::full(&[2, 4, 6], 0.7));
    for p in 0..2 {
        for i in 0..24 {
            let want = if i == 0 { 0.7 * 24.0 } else { 0.0 };
            assert!((re.data()[p * 24 + i] - want).abs() < 1e-10);
            assert!(im.data()[p * 24 + i].abs() < 1e-10);
        }
    }
    let mut imp = Tensor::zeros(&[5, 5]);
    imp.data_mut()[0] = 1.0;
    let (re, im) = dft(&imp);
    assert!(re.data().iter().all(|v| (v - 1.0).abs() < 1e-12));
    assert!(im.data().iter().all(|v| v.abs() < 1e-12));
}

#[test]
fn cosine_cases() {
    assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
    assert!((cosine(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]) - 1.0).abs() < 1e-15);
    assert!((cosine(&[0.3, -2.0], &[-0.3, 2.0]) + 1.0).abs() < 1e-15);
    assert_eq!(cosine(&[0.0, 0.0], &[1.0, 2.0]), 0.0);
}

#[test]
fn reductions_and_gradients() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0, 4.0, 5.0]), true).unwrap();
    let g = tape.backward(x.sum().unwrap()).unwrap();
    assert_eq!(g.wrt(x).unwrap().data(), &[1.0; 5]);

    let tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![0.5, -1.5, 2.0]), true).unwrap();
    let g = tape.backward(x.square().unwrap().sum().unwrap()).unwrap();
    assert_eq!(g.wrt(x).unwrap().data(), &[1.0, -3.0, 4.0]);

    let tape = Tape::new();
    let m = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap()).unwrap();
    assert_eq!(m.sum_axis(0).unwrap().value().data(), &[4.0, 6.0]);
    assert_eq!(tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0])).unwrap().mean().unwrap().item(), 2.0);
}

#[test]
fn finite_differences_match_softmax_jacobian() {
    let x = Tensor::vector(vec![0.9, 0.5, 0.1]);
    let p = softmax_oracle(x.data(), 1.0);
    let fd = finite_diff_grad(|t| softmax_oracle(t.data(), 1.0)[0], &x, 1e-6);
    for j in 0..3 {
        let exact = p[0] * (if j == 0 { 1.0 } else { 0.0 } - p[j]);
        assert!((fd.data()[j] - exact).abs() < 1e-6);
    }
    let q = finite_diff_grad(|t| t.data()[0] * t.data()[0], &Tensor::vector(vec![3.0]), 1e-6);
    assert!((q.data()[0] - 6.0).abs() < 1e-6);
}

#[test]
fn composed_expression_passes_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = Tensor::randn(&[3, 4], 1.0, &mut rng);
    let w = Tensor::randn(&[4, 2], 1.0, &mut rng);
    let report = check_gradient(
        |tape, x| {
            let w = tape.constant(w.clone())?;
            x.matmul(w)?.silu()?.softmax(0.7)?.xlogx()?.sum()
        },
        &x,
        1e-6,
        None,
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-5, "{report:?}");
}
