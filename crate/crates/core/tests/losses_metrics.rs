use edgefill_core::autodiff::Tape;
use edgefill_core::gradcheck;
use edgefill_core::losses::{self, FeatureExtractor, LossTerms, LossWeights};
use edgefill_core::metrics::{self, fid, psnr, ssim};
use edgefill_core::Tensor;
use nalgebra::{DMatrix, SymmetricEigen};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn scalar(tape: &Tape, v: edgefill_core::autodiff::Var) -> f64 {
    tape.value(v).item()
}

#[test]
fn l1_examples() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::new(&[2], vec![0.0, 2.0]).unwrap());
    let b = tape.constant(Tensor::new(&[2], vec![1.0, 1.0]).unwrap());
    let l = losses::l1(&mut tape, a, b).unwrap();
    assert_eq!(scalar(&tape, l), 1.0);
    let l = losses::l1(&mut tape, a, a).unwrap();
    assert_eq!(scalar(&tape, l), 0.0);
    let z = tape.constant(Tensor::zeros(&[3, 3]));
    let o = tape.constant(Tensor::ones(&[3, 3]));
    let l = losses::l1(&mut tape, z, o).unwrap();
    assert_eq!(scalar(&tape, l), 1.0);
}

#[test]
fn adversarial_closed_forms() {
    let mut tape = Tape::new();
    let half = tape.constant(Tensor::zeros(&[1, 1, 4, 4]));
    let d = losses::discriminator_loss(&mut tape, half, half).unwrap();
    assert!((scalar(&tape, d) - 2.0 * 2f64.ln()).abs() < 1e-12);

    let real = tape.constant(Tensor::full(&[4], 40.0));
    let fake = tape.constant(Tensor::full(&[4], -40.0));
    let d = losses::discriminator_loss(&mut tape, real, fake).unwrap();
    assert!(scalar(&tape, d) < 1e-15 && scalar(&tape, d) >= 0.0);

    // extreme logits stay finite
    let big = tape.constant(Tensor::full(&[2], 1e4));
    let d = losses::discriminator_loss(&mut tape, fake, big).unwrap();
    assert!(scalar(&tape, d).is_finite());

    let mut last = f64::INFINITY;
    for i in -20..=20 {
        let f = tape.constant(Tensor::full(&[1], i as f64 * 0.5));
        let g = losses::generator_adv_loss(&mut tape, f);
        let v = scalar(&tape, g);
        assert!(v < last);
        last = v;
    }
}

#[test]
fn perceptual_basics() {
    let fx = FeatureExtractor::random(3, 7);
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::randn(&[1, 3, 16, 16], 1.0, &mut rng(1)));
    let b = tape.constant(Tensor::randn(&[1, 3, 16, 16], 1.0, &mut rng(2)));
    let same = losses::perceptual(&mut tape, a, a, &fx).unwrap();
    assert_eq!(scalar(&tape, same), 0.0);
    let diff = losses::perceptual(&mut tape, a, b, &fx).unwrap();
    assert!(scalar(&tape, diff) > 0.0);

    let id = FeatureExtractor::identity();
    let p = losses::perceptual(&mut tape, a, b, &id).unwrap();
    let l = losses::l1(&mut tape, a, b).unwrap();
    assert!((scalar(&tape, p) - scalar(&tape, l)).abs() < 1e-15);
}

#[test]
fn gram_properties() {
    let mut tape = Tape::new();
    let mut one_hot = Tensor::zeros(&[1, 3, 4, 5]);
    one_hot.data_mut()[7] = 1.0;
    let x = tape.constant(one_hot);
    let g = tape.gram(x).unwrap();
    let gv = tape.value(g);
    assert_eq!(gv.shape(), &[1, 3, 3]);
    assert!((gv.data()[0] - 1.0 / 60.0).abs() < 1e-15);
    assert!(gv.data()[1..].iter().all(|&v| v == 0.0));

    let z = tape.constant(Tensor::zeros(&[2, 4, 3, 3]));
    let gz = tape.gram(z).unwrap();
    assert!(tape.value(gz).data().iter().all(|&v| v == 0.0));

    let r = tape.constant(Tensor::randn(&[1, 5, 6, 6], 1.0, &mut rng(3)));
    let gr = tape.gram(r).unwrap();
    let m = DMatrix::from_row_slice(5, 5, tape.value(gr).data());
    assert!((&m - m.transpose()).abs().max() < 1e-14);
    let eig = SymmetricEigen::new(m);
    assert!(eig.eigenvalues.iter().all(|&v| v > -1e-12));
}

fn sorted_eigs(g: &[f64], c: usize) -> Vec<f64> {
    let mut e: Vec<f64> = SymmetricEigen::new(DMatrix::from_row_slice(c, c, g))
        .eigenvalues
        .iter()
        .copied()
        .collect();
    e.sort_by(|a, b| a.partial_cmp(b).unwrap());
    e
}

#[test]
fn style_basics() {
    let fx = FeatureExtractor::random(3, 5);
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::randn(&[1, 3, 16, 16], 1.0, &mut rng(4)));
    let b = tape.constant(Tensor::randn(&[1, 3, 16, 16], 1.0, &mut rng(5)));
    let s = losses::style(&mut tape, a, a, &fx).unwrap();
    assert_eq!(scalar(&tape, s), 0.0);
    let ab = losses::style(&mut tape, a, b, &fx).unwrap();
    let ba = losses::style(&mut tape, b, a, &fx).unwrap();
    assert_eq!(scalar(&tape, ab), scalar(&tape, ba));
    assert!(scalar(&tape, ab) > 0.0);

    // permuting channels conjugates the Gram matrix by a permutation
    let x = Tensor::randn(&[1, 4, 5, 5], 1.0, &mut rng(6));
    let perm = [2usize, 0, 3, 1];
    let parts: Vec<Tensor> = perm.iter().map(|&c| x.narrow(1, c, 1).unwrap()).collect();
    let xp = Tensor::concat(&parts.iter().collect::<Vec<_>>(), 1).unwrap();
    let (xv, xpv) = (tape.constant(x), tape.constant(xp));
    let g1 = tape.gram(xv).unwrap();
    let g2 = tape.gram(xpv).unwrap();
    let (e1, e2) = (sorted_eigs(tape.value(g1).data(), 4), sorted_eigs(tape.value(g2).data(), 4));
    for (p, q) in e1.iter().zip(&e2) {
        assert!((p - q).abs() < 1e-12);
    }
}

#[test]
fn total_loss_examples() {
    let mut tape = Tape::new();
    let one = tape.constant(Tensor::scalar(1.0));
    let zero = tape.constant(Tensor::scalar(0.0));
    let t = LossTerms {
        l1: one,
        adv: one,
        perc: one,
        style: one,
    };
    let total = losses::total_g2_loss(&mut tape, &t, &LossWeights::default()).unwrap();
    assert!((scalar(&tape, total) - 251.2).abs() < 1e-12);
    let zt = LossTerms {
        l1: zero,
        adv: zero,
        perc: zero,
        style: zero,
    };
    let total = losses::total_g2_loss(&mut tape, &zt, &LossWeights::default()).unwrap();
    assert_eq!(scalar(&tape, total), 0.0);
    let zw = LossWeights {
        l1: 0.0,
        adv: 0.0,
        perc: 0.0,
        style: 0.0,
    };
    let total = losses::total_g2_loss(&mut tape, &t, &zw).unwrap();
    assert_eq!(scalar(&tape, total), 0.0);
}

#[test]
fn loss_gradients_match_finite_differences() {
    let fx = FeatureExtractor::random(3, 9);
    let pred = Tensor::randn(&[1, 3, 8, 8], 0.5, &mut rng(10));
    let gt = Tensor::randn(&[1, 3, 8, 8], 0.5, &mut rng(11));
    let logits = Tensor::randn(&[1, 1, 3, 3], 1.0, &mut rng(12));
    let check = |name: &str, inputs: &[Tensor], f: &dyn Fn(&mut Tape, &[edgefill_core::autodiff::Var]) -> edgefill_core::Result<edgefill_core::autodiff::Var>| {
        let err = gradcheck::check(inputs, 1e-5, 1e-8, 64, f).unwrap().max_rel_error();
        assert!(err < 1e-3, "{name}: {err}");
    };
    check("l1", &[pred.clone(), gt.clone()], &|tp, v| losses::l1(tp, v[0], v[1]));
    check("adv d", &[logits.clone(), logits.map(|v| -v)], &|tp, v| losses::discriminator_loss(tp, v[0], v[1]));
    check("adv g", &[logits.clone()], &|tp, v| Ok(losses::generator_adv_loss(tp, v[0])));
    check("perceptual", &[pred.clone(), gt.clone()], &|tp, v| losses::perceptual(tp, v[0], v[1], &fx));
    check("style", &[pred.clone(), gt.clone()], &|tp, v| losses::style(tp, v[0], v[1], &fx));
    check("total", &[pred, gt, logits], &|tp, v| {
        let terms = LossTerms {
            l1: losses::l1(tp, v[0], v[1])?,
            adv: losses::generator_adv_loss(tp, v[2]),
            perc: losses::perceptual(tp, v[0], v[1], &fx)?,
            style: losses::style(tp, v[0], v[1], &fx)?,
        };
        losses::total_g2_loss(tp, &terms, &LossWeights::default())
    });
}

/// Direct double loop over every 11×11 window with 2-D Gaussian weights.
fn ssim_reference(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let s = 1.5f64;
    let mut win = [[0.0f64; 11]; 11];
    let mut tot = 0.0;
    for (i, row) in win.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(di * di + dj * dj) / (2.0 * s * s)).exp();
            tot += *v;
        }
    }
    let (c1, c2) = ((0.01f64 * 255.0).powi(2), (0.03f64 * 255.0).powi(2));
    let mut acc = 0.0;
    let mut count = 0;
    for y in 0..=h - 11 {
        for x in 0..=w - 11 {
            let (mut ma, mut mb) = (0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    let k = win[i][j] / tot;
                    ma += k * a[(y + i) * w + x + j];
                    mb += k * b[(y + i) * w + x + j];
                }
            }
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    let k = win[i][j] / tot;
                    let (p, q) = (a[(y + i) * w + x + j] - ma, b[(y + i) * w + x + j] - mb);
                    va += k * p * p;
                    vb += k * q * q;
                    cov += k * p * q;
                }
            }
            acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    acc / count as f64
}

fn psnr_reference(a: &[f64], b: &[f64]) -> f64 {
    let mut se = 0.0;
    for i in 0..a.len() {
        se += (a[i] - b[i]).powi(2);
    }
    10.0 * (255.0f64.powi(2) / (se / a.len() as f64)).log10()
}

#[test]
fn metric_closed_forms() {
    let a: Vec<f64> = (0..64 * 64).map(|i| (i % 200) as f64).collect();
    let b: Vec<f64> = a.iter().map(|v| v + 1.0).collect();
    let p = psnr(&a, &b, 255.0).unwrap();
    assert!((p - 48.13).abs() < 0.01, "{p}");
    let z = vec![0.0; 16];
    assert_eq!(psnr(&z, &vec![255.0; 16], 255.0).unwrap(), 0.0);

    let img = Tensor::from_fn(&[3, 20, 20], |i| ((i * 37) % 256) as f64);
    assert_eq!(ssim(&img, &img).unwrap(), 1.0);
    let neg = img.map(|v| 255.0 - v);
    assert!(ssim(&img, &neg).unwrap() < 1.0);

    let c = Tensor::full(&[16, 16], 100.0);
    let c10 = Tensor::full(&[16, 16], 110.0);
    let c1 = (0.01f64 * 255.0).powi(2);
    let expect = (2.0 * 100.0 * 110.0 + c1) / (100.0f64.powi(2) + 110.0f64.powi(2) + c1);
    assert!((ssim(&c, &c10).unwrap() - expect).abs() < 1e-9);
}

#[test]
fn fid_closed_forms() {
    let mut r = rng(20);
    let x: Vec<Vec<f64>> = (0..50).map(|_| (0..4).map(|_| r.sample(StandardNormal)).collect()).collect();
    let same = fid(&x, &x, false).unwrap();
    assert!(same.value < 1e-6, "{}", same.value);
    assert!(!same.regularized);

    let n = 10_000;
    let a: Vec<Vec<f64>> = (0..n).map(|_| vec![r.sample(StandardNormal)]).collect();
    let b: Vec<Vec<f64>> = (0..n).map(|_| vec![1.0 + r.sample::<f64, _>(StandardNormal)]).collect();
    let v = fid(&a, &b, false).unwrap().value;
    assert!((v - 1.0).abs() < 0.05, "{v}");

    // exact sample moments (0, 1) and (1, 1): ±1 and 1 ± 1 populations
    let p: Vec<Vec<f64>> = (0..4).map(|i| vec![if i % 2 == 0 { 1.0 } else { -1.0 }]).collect();
    let q: Vec<Vec<f64>> = p.iter().map(|v| vec![v[0] + 1.0]).collect();
    let v = fid(&p, &q, false).unwrap().value;
    assert!((v - 1.0).abs() < 1e-6, "{v}");
    let shifted: Vec<Vec<f64>> = p.iter().map(|v| vec![v[0] + 2.0]).collect();
    assert!((fid(&p, &shifted, true).unwrap().value - 2.0).abs() < 1e-6);
    assert!((fid(&p, &shifted, false).unwrap().value - 4.0).abs() < 1e-6);
}

#[test]
fn fid_regularises_singular_covariance() {
    let x: Vec<Vec<f64>> = (0..3).map(|i| vec![i as f64, 2.0 * i as f64, 0.0]).collect();
    let rep = fid(&x, &x, false).unwrap();
    assert!(rep.regularized);
    assert!(rep.value < 1e-6);
    assert!(fid(&x[..1], &x, false).is_err());
}

#[test]
fn embedded_features_feed_fid() {
    let fx = FeatureExtractor::random(3, 1);
    let imgs = Tensor::randn(&[4, 3, 16, 16], 1.0, &mut rng(3));
    let e = fx.embed(&imgs).unwrap();
    let rep = fid(&e, &e, false).unwrap();
    assert!(rep.value < 1e-6);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn psnr_ssim_match_reference(seed in 0u64..10_000) {
        let mut r = rng(seed);
        let a: Vec<f64> = (0..256).map(|_| r.random_range(0..=255) as f64).collect();
        let b: Vec<f64> = (0..256).map(|_| r.random_range(0..=255) as f64).collect();
        let s = metrics::ssim_plane(&a, &b, 16, 16).unwrap();
        prop_assert!((s - ssim_reference(&a, &b, 16, 16)).abs() < 1e-9);
        prop_assert!((psnr(&a, &b, 255.0).unwrap() - psnr_reference(&a, &b)).abs() < 1e-9);
        prop_assert!((-1.0..=1.0).contains(&s));
    }

    #[test]
    fn fid_is_symmetric_and_zero_on_self(seed in 0u64..10_000, d in 1usize..5) {
        let mut r = rng(seed);
        let x: Vec<Vec<f64>> = (0..12).map(|_| (0..d).map(|_| r.sample(StandardNormal)).collect()).collect();
        let y: Vec<Vec<f64>> = (0..9).map(|_| (0..d).map(|_| 0.5 + 2.0 * r.sample::<f64, _>(StandardNormal)).collect()).collect();
        let xy = fid(&x, &y, false).unwrap().value;
        let yx = fid(&y, &x, false).unwrap().value;
        prop_assert!((xy - yx).abs() < 1e-8, "{} vs {}", xy, yx);
        prop_assert!(fid(&x, &x, false).unwrap().value < 1e-6);
        prop_assert!(xy >= 0.0);
    }

    #[test]
    fn losses_are_nonnegative(seed in 0u64..10_000) {
        let fx = FeatureExtractor::random(3, 2);
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::randn(&[1, 3, 8, 8], 1.0, &mut rng(seed)));
        let b = tape.constant(Tensor::randn(&[1, 3, 8, 8], 1.0, &mut rng(seed + 1)));
        let p = losses::perceptual(&mut tape, a, b, &fx).unwrap();
        let s = losses::style(&mut tape, a, b, &fx).unwrap();
        let l = losses::l1(&mut tape, a, b).unwrap();
        prop_assert!(scalar(&tape, p) >= 0.0 && scalar(&tape, s) >= 0.0 && scalar(&tape, l) >= 0.0);
    }
}
