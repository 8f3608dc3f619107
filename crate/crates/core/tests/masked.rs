use edgefill_core::autodiff::Tape;
use edgefill_core::gradcheck;
use edgefill_core::masked::{mask_update, sconv, sconv_transpose, MaskNorm, MaskedFeature};
use edgefill_core::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_mask(n: usize, h: usize, w: usize, p: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(&[n, 1, h, w], |_| if rng.random::<f64>() < p { 1.0 } else { 0.0 })
}

/// Brute-force scan: valid iff any in-bounds window tap is valid.
fn dilate_oracle(m: &Tensor, k: usize, stride: usize, pad: usize) -> Tensor {
    let (n, _, h, w) = m.dims4().unwrap();
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; n * ho * wo];
    for s in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut any = false;
                for i in 0..k {
                    for j in 0..k {
                        let y = (oy * stride + i) as isize - pad as isize;
                        let x = (ox * stride + j) as isize - pad as isize;
                        if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
                            any |= m.data()[(s * h + y as usize) * w + x as usize] == 1.0;
                        }
                    }
                }
                out[(s * ho + oy) * wo + ox] = if any { 1.0 } else { 0.0 };
            }
        }
    }
    Tensor::new(&[n, 1, ho, wo], out).unwrap()
}

#[test]
fn all_ones_mask_reproduces_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let (c, f) = (rng.random_range(1..4), rng.random_range(1..4));
        let k = rng.random_range(1..5);
        let stride = rng.random_range(1..3);
        let dil = rng.random_range(1..3);
        // a window lying wholly in the padding is dead by definition
        let pad = rng.random_range(0..=(dil * (k - 1)).min(2));
        let h = dil * (k - 1) + 1 + rng.random_range(0..5);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::randn(&[2, c, h, h + 1], 1.0, &mut rng));
        let w = tape.constant(Tensor::randn(&[f, c, k, k], 1.0, &mut rng));
        let b = tape.constant(Tensor::randn(&[f], 1.0, &mut rng));
        let plain = tape.conv2d(x, w, Some(b), stride, pad, dil).unwrap();
        let mf = MaskedFeature::new(&tape, x, Tensor::ones(&[2, 1, h, h + 1])).unwrap();
        let out = sconv(&mut tape, &mf, w, b, stride, pad, dil, MaskNorm::Mean).unwrap();
        let d = tape.value(plain).max_abs_diff(tape.value(out.feature));
        assert!(d <= 1e-12, "k {k} s {stride} p {pad} d {dil}: {d}");
        assert!(out.mask.data().iter().all(|&v| v == 1.0));
    }
}

#[test]
fn single_pixel_mask_grows_to_block() {
    let mut m = Tensor::zeros(&[1, 1, 9, 9]);
    m.data_mut()[4 * 9 + 4] = 1.0;
    let out = mask_update(&m, 3, 3, 1, 1, 1).unwrap();
    assert_eq!(out.sum(), 9.0);
    assert_eq!(out, dilate_oracle(&m, 3, 1, 1));
}

#[test]
fn square_hole_closes_one_ring_per_layer() {
    for side in 1..10usize {
        let size = 17;
        let lo = (size - side) / 2;
        let inside = |v: usize| (lo..lo + side).contains(&v);
        let mut m = Tensor::from_fn(&[1, 1, size, size], |i| {
            if inside(i / size) && inside(i % size) {
                0.0
            } else {
                1.0
            }
        });
        for layer in 1..=side.div_ceil(2) {
            m = mask_update(&m, 3, 3, 1, 1, 1).unwrap();
            let holes = m.data().iter().filter(|&&v| v == 0.0).count();
            assert_eq!(holes, side.saturating_sub(2 * layer).pow(2), "side {side} layer {layer}");
        }
    }
}

#[test]
fn invalid_pixels_have_zero_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mask = random_mask(1, 6, 6, 0.5, &mut rng);
    let mask = Tensor::concat(&[&mask, &mask], 0).unwrap();
    let mut tape = Tape::new();
    let x = tape.param(Tensor::randn(&[2, 2, 6, 6], 1.0, &mut rng));
    let w = tape.param(Tensor::randn(&[3, 2, 3, 3], 1.0, &mut rng));
    let b = tape.param(Tensor::randn(&[3], 1.0, &mut rng));
    let mf = MaskedFeature::new(&tape, x, mask.clone()).unwrap();
    let out = sconv(&mut tape, &mf, w, b, 1, 1, 1, MaskNorm::Mean).unwrap();
    let sq = tape.mul(out.feature, out.feature).unwrap();
    let loss = tape.sum(sq);
    tape.backward(loss).unwrap();
    let g = tape.grad_tensor(x);
    for s in 0..2 {
        for c in 0..2 {
            for p in 0..36 {
                if mask.data()[s * 36 + p] == 0.0 {
                    assert_eq!(g.data()[(s * 2 + c) * 36 + p], 0.0);
                }
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn mask_update_matches_dilation(seed in 0u64..10_000, k in 1usize..5, stride in 1usize..3, pad in 0usize..3, p in 0.0f64..0.6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = random_mask(2, 9, 8, p, &mut rng);
        prop_assert_eq!(mask_update(&m, k, k, stride, pad, 1).unwrap(), dilate_oracle(&m, k, stride, pad));
    }

    #[test]
    fn stride_one_masks_never_shrink_validity(seed in 0u64..10_000, p in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = random_mask(1, 10, 10, p, &mut rng);
        let out = mask_update(&m, 3, 3, 1, 1, 1).unwrap();
        for (a, b) in m.data().iter().zip(out.data()) {
            prop_assert!(b >= a);
        }
    }

    #[test]
    fn invalid_values_do_not_reach_outputs(seed in 0u64..10_000, transpose in any::<bool>(), p in 0.1f64..0.9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mask = random_mask(1, 6, 7, p, &mut rng);
        let base = Tensor::randn(&[1, 2, 6, 7], 1.0, &mut rng);
        let noise = Tensor::randn(&[1, 2, 6, 7], 100.0, &mut rng);
        let perturbed = Tensor::from_fn(&[1, 2, 6, 7], |i| {
            if mask.data()[i % 42] == 0.0 { noise.data()[i] } else { base.data()[i] }
        });
        let wshape: &[usize] = if transpose { &[2, 3, 4, 4] } else { &[3, 2, 3, 3] };
        let w = Tensor::randn(wshape, 1.0, &mut rng);
        let b = Tensor::randn(&[3], 1.0, &mut rng);
        let run = |x: &Tensor| {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let (wv, bv) = (tape.constant(w.clone()), tape.constant(b.clone()));
            let mf = MaskedFeature::new(&tape, xv, mask.clone()).unwrap();
            let out = if transpose {
                sconv_transpose(&mut tape, &mf, wv, bv, 2, 1, MaskNorm::Mean).unwrap()
            } else {
                sconv(&mut tape, &mf, wv, bv, 1, 1, 1, MaskNorm::Mean).unwrap()
            };
            (tape.value(out.feature).clone(), out.mask)
        };
        prop_assert_eq!(run(&base), run(&perturbed));
    }

    #[test]
    fn sconv_gradients_match_finite_differences(seed in 0u64..10_000, transpose in any::<bool>(), sum_norm in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mask = random_mask(1, 5, 5, 0.5, &mut rng);
        let x = Tensor::randn(&[1, 2, 5, 5], 1.0, &mut rng);
        let wshape: &[usize] = if transpose { &[2, 2, 4, 4] } else { &[2, 2, 3, 3] };
        let w = Tensor::randn(wshape, 1.0, &mut rng);
        let b = Tensor::randn(&[2], 1.0, &mut rng);
        let norm = if sum_norm { MaskNorm::Sum } else { MaskNorm::Mean };
        let err = gradcheck::check(&[x, w, b], 1e-5, 1e-8, 64, |tp, v| {
            let mf = MaskedFeature::new(tp, v[0], mask.clone())?;
            let out = if transpose {
                sconv_transpose(tp, &mf, v[1], v[2], 2, 1, norm)?
            } else {
                sconv(tp, &mf, v[1], v[2], 1, 1, 1, norm)?
            };
            let y = tp.tanh(out.feature);
            Ok(tp.sum(y))
        }).unwrap().max_rel_error();
        prop_assert!(err < 1e-4, "rel err {}", err);
    }
}
