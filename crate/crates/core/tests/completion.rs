use edgefill_core::autodiff::Tape;
use edgefill_core::completion::{
    compose_inputs, composite_output, CompletionConfig, CompletionGenerator, CompletionModel, CompositionInputs,
    G2Config, NetworkSpec,
};
use edgefill_core::gradcheck;
use edgefill_core::losses::{self, FeatureExtractor, LossTerms, LossWeights};
use edgefill_core::masked::ConvKind;
use edgefill_core::metrics::psnr;
use edgefill_core::nn::{Binder, Mode, ParamStore, PatchGan};
use edgefill_core::{Error, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TABLE: [&str; 11] = [
    "5(C)-4(C)-5(C)",
    "6(C)-2(C)-6(C)",
    "4(C)-6(C)-4(C)",
    "7(C)-0(C)-7(C)",
    "5(CM)-4(C)-5(CM)",
    "6(CM)-2(C)-6(CM)",
    "4(CM)-6(C)-4(CM)",
    "7(CM)-7(CM)",
    "5(CM)-4(CM)-5(CM)",
    "6(CM)-2(CM)-6(CM)",
    "4(CM)-6(CM)-4(CM)",
];

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn structure_strings_round_trip() {
    for s in TABLE {
        let spec = NetworkSpec::parse(s).unwrap();
        assert_eq!(spec.to_string(), s);
        assert_eq!(spec.down.count, spec.up.count);
    }
    let best = NetworkSpec::parse("4(CM)-6(CM)-4(CM)").unwrap();
    assert_eq!((best.depth(), best.residual_blocks(), best.residual_kind()), (4, 6, ConvKind::CM));
    let base = NetworkSpec::parse("7(C)-0(C)-7(C)").unwrap();
    assert_eq!((base.depth(), base.residual_blocks(), base.down.kind), (7, 0, ConvKind::C));
    assert!(base.residual.is_some());
    let two = NetworkSpec::parse("7(CM)-7(CM)").unwrap();
    assert_eq!((two.depth(), two.residual), (7, None));
}

fn parse_error(s: &str) -> (usize, String) {
    match NetworkSpec::parse(s) {
        Err(Error::Parse { position, message }) => (position, message),
        other => panic!("{s:?}: expected a parse error, got {other:?}"),
    }
}

#[test]
fn malformed_structures_are_located() {
    let cases: [(&str, usize, &str); 9] = [
        ("4(CM)-6(XX)-4(CM)", 8, "segment 2"),
        ("-4(C)-4(C)", 0, "negative"),
        ("4(C)--3(C)-4(C)", 5, "negative"),
        ("4(CM)-6(CM)-5(CM)", 12, "segment 3"),
        ("4(C)-5(C)", 5, "segment 2"),
        ("4(C)", 4, "at least 2"),
        ("4(C)-1(C)-4(C)-1(C)", 15, "at most 3"),
        ("4[C]-4(C)", 1, "segment 1"),
        ("(C)-4(C)", 0, "count"),
    ];
    for (s, pos, needle) in cases {
        let (p, msg) = parse_error(s);
        assert_eq!(p, pos, "{s:?}: {msg}");
        assert!(msg.contains(needle), "{s:?}: {msg}");
    }
    assert!(parse_error("").1.contains("count"));
    let full = NetworkSpec::parse("4(CM)-6(CQ)-4(CM)").unwrap_err().to_string();
    assert!(full.contains("position 8") && full.contains("\"CQ\""), "{full}");
}

fn random_inputs(n: usize, size: usize, seed: u64) -> CompositionInputs {
    let mut r = rng(seed);
    let bin = |r: &mut ChaCha8Rng, p: f64| Tensor::from_fn(&[n, 1, size, size], |_| if r.random_bool(p) { 1.0 } else { 0.0 });
    CompositionInputs {
        image: Tensor::rand_uniform(&[n, 3, size, size], -1.0, 1.0, &mut r),
        mask: bin(&mut r, 0.3),
        edges_gt: bin(&mut r, 0.1),
        edges_pred: Tensor::rand_uniform(&[n, 1, size, size], 0.0, 1.0, &mut r),
    }
}

#[test]
fn composition_selects_per_pixel() {
    let mut ci = random_inputs(2, 6, 1);
    ci.mask = Tensor::zeros(ci.mask.shape());
    let c = compose_inputs(&ci).unwrap();
    assert_eq!(c.damaged, ci.image);
    assert_eq!(c.c_comp, ci.edges_gt);
    assert!(c.validity.data().iter().all(|&v| v == 1.0));

    ci.mask = Tensor::ones(ci.mask.shape());
    let c = compose_inputs(&ci).unwrap();
    assert!(c.damaged.data().iter().all(|&v| v == 0.0));
    assert_eq!(c.c_comp, ci.edges_pred);

    ci.mask = Tensor::from_fn(ci.mask.shape(), |i| ((i / 6 + i % 6) % 2) as f64);
    let c = compose_inputs(&ci).unwrap();
    let plane = 36;
    for s in 0..2 {
        for p in 0..plane {
            let hole = ci.mask.data()[s * plane + p] == 1.0;
            let e = if hole { ci.edges_pred.data()[s * plane + p] } else { ci.edges_gt.data()[s * plane + p] };
            assert_eq!(c.c_comp.data()[s * plane + p], e);
            for ch in 0..3 {
                let i = (s * 3 + ch) * plane + p;
                assert_eq!(c.damaged.data()[i], if hole { 0.0 } else { ci.image.data()[i] });
            }
        }
    }
}

#[test]
fn composition_rejects_bad_inputs() {
    let mut ci = random_inputs(1, 4, 2);
    ci.mask.data_mut()[3] = 0.5;
    assert!(matches!(compose_inputs(&ci), Err(Error::Mask(_))));
    let mut ci = random_inputs(1, 4, 2);
    ci.edges_gt = Tensor::zeros(&[1, 1, 4, 5]);
    assert!(matches!(compose_inputs(&ci), Err(Error::Shape(_))));
}

#[test]
fn composite_output_identities() {
    let ci = random_inputs(1, 5, 3);
    let pred = Tensor::rand_uniform(ci.image.shape(), -1.0, 1.0, &mut rng(4));
    let zeros = Tensor::zeros(ci.mask.shape());
    let ones = Tensor::ones(ci.mask.shape());
    assert_eq!(composite_output(&pred, &ci.image, &zeros).unwrap(), ci.image);
    assert_eq!(composite_output(&pred, &ci.image, &ones).unwrap(), pred);
}

fn small_config(spec: &str, base: usize) -> G2Config {
    G2Config {
        spec: spec.parse().unwrap(),
        base,
        ..G2Config::default()
    }
}

fn run_g2(
    g: &CompletionGenerator,
    store: &mut ParamStore,
    mode: Mode,
    damaged: &Tensor,
    c_comp: &Tensor,
    validity: &Tensor,
) -> Tensor {
    let mut tape = Tape::new();
    let mut b = Binder::new(store, mode);
    let d = tape.constant(damaged.clone());
    let c = tape.constant(c_comp.clone());
    let out = g.forward(&mut tape, &mut b, d, Some(c), validity).unwrap();
    tape.value(out.image).clone()
}

#[test]
fn default_generator_shape_range_and_links() {
    let cfg = small_config("4(CM)-6(CM)-4(CM)", 4);
    let mut store = ParamStore::new();
    let g = CompletionGenerator::new(&mut store, &mut rng(1), "g", cfg).unwrap();
    assert_eq!(g.skip_links(), 4);
    let ci = random_inputs(2, 32, 5);
    let c = compose_inputs(&ci).unwrap();
    let y = run_g2(&g, &mut store, Mode::TRAIN, &c.damaged, &c.c_comp, &c.validity);
    assert_eq!(y.shape(), &[2, 3, 32, 32]);
    assert!(y.data().iter().all(|v| v.abs() <= 1.0 && v.is_finite()));
    let no_skip = G2Config {
        use_skip_links: false,
        ..cfg
    };
    let g = CompletionGenerator::new(&mut ParamStore::new(), &mut rng(1), "g", no_skip).unwrap();
    assert_eq!(g.skip_links(), 0);
}

#[test]
fn indivisible_sizes_are_rejected_with_required_multiple() {
    let cfg = small_config("4(CM)-6(CM)-4(CM)", 2);
    let mut store = ParamStore::new();
    let g = CompletionGenerator::new(&mut store, &mut rng(1), "g", cfg).unwrap();
    let ci = random_inputs(1, 24, 1);
    let c = compose_inputs(&ci).unwrap();
    let mut tape = Tape::new();
    let mut b = Binder::new(&mut store, Mode::EVAL);
    let d = tape.constant(c.damaged);
    let e = tape.constant(c.c_comp);
    let err = g.forward(&mut tape, &mut b, d, Some(e), &c.validity).err().unwrap();
    assert!(err.to_string().contains("multiples of 16"), "{err}");
    let deep = small_config("7(C)-0(C)-7(C)", 1);
    assert!(deep.check_input(64, 64).is_err());
    assert!(deep.check_input(128, 128).is_ok());
}

#[test]
fn all_valid_masks_make_cm_match_c() {
    for spec in ["3(CM)-2(CM)-3(CM)", "2(CM)-2(CM)"] {
        let cm = small_config(spec, 3);
        let plain = G2Config {
            spec: cm.spec.with_kind(ConvKind::C),
            ..cm
        };
        let mut s1 = ParamStore::new();
        let mut s2 = ParamStore::new();
        let g1 = CompletionGenerator::new(&mut s1, &mut rng(7), "g", cm).unwrap();
        let g2 = CompletionGenerator::new(&mut s2, &mut rng(7), "g", plain).unwrap();
        assert_eq!(s1, s2);
        let mut ci = random_inputs(2, 16, 8);
        ci.mask = Tensor::zeros(ci.mask.shape());
        let c = compose_inputs(&ci).unwrap();
        let a = run_g2(&g1, &mut s1, Mode::TRAIN, &c.damaged, &c.c_comp, &c.validity);
        let b = run_g2(&g2, &mut s2, Mode::TRAIN, &c.damaged, &c.c_comp, &c.validity);
        assert!(a.max_abs_diff(&b) < 1e-12, "{spec}: {}", a.max_abs_diff(&b));
    }
}

#[test]
fn hole_pixels_never_reach_the_output() {
    let cfg = small_config("4(CM)-2(CM)-4(CM)", 4);
    let mut store = ParamStore::new();
    let g = CompletionGenerator::new(&mut store, &mut rng(2), "g", cfg).unwrap();
    let ci = random_inputs(2, 32, 9);
    let c = compose_inputs(&ci).unwrap();
    let mut r = rng(10);
    let perturb = |t: &Tensor, r: &mut ChaCha8Rng| {
        let ch = t.shape()[1];
        let m = c.validity.repeat_channels(ch).unwrap();
        let noise = Tensor::rand_uniform(t.shape(), -5.0, 5.0, r);
        let d = t.zip_map(&noise, |v, z| v + z).unwrap();
        d.zip_map(&m, |v, valid| if valid == 0.0 { v } else { f64::NAN }).unwrap().zip_map(t, |p, o| if p.is_nan() { o } else { p }).unwrap()
    };
    for mode in [Mode::TRAIN, Mode::EVAL] {
        let mut s = store.clone();
        let base = run_g2(&g, &mut s, Mode { update_state: false, ..mode }, &c.damaged, &c.c_comp, &c.validity);
        for _ in 0..3 {
            let d = perturb(&c.damaged, &mut r);
            let e = perturb(&c.c_comp, &mut r);
            let y = run_g2(&g, &mut s, Mode { update_state: false, ..mode }, &d, &e, &c.validity);
            assert_eq!(y, base);
        }
    }
}

#[test]
fn symbolic_mask_chain_matches_forward() {
    let cfg = small_config("4(CM)-3(CM)-4(CM)", 2);
    let mut store = ParamStore::new();
    let g = CompletionGenerator::new(&mut store, &mut rng(3), "g", cfg).unwrap();
    let ci = random_inputs(2, 32, 11);
    let c = compose_inputs(&ci).unwrap();
    let mut tape = Tape::new();
    let mut b = Binder::new(&mut store, Mode::EVAL);
    let d = tape.constant(c.damaged.clone());
    let e = tape.constant(c.c_comp.clone());
    let out = g.forward(&mut tape, &mut b, d, Some(e), &c.validity).unwrap();
    let chain = g.mask_chain(&c.validity).unwrap();
    assert_eq!(chain, out.masks);
    assert_eq!(chain.len(), 4 + 3 + 4 + 4);
    assert!(chain.last().unwrap().1.data().iter().all(|&v| v == 1.0));
}

/// Store with every batch-norm affine parameter jittered so that the
/// normalisation layers are not at their identity initialisation.
fn jitter(store: &mut ParamStore, seed: u64) {
    let mut r = rng(seed);
    let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
    for n in names {
        if n.ends_with(".gamma") || n.ends_with(".beta") || n.ends_with(".bias") {
            let t = store.get_mut(&n).unwrap();
            for v in t.data_mut() {
                *v += r.random_range(-0.3..0.3);
            }
        }
    }
}

#[test]
fn loss_gradients_match_finite_differences() {
    let cfg = small_config("2(CM)-1(CM)-2(CM)", 2);
    let mut store = ParamStore::new();
    let g = CompletionGenerator::new(&mut store, &mut rng(4), "g", cfg).unwrap();
    jitter(&mut store, 5);
    let mut d_store = ParamStore::new();
    let d = PatchGan::new(&mut d_store, &mut rng(6), "d", 4, 2, true).unwrap();
    let fx = FeatureExtractor::random(3, 12);
    let mut ci = random_inputs(2, 32, 13);
    ci.mask = Tensor::from_fn(ci.mask.shape(), |i| {
        let (y, x) = ((i % 1024) / 32, i % 32);
        if (10..20).contains(&y) && (6..25).contains(&x) { 1.0 } else { 0.0 }
    });
    let c = compose_inputs(&ci).unwrap();
    let names = ["g.enc0.weight", "g.res0.conv1.weight", "g.dec1.weight", "g.enc1.bn.gamma"];
    let inputs: Vec<Tensor> = names.iter().map(|n| store.get(n).unwrap().clone()).collect();
    type Term = fn(&mut Tape, &LossTerms<edgefill_core::autodiff::Var>) -> edgefill_core::Result<edgefill_core::autodiff::Var>;
    let terms: [(&str, Term); 5] = [
        ("l1", |_, t| Ok(t.l1)),
        ("adv", |_, t| Ok(t.adv)),
        ("perc", |_, t| Ok(t.perc)),
        ("style", |_, t| Ok(t.style)),
        ("total", |tape, t| losses::total_g2_loss(tape, t, &LossWeights::default())),
    ];
    for (label, pick) in terms {
        let report = gradcheck::check(&inputs, 1e-6, 1e-8, 12, |tape, vars| {
            let mut st = store.clone();
            let mut b = Binder::new(&mut st, Mode::FROZEN);
            for (n, &v) in names.iter().zip(vars) {
                b.cache(n, v);
            }
            let dmg = tape.constant(c.damaged.clone());
            let cc = tape.constant(c.c_comp.clone());
            let pred = g.forward(tape, &mut b, dmg, Some(cc), &c.validity)?.image;
            let gt = tape.constant(ci.image.clone());
            let l1 = losses::l1(tape, pred, gt)?;
            let mut ds = d_store.clone();
            let mut db = Binder::new(&mut ds, Mode::FROZEN);
            let din = tape.concat(&[pred, cc], 1)?;
            let logits = d.forward(tape, &mut db, din)?.logits;
            let adv = losses::generator_adv_loss(tape, logits);
            let perc = losses::perceptual(tape, pred, gt, &fx)?;
            let style = losses::style(tape, pred, gt, &fx)?;
            pick(tape, &LossTerms { l1, adv, perc, style })
        })
        .unwrap();
        assert!(report.max_rel_error() < 1e-3, "{label}: {:?}", report.rel_errors);
    }
}

#[test]
fn training_step_is_finite_and_resumable() {
    let mut cfg = CompletionConfig::default();
    cfg.g2 = small_config("3(CM)-2(CM)-3(CM)", 4);
    cfg.d_base = 4;
    let ci = random_inputs(2, 32, 14);
    let mut m = CompletionModel::new(cfg).unwrap();
    let first = m.train_step(&ci).unwrap();
    for v in [first.l1, first.perc, first.style, first.d_loss, first.total] {
        assert!(v.is_finite() && v >= 0.0);
    }
    assert!(first.adv.is_finite());
    m.train_step(&ci).unwrap();
    let ckpt = m.to_checkpoint().unwrap();
    let next = m.train_step(&ci).unwrap();

    let mut resumed = CompletionModel::new(cfg).unwrap();
    resumed.load_checkpoint(&ckpt).unwrap();
    assert_eq!(resumed.steps_taken(), 2);
    let again = resumed.train_step(&ci).unwrap();
    assert_eq!(next, again);
    assert_eq!(m.to_checkpoint().unwrap().to_bytes(), resumed.to_checkpoint().unwrap().to_bytes());

    let other = CompletionConfig {
        g2: small_config("3(C)-2(C)-3(C)", 4),
        ..cfg
    };
    assert!(CompletionModel::new(other).unwrap().load_checkpoint(&ckpt).is_err());
}

#[test]
fn edge_ablation_changes_input_width() {
    let cfg = CompletionConfig {
        g2: G2Config {
            use_edges: false,
            ..small_config("2(CM)-1(CM)-2(CM)", 2)
        },
        d_base: 2,
        ..CompletionConfig::default()
    };
    let mut m = CompletionModel::new(cfg).unwrap();
    assert_eq!(m.g_store.get("g2.enc0.weight").unwrap().shape()[1], 3);
    assert_eq!(m.d_store.get("d2.conv0.weight").unwrap().shape()[1], 3);
    let ci = random_inputs(1, 8, 15);
    let a = m.predict(&ci).unwrap();
    let mut ci2 = ci.clone();
    ci2.edges_gt = Tensor::ones(ci.edges_gt.shape());
    ci2.edges_pred = Tensor::ones(ci.edges_pred.shape());
    assert_eq!(a, m.predict(&ci2).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn any_spec_round_trips(d in 0usize..12, r in proptest::option::of(0usize..12), k in 0u8..8) {
        let kind = |bit: u8| if k >> bit & 1 == 1 { "CM" } else { "C" };
        let text = match r {
            Some(r) => format!("{d}({})-{r}({})-{d}({})", kind(0), kind(1), kind(2)),
            None => format!("{d}({})-{d}({})", kind(0), kind(2)),
        };
        let spec = NetworkSpec::parse(&text).unwrap();
        prop_assert_eq!(spec.to_string(), text);
    }

    #[test]
    fn compositing_never_lowers_psnr(seed in 0u64..10_000) {
        let ci = random_inputs(1, 8, seed);
        let pred = Tensor::rand_uniform(ci.image.shape(), -1.0, 1.0, &mut rng(seed + 1));
        let comp = composite_output(&pred, &ci.image, &ci.mask).unwrap();
        let to255 = |t: &Tensor| t.data().iter().map(|v| (v + 1.0) * 127.5).collect::<Vec<_>>();
        let p_comp = psnr(&to255(&comp), &to255(&ci.image), 255.0).unwrap();
        let p_pred = psnr(&to255(&pred), &to255(&ci.image), 255.0).unwrap();
        prop_assert!(p_comp >= p_pred);
    }
}
