use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use edgefill_core::io::{self, BinaryMap};

const TINY: &str = "\
# small networks so that every command finishes in seconds
image_size = 32
edge_base_channels = 4
edge_residual_blocks = 1
edge_disc_base_channels = 4
base_channels = 4
disc_base_channels = 4
edge_steps = 4
inpaint_steps = 4
checkpoint_every = 2
batch_size = 2
split_ratio = '0.5'
";

struct Env {
    dir: tempfile::TempDir,
}

impl Env {
    fn new() -> Self {
        let env = Env {
            dir: tempfile::tempdir().unwrap(),
        };
        fs::write(env.path("tiny.cfg"), TINY).unwrap();
        env
    }

    fn path(&self, p: &str) -> PathBuf {
        self.dir.path().join(p)
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_edgefill"))
            .current_dir(self.dir.path())
            .env("RUST_LOG", "warn")
            .env_remove("INPAINT_SEED")
            .args(args)
            .output()
            .unwrap()
    }

    fn tiny(&self, args: &[&str]) -> Output {
        let mut all = vec!["--config", "tiny.cfg"];
        all.extend_from_slice(args);
        self.run(&all)
    }

    /// toy images, manifest and a trained edge + completion pair
    fn trained(&self) -> (PathBuf, PathBuf) {
        ok(&self.tiny(&["toy-data", "--out", "images", "--count", "6", "--size", "32"]));
        ok(&self.tiny(&["prepare", "images", "data"]));
        ok(&self.tiny(&["train-edge", "--manifest", "data/manifest.tsv", "--run-dir", "run"]));
        ok(&self.tiny(&[
            "train-inpaint",
            "--manifest",
            "data/manifest.tsv",
            "--edge-checkpoint",
            "run/edge.ckpt",
            "--run-dir",
            "run",
        ]));
        (self.path("run/edge.ckpt"), self.path("run/inpaint.ckpt"))
    }
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

fn ok(o: &Output) -> String {
    assert_eq!(o.status.code(), Some(0), "{}", text(o));
    text(o)
}

fn user_error(o: &Output) -> String {
    assert_eq!(o.status.code(), Some(2), "{}", text(o));
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn config_file_env_and_flags_layer() {
    let env = Env::new();
    fs::write(env.path("a.cfg"), "seed = 3\nstructure = \"6(CM)-2(CM)-6(CM)\"\nimage_size = 64\n").unwrap();
    let out = ok(&env.run(&["--config", "a.cfg", "config"]));
    assert!(out.contains("seed = 3") && out.contains("structure = 6(CM)-2(CM)-6(CM)"), "{out}");
    let o = Command::new(env!("CARGO_BIN_EXE_edgefill"))
        .current_dir(env.dir.path())
        .env("INPAINT_SEED", "11")
        .args(["--config", "a.cfg", "config"])
        .output()
        .unwrap();
    assert!(ok(&o).contains("seed = 11"));
    let out = ok(&env.run(&["--config", "a.cfg", "--set", "seed=12", "--use-skip-links", "false", "config"]));
    assert!(out.contains("seed = 12") && out.contains("use_skip_links = false"), "{out}");

    fs::write(env.path("bad.cfg"), "seed = 1\nlearning_rate = 0.1\n").unwrap();
    let err = user_error(&env.run(&["--config", "bad.cfg", "config"]));
    assert!(err.contains("position 2") && err.contains("learning_rate"), "{err}");
    let err = user_error(&env.run(&["--structure", "4(CM)-6(XX)-4(CM)", "config"]));
    assert!(err.contains("position 8"), "{err}");
    let err = user_error(&env.run(&["--structure", "7(C)-0(C)-7(C)", "config"]));
    assert!(err.contains("multiples of 128"), "{err}");
    ok(&env.run(&["--structure", "7(C)-0(C)-7(C)", "--set", "image_size=128", "config"]));
}

#[test]
fn prepare_reports_empty_and_missing_directories() {
    let env = Env::new();
    fs::create_dir(env.path("empty")).unwrap();
    let err = user_error(&env.run(&["prepare", "empty", "out"]));
    assert!(err.contains("no PNG"), "{err}");
    user_error(&env.run(&["prepare", "missing", "out"]));
    ok(&env.run(&["toy-data", "--out", "imgs", "--count", "5", "--size", "40"]));
    let out = ok(&env.run(&["--sigma", "2", "prepare", "imgs", "out"]));
    assert!(out.contains("train: 4  test: 1"), "{out}");
    assert!(env.path("out/manifest.tsv").exists());
    let cached = fs::read_dir(env.path("out/edges")).unwrap().count();
    assert_eq!(cached, 5);
}

#[test]
fn training_inference_and_evaluation_round_trip() {
    let env = Env::new();
    let (edge, inpaint) = env.trained();
    for (f, rows) in [("edge_loss.csv", 4), ("inpaint_loss.csv", 4), ("edge_aux.csv", 4)] {
        let csv = fs::read_to_string(env.path("run").join(f)).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), rows + 1, "{f}");
        if f.ends_with("loss.csv") {
            assert_eq!(lines[0], "step,l1,adv,perc,style,total");
        }
        assert!(lines[1].starts_with("1,"));
    }

    // a zero mask must give back the input exactly
    let img = env.path("images/toy_0000.png");
    io::save_binary_map(&BinaryMap::zeros(32, 32), &env.path("zero.png")).unwrap();
    let (e, g) = (edge.to_str().unwrap(), inpaint.to_str().unwrap());
    let base = ["infer", "--edge-checkpoint", e, "--inpaint-checkpoint", g, "--image", "images/toy_0000.png"];
    let mut args = base.to_vec();
    args.extend(["--mask", "zero.png", "--out", "same.png"]);
    ok(&env.tiny(&args));
    assert_eq!(io::load_image(&env.path("same.png")).unwrap(), io::load_image(&img).unwrap());

    let mut hole = BinaryMap::zeros(32, 32);
    for y in 8..20 {
        for x in 10..24 {
            hole.data[y * 32 + x] = 1;
        }
    }
    io::save_binary_map(&hole, &env.path("hole.png")).unwrap();
    let mut args = base.to_vec();
    args.extend(["--mask", "hole.png", "--out", "out/fixed.png", "--dump-intermediates"]);
    let out = ok(&env.tiny(&args));
    assert!(out.contains("fixed_raw.png") && out.contains("fixed_edges.png"), "{out}");
    let fixed = io::load_image(&env.path("out/fixed.png")).unwrap();
    let src = io::load_image(&img).unwrap();
    assert_eq!((fixed.width, fixed.height, fixed.channels), (32, 32, 3));
    for p in 0..32 * 32 {
        if hole.data[p] == 0 {
            assert_eq!(fixed.data[3 * p..3 * p + 3], src.data[3 * p..3 * p + 3]);
        }
    }
    let edges = io::load_image(&env.path("out/fixed_edges.png")).unwrap();
    assert_eq!((edges.width, edges.channels), (32, 1));

    let eval = ["eval", "--manifest", "data/manifest.tsv", "--edge-checkpoint", e, "--inpaint-checkpoint", g];
    let mut args = eval.to_vec();
    args.extend(["--run-dir", "eval1", "--save-images"]);
    let out = ok(&env.tiny(&args));
    assert!(out.contains("psnr_db") && out.contains("config_hash"), "{out}");
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(env.path("eval1/metrics.json")).unwrap()).unwrap();
    assert_eq!(json["sample_count"], 3);
    assert!(json["psnr"].as_f64().unwrap() > 10.0);
    assert!(json["fid"].as_f64().unwrap() >= 0.0);
    assert_eq!(json["flags"]["use_edges"], true);
    assert_eq!(json["flags"]["structure"], "4(CM)-6(CM)-4(CM)");
    assert_eq!(fs::read_dir(env.path("eval1/images")).unwrap().count(), 3);
    let mut args = eval.to_vec();
    args.extend(["--run-dir", "eval2"]);
    ok(&env.tiny(&args));
    for f in ["metrics.json", "metrics.txt"] {
        assert_eq!(fs::read(env.path("eval1").join(f)).unwrap(), fs::read(env.path("eval2").join(f)).unwrap());
    }

    // a checkpoint from another structure is refused with both hashes
    let mut args = base.to_vec();
    args.extend(["--mask", "hole.png", "--out", "x.png", "--use-skip-links", "false"]);
    let err = user_error(&env.tiny(&args));
    assert!(err.contains("config hash") && err.matches(|c: char| c.is_ascii_hexdigit()).count() > 128, "{err}");
}

#[test]
fn reference_evaluation_is_the_ceiling() {
    let env = Env::new();
    ok(&env.tiny(&["toy-data", "--out", "images", "--count", "6", "--size", "32"]));
    ok(&env.tiny(&["prepare", "images", "data"]));
    let out = ok(&env.tiny(&["eval", "--manifest", "data/manifest.tsv", "--reference", "--run-dir", "ref"]));
    assert!(out.contains("psnr_db: inf"), "{out}");
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(env.path("ref/metrics.json")).unwrap()).unwrap();
    assert_eq!(json["psnr"], "inf");
    assert_eq!(json["ssim"], 1.0);
    assert!(json["fid"].as_f64().unwrap() < 1e-6);
    assert_eq!(json["mode"], "reference");
    fs::write(env.path("all_train.cfg"), format!("{TINY}split_ratio = 1\n")).unwrap();
    ok(&env.run(&["--config", "all_train.cfg", "prepare", "images", "data2"]));
    let err = user_error(&env.tiny(&["eval", "--manifest", "data2/manifest.tsv", "--reference", "--run-dir", "r2"]));
    assert!(err.contains("empty"), "{err}");
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let env = Env::new();
    ok(&env.tiny(&["toy-data", "--out", "images", "--count", "4", "--size", "32"]));
    ok(&env.tiny(&["prepare", "images", "data"]));
    let m = ["--manifest", "data/manifest.tsv"];
    let train = |extra: &[&str]| {
        let mut a = vec!["train-edge"];
        a.extend_from_slice(&m);
        a.extend_from_slice(extra);
        ok(&env.tiny(&a));
    };
    train(&["--run-dir", "full", "--steps", "6"]);
    train(&["--run-dir", "part", "--steps", "3"]);
    fs::copy(env.path("part/edge.ckpt"), env.path("part3.ckpt")).unwrap();
    // stray rows past the resumed step are dropped from the log
    let mut log = fs::read_to_string(env.path("part/edge_loss.csv")).unwrap();
    log.push_str("9,1,1,1,1,1\n");
    fs::write(env.path("part/edge_loss.csv"), log).unwrap();
    train(&["--run-dir", "part", "--steps", "6", "--resume", "part3.ckpt"]);
    for f in ["edge.ckpt", "edge_loss.csv", "edge_aux.csv"] {
        assert_eq!(fs::read(env.path("full").join(f)).unwrap(), fs::read(env.path("part").join(f)).unwrap(), "{f}");
    }
}

#[test]
fn completion_stage_needs_edges_unless_disabled() {
    let env = Env::new();
    ok(&env.tiny(&["toy-data", "--out", "images", "--count", "4", "--size", "32"]));
    ok(&env.tiny(&["prepare", "images", "data"]));
    let base = ["train-inpaint", "--manifest", "data/manifest.tsv", "--steps", "2"];
    let mut a = base.to_vec();
    a.extend(["--run-dir", "r1"]);
    let err = user_error(&env.tiny(&a));
    assert!(err.contains("edge checkpoint"), "{err}");
    let mut a = base.to_vec();
    a.extend(["--run-dir", "r2", "--use-edges", "false"]);
    ok(&env.tiny(&a));
    let mut a = base.to_vec();
    a.extend(["--run-dir", "r3", "--edge-source", "oracle"]);
    ok(&env.tiny(&a));
    let mut a = base.to_vec();
    a.extend(["--run-dir", "r4", "--edge-checkpoint", "nope.ckpt"]);
    let err = user_error(&env.tiny(&a));
    assert!(err.contains("nope.ckpt"), "{err}");
}

#[test]
fn ablation_grid_tabulates_every_variant() {
    let env = Env::new();
    let (edge, _) = env.trained();
    let out = ok(&env.tiny(&[
        "eval",
        "--manifest",
        "data/manifest.tsv",
        "--edge-checkpoint",
        edge.to_str().unwrap(),
        "--ablate",
        "edges,skip,cm",
        "--steps",
        "1",
        "--run-dir",
        "abl",
    ]));
    let table = fs::read_to_string(env.path("abl/ablation.txt")).unwrap();
    assert_eq!(out.matches("edges=").count(), 8, "{out}");
    assert!(table.starts_with("variant"));
    assert!(table.lines().nth(1).unwrap().starts_with("edges=on skip=on conv=CM"));
    assert!(table.lines().nth(8).unwrap().starts_with("edges=off skip=off conv=C "));
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(env.path("abl/ablation.json")).unwrap()).unwrap();
    assert_eq!(json["variants"].as_array().unwrap().len(), 8);
    let err = user_error(&env.tiny(&["eval", "--manifest", "data/manifest.tsv", "--ablate", "edges,color"]));
    assert!(err.contains("color"), "{err}");
}

#[test]
fn masks_and_edges_from_the_command_line() {
    let env = Env::new();
    let out = ok(&env.run(&["--seed", "4", "gen-masks", "--out", "masks", "--count", "3", "--size", "48", "--coverage", "0.3"]));
    assert!(out.contains("wrote 3 masks"), "{out}");
    for i in 0..3 {
        let m = io::load_binary_map(&env.path(&format!("masks/mask_{i:04}.png"))).unwrap();
        assert!((m.fraction() - 0.3).abs() <= 0.05 + 1e-9);
    }
    ok(&env.run(&["toy-data", "--out", "t", "--count", "1", "--size", "32"]));
    ok(&env.run(&["canny", "--image", "t/toy_0000.png", "--out", "e.png"]));
    let e = io::load_binary_map(&env.path("e.png")).unwrap();
    assert!(e.fraction() > 0.0 && e.fraction() < 0.5);
    let err = user_error(&env.run(&["canny", "--image", "t/toy_0000.png", "--out", "e.png", "--low", "0.5", "--high", "0.2"]));
    assert!(err.contains("low < high"), "{err}");
    user_error(&env.run(&["canny", "--image", "missing.png", "--out", "e.png"]));
    assert_eq!(env.run(&["no-such-command"]).status.code(), Some(2));
}

#[test]
fn timestamped_run_directories_carry_the_config_hash() {
    let env = Env::new();
    ok(&env.tiny(&["toy-data", "--out", "images", "--count", "4", "--size", "32"]));
    ok(&env.tiny(&["prepare", "images", "data"]));
    ok(&env.tiny(&["train-edge", "--manifest", "data/manifest.tsv", "--steps", "1", "--runs-root", "runs"]));
    let dirs: Vec<PathBuf> = fs::read_dir(env.path("runs")).unwrap().map(|d| d.unwrap().path()).collect();
    assert_eq!(dirs.len(), 1);
    let name = dirs[0].file_name().unwrap().to_str().unwrap().to_string();
    let hash = edgefill_cli::RunConfig::parse(TINY).unwrap();
    let mut cfg = hash.clone();
    cfg.edge_steps = 1;
    assert!(name.ends_with(&cfg.hash()[..12]), "{name}");
    assert!(Path::new(&dirs[0]).join("config.txt").exists());
    assert!(dirs[0].join("edge.ckpt").exists());
}
