//! The work behind each subcommand, callable without the argument parser.

use std::fs;
use std::path::{Path, PathBuf};

use edgefill_core::canny::{canny, CannyParams};
use edgefill_core::completion::{composite_output, CompletionModel};
use edgefill_core::dataset::{self, edges_for, load_split, Manifest, Sample, Split};
use edgefill_core::edge::EdgeModel;
use edgefill_core::io::{self, to_u8, BinaryMap, Image};
use edgefill_core::masked::ConvKind;
use edgefill_core::masks::gen_irregular_mask;
use edgefill_core::nn::Checkpoint;
use edgefill_core::pipeline::{self, EvalReport};
use edgefill_core::toy::synthetic_image;
use edgefill_core::train::StepLosses;
use edgefill_core::{Error, Float, Result, Tensor};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::report::{self, ReportContext};
use crate::run::{check_hash, save_atomic, LossLogs, HASH_KEY};

pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const EDGE_CACHE_DIR: &str = "edges";
pub const EDGE_CKPT: &str = "edge.ckpt";
pub const INPAINT_CKPT: &str = "inpaint.ckpt";

#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    pub manifest: PathBuf,
    pub train: usize,
    pub test: usize,
}

/// Writes the manifest and fills the edge cache.
pub fn prepare(images: &Path, out: &Path, cfg: &RunConfig) -> Result<Prepared> {
    if !images.is_dir() {
        return Err(Error::Data(format!("image directory {} does not exist", images.display())));
    }
    let images = images.canonicalize()?;
    let manifest = dataset::build_manifest(&images, cfg.mask_params(), cfg.split_ratio, cfg.seed)?;
    fs::create_dir_all(out)?;
    let cache = out.join(EDGE_CACHE_DIR);
    for e in &manifest.entries {
        dataset::load_sample(&manifest, e, Some(&cache))?;
    }
    let path = out.join(MANIFEST_FILE);
    manifest.save(&path)?;
    Ok(Prepared {
        manifest: path,
        train: manifest.split(Split::Train).count(),
        test: manifest.split(Split::Test).count(),
    })
}

fn cache_dir(manifest: &Path) -> PathBuf {
    manifest.parent().unwrap_or(Path::new(".")).join(EDGE_CACHE_DIR)
}

/// Loads one split, checking that the manifest matches the configured size.
pub fn load_samples(manifest_path: &Path, split: Split, cfg: &RunConfig) -> Result<Vec<Sample>> {
    let manifest = Manifest::load(manifest_path)?;
    if manifest.params.size != cfg.image_size {
        return Err(Error::Config(format!(
            "manifest {} was prepared at {}x{0} but image_size is {}",
            manifest_path.display(),
            manifest.params.size,
            cfg.image_size
        )));
    }
    load_split(&manifest, split, Some(&cache_dir(manifest_path)))
}

fn read_checkpoint(path: &Path, expected_hash: &str, what: &str) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::Data(format!("{what} checkpoint {} does not exist", path.display())));
    }
    let c = Checkpoint::load(path)?;
    check_hash(&c, expected_hash, what, path)?;
    Ok(c)
}

pub fn load_edge_model(cfg: &RunConfig, path: &Path) -> Result<EdgeModel> {
    let c = read_checkpoint(path, &cfg.edge_hash(), "edge")?;
    let mut m = EdgeModel::new(cfg.edge_config())?;
    m.load_checkpoint(&c)?;
    Ok(m)
}

pub fn load_completion_model(cfg: &RunConfig, path: &Path) -> Result<CompletionModel> {
    let c = read_checkpoint(path, &cfg.completion_hash(), "completion")?;
    let mut m = CompletionModel::new(cfg.completion_config())?;
    m.load_checkpoint(&c)?;
    Ok(m)
}

fn optional_path(flag: Option<&Path>, key: &str) -> Option<PathBuf> {
    flag.map(Path::to_path_buf)
        .or_else(|| (!key.is_empty()).then(|| PathBuf::from(key)))
}

/// Edge model required by the completion stage, if any.
pub fn edge_model_for(cfg: &RunConfig, flag: Option<&Path>) -> Result<Option<EdgeModel>> {
    if !cfg.needs_edge_model() {
        return Ok(None);
    }
    match optional_path(flag, &cfg.edge_checkpoint) {
        Some(p) => Ok(Some(load_edge_model(cfg, &p)?)),
        None => Err(Error::Config(
            "the completion stage needs an edge checkpoint (--edge-checkpoint) unless use_edges=false or edge_source=oracle"
                .into(),
        )),
    }
}

/// Hole edge maps seen by the completion stage, one per sample.
pub fn stage_edges(cfg: &RunConfig, model: Option<&mut EdgeModel>, samples: &[Sample]) -> Result<Vec<Tensor>> {
    if !cfg.use_edges {
        return Ok(samples.iter().map(|s| Tensor::zeros(&[1, 1, s.mask.height, s.mask.width])).collect());
    }
    pipeline::hole_edges(cfg.edge_source, model, samples)
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub checkpoint: PathBuf,
    pub steps: u64,
    pub last: Option<StepLosses>,
}

fn tagged(mut c: Checkpoint, hash: String) -> Checkpoint {
    c.meta.insert(HASH_KEY.into(), hash);
    c
}

const LOG_EVERY: u64 = 25;

pub fn train_edge(cfg: &RunConfig, manifest: &Path, run_dir: &Path, resume: Option<&Path>) -> Result<Trained> {
    let samples = load_samples(manifest, Split::Train, cfg)?;
    let mut model = EdgeModel::new(cfg.edge_config())?;
    if let Some(p) = resume {
        model.load_checkpoint(&read_checkpoint(p, &cfg.edge_hash(), "edge")?)?;
        log::info!("resuming edge model at step {}", model.steps_taken());
    }
    let hash = cfg.edge_hash();
    let ckpt = run_dir.join(EDGE_CKPT);
    let mut logs = LossLogs::open(run_dir, "edge", resume.map(|_| model.steps_taken()))?;
    let mut last = None;
    pipeline::train_edge(&mut model, &samples, cfg.edge_steps, cfg.batch_size, |m, l| {
        logs.push(l);
        if l.step % LOG_EVERY == 0 {
            log::info!("edge step {} l1 {:.4} total {:.4} d {:.4}", l.step, l.l1, l.total, l.d_loss);
        }
        if l.step % cfg.checkpoint_every == 0 {
            save_atomic(&tagged(m.to_checkpoint()?, hash.clone()), &ckpt)?;
            logs.flush()?;
        }
        last = Some(*l);
        Ok(())
    })?;
    save_atomic(&tagged(model.to_checkpoint()?, hash), &ckpt)?;
    logs.flush()?;
    Ok(Trained {
        checkpoint: ckpt,
        steps: model.steps_taken(),
        last,
    })
}

pub fn train_inpaint(
    cfg: &RunConfig,
    manifest: &Path,
    run_dir: &Path,
    edge_ckpt: Option<&Path>,
    resume: Option<&Path>,
) -> Result<Trained> {
    let mut edge_model = edge_model_for(cfg, edge_ckpt)?;
    let samples = load_samples(manifest, Split::Train, cfg)?;
    let edges = stage_edges(cfg, edge_model.as_mut(), &samples)?;
    drop(edge_model);
    let mut model = CompletionModel::new(cfg.completion_config())?;
    if let Some(p) = resume {
        model.load_checkpoint(&read_checkpoint(p, &cfg.completion_hash(), "completion")?)?;
        log::info!("resuming completion model at step {}", model.steps_taken());
    }
    let hash = cfg.completion_hash();
    let ckpt = run_dir.join(INPAINT_CKPT);
    let mut logs = LossLogs::open(run_dir, "inpaint", resume.map(|_| model.steps_taken()))?;
    let mut last = None;
    pipeline::train_completion(&mut model, &samples, &edges, cfg.inpaint_steps, cfg.batch_size, |m, l| {
        logs.push(l);
        if l.step % LOG_EVERY == 0 {
            log::info!("inpaint step {} l1 {:.4} total {:.4} d {:.4}", l.step, l.l1, l.total, l.d_loss);
        }
        if l.step % cfg.checkpoint_every == 0 {
            save_atomic(&tagged(m.to_checkpoint()?, hash.clone()), &ckpt)?;
            logs.flush()?;
        }
        last = Some(*l);
        Ok(())
    })?;
    save_atomic(&tagged(model.to_checkpoint()?, hash), &ckpt)?;
    logs.flush()?;
    Ok(Trained {
        checkpoint: ckpt,
        steps: model.steps_taken(),
        last,
    })
}

/// Files written by [`infer`].
#[derive(Debug, Clone, PartialEq)]
pub struct Inferred {
    pub output: PathBuf,
    pub raw: Option<PathBuf>,
    pub edges: Option<PathBuf>,
}

fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("output");
    out.with_file_name(format!("{stem}_{suffix}.png"))
}

fn probability_image(t: &Tensor) -> Result<Image> {
    let (_, _, h, w) = t.dims4()?;
    Image::new(w, h, 1, t.data().iter().map(|&v| to_u8(v * 255.0)).collect())
}

/// Repairs one image. The mask is white (non-zero) on the hole.
pub fn infer(
    cfg: &RunConfig,
    edge_ckpt: Option<&Path>,
    inpaint_ckpt: &Path,
    image: &Path,
    mask: &Path,
    out: &Path,
    dump_intermediates: bool,
) -> Result<Inferred> {
    let mut model = load_completion_model(cfg, inpaint_ckpt)?;
    let mut edge_model = edge_model_for(cfg, edge_ckpt)?;
    let img = io::load_image(image)?.to_rgb();
    let hole = io::load_binary_map(mask)?;
    if (hole.width, hole.height) != (img.width, img.height) {
        return Err(Error::Data(format!(
            "mask is {}x{} but image is {}x{}",
            hole.width, hole.height, img.width, img.height
        )));
    }
    cfg.g2().check_input(img.height, img.width).map_err(|e| Error::Data(e.to_string()))?;
    let sample = Sample {
        id: "input".into(),
        edges: edges_for(&img, cfg.canny_sigma)?,
        image: img,
        mask: hole,
    };
    sample.validate()?;
    let samples = std::slice::from_ref(&sample);
    let edges = stage_edges(cfg, edge_model.as_mut(), samples)?;
    let inputs = pipeline::completion_inputs(&[&sample], &[&edges[0]])?;
    let raw = model.predict(&inputs)?;
    let comp = composite_output(&raw, &inputs.image, &inputs.mask)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    io::save_image(&Image::from_tensor(&comp, 0)?, out)?;
    let mut done = Inferred {
        output: out.to_path_buf(),
        raw: None,
        edges: None,
    };
    if dump_intermediates {
        let raw_path = sibling(out, "raw");
        io::save_image(&Image::from_tensor(&raw, 0)?, &raw_path)?;
        let edge_path = sibling(out, "edges");
        io::save_image(&probability_image(&edges[0])?, &edge_path)?;
        done.raw = Some(raw_path);
        done.edges = Some(edge_path);
    }
    Ok(done)
}

pub fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        other => Err(Error::Config(format!("split must be train or test, got {other:?}"))),
    }
}

/// Scores the completion model on one split and writes the metric report.
pub fn eval(
    cfg: &RunConfig,
    manifest: &Path,
    split: Split,
    edge_ckpt: Option<&Path>,
    inpaint_ckpt: &Path,
    out_dir: &Path,
    save_images: bool,
) -> Result<EvalReport> {
    let mut model = load_completion_model(cfg, inpaint_ckpt)?;
    let mut edge_model = edge_model_for(cfg, edge_ckpt)?;
    let samples = load_samples(manifest, split, cfg)?;
    if samples.is_empty() {
        return Err(Error::Data(format!("the {} split is empty", split.as_str())));
    }
    let edges = stage_edges(cfg, edge_model.as_mut(), &samples)?;
    let (rep, done) = pipeline::evaluate(&mut model, &samples, &edges, cfg.fid_unsquared)?;
    fs::create_dir_all(out_dir)?;
    if save_images {
        let dir = out_dir.join("images");
        fs::create_dir_all(&dir)?;
        for c in &done {
            io::save_image(&Image::from_tensor(&c.composited, 0)?, &dir.join(format!("{}.png", c.id)))?;
        }
    }
    report::write_metrics(out_dir, &rep, &ReportContext::model(cfg, split))?;
    Ok(rep)
}

/// Ground truth scored against itself: the metric ceiling.
pub fn eval_reference(cfg: &RunConfig, manifest: &Path, split: Split, out_dir: &Path) -> Result<EvalReport> {
    let samples = load_samples(manifest, split, cfg)?;
    if samples.is_empty() {
        return Err(Error::Data(format!("the {} split is empty", split.as_str())));
    }
    let truths: Vec<Tensor> = samples.iter().map(|s| s.image.to_tensor()).collect();
    let rep = pipeline::score(&truths, &truths, cfg.fid_unsquared)?;
    fs::create_dir_all(out_dir)?;
    report::write_metrics(out_dir, &rep, &ReportContext::reference(cfg, split))?;
    Ok(rep)
}

/// One of the ablation switches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Edges,
    Skip,
    Cm,
}

impl std::str::FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "edges" => Ok(Axis::Edges),
            "skip" => Ok(Axis::Skip),
            "cm" => Ok(Axis::Cm),
            other => Err(Error::Config(format!("unknown ablation axis {other:?} (expected edges, skip or cm)"))),
        }
    }
}

pub fn parse_axes(s: &str) -> Result<Vec<Axis>> {
    let mut axes = Vec::new();
    for a in s.split(',').filter(|a| !a.trim().is_empty()) {
        let a: Axis = a.parse()?;
        if axes.contains(&a) {
            return Err(Error::Config(format!("ablation axis {a:?} listed twice")));
        }
        axes.push(a);
    }
    if axes.is_empty() {
        return Err(Error::Config("no ablation axes given".into()));
    }
    Ok(axes)
}

/// Applies the three switches to a base config.
pub fn variant(base: &RunConfig, edges: bool, skips: bool, masked: bool) -> RunConfig {
    let mut c = base.clone();
    c.use_edges = edges;
    c.use_skip_links = skips;
    c.structure = base.structure.with_kind(if masked { ConvKind::CM } else { ConvKind::C });
    c
}

pub fn variant_label(c: &RunConfig) -> String {
    format!(
        "edges={} skip={} conv={}",
        on_off(c.use_edges),
        on_off(c.use_skip_links),
        c.structure.residual_kind().token()
    )
}

fn on_off(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

/// Every combination of the listed axes; unlisted switches keep their
/// configured value. The all-on corner comes first.
pub fn ablation_grid(base: &RunConfig, axes: &[Axis]) -> Vec<RunConfig> {
    let masked = base.structure.all_masked();
    let mut out = Vec::new();
    for bits in 0..(1u32 << axes.len()) {
        let flag = |axis: Axis, default: bool| match axes.iter().position(|&a| a == axis) {
            Some(i) => bits & (1 << (axes.len() - 1 - i)) == 0,
            None => default,
        };
        out.push(variant(
            base,
            flag(Axis::Edges, base.use_edges),
            flag(Axis::Skip, base.use_skip_links),
            flag(Axis::Cm, masked),
        ));
    }
    out
}

/// Samples with their hole edge maps.
pub struct Part<'a> {
    pub samples: &'a [Sample],
    pub edges: &'a [Tensor],
}

/// Trains a fresh completion model under `cfg` and scores it.
pub fn train_and_score(cfg: &RunConfig, train: Part<'_>, test: Part<'_>) -> Result<(CompletionModel, EvalReport)> {
    let mut model = CompletionModel::new(cfg.completion_config())?;
    pipeline::train_completion(&mut model, train.samples, train.edges, cfg.inpaint_steps, cfg.batch_size, |_, l| {
        if l.step % LOG_EVERY == 0 {
            log::info!("[{}] step {} l1 {:.4}", variant_label(cfg), l.step, l.l1);
        }
        Ok(())
    })?;
    let (rep, _) = pipeline::evaluate(&mut model, test.samples, test.edges, cfg.fid_unsquared)?;
    Ok((model, rep))
}

/// Runs the ablation grid with equal step budgets and writes the table.
pub fn ablate(
    cfg: &RunConfig,
    manifest: &Path,
    axes: &[Axis],
    edge_ckpt: Option<&Path>,
    out_dir: &Path,
) -> Result<Vec<(RunConfig, EvalReport)>> {
    let grid = ablation_grid(cfg, axes);
    let train = load_samples(manifest, Split::Train, cfg)?;
    let test = load_samples(manifest, Split::Test, cfg)?;
    if test.is_empty() {
        return Err(Error::Data("the test split is empty".into()));
    }
    let with_edges = RunConfig {
        use_edges: true,
        ..cfg.clone()
    };
    let mut edge_model = if grid.iter().any(RunConfig::needs_edge_model) {
        edge_model_for(&with_edges, edge_ckpt)?
    } else {
        None
    };
    let (train_e, test_e) = if grid.iter().any(|v| v.use_edges) {
        (
            stage_edges(&with_edges, edge_model.as_mut(), &train)?,
            stage_edges(&with_edges, edge_model.as_mut(), &test)?,
        )
    } else {
        (Vec::new(), Vec::new())
    };
    let blank = |s: &[Sample]| stage_edges(&variant(cfg, false, true, true), None, s);
    let (train_0, test_0) = (blank(&train)?, blank(&test)?);
    let mut rows = Vec::new();
    for v in grid {
        let (tr, te) = if v.use_edges { (&train_e, &test_e) } else { (&train_0, &test_0) };
        log::info!("ablation variant {}", variant_label(&v));
        let (_, rep) = train_and_score(
            &v,
            Part {
                samples: &train,
                edges: tr,
            },
            Part {
                samples: &test,
                edges: te,
            },
        )?;
        rows.push((v, rep));
    }
    fs::create_dir_all(out_dir)?;
    report::write_ablation(out_dir, cfg, &rows)?;
    Ok(rows)
}

/// Writes `count` irregular masks as PNGs and returns their hole fractions.
pub fn gen_masks(out: &Path, count: usize, size: usize, coverage: Float, seed: u64) -> Result<Vec<Float>> {
    fs::create_dir_all(out)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let m = gen_irregular_mask(size, size, coverage, rng.next_u64())?;
            io::save_binary_map(&m, &out.join(format!("mask_{i:04}.png")))?;
            Ok(m.fraction())
        })
        .collect()
}

pub fn canny_file(image: &Path, out: &Path, params: &CannyParams) -> Result<BinaryMap> {
    params.validate()?;
    let img = io::load_image(image)?;
    let edges = canny(&img.luminance(), img.height, img.width, params)?;
    io::save_binary_map(&edges, out)?;
    Ok(edges)
}

/// Writes `count` procedural RGB images.
pub fn toy_data(out: &Path, count: usize, size: usize, seed: u64) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out)?;
    (0..count)
        .map(|i| {
            let p = out.join(format!("toy_{i:04}.png"));
            io::save_image(&synthetic_image(size, seed.wrapping_add(i as u64)), &p)?;
            Ok(p)
        })
        .collect()
}
