//! Dataset-level training and evaluation loops for both stages.

use crate::completion::{composite_output, CompletionModel, CompositionInputs};
use crate::dataset::{Batch, Sample};
use crate::edge::{EdgeBatch, EdgeModel};
use crate::error::{Error, Result};
use crate::io::to_u8;
use crate::losses::FeatureExtractor;
use crate::metrics::{fid, psnr, ssim};
use crate::tensor::{Float, Tensor};
use crate::train::{batch_indices, StepLosses};

/// Where the completion stage gets its edge map inside the hole.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum EdgeSource {
    /// Prediction of a trained edge model.
    #[default]
    Model,
    /// Canny edges of the ground truth.
    Oracle,
}

impl std::str::FromStr for EdgeSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "model" => Ok(EdgeSource::Model),
            "oracle" => Ok(EdgeSource::Oracle),
            other => Err(Error::Config(format!("edge_source must be model or oracle, got {other:?}"))),
        }
    }
}

impl std::fmt::Display for EdgeSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EdgeSource::Model => "model",
            EdgeSource::Oracle => "oracle",
        })
    }
}

pub fn edge_batch(samples: &[&Sample]) -> Result<EdgeBatch> {
    let b = Batch::from_samples(samples)?;
    Ok(EdgeBatch {
        gray: b.gray,
        edges: b.edges,
        mask: b.mask,
    })
}

fn pick<'a>(samples: &'a [Sample], idx: &[usize]) -> Vec<&'a Sample> {
    idx.iter().map(|&i| &samples[i]).collect()
}

/// Trains the edge model from its current step up to `until` total steps.
pub fn train_edge(
    model: &mut EdgeModel,
    samples: &[Sample],
    until: u64,
    batch_size: usize,
    mut on_step: impl FnMut(&EdgeModel, &StepLosses) -> Result<()>,
) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::Data("no training samples".into()));
    }
    let seed = model.config.seed;
    while model.steps_taken() < until {
        let idx = batch_indices(seed, model.steps_taken(), samples.len(), batch_size);
        let batch = edge_batch(&pick(samples, &idx))?;
        let losses = model.train_step(&batch)?;
        on_step(model, &losses)?;
    }
    Ok(())
}

/// `C_pred` for every sample, each `[1, 1, H, W]`.
pub fn predict_edges(model: &mut EdgeModel, samples: &[Sample]) -> Result<Vec<Tensor>> {
    samples.iter().map(|s| model.predict(&edge_batch(&[s])?)).collect()
}

/// Edge maps the completion stage sees inside holes.
pub fn hole_edges(source: EdgeSource, model: Option<&mut EdgeModel>, samples: &[Sample]) -> Result<Vec<Tensor>> {
    match (source, model) {
        (EdgeSource::Oracle, _) => Ok(samples.iter().map(|s| s.edges.to_tensor()).collect()),
        (EdgeSource::Model, Some(m)) => predict_edges(m, samples),
        (EdgeSource::Model, None) => Err(Error::Config(
            "edge_source=model needs a trained edge checkpoint".into(),
        )),
    }
}

pub fn completion_inputs(samples: &[&Sample], edges_pred: &[&Tensor]) -> Result<CompositionInputs> {
    let b = Batch::from_samples(samples)?;
    let edges_pred = Tensor::concat(edges_pred, 0)?;
    Ok(CompositionInputs {
        image: b.image,
        mask: b.mask,
        edges_gt: b.edges,
        edges_pred,
    })
}

/// Trains the completion model up to `until` total steps. `edges` holds
/// one predicted edge map per sample.
pub fn train_completion(
    model: &mut CompletionModel,
    samples: &[Sample],
    edges: &[Tensor],
    until: u64,
    batch_size: usize,
    mut on_step: impl FnMut(&CompletionModel, &StepLosses) -> Result<()>,
) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::Data("no training samples".into()));
    }
    if edges.len() != samples.len() {
        return Err(Error::shape(format!("{} edge maps for {} samples", edges.len(), samples.len())));
    }
    let seed = model.config.seed;
    while model.steps_taken() < until {
        let idx = batch_indices(seed, model.steps_taken(), samples.len(), batch_size);
        let e: Vec<&Tensor> = idx.iter().map(|&i| &edges[i]).collect();
        let inputs = completion_inputs(&pick(samples, &idx), &e)?;
        let losses = model.train_step(&inputs)?;
        on_step(model, &losses)?;
    }
    Ok(())
}

/// Metrics over a set of composited outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// Mean per-image PSNR in dB; `+∞` when every output is exact.
    pub psnr: Float,
    pub ssim: Float,
    /// `None` with fewer than two samples.
    pub fid: Option<Float>,
    pub fid_regularized: bool,
    pub sample_count: usize,
}

/// One evaluated sample.
pub struct Completed {
    pub id: String,
    /// `I_pred`, `[1, 3, H, W]` in `[-1, 1]`.
    pub raw: Tensor,
    /// `I_comp` quantised to 8 bits and mapped back to `[-1, 1]`.
    pub composited: Tensor,
}

fn quantize(t: &Tensor) -> Tensor {
    t.map(|v| to_u8((v + 1.0) * 127.5) as Float / 127.5 - 1.0)
}

fn to_255(t: &Tensor) -> Tensor {
    t.map(|v| ((v + 1.0) * 127.5).round())
}

/// Metrics of 8-bit images given as `[1, 3, H, W]` tensors in `[-1, 1]`.
pub fn score(outputs: &[Tensor], truths: &[Tensor], fid_unsquared: bool) -> Result<EvalReport> {
    if outputs.is_empty() || outputs.len() != truths.len() {
        return Err(Error::Data(format!(
            "cannot score {} outputs against {} references",
            outputs.len(),
            truths.len()
        )));
    }
    let n = outputs.len() as Float;
    let (mut p, mut s) = (0.0, 0.0);
    for (o, t) in outputs.iter().zip(truths) {
        let (o, t) = (to_255(o), to_255(t));
        p += psnr(o.data(), t.data(), 255.0)?;
        s += ssim(&o, &t)?;
    }
    let (fid_value, regularized) = if outputs.len() >= 2 {
        let fx = FeatureExtractor::random(3, crate::completion::EXTRACTOR_SEED);
        let embed = |ts: &[Tensor]| -> Result<Vec<Vec<Float>>> {
            let stacked = Tensor::concat(&ts.iter().collect::<Vec<_>>(), 0)?;
            fx.embed(&stacked)
        };
        let r = fid(&embed(truths)?, &embed(outputs)?, fid_unsquared)?;
        (Some(r.value), r.regularized)
    } else {
        log::warn!("FID needs at least two samples; reporting none");
        (None, false)
    };
    Ok(EvalReport {
        psnr: p / n,
        ssim: s / n,
        fid: fid_value,
        fid_regularized: regularized,
        sample_count: outputs.len(),
    })
}

/// Completes every sample and scores the composited outputs against the
/// ground truth.
pub fn evaluate(
    model: &mut CompletionModel,
    samples: &[Sample],
    edges: &[Tensor],
    fid_unsquared: bool,
) -> Result<(EvalReport, Vec<Completed>)> {
    if samples.is_empty() {
        return Err(Error::Data("evaluation split is empty".into()));
    }
    let mut done = Vec::with_capacity(samples.len());
    for (s, e) in samples.iter().zip(edges) {
        let inputs = completion_inputs(&[s], &[e])?;
        let raw = model.predict(&inputs)?;
        let composited = quantize(&composite_output(&raw, &inputs.image, &inputs.mask)?);
        done.push(Completed {
            id: s.id.clone(),
            raw,
            composited,
        });
    }
    let outs: Vec<Tensor> = done.iter().map(|c| c.composited.clone()).collect();
    let truths: Vec<Tensor> = samples.iter().map(|s| s.image.to_tensor()).collect();
    Ok((score(&outs, &truths, fid_unsquared)?, done))
}
