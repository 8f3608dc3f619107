//! Run configuration: a flat `key = value` text file.
//!
//! Lines starting with `#` and blank lines are ignored. Values may be
//! wrapped in single or double quotes. Every key must be known. After the
//! file is read, environment variables named `INPAINT_<KEY>` (key upper-cased)
//! override it, and command-line `--set key=value` pairs override both.

use std::fmt::Write as _;
use std::path::Path;

use edgefill_core::completion::{CompletionConfig, G2Config, NetworkSpec};
use edgefill_core::dataset::MaskParams;
use edgefill_core::edge::EdgeConfig;
use edgefill_core::losses::LossWeights;
use edgefill_core::masked::MaskNorm;
use edgefill_core::optim::AdamConfig;
use edgefill_core::pipeline::EdgeSource;
use edgefill_core::{Error, Float, Result};
use sha2::{Digest, Sha256};

pub const ENV_PREFIX: &str = "INPAINT_";

macro_rules! run_config {
    ($($key:ident : $ty:ty = $default:expr => $doc:literal,)*) => {
        #[derive(Clone, Debug, PartialEq)]
        pub struct RunConfig {
            $(#[doc = $doc] pub $key: $ty,)*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                RunConfig { $($key: $default,)* }
            }
        }

        /// Every key with its one-line description, in file order.
        pub const KEYS: &[(&str, &str)] = &[$((stringify!($key), $doc),)*];

        impl RunConfig {
            /// Sets one key from its text form.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                let value = unquote(value.trim());
                match key {
                    $(stringify!($key) => {
                        self.$key = value.parse::<$ty>().map_err(|e| {
                            Error::Config(format!("bad value {value:?} for {key}: {e}"))
                        })?;
                    })*
                    _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
                }
                Ok(())
            }

            pub fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$((stringify!($key), self.$key.to_string()),)*]
            }
        }
    };
}

run_config! {
    structure: NetworkSpec = NetworkSpec::default() => "completion network layout, e.g. 4(CM)-6(CM)-4(CM)",
    base_channels: usize = 16 => "width of the first completion encoder stage",
    disc_base_channels: usize = 16 => "width of the first completion discriminator layer",
    edge_base_channels: usize = 16 => "width of the edge generator stem",
    edge_residual_blocks: usize = 8 => "dilated residual blocks in the edge generator",
    edge_disc_base_channels: usize = 16 => "width of the first edge discriminator layer",
    spectral_norm: bool = true => "spectral normalisation in discriminators and residual blocks",
    sconv_norm: MaskNorm = MaskNorm::Mean => "masked-convolution renormalisation: mean or sum",
    use_edges: bool = true => "feed the composite edge map to the completion model",
    use_skip_links: bool = true => "encoder-to-decoder skip links in the completion model",
    edge_source: EdgeSource = EdgeSource::Model => "hole edges from the trained edge model (model) or Canny of the ground truth (oracle)",
    lambda_l1: Float = 1.0 => "weight of the L1 reconstruction term",
    lambda_adv: Float = 0.1 => "weight of the adversarial term",
    lambda_perc: Float = 0.1 => "weight of the perceptual term",
    lambda_style: Float = 250.0 => "weight of the style term",
    style_on_composite: bool = true => "compute the style term on the composited image",
    edge_adv_weight: Float = 1.0 => "edge model adversarial weight",
    edge_fm_weight: Float = 10.0 => "edge model feature-matching weight",
    lr: Float = 1e-4 => "Adam learning rate",
    beta1: Float = 0.0 => "Adam first-moment decay",
    beta2: Float = 0.9 => "Adam second-moment decay",
    batch_size: usize = 4 => "samples per training step",
    seed: u64 = 0 => "seed for data order, masks and initialisation",
    image_size: usize = 64 => "side of the square training canvas",
    mask_coverage: Float = 0.25 => "target hole fraction of generated masks",
    canny_sigma: Float = 2.0 => "Gaussian sigma of the Canny detector",
    split_ratio: Float = 0.8 => "fraction of images in the training split",
    edge_steps: u64 = 300 => "training steps of the edge model",
    inpaint_steps: u64 = 300 => "training steps of the completion model",
    checkpoint_every: u64 = 100 => "steps between periodic checkpoints",
    fid_unsquared: bool = false => "report the unsquared Frechet distance",
    edge_checkpoint: String = String::new() => "edge model checkpoint to load (empty: none)",
    inpaint_checkpoint: String = String::new() => "completion model checkpoint to load (empty: none)",
}

fn unquote(v: &str) -> &str {
    for q in ['"', '\''] {
        if v.len() >= 2 && v.starts_with(q) && v.ends_with(q) {
            return &v[1..v.len() - 1];
        }
    }
    v
}

/// Locations rather than settings; kept out of the run hash.
const PATH_KEYS: &[&str] = &["edge_checkpoint", "inpaint_checkpoint"];

/// Keys that change the shape of the edge model.
const EDGE_STRUCTURAL: &[&str] = &["edge_base_channels", "edge_residual_blocks", "edge_disc_base_channels", "spectral_norm"];

/// Keys that change the shape or input contract of the completion model.
const COMPLETION_STRUCTURAL: &[&str] = &[
    "structure",
    "base_channels",
    "disc_base_channels",
    "spectral_norm",
    "sconv_norm",
    "use_edges",
    "use_skip_links",
];

impl RunConfig {
    /// Parses a config file body. Errors carry the 1-based line number.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.merge_text(text)?;
        Ok(cfg)
    }

    pub fn merge_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                position: i + 1,
                message: format!("expected key = value, got {line:?}"),
            })?;
            self.set(k.trim(), v).map_err(|e| Error::Parse {
                position: i + 1,
                message: match e {
                    Error::Config(m) => m,
                    other => other.to_string(),
                },
            })?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Applies `INPAINT_<KEY>` overrides from `vars`.
    pub fn apply_env<I: IntoIterator<Item = (String, String)>>(&mut self, vars: I) -> Result<()> {
        for (name, value) in vars {
            if let Some(key) = name.strip_prefix(ENV_PREFIX) {
                let key = key.to_ascii_lowercase();
                self.set(&key, &value)
                    .map_err(|e| Error::Config(format!("environment variable {name}: {e}")))?;
            }
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_assignment(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key=value, got {kv:?}")))?;
        self.set(k.trim(), v)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for ((key, value), (_, doc)) in self.entries().into_iter().zip(KEYS) {
            writeln!(s, "# {doc}").unwrap();
            writeln!(s, "{key} = {value}").unwrap();
        }
        s
    }

    fn digest(&self, label: &str, keys: Option<&[&str]>) -> String {
        let mut h = Sha256::new();
        h.update(label.as_bytes());
        for (k, v) in self.entries() {
            let wanted = match keys {
                Some(ks) => ks.contains(&k),
                None => !PATH_KEYS.contains(&k),
            };
            if wanted {
                h.update(format!("\n{k}={v}").as_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Hash of every setting except checkpoint paths; names run directories
    /// and tags reports.
    pub fn hash(&self) -> String {
        self.digest("run", None)
    }

    pub fn edge_hash(&self) -> String {
        self.digest("edge", Some(EDGE_STRUCTURAL))
    }

    pub fn completion_hash(&self) -> String {
        self.digest("completion", Some(COMPLETION_STRUCTURAL))
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Config("checkpoint_every must be at least 1".into()));
        }
        if self.image_size == 0 || self.image_size % 4 != 0 {
            return Err(Error::Config(format!("image_size must be a positive multiple of 4, got {}", self.image_size)));
        }
        self.g2().check_input(self.image_size, self.image_size).map_err(|e| match e {
            Error::Shape(m) => Error::Config(m),
            other => other,
        })?;
        if !(self.mask_coverage > 0.0 && self.mask_coverage < 1.0) {
            return Err(Error::Config(format!("mask_coverage must be in (0, 1), got {}", self.mask_coverage)));
        }
        if !(self.canny_sigma > 0.0 && self.canny_sigma.is_finite()) {
            return Err(Error::Config(format!("canny_sigma must be > 0, got {}", self.canny_sigma)));
        }
        self.weights().validate()?;
        for (name, v) in [("base_channels", self.base_channels), ("edge_base_channels", self.edge_base_channels)] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            ..AdamConfig::default()
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            l1: self.lambda_l1,
            adv: self.lambda_adv,
            perc: self.lambda_perc,
            style: self.lambda_style,
        }
    }

    pub fn mask_params(&self) -> MaskParams {
        MaskParams {
            coverage: self.mask_coverage,
            size: self.image_size,
            sigma: self.canny_sigma,
        }
    }

    pub fn edge_config(&self) -> EdgeConfig {
        EdgeConfig {
            base: self.edge_base_channels,
            residual_blocks: self.edge_residual_blocks,
            d_base: self.edge_disc_base_channels,
            spectral: self.spectral_norm,
            adv_weight: self.edge_adv_weight,
            fm_weight: self.edge_fm_weight,
            adam: self.adam(),
            seed: self.seed,
        }
    }

    pub fn g2(&self) -> G2Config {
        G2Config {
            spec: self.structure,
            base: self.base_channels,
            use_edges: self.use_edges,
            use_skip_links: self.use_skip_links,
            mask_norm: self.sconv_norm,
            spectral: self.spectral_norm,
        }
    }

    pub fn completion_config(&self) -> CompletionConfig {
        CompletionConfig {
            g2: self.g2(),
            d_base: self.disc_base_channels,
            d_spectral: self.spectral_norm,
            weights: self.weights(),
            adam: self.adam(),
            style_on_composite: self.style_on_composite,
            seed: self.seed,
        }
    }

    /// Whether the completion stage needs a trained edge model.
    pub fn needs_edge_model(&self) -> bool {
        self.use_edges && self.edge_source == EdgeSource::Model
    }
}
