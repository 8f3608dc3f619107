//! Dataset manifests, train/test splits and the Canny edge cache.
//!
//! Manifest format (UTF-8, one sample per line):
//!
//! ```text
//! # edgefill-manifest v1
//! # seed=<u64> coverage=<f> sigma=<f> size=<px> split_ratio=<f>
//! <id>\t<image_path>\t<mask_seed>\t<train|test>
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::canny::{canny, CannyParams};
use crate::error::{Error, Result};
use crate::io::{self, BinaryMap, Image};
use crate::masks::gen_irregular_mask;
use crate::tensor::{Float, Tensor};

pub const MANIFEST_HEADER: &str = "# edgefill-manifest v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskParams {
    /// Requested hole fraction.
    pub coverage: Float,
    /// Side of the square canvas every sample is resized to.
    pub size: usize,
    pub sigma: Float,
}

impl Default for MaskParams {
    fn default() -> Self {
        MaskParams {
            coverage: 0.25,
            size: 64,
            sigma: crate::canny::DEFAULT_SIGMA,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub image_path: String,
    pub mask_seed: u64,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub seed: u64,
    pub params: MaskParams,
    pub split_ratio: Float,
    pub entries: Vec<ManifestEntry>,
}

fn sorted_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::Data(format!("cannot read {}: {e}", dir.display())))?;
    let mut files = Vec::new();
    for entry in rd {
        let p = entry?.path();
        if p.is_file() && io::is_image_path(&p) {
            files.push(p);
        }
    }
    files.sort();
    Ok(files)
}

/// Deterministically shuffles the images of `image_dir`, splits them and
/// assigns a mask seed to each.
pub fn build_manifest(image_dir: &Path, params: MaskParams, split_ratio: Float, seed: u64) -> Result<Manifest> {
    if !(0.0..=1.0).contains(&split_ratio) {
        return Err(Error::Config(format!("split ratio must be in [0, 1], got {split_ratio}")));
    }
    let mut files = sorted_images(image_dir)?;
    if files.is_empty() {
        return Err(Error::Data(format!("no PNG/PPM/PGM images in {}", image_dir.display())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    files.shuffle(&mut rng);
    let n_train = (files.len() as Float * split_ratio).round() as usize;
    let mut used = std::collections::HashSet::new();
    let mut entries = Vec::with_capacity(files.len());
    for (i, path) in files.iter().enumerate() {
        let stem: String = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("sample")
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
            .collect();
        let mut id = stem.clone();
        let mut k = 1;
        while !used.insert(id.clone()) {
            id = format!("{stem}_{k}");
            k += 1;
        }
        entries.push(ManifestEntry {
            id,
            image_path: path.to_string_lossy().into_owned(),
            mask_seed: rng.next_u64(),
            split: if i < n_train { Split::Train } else { Split::Test },
        });
    }
    Ok(Manifest {
        seed,
        params,
        split_ratio,
        entries,
    })
}

impl Manifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{MANIFEST_HEADER}").unwrap();
        writeln!(
            s,
            "# seed={} coverage={} sigma={} size={} split_ratio={}",
            self.seed, self.params.coverage, self.params.sigma, self.params.size, self.split_ratio
        )
        .unwrap();
        for e in &self.entries {
            writeln!(s, "{}\t{}\t{}\t{}", e.id, e.image_path, e.mask_seed, e.split.as_str()).unwrap();
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |line: usize, msg: String| Error::Parse {
            position: line,
            message: msg,
        };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, l)) if l.trim_end() == MANIFEST_HEADER => {}
            _ => return Err(bad(1, format!("first line must be {MANIFEST_HEADER:?}"))),
        }
        let (_, meta) = lines.next().ok_or_else(|| bad(2, "missing parameter line".into()))?;
        let meta = meta
            .strip_prefix('#')
            .ok_or_else(|| bad(2, "parameter line must start with '#'".into()))?;
        let mut seed = None;
        let mut params = MaskParams::default();
        let mut split_ratio = 0.8;
        for kv in meta.split_whitespace() {
            let (k, v) = kv.split_once('=').ok_or_else(|| bad(2, format!("expected key=value, got {kv:?}")))?;
            let num = |v: &str| v.parse::<f64>().map_err(|_| bad(2, format!("bad number for {k}: {v:?}")));
            match k {
                "seed" => seed = Some(v.parse::<u64>().map_err(|_| bad(2, format!("bad seed {v:?}")))?),
                "coverage" => params.coverage = num(v)? as Float,
                "sigma" => params.sigma = num(v)? as Float,
                "size" => params.size = num(v)? as usize,
                "split_ratio" => split_ratio = num(v)? as Float,
                other => return Err(bad(2, format!("unknown manifest key {other:?}"))),
            }
        }
        let seed = seed.ok_or_else(|| bad(2, "missing seed".into()))?;
        let mut entries = Vec::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 4 {
                return Err(bad(i + 1, format!("expected 4 tab-separated fields, got {}", f.len())));
            }
            let split = match f[3] {
                "train" => Split::Train,
                "test" => Split::Test,
                other => return Err(bad(i + 1, format!("unknown split {other:?}"))),
            };
            entries.push(ManifestEntry {
                id: f[0].to_string(),
                image_path: f[1].to_string(),
                mask_seed: f[2].parse().map_err(|_| bad(i + 1, format!("bad mask seed {:?}", f[2])))?,
                split,
            });
        }
        Ok(Manifest {
            seed,
            params,
            split_ratio,
            entries,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Manifest::parse(&std::fs::read_to_string(path)?)
    }
}

/// One training or test example at the manifest's canvas size.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    /// RGB image.
    pub image: Image,
    /// 1 = hole.
    pub mask: BinaryMap,
    /// Canny edges of the full image.
    pub edges: BinaryMap,
}

impl Sample {
    pub fn validate(&self) -> Result<()> {
        let (w, h) = (self.image.width, self.image.height);
        if self.image.channels != 3 {
            return Err(Error::Data(format!("sample {} is not RGB", self.id)));
        }
        for (name, m) in [("mask", &self.mask), ("edges", &self.edges)] {
            if (m.width, m.height) != (w, h) {
                return Err(Error::Data(format!(
                    "sample {}: {name} is {}x{} but image is {w}x{h}",
                    self.id, m.width, m.height
                )));
            }
            if m.data.iter().any(|&v| v > 1) {
                return Err(Error::Mask(format!("sample {}: {name} is not binary", self.id)));
            }
        }
        Ok(())
    }

    /// Grayscale plane in `[0, 1]`.
    pub fn gray(&self) -> Vec<Float> {
        self.image.luminance()
    }
}

/// Edge-cache file for an id; the Canny σ is part of the name so a change
/// of σ never reuses stale maps.
pub fn edge_cache_path(cache_dir: &Path, id: &str, sigma: Float) -> PathBuf {
    cache_dir.join(format!("{id}.sigma{sigma}.png"))
}

pub fn edges_for(image: &Image, sigma: Float) -> Result<BinaryMap> {
    let params = CannyParams {
        sigma,
        ..CannyParams::default()
    };
    canny(&image.luminance(), image.height, image.width, &params)
}

/// Loads (or computes and caches) the sample for `entry`.
pub fn load_sample(manifest: &Manifest, entry: &ManifestEntry, cache_dir: Option<&Path>) -> Result<Sample> {
    let size = manifest.params.size;
    let image = io::load_image(Path::new(&entry.image_path))?.to_rgb().resized(size, size);
    let mask = gen_irregular_mask(size, size, manifest.params.coverage, entry.mask_seed)?;
    let sigma = manifest.params.sigma;
    let edges = match cache_dir {
        Some(dir) => {
            let p = edge_cache_path(dir, &entry.id, sigma);
            let cached = if p.exists() { io::load_binary_map(&p).ok() } else { None };
            match cached.filter(|m| (m.width, m.height) == (size, size)) {
                Some(m) => m,
                None => {
                    let m = edges_for(&image, sigma)?;
                    std::fs::create_dir_all(dir)?;
                    io::save_binary_map(&m, &p)?;
                    m
                }
            }
        }
        None => edges_for(&image, sigma)?,
    };
    let s = Sample {
        id: entry.id.clone(),
        image,
        mask,
        edges,
    };
    s.validate()?;
    Ok(s)
}

pub fn load_split(manifest: &Manifest, split: Split, cache_dir: Option<&Path>) -> Result<Vec<Sample>> {
    manifest.split(split).map(|e| load_sample(manifest, e, cache_dir)).collect()
}

/// Stacked tensors of a batch of samples.
#[derive(Clone, Debug)]
pub struct Batch {
    /// `[N, 3, H, W]` in `[-1, 1]`.
    pub image: Tensor,
    /// `[N, 1, H, W]` in `[0, 1]`.
    pub gray: Tensor,
    /// `[N, 1, H, W]`, 1 = hole.
    pub mask: Tensor,
    /// `[N, 1, H, W]` binary.
    pub edges: Tensor,
}

impl Batch {
    pub fn from_samples(samples: &[&Sample]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        let stack = |f: &dyn Fn(&Sample) -> Tensor| -> Result<Tensor> {
            let parts: Vec<Tensor> = samples.iter().map(|s| f(s)).collect();
            Tensor::concat(&parts.iter().collect::<Vec<_>>(), 0)
        };
        Ok(Batch {
            image: stack(&|s| s.image.to_tensor())?,
            gray: stack(&|s| {
                let (h, w) = (s.image.height, s.image.width);
                Tensor::new(&[1, 1, h, w], s.gray()).expect("sized")
            })?,
            mask: stack(&|s| s.mask.to_tensor())?,
            edges: stack(&|s| s.edges.to_tensor())?,
        })
    }
}
