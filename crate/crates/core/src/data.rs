//! Synthetic dataset: thin-lens scenes rendered to training pairs on
//! disk and loaded back into memory.
//!
//! Each pair is three PNGs. The network input is the all-in-focus
//! render box-averaged down to `input_size` (8-bit RGB) alongside the
//! depth plane mapped to [-1, 1] (16-bit grayscale). The target is the
//! shallow depth-of-field render at twice the input size. Values are
//! snapped to the PNG grid when the pair is rendered, so a dataset in
//! memory and the same dataset reloaded from disk agree bit for bit.

use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ConfigError, DataError, Error};
use crate::io;
use crate::kernels;
use crate::num::Element;
use crate::render::{bokeh, rasterize, SceneSpec, ThinLens};
use crate::rng::DetRng;
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "dataset.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub pairs: usize,
    /// Network input edge length; targets are rendered at twice this.
    pub input_size: usize,
    pub seed: u64,
    pub aperture: f64,
    pub focus_depth: f64,
    pub max_depth: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            pairs: 200,
            input_size: 64,
            seed: 7,
            aperture: 50.0,
            focus_depth: 2.0,
            max_depth: 10.0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let field = |f: &'static str, detail: String| ConfigError::Invalid { field: f, detail };
        if self.pairs < 10 {
            return Err(field(
                "pairs",
                format!("need at least 10 for a train/val/test split, got {}", self.pairs),
            ));
        }
        if self.input_size < 32 || self.input_size % 2 != 0 {
            return Err(field(
                "input_size",
                format!("must be even and >= 32, got {}", self.input_size),
            ));
        }
        if !(self.aperture > 0.0) || !self.aperture.is_finite() {
            return Err(field("aperture", format!("must be positive, got {}", self.aperture)));
        }
        if !(self.focus_depth > 0.0) || !self.focus_depth.is_finite() {
            return Err(field(
                "focus_depth",
                format!("must be positive, got {}", self.focus_depth),
            ));
        }
        if !(self.max_depth > self.focus_depth + 1.0) || !self.max_depth.is_finite() {
            return Err(field(
                "max_depth",
                format!(
                    "must exceed focus_depth {} by at least 1, got {}",
                    self.focus_depth, self.max_depth
                ),
            ));
        }
        Ok(())
    }

    /// Depth in scene units mapped to [-1, 1] over [0, max_depth].
    pub fn normalize_depth(&self, d: f64) -> f64 {
        d / (self.max_depth / 2.0) - 1.0
    }

    pub fn lens(&self) -> ThinLens {
        ThinLens {
            aperture: self.aperture,
            focus_depth: self.focus_depth,
        }
    }

    /// Contiguous index ranges: first 80% train, next 10% validation,
    /// remainder test.
    pub fn splits(&self) -> (Range<usize>, Range<usize>, Range<usize>) {
        let n = self.pairs;
        let t = n * 8 / 10;
        let v = n / 10;
        (0..t, t..t + v, t + v..n)
    }
}

/// One rendered pair: `input` is [4, S, S] (RGB plus depth), `target`
/// is [3, 2S, 2S]. Everything sits in [-1, 1] on the PNG grid.
#[derive(Debug, Clone)]
pub struct Sample<T: Element> {
    pub input: Tensor<T>,
    pub target: Tensor<T>,
}

/// Renders pair `index` deterministically from the config seed.
pub fn render_pair<T: Element>(cfg: &DatasetConfig, index: usize) -> Result<Sample<T>, Error> {
    cfg.validate()?;
    let mut rng = DetRng::new(DetRng::sub_seed(cfg.seed, index as u64));
    let scene = SceneSpec::sample(&mut rng, cfg.focus_depth, cfg.max_depth);
    let full = 2 * cfg.input_size;
    let raster = rasterize(&scene, full)?;
    let blurred = bokeh(&scene, &cfg.lens(), full)?;

    let s = cfg.input_size;
    let plane = s * s;
    let mut input = vec![T::zero(); 4 * plane];
    for ch in 0..3 {
        let signed: Vec<f64> = raster.rgb[ch].iter().map(|&c| c * 2.0 - 1.0).collect();
        let down = kernels::box_down2(&signed, 1, full, full);
        for (dst, &v) in input[ch * plane..(ch + 1) * plane].iter_mut().zip(&down) {
            *dst = T::from_f64(io::quantize_rgb8(v));
        }
    }
    let depth_signed: Vec<f64> = raster.depth.iter().map(|&d| cfg.normalize_depth(d)).collect();
    let depth_down = kernels::box_down2(&depth_signed, 1, full, full);
    for (dst, &v) in input[3 * plane..].iter_mut().zip(&depth_down) {
        *dst = T::from_f64(io::quantize_gray16(v));
    }

    let mut target = vec![T::zero(); 3 * full * full];
    for ch in 0..3 {
        for (dst, &c) in target[ch * full * full..(ch + 1) * full * full]
            .iter_mut()
            .zip(&blurred[ch])
        {
            *dst = T::from_f64(io::quantize_rgb8(c * 2.0 - 1.0));
        }
    }

    Ok(Sample {
        input: Tensor::new(vec![4, s, s], input)?,
        target: Tensor::new(vec![3, full, full], target)?,
    })
}

fn pair_paths(dir: &Path, index: usize) -> [std::path::PathBuf; 3] {
    [
        dir.join(format!("pair{index:04}_input.png")),
        dir.join(format!("pair{index:04}_depth.png")),
        dir.join(format!("pair{index:04}_target.png")),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub config: DatasetConfig,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

/// Renders every pair to `dir` and writes the manifest.
pub fn generate_dataset(cfg: &DatasetConfig, dir: &Path) -> Result<Manifest, Error> {
    cfg.validate()?;
    std::fs::create_dir_all(dir).map_err(DataError::Io)?;
    let s = cfg.input_size;
    for i in 0..cfg.pairs {
        let sample: Sample<f64> = render_pair(cfg, i)?;
        let [input_path, depth_path, target_path] = pair_paths(dir, i);
        let rgb = Tensor::new(vec![3, s, s], sample.input.data()[..3 * s * s].to_vec())?;
        let depth = Tensor::new(vec![1, s, s], sample.input.data()[3 * s * s..].to_vec())?;
        io::write_rgb8(&input_path, &rgb)?;
        io::write_gray16(&depth_path, &depth)?;
        io::write_rgb8(&target_path, &sample.target)?;
    }
    let (train, val, test) = cfg.splits();
    let manifest = Manifest {
        config: cfg.clone(),
        train: train.len(),
        val: val.len(),
        test: test.len(),
    };
    io::write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

/// A dataset held fully in memory, split into contiguous ranges.
#[derive(Debug)]
pub struct Dataset<T: Element> {
    pub config: DatasetConfig,
    pub samples: Vec<Sample<T>>,
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

impl<T: Element> Dataset<T> {
    pub fn load(dir: &Path) -> Result<Self, Error> {
        let manifest_path = dir.join(MANIFEST_FILE);
        if !manifest_path.is_file() {
            return Err(DataError::MissingFile(manifest_path.display().to_string()).into());
        }
        let manifest: Manifest = io::read_json(&manifest_path)
            .map_err(|e| DataError::Manifest(e.to_string()))?;
        let cfg = manifest.config;
        cfg.validate()?;
        let (train, val, test) = cfg.splits();
        if manifest.train != train.len() || manifest.val != val.len() || manifest.test != test.len()
        {
            return Err(DataError::Manifest(format!(
                "split sizes {}/{}/{} disagree with {} pairs",
                manifest.train, manifest.val, manifest.test, cfg.pairs
            ))
            .into());
        }
        let s = cfg.input_size;
        let full = 2 * s;
        let mut samples = Vec::with_capacity(cfg.pairs);
        for i in 0..cfg.pairs {
            let [input_path, depth_path, target_path] = pair_paths(dir, i);
            for p in [&input_path, &depth_path, &target_path] {
                if !p.is_file() {
                    return Err(DataError::MissingFile(p.display().to_string()).into());
                }
            }
            let rgb: Tensor<T> = io::read_rgb8(&input_path)?;
            let depth: Tensor<T> = io::read_gray16(&depth_path)?;
            let target: Tensor<T> = io::read_rgb8(&target_path)?;
            if rgb.shape() != [3, s, s] {
                return Err(DataError::Manifest(format!(
                    "{}: expected [3, {s}, {s}], got {:?}",
                    input_path.display(),
                    rgb.shape()
                ))
                .into());
            }
            if depth.shape() != [1, s, s] {
                return Err(DataError::Manifest(format!(
                    "{}: expected [1, {s}, {s}], got {:?}",
                    depth_path.display(),
                    depth.shape()
                ))
                .into());
            }
            if target.shape() != [3, full, full] {
                return Err(DataError::Manifest(format!(
                    "{}: expected [3, {full}, {full}], got {:?}",
                    target_path.display(),
                    target.shape()
                ))
                .into());
            }
            let mut input = rgb.into_data();
            input.extend_from_slice(depth.data());
            samples.push(Sample {
                input: Tensor::new(vec![4, s, s], input)?,
                target,
            });
        }
        Ok(Self {
            config: cfg,
            samples,
            train,
            val,
            test,
        })
    }
}
