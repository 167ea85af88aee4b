//! On-disk formats: PNG image samples, binary checkpoints, JSON run
//! configuration, and the NDJSON event log.
//!
//! Images live in the engine as values in [-1, 1]. Color planes map to
//! 8-bit PNG channels through `round((v + 1) * 127.5)` and depth planes
//! to 16-bit grayscale through the same with 32767.5, both rounding
//! half away from zero. The quantize helpers snap a value onto the PNG
//! grid so datasets held in memory match their files bit for bit.
//!
//! Checkpoints are a single file: `PYNB` magic, a version word, a
//! length-prefixed JSON header, named tensor records, and a trailing
//! CRC32 over everything before it. All integers are little endian.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{ConfigError, DataError, Error, FormatError};
use crate::model::PyNetConfig;
use crate::num::Element;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"PYNB";
pub const CHECKPOINT_VERSION: u16 = 1;

// ── PNG samples ──────────────────────────────────────────────────────

pub fn quantize_rgb8(v: f64) -> f64 {
    let q = ((v + 1.0) * 127.5).round().clamp(0.0, 255.0);
    q / 127.5 - 1.0
}

pub fn quantize_gray16(v: f64) -> f64 {
    let q = ((v + 1.0) * 32767.5).round().clamp(0.0, 65535.0);
    q / 32767.5 - 1.0
}

/// Writes a [3, H, W] tensor of [-1, 1] values as an 8-bit RGB PNG.
pub fn write_rgb8<T: Element>(path: &Path, img: &Tensor<T>) -> Result<(), DataError> {
    let (n, c, h, w) = img
        .as_nchw("write_rgb8")
        .map_err(|e| DataError::Png(e.to_string()))?;
    if n != 1 || c != 3 {
        return Err(DataError::Png(format!(
            "expected one 3-channel image, got {:?}",
            img.shape()
        )));
    }
    let data = img.data();
    let plane = h * w;
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for (x, y, px) in buf.enumerate_pixels_mut() {
        let i = y as usize * w + x as usize;
        for ch in 0..3 {
            let v = data[ch * plane + i].to_f64();
            px.0[ch] = ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8;
        }
    }
    buf.save(path).map_err(|e| DataError::Png(e.to_string()))
}

/// Reads an 8-bit RGB PNG into a [3, H, W] tensor of [-1, 1] values.
pub fn read_rgb8<T: Element>(path: &Path) -> Result<Tensor<T>, DataError> {
    let img = image::open(path).map_err(|e| DataError::Png(format!("{}: {e}", path.display())))?;
    let rgb = match img {
        image::DynamicImage::ImageRgb8(b) => b,
        other => {
            return Err(DataError::Png(format!(
                "{}: expected 8-bit RGB, got {other:?}",
                path.display()
            )))
        }
    };
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let plane = h * w;
    let mut data = vec![T::zero(); 3 * plane];
    for (x, y, px) in rgb.enumerate_pixels() {
        let i = y as usize * w + x as usize;
        for ch in 0..3 {
            data[ch * plane + i] = T::from_f64(px.0[ch] as f64 / 127.5 - 1.0);
        }
    }
    Tensor::new(vec![3, h, w], data).map_err(|e| DataError::Png(e.to_string()))
}

/// Writes a [1, H, W] or [H, W] tensor of [-1, 1] values as a 16-bit
/// grayscale PNG.
pub fn write_gray16<T: Element>(path: &Path, img: &Tensor<T>) -> Result<(), DataError> {
    let (h, w) = match img.shape() {
        [1, h, w] | [h, w] => (*h, *w),
        s => {
            return Err(DataError::Png(format!(
                "expected one grayscale plane, got {s:?}"
            )))
        }
    };
    let data = img.data();
    let mut buf = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(w as u32, h as u32);
    for (x, y, px) in buf.enumerate_pixels_mut() {
        let v = data[y as usize * w + x as usize].to_f64();
        px.0[0] = ((v + 1.0) * 32767.5).round().clamp(0.0, 65535.0) as u16;
    }
    buf.save(path).map_err(|e| DataError::Png(e.to_string()))
}

/// Reads a 16-bit grayscale PNG into a [1, H, W] tensor.
pub fn read_gray16<T: Element>(path: &Path) -> Result<Tensor<T>, DataError> {
    let img = image::open(path).map_err(|e| DataError::Png(format!("{}: {e}", path.display())))?;
    let gray = match img {
        image::DynamicImage::ImageLuma16(b) => b,
        other => {
            return Err(DataError::Png(format!(
                "{}: expected 16-bit grayscale, got {other:?}",
                path.display()
            )))
        }
    };
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    let mut data = vec![T::zero(); h * w];
    for (x, y, px) in gray.enumerate_pixels() {
        data[y as usize * w + x as usize] = T::from_f64(px.0[0] as f64 / 32767.5 - 1.0);
    }
    Tensor::new(vec![1, h, w], data).map_err(|e| DataError::Png(e.to_string()))
}

// ── checkpoints ──────────────────────────────────────────────────────

/// Where a training run stands, embedded in every checkpoint so a run
/// can resume exactly where it stopped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainCursor {
    /// Level currently being trained.
    pub stage: usize,
    /// Completed epochs within that stage.
    pub epoch: usize,
    /// Optimizer steps taken within that stage.
    pub step: u64,
    pub rng_seed: u64,
    /// ChaCha word position, split into two words for JSON.
    pub rng_word_hi: u64,
    pub rng_word_lo: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: PyNetConfig,
    pub cursor: TrainCursor,
}

fn push_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

pub fn save_checkpoint<T: Element>(
    path: &Path,
    meta: &CheckpointMeta,
    tensors: &[(String, &Tensor<T>)],
) -> Result<(), Error> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let meta_json =
        serde_json::to_vec(meta).map_err(|e| FormatError::BadMeta(e.to_string()))?;
    push_u32(&mut buf, meta_json.len() as u32);
    buf.extend_from_slice(&meta_json);
    push_u32(&mut buf, tensors.len() as u32);
    for (name, tensor) in tensors {
        push_u32(&mut buf, name.len() as u32);
        buf.extend_from_slice(name.as_bytes());
        buf.push(T::DTYPE_CODE);
        buf.push(tensor.rank() as u8);
        for &e in tensor.shape() {
            push_u32(&mut buf, e as u32);
        }
        for &v in tensor.data() {
            v.write_le(&mut buf);
        }
    }
    let crc = crc32fast::hash(&buf);
    push_u32(&mut buf, crc);
    let mut file = fs::File::create(path).map_err(FormatError::Io)?;
    file.write_all(&buf).map_err(FormatError::Io)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        if self.pos + n > self.buf.len() {
            return Err(FormatError::Truncated);
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8, FormatError> {
        Ok(self.take(1)?[0])
    }
}

pub fn load_checkpoint<T: Element>(
    path: &Path,
) -> Result<(CheckpointMeta, Vec<(String, Tensor<T>)>), Error> {
    let mut raw = Vec::new();
    fs::File::open(path)
        .map_err(FormatError::Io)?
        .read_to_end(&mut raw)
        .map_err(FormatError::Io)?;
    if raw.len() < 4 || raw[..4] != CHECKPOINT_MAGIC {
        return Err(FormatError::BadMagic.into());
    }
    if raw.len() < 10 {
        return Err(FormatError::Truncated.into());
    }
    let body = &raw[..raw.len() - 4];
    let stored = u32::from_le_bytes(raw[raw.len() - 4..].try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(FormatError::CrcMismatch { stored, computed }.into());
    }
    let mut cur = Cursor { buf: body, pos: 4 };
    let version = u16::from_le_bytes(cur.take(2)?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(FormatError::BadVersion(version).into());
    }
    let meta_len = cur.u32()? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(cur.take(meta_len)?)
        .map_err(|e| FormatError::BadMeta(e.to_string()))?;
    let count = cur.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = cur.u32()? as usize;
        let name = String::from_utf8(cur.take(name_len)?.to_vec())
            .map_err(|e| FormatError::BadMeta(e.to_string()))?;
        let dtype = cur.u8()?;
        if dtype != 0 && dtype != 1 {
            return Err(FormatError::BadDType(dtype).into());
        }
        if dtype != T::DTYPE_CODE {
            return Err(FormatError::DTypeMismatch {
                name,
                expected: T::DTYPE_NAME,
                got: if dtype == 0 { "f32" } else { "f64" },
            }
            .into());
        }
        let rank = cur.u8()? as usize;
        if rank == 0 || rank > 8 {
            return Err(FormatError::ShapeDisagreement {
                name,
                detail: format!("rank {rank} out of range"),
            }
            .into());
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let payload = cur.take(numel * T::BYTES)?;
        let mut data = Vec::with_capacity(numel);
        for chunk in payload.chunks_exact(T::BYTES) {
            data.push(T::read_le(chunk));
        }
        let tensor = Tensor::new(shape, data).map_err(|e| FormatError::ShapeDisagreement {
            name: name.clone(),
            detail: e.to_string(),
        })?;
        tensors.push((name, tensor));
    }
    if cur.pos != body.len() {
        return Err(FormatError::Truncated.into());
    }
    Ok((meta, tensors))
}

// ── run configuration ────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub model: PyNetConfig,
    pub seed: u64,
    pub batch_size: usize,
    pub epochs_per_level: usize,
    pub learning_rate: f64,
    /// The full-resolution stage trains at `learning_rate * level1_lr_scale`.
    pub level1_lr_scale: f64,
    /// Checkpoint interval in epochs.
    pub checkpoint_every: usize,
    /// Single-threaded execution when set; results are identical either
    /// way, this trades speed for simpler profiling.
    pub deterministic: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::new(),
            out_dir: PathBuf::new(),
            model: PyNetConfig::default(),
            seed: 1,
            batch_size: 8,
            epochs_per_level: 30,
            learning_rate: 5e-5,
            level1_lr_scale: 0.5,
            checkpoint_every: 1,
            deterministic: false,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let field = |f: &'static str, detail: String| ConfigError::Invalid { field: f, detail };
        self.model.validate()?;
        if self.data_dir.as_os_str().is_empty() {
            return Err(field("data_dir", "must be set".into()));
        }
        if self.out_dir.as_os_str().is_empty() {
            return Err(field("out_dir", "must be set".into()));
        }
        if self.batch_size == 0 {
            return Err(field("batch_size", "must be >= 1".into()));
        }
        if self.epochs_per_level == 0 {
            return Err(field("epochs_per_level", "must be >= 1".into()));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(field(
                "learning_rate",
                format!("must be finite and >= 0, got {}", self.learning_rate),
            ));
        }
        if !(self.level1_lr_scale > 0.0) || !self.level1_lr_scale.is_finite() {
            return Err(field(
                "level1_lr_scale",
                format!("must be positive, got {}", self.level1_lr_scale),
            ));
        }
        if self.checkpoint_every == 0 {
            return Err(field("checkpoint_every", "must be >= 1".into()));
        }
        Ok(())
    }
}

pub fn read_json<D: for<'de> Deserialize<'de>>(path: &Path) -> Result<D, ConfigError> {
    let text = fs::read_to_string(path).map_err(|e| ConfigError::Path {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    Ok(serde_json::from_str(&text)?)
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<(), ConfigError> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| ConfigError::Path {
        path: path.display().to_string(),
        detail: e.to_string(),
    })
}

// ── event log ────────────────────────────────────────────────────────

pub fn now_unix() -> f64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

/// Appends one JSON object per line. A `t` timestamp field is added if
/// the value does not already carry one.
pub fn append_event(path: &Path, event: &serde_json::Value) -> Result<(), Error> {
    let mut event = event.clone();
    if let serde_json::Value::Object(map) = &mut event {
        map.entry("t".to_string())
            .or_insert_with(|| serde_json::json!(now_unix()));
    }
    let line = serde_json::to_string(&event).map_err(|e| FormatError::BadMeta(e.to_string()))?;
    let mut file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(FormatError::Io)?;
    file.write_all(line.as_bytes()).map_err(FormatError::Io)?;
    file.write_all(b"\n").map_err(FormatError::Io)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::DetRng;

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn rgb8_round_trips_quantized_values() {
        let dir = tmp();
        let path = dir.path().join("img.png");
        let mut rng = DetRng::new(1);
        let data: Vec<f64> = (0..3 * 8 * 8)
            .map(|_| quantize_rgb8(rng.uniform(-1.0, 1.0)))
            .collect();
        let img = Tensor::new(vec![3, 8, 8], data).unwrap();
        write_rgb8(&path, &img).unwrap();
        let back: Tensor<f64> = read_rgb8(&path).unwrap();
        assert_eq!(back.shape(), img.shape());
        for (a, b) in back.data().iter().zip(img.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn rgb8_round_trips_in_f32_as_well() {
        let dir = tmp();
        let path = dir.path().join("img.png");
        let mut rng = DetRng::new(2);
        let data: Vec<f32> = (0..3 * 8 * 8)
            .map(|_| quantize_rgb8(rng.uniform(-1.0, 1.0)) as f32)
            .collect();
        let img = Tensor::new(vec![3, 8, 8], data).unwrap();
        write_rgb8(&path, &img).unwrap();
        let back: Tensor<f32> = read_rgb8(&path).unwrap();
        for (a, b) in back.data().iter().zip(img.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn gray16_round_trips_quantized_values() {
        let dir = tmp();
        let path = dir.path().join("depth.png");
        let mut rng = DetRng::new(3);
        let data: Vec<f64> = (0..16 * 16)
            .map(|_| quantize_gray16(rng.uniform(-1.0, 1.0)))
            .collect();
        let img = Tensor::new(vec![1, 16, 16], data).unwrap();
        write_gray16(&path, &img).unwrap();
        let back: Tensor<f64> = read_gray16(&path).unwrap();
        for (a, b) in back.data().iter().zip(img.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn quantizers_clamp_out_of_range_values() {
        assert_eq!(quantize_rgb8(1.5), 1.0);
        assert_eq!(quantize_rgb8(-2.0), -1.0);
        assert_eq!(quantize_gray16(7.0), 1.0);
    }

    #[test]
    fn reading_wrong_png_kind_errors() {
        let dir = tmp();
        let path = dir.path().join("img.png");
        let img = Tensor::<f64>::zeros(&[3, 4, 4]);
        write_rgb8(&path, &img).unwrap();
        assert!(read_gray16::<f64>(&path).is_err());
    }

    fn sample_meta() -> CheckpointMeta {
        CheckpointMeta {
            model: PyNetConfig::with_levels(3, 2),
            cursor: TrainCursor {
                stage: 3,
                epoch: 5,
                step: 120,
                rng_seed: 99,
                rng_word_hi: 0,
                rng_word_lo: 4096,
            },
        }
    }

    #[test]
    fn checkpoint_round_trips() {
        let dir = tmp();
        let path = dir.path().join("model.ckpt");
        let meta = sample_meta();
        let mut rng = DetRng::new(4);
        let t1 = Tensor::new(
            vec![2, 3, 3, 3],
            (0..54).map(|_| rng.uniform(-1.0, 1.0) as f32).collect(),
        )
        .unwrap();
        let t2 = Tensor::new(vec![2], vec![0.5f32, -0.25]).unwrap();
        save_checkpoint(
            &path,
            &meta,
            &[("w".to_string(), &t1), ("b".to_string(), &t2)],
        )
        .unwrap();
        let (meta2, tensors) = load_checkpoint::<f32>(&path).unwrap();
        assert_eq!(meta, meta2);
        assert_eq!(tensors.len(), 2);
        assert_eq!(tensors[0].0, "w");
        assert_eq!(tensors[0].1.data(), t1.data());
        assert_eq!(tensors[1].1.data(), t2.data());
    }

    #[test]
    fn checkpoint_rejects_wrong_dtype() {
        let dir = tmp();
        let path = dir.path().join("model.ckpt");
        let t = Tensor::new(vec![2], vec![1.0f32, 2.0]).unwrap();
        save_checkpoint(&path, &sample_meta(), &[("w".to_string(), &t)]).unwrap();
        let err = load_checkpoint::<f64>(&path).unwrap_err();
        assert!(err.to_string().contains("dtype"), "{err}");
    }

    #[test]
    fn every_single_byte_flip_is_detected() {
        let dir = tmp();
        let path = dir.path().join("model.ckpt");
        let t = Tensor::new(vec![2, 2], vec![1.0f32, -2.0, 0.5, 3.5]).unwrap();
        save_checkpoint(&path, &sample_meta(), &[("w".to_string(), &t)]).unwrap();
        let orig = fs::read(&path).unwrap();
        let flip_path = dir.path().join("flipped.ckpt");
        for pos in 0..orig.len() {
            let mut bad = orig.clone();
            bad[pos] ^= 0x40;
            fs::write(&flip_path, &bad).unwrap();
            assert!(
                load_checkpoint::<f32>(&flip_path).is_err(),
                "flip at byte {pos} went undetected"
            );
        }
    }

    #[test]
    fn truncation_is_detected_at_every_length() {
        let dir = tmp();
        let path = dir.path().join("model.ckpt");
        let t = Tensor::new(vec![3], vec![1.0f32, 2.0, 3.0]).unwrap();
        save_checkpoint(&path, &sample_meta(), &[("w".to_string(), &t)]).unwrap();
        let orig = fs::read(&path).unwrap();
        let cut_path = dir.path().join("cut.ckpt");
        for len in 0..orig.len() {
            fs::write(&cut_path, &orig[..len]).unwrap();
            assert!(
                load_checkpoint::<f32>(&cut_path).is_err(),
                "truncation to {len} bytes went undetected"
            );
        }
    }

    #[test]
    fn run_config_rejects_unknown_fields() {
        let text = r#"{ "batch_size": 4, "warp_drive": true }"#;
        assert!(serde_json::from_str::<RunConfig>(text).is_err());
        let ok = r#"{ "batch_size": 4 }"#;
        let cfg: RunConfig = serde_json::from_str(ok).unwrap();
        assert_eq!(cfg.batch_size, 4);
        assert_eq!(cfg.epochs_per_level, 30);
    }

    #[test]
    fn run_config_validation_catches_empty_paths_and_zeros() {
        let mut cfg = RunConfig {
            data_dir: "data".into(),
            out_dir: "out".into(),
            ..RunConfig::default()
        };
        assert!(cfg.validate().is_ok());
        cfg.batch_size = 0;
        assert!(cfg.validate().is_err());
        cfg.batch_size = 8;
        cfg.data_dir = PathBuf::new();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn event_log_appends_one_json_object_per_line() {
        let dir = tmp();
        let path = dir.path().join("events.ndjson");
        append_event(&path, &serde_json::json!({"kind": "start", "level": 5})).unwrap();
        append_event(&path, &serde_json::json!({"kind": "epoch", "loss": 0.25})).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        for line in lines {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            assert!(v.get("t").and_then(|t| t.as_f64()).unwrap() > 0.0);
        }
    }
}
