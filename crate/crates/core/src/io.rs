//! Binary checkpoint (`TMAC`) and dataset (`TMAD`) files.
//!
//! All integers are little-endian `u32`, all reals little-endian `f64`.
//!
//! Checkpoint:
//! ```text
//! "TMAC" version:u32=1 count:u32
//! count × { name_len:u32 name:utf8 rank:u32 dims:u32[rank] data:f64[prod(dims)] }
//! ```
//! The first entry is always `__config`, a rank-1 tensor holding, in order:
//! memory_length, key_channels, value_channels, num_classes, aggregation
//! (0 concat, 1 sum), attention_scaling (0 none, 1 inv_sqrt_ck), encoder
//! (0 1x1+3x3, 1 3x3, 2 1x1), aux_loss_weight, stage count S, then S pairs of
//! (stage width, stage stride). Model parameters follow in construction
//! order. Training checkpoints append `__optim.iteration` (one element) and
//! one `__optim.velocity.<param name>` per parameter.
//!
//! Dataset:
//! ```text
//! "TMAD" version:u32=1 count:u32
//! count × { T:u32 H:u32 W:u32 (T+1) × f64[3·H·W] labels:u8[H·W] }
//! ```
//! Frames are the T memory frames in temporal order followed by the query.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::data::VideoClip;
use crate::error::{Error, Result};
use crate::label::LabelMap;
use crate::model::{Aggregation, AttentionScaling, EncoderKind, ModelConfig, Stage, TmaNet};
use crate::param::ParamStore;
use crate::tensor::Tensor;
use crate::train::OptimState;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TMAC";
pub const DATASET_MAGIC: &[u8; 4] = b"TMAD";
pub const FORMAT_VERSION: u32 = 1;

const CONFIG_NAME: &str = "__config";
const ITERATION_NAME: &str = "__optim.iteration";
const VELOCITY_PREFIX: &str = "__optim.velocity.";

// ---------------------------------------------------------------------------
// primitive encoding

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_len(buf: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::contract(format!("{v} does not fit in a u32 field")))?;
    put_u32(buf, v);
    Ok(())
}

fn put_f64s(buf: &mut Vec<u8>, data: &[f64]) {
    buf.reserve(data.len() * 8);
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            format!("truncated: need {n} bytes at offset {}, file has {}", self.pos, self.bytes.len())
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64s(&mut self, n: usize) -> std::result::Result<Vec<f64>, String> {
        let bytes = self.take(n.checked_mul(8).ok_or("length overflow")?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }

    fn header(&mut self, magic: &[u8; 4]) -> std::result::Result<u32, String> {
        if self.take(4)? != magic {
            return Err(format!("bad magic, expected {:?}", std::str::from_utf8(magic).unwrap_or("?")));
        }
        let version = self.u32()?;
        if version != FORMAT_VERSION {
            return Err(format!("unsupported version {version}"));
        }
        self.u32()
    }

    fn finish(&self) -> std::result::Result<(), String> {
        if self.pos != self.bytes.len() {
            return Err(format!("{} trailing bytes", self.bytes.len() - self.pos));
        }
        Ok(())
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|f| BufReader::new(f).read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    Ok(bytes)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    File::create(path)
        .and_then(|f| {
            let mut w = BufWriter::new(f);
            w.write_all(bytes)?;
            w.flush()
        })
        .map_err(|e| Error::io(path, e))
}

fn format_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Format { path: path.to_path_buf(), msg: msg.into() }
}

// ---------------------------------------------------------------------------
// checkpoint

fn config_tensor(c: &ModelConfig) -> Tensor {
    let mut v = vec![
        c.memory_length as f64,
        c.key_channels as f64,
        c.value_channels as f64,
        c.num_classes as f64,
        c.aggregation.code(),
        c.attention_scaling.code(),
        c.encoder.code(),
        c.aux_loss_weight,
        c.backbone.len() as f64,
    ];
    for s in &c.backbone {
        v.push(s.width as f64);
        v.push(s.stride as f64);
    }
    let n = v.len();
    Tensor::new(vec![n], v).expect("rank-1 config")
}

fn config_from_tensor(t: &Tensor) -> std::result::Result<ModelConfig, String> {
    let v = t.data();
    let count = |x: f64| -> std::result::Result<usize, String> {
        if x >= 0.0 && x.fract() == 0.0 && x < u32::MAX as f64 {
            Ok(x as usize)
        } else {
            Err(format!("config field {x} is not a count"))
        }
    };
    if v.len() < 9 {
        return Err(format!("config holds {} fields, need at least 9", v.len()));
    }
    let stages = count(v[8])?;
    if v.len() != 9 + 2 * stages {
        return Err(format!("config holds {} fields for {stages} stages", v.len()));
    }
    let backbone = (0..stages)
        .map(|i| Ok(Stage { width: count(v[9 + 2 * i])?, stride: count(v[10 + 2 * i])? }))
        .collect::<std::result::Result<_, String>>()?;
    let config = ModelConfig {
        memory_length: count(v[0])?,
        key_channels: count(v[1])?,
        value_channels: count(v[2])?,
        num_classes: count(v[3])?,
        aggregation: Aggregation::from_code(v[4]).ok_or("bad aggregation code")?,
        attention_scaling: AttentionScaling::from_code(v[5]).ok_or("bad attention scaling code")?,
        encoder: EncoderKind::from_code(v[6]).ok_or("bad encoder code")?,
        aux_loss_weight: v[7],
        backbone,
    };
    config.validate().map_err(|e| e.to_string())?;
    Ok(config)
}

fn put_entry(buf: &mut Vec<u8>, name: &str, t: &Tensor) -> Result<()> {
    put_len(buf, name.len())?;
    buf.extend_from_slice(name.as_bytes());
    put_len(buf, t.rank())?;
    for &d in t.shape() {
        put_len(buf, d)?;
    }
    put_f64s(buf, t.data());
    Ok(())
}

pub fn encode_checkpoint(model: &TmaNet, optim: Option<&OptimState>) -> Result<Vec<u8>> {
    let params = model.params();
    let extra = optim.map_or(0, |o| 1 + o.velocity.len());
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut buf, FORMAT_VERSION);
    put_len(&mut buf, 1 + params.len() + extra)?;
    put_entry(&mut buf, CONFIG_NAME, &config_tensor(model.config()))?;
    for p in params.iter() {
        put_entry(&mut buf, &p.name, &p.value)?;
    }
    if let Some(o) = optim {
        if o.velocity.len() != params.len() {
            return Err(Error::shape("optimizer state does not match the parameters"));
        }
        put_entry(&mut buf, ITERATION_NAME, &Tensor::scalar(o.iteration as f64))?;
        for (p, v) in params.iter().zip(&o.velocity) {
            put_entry(&mut buf, &format!("{VELOCITY_PREFIX}{}", p.name), v)?;
        }
    }
    Ok(buf)
}

/// Model plus optimiser state when the checkpoint carries one.
pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<(TmaNet, Option<OptimState>)> {
    let fail = |m: String| format_err(path, m);
    let mut cur = Cursor { bytes, pos: 0 };
    let count = cur.header(CHECKPOINT_MAGIC).map_err(fail)?;
    let mut entries = Vec::new();
    for _ in 0..count {
        let name_len = cur.u32().map_err(fail)? as usize;
        let name = String::from_utf8(cur.take(name_len).map_err(fail)?.to_vec())
            .map_err(|_| format_err(path, "parameter name is not UTF-8"))?;
        let rank = cur.u32().map_err(fail)? as usize;
        let dims = (0..rank).map(|_| cur.u32().map(|d| d as usize)).collect::<std::result::Result<Vec<_>, _>>().map_err(fail)?;
        let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| format_err(path, "tensor too large"))?;
        let data = cur.f64s(n).map_err(fail)?;
        let t = Tensor::new(dims, data).map_err(|e| format_err(path, format!("entry {name}: {e}")))?;
        entries.push((name, t));
    }
    cur.finish().map_err(fail)?;

    let mut it = entries.into_iter();
    let (name, cfg) = it.next().ok_or_else(|| format_err(path, "checkpoint has no entries"))?;
    if name != CONFIG_NAME {
        return Err(format_err(path, format!("first entry must be {CONFIG_NAME}, found {name}")));
    }
    let config = config_from_tensor(&cfg).map_err(|m| format_err(path, m))?;
    let mut model = TmaNet::new(config, 0)?;

    let rest: Vec<(String, Tensor)> = it.collect();
    let n_params = model.params().len();
    if rest.len() < n_params {
        return Err(format_err(path, format!("{} parameters for a model with {n_params}", rest.len())));
    }
    let mut store = ParamStore::new();
    for (name, t) in &rest[..n_params] {
        store.push(name.clone(), t.clone());
    }
    model.load_params(store).map_err(|e| format_err(path, e.to_string()))?;

    let extra = &rest[n_params..];
    let optim = match extra {
        [] => None,
        [(iter_name, iter), velocities @ ..] if iter_name == ITERATION_NAME && velocities.len() == n_params => {
            let mut velocity = Vec::with_capacity(n_params);
            for (p, (name, v)) in model.params().iter().zip(velocities) {
                if name.strip_prefix(VELOCITY_PREFIX) != Some(p.name.as_str()) || v.shape() != p.value.shape() {
                    return Err(format_err(path, format!("unexpected optimizer entry {name} {:?}", v.shape())));
                }
                velocity.push(v.clone());
            }
            Some(OptimState { velocity, iteration: iter.item() as usize })
        }
        _ => return Err(format_err(path, "malformed optimizer section")),
    };
    Ok((model, optim))
}

pub fn save_checkpoint(path: &Path, model: &TmaNet, optim: Option<&OptimState>) -> Result<()> {
    write_file(path, &encode_checkpoint(model, optim)?)
}

pub fn load_checkpoint(path: &Path) -> Result<(TmaNet, Option<OptimState>)> {
    decode_checkpoint(&read_file(path)?, path)
}

// ---------------------------------------------------------------------------
// dataset

pub fn encode_dataset(clips: &[VideoClip]) -> Result<Vec<u8>> {
    if clips.is_empty() {
        return Err(Error::contract("empty dataset"));
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(DATASET_MAGIC);
    put_u32(&mut buf, FORMAT_VERSION);
    put_len(&mut buf, clips.len())?;
    for clip in clips {
        let (c, h, w) = clip.query.chw()?;
        if c != 3 || (h, w) != (clip.label.height(), clip.label.width()) {
            return Err(Error::shape(format!("clip query {:?} does not fit its label", clip.query.shape())));
        }
        put_len(&mut buf, clip.memory.len())?;
        put_len(&mut buf, h)?;
        put_len(&mut buf, w)?;
        for f in clip.memory.iter().chain(std::iter::once(&clip.query)) {
            if f.shape() != clip.query.shape() {
                return Err(Error::shape(format!("frame {:?} in a {h}×{w} clip", f.shape())));
            }
            put_f64s(&mut buf, f.data());
        }
        buf.extend_from_slice(clip.label.data());
    }
    Ok(buf)
}

pub fn decode_dataset(bytes: &[u8], path: &Path) -> Result<Vec<VideoClip>> {
    let fail = |m: String| format_err(path, m);
    let mut cur = Cursor { bytes, pos: 0 };
    let count = cur.header(DATASET_MAGIC).map_err(fail)?;
    if count == 0 {
        return Err(format_err(path, "empty dataset"));
    }
    let mut clips = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let t = cur.u32().map_err(fail)? as usize;
        let h = cur.u32().map_err(fail)? as usize;
        let w = cur.u32().map_err(fail)? as usize;
        if h == 0 || w == 0 {
            return Err(format_err(path, "zero frame extent"));
        }
        let mut frames = Vec::with_capacity(t + 1);
        for _ in 0..=t {
            let data = cur.f64s(3 * h * w).map_err(fail)?;
            frames.push(Tensor::new(vec![3, h, w], data)?);
        }
        let label = LabelMap::new(h, w, cur.take(h * w).map_err(fail)?.to_vec())?;
        let query = frames.pop().expect("t + 1 frames");
        clips.push(VideoClip { memory: frames, query, label, query_index: t });
    }
    cur.finish().map_err(fail)?;
    Ok(clips)
}

pub fn save_dataset(path: &Path, clips: &[VideoClip]) -> Result<()> {
    write_file(path, &encode_dataset(clips)?)
}

pub fn load_dataset(path: &Path) -> Result<Vec<VideoClip>> {
    decode_dataset(&read_file(path)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_clip, SyntheticSceneSpec};

    fn tiny_config() -> ModelConfig {
        ModelConfig::with_key_channels(2, 2, 3, vec![Stage { width: 4, stride: 2 }, Stage { width: 4, stride: 2 }])
    }

    #[test]
    fn checkpoint_header_layout() {
        let model = TmaNet::new(tiny_config(), 1).unwrap();
        let bytes = encode_checkpoint(&model, None).unwrap();
        assert_eq!(&bytes[..4], b"TMAC");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize, 1 + model.params().len());
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 8);
        assert_eq!(&bytes[16..24], b"__config");
    }

    #[test]
    fn checkpoint_round_trip_with_optimizer() {
        let mut model = TmaNet::new(tiny_config(), 3).unwrap();
        model.params_mut().get_mut(0).value.data_mut()[0] = f64::from_bits(0x3FF0_0000_0000_0001);
        let mut optim = OptimState::new(model.params());
        optim.iteration = 17;
        optim.velocity[2].data_mut()[1] = -0.125;
        let path = Path::new("mem.tmac");
        let bytes = encode_checkpoint(&model, Some(&optim)).unwrap();
        let (back, o) = decode_checkpoint(&bytes, path).unwrap();
        assert_eq!(back, model);
        assert_eq!(o.unwrap(), optim);
        assert_eq!(encode_checkpoint(&back, Some(&optim)).unwrap(), bytes);
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let model = TmaNet::new(tiny_config(), 3).unwrap();
        let bytes = encode_checkpoint(&model, None).unwrap();
        let path = Path::new("bad.tmac");
        assert!(matches!(decode_checkpoint(&bytes[..bytes.len() - 1], path), Err(Error::Format { .. })));
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(matches!(decode_checkpoint(&wrong, path), Err(Error::Format { .. })));
        let mut longer = bytes;
        longer.push(0);
        assert!(matches!(decode_checkpoint(&longer, path), Err(Error::Format { .. })));
    }

    #[test]
    fn dataset_round_trip() {
        let spec = SyntheticSceneSpec { seed: 4, ..Default::default() };
        let clips: Vec<VideoClip> = (0..3)
            .map(|i| generate_clip(&SyntheticSceneSpec { seed: i, ..spec.clone() }, 2, 8, 8, 4).unwrap().final_snippet())
            .collect();
        let bytes = encode_dataset(&clips).unwrap();
        assert_eq!(&bytes[..4], b"TMAD");
        assert_eq!(bytes.len(), 12 + 3 * (12 + 4 * 3 * 64 * 8 + 64));
        let back = decode_dataset(&bytes, Path::new("d.tmad")).unwrap();
        assert_eq!(back, clips);
        assert!(encode_dataset(&[]).is_err());
    }
}
