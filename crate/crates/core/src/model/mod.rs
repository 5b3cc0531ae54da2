//! The temporal memory attention network: shared backbone, key/value
//! encoders, memory attention, aggregation and segmentation heads.

mod attention;
mod config;

pub use attention::{aggregate_features, temporal_memory_attention, AttentionMap, EncodedFeatures};
pub use config::{Aggregation, AttentionScaling, EncoderKind, ModelConfig, Stage};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::VideoClip;
use crate::error::{Error, Result};
use crate::label::LabelMap;
use crate::param::ParamStore;
use crate::tape::{GradTape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Conv {
    weight: usize,
    bias: usize,
    stride: usize,
    pad: usize,
}

impl Conv {
    fn apply(&self, tape: &mut GradTape, vars: &[Var], x: Var) -> Result<Var> {
        tape.conv2d(x, vars[self.weight], vars[self.bias], self.stride, self.pad)
    }
}

/// Convs of one encoding layer, relu between consecutive convs.
#[derive(Clone, Debug, PartialEq, Eq)]
struct Encoder {
    convs: Vec<Conv>,
}

impl Encoder {
    fn apply(&self, tape: &mut GradTape, vars: &[Var], x: Var) -> Result<Var> {
        let mut h = x;
        for (i, conv) in self.convs.iter().enumerate() {
            if i > 0 {
                h = tape.relu(h);
            }
            h = conv.apply(tape, vars, h)?;
        }
        Ok(h)
    }
}

struct Builder {
    params: ParamStore,
    rng: ChaCha8Rng,
}

impl Builder {
    /// Uniform fan-in init with bound `sqrt(6 / fan_in)`, zero bias.
    fn conv(&mut self, name: &str, c_in: usize, c_out: usize, k: usize, stride: usize) -> Conv {
        let bound = (6.0 / (c_in * k * k) as f64).sqrt();
        let rng = &mut self.rng;
        let w = Tensor::from_fn(&[c_out, c_in, k, k], |_| rng.gen_range(-bound..bound));
        let weight = self.params.push(format!("{name}.weight"), w);
        let bias = self.params.push(format!("{name}.bias"), Tensor::zeros(&[c_out]));
        Conv { weight, bias, stride, pad: k / 2 }
    }

    fn encoder(&mut self, name: &str, kind: EncoderKind, c_in: usize, c_out: usize) -> Encoder {
        let convs = match kind {
            EncoderKind::Conv3x3 => vec![self.conv(&format!("{name}.0"), c_in, c_out, 3, 1)],
            EncoderKind::Conv1x1 => vec![self.conv(&format!("{name}.0"), c_in, c_out, 1, 1)],
            EncoderKind::Conv1x1Conv3x3 => vec![
                self.conv(&format!("{name}.0"), c_in, c_out, 1, 1),
                self.conv(&format!("{name}.1"), c_out, c_out, 3, 1),
            ],
        };
        Encoder { convs }
    }
}

/// Output of [`TmaNet::forward`]; all handles live on the caller's tape.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    /// `C×H×W`
    pub main_logits: Var,
    /// `C×H×W`, from the penultimate backbone stage
    pub aux_logits: Var,
    /// `N×M` attention, absent for the baseline (`T = 0`)
    pub attention: Option<Var>,
}

#[derive(Clone, Copy, Debug)]
pub struct Losses {
    pub total: Var,
    pub main: Var,
    pub aux: Var,
}

/// Tape-free forward result.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub main_logits: Tensor,
    pub aux_logits: Tensor,
    pub attention: Option<AttentionMap>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TmaNet {
    config: ModelConfig,
    params: ParamStore,
    backbone: Vec<Vec<Conv>>,
    memory_key: Option<Encoder>,
    memory_value: Option<Encoder>,
    query_key: Option<Encoder>,
    query_value: Encoder,
    head: Conv,
    aux_head: Conv,
}

impl TmaNet {
    /// Builds the network with freshly initialized weights. Parameter order
    /// (and therefore every initial value) is a function of `(config, seed)`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut b = Builder { params: ParamStore::new(), rng: ChaCha8Rng::seed_from_u64(seed) };

        let mut backbone = Vec::with_capacity(config.backbone.len());
        let mut c_in = 3;
        for (i, stage) in config.backbone.iter().enumerate() {
            let convs = match stage.stride {
                1 => vec![b.conv(&format!("backbone.{i}.0"), c_in, stage.width, 3, 1)],
                2 => vec![b.conv(&format!("backbone.{i}.0"), c_in, stage.width, 3, 2)],
                _ => vec![
                    b.conv(&format!("backbone.{i}.0"), c_in, stage.width, 3, 2),
                    b.conv(&format!("backbone.{i}.1"), stage.width, stage.width, 3, 2),
                ],
            };
            backbone.push(convs);
            c_in = stage.width;
        }
        let high = c_in;
        let low = config.backbone[config.backbone.len() - 2].width;

        let (ck, cv, kind) = (config.key_channels, config.value_channels, config.encoder);
        let with_memory = config.memory_length > 0;
        let memory_key = with_memory.then(|| b.encoder("encoder.memory_key", kind, high, ck));
        let memory_value = with_memory.then(|| b.encoder("encoder.memory_value", kind, high, cv));
        let query_key = with_memory.then(|| b.encoder("encoder.query_key", kind, high, ck));
        let query_value = b.encoder("encoder.query_value", kind, high, cv);
        let head = b.conv("head", config.head_channels(), config.num_classes, 1, 1);
        let aux_head = b.conv("aux_head", low, config.num_classes, 1, 1);

        Ok(Self {
            config,
            params: b.params,
            backbone,
            memory_key,
            memory_value,
            query_key,
            query_value,
            head,
            aux_head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Replaces all parameter values. Names and shapes must match exactly.
    pub fn load_params(&mut self, params: ParamStore) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::shape(format!(
                "expected {} parameters, got {}",
                self.params.len(),
                params.len()
            )));
        }
        for (mine, theirs) in self.params.iter().zip(params.iter()) {
            if mine.name != theirs.name || mine.value.shape() != theirs.value.shape() {
                return Err(Error::shape(format!(
                    "parameter mismatch: expected {} {:?}, got {} {:?}",
                    mine.name,
                    mine.value.shape(),
                    theirs.name,
                    theirs.value.shape()
                )));
            }
        }
        self.params = params;
        Ok(())
    }

    /// Runs the shared backbone on one `3×H×W` frame; returns
    /// `(penultimate-stage features, final features)`.
    pub fn backbone_forward(&self, tape: &mut GradTape, vars: &[Var], frame: Var) -> Result<(Var, Var)> {
        let (c, h, w) = tape.value(frame).chw()?;
        let os = self.config.output_stride();
        if c != 3 || h % os != 0 || w % os != 0 {
            return Err(Error::shape(format!(
                "frame {:?} must be 3×H×W with H, W divisible by the output stride {os}",
                tape.shape(frame)
            )));
        }
        let mut x = frame;
        let mut low = frame;
        let last = self.backbone.len() - 1;
        for (i, stage) in self.backbone.iter().enumerate() {
            for conv in stage {
                let y = conv.apply(tape, vars, x)?;
                x = tape.relu(y);
            }
            if i + 1 == last {
                low = x;
            }
        }
        Ok((low, x))
    }

    /// Encodes backbone features of the memory frames (each with the shared
    /// memory encoders, stacked on a leading time axis) and of the query.
    pub fn encode(&self, tape: &mut GradTape, vars: &[Var], memory: &[Var], query: Var) -> Result<EncodedFeatures> {
        let (Some(mk_enc), Some(mv_enc), Some(qk_enc)) = (&self.memory_key, &self.memory_value, &self.query_key) else {
            return Err(Error::contract("baseline model (T = 0) has no memory encoders"));
        };
        if memory.is_empty() {
            return Err(Error::contract("encode needs at least one memory frame"));
        }
        let mut keys = Vec::with_capacity(memory.len());
        let mut values = Vec::with_capacity(memory.len());
        for &m in memory {
            let k = mk_enc.apply(tape, vars, m)?;
            let v = mv_enc.apply(tape, vars, m)?;
            let ks = prepend_axis(tape.shape(k));
            let vs = prepend_axis(tape.shape(v));
            keys.push(tape.reshape(k, &ks)?);
            values.push(tape.reshape(v, &vs)?);
        }
        Ok(EncodedFeatures {
            memory_key: tape.concat(&keys)?,
            memory_value: tape.concat(&values)?,
            query_key: qk_enc.apply(tape, vars, query)?,
            query_value: self.query_value.apply(tape, vars, query)?,
        })
    }

    pub fn encode_query_value(&self, tape: &mut GradTape, vars: &[Var], query: Var) -> Result<Var> {
        self.query_value.apply(tape, vars, query)
    }

    /// 1×1 conv to class logits, bilinearly resized to `height×width`.
    pub fn segmentation_head(&self, tape: &mut GradTape, vars: &[Var], f: Var, height: usize, width: usize) -> Result<Var> {
        let logits = self.head.apply(tape, vars, f)?;
        tape.upsample_bilinear(logits, height, width)
    }

    pub fn aux_head(&self, tape: &mut GradTape, vars: &[Var], low: Var, height: usize, width: usize) -> Result<Var> {
        let logits = self.aux_head.apply(tape, vars, low)?;
        tape.upsample_bilinear(logits, height, width)
    }

    /// Full forward pass on `clip`, recording onto `tape`. `vars` must come
    /// from `self.params().bind(tape)`.
    pub fn forward(&self, tape: &mut GradTape, vars: &[Var], clip: &VideoClip) -> Result<ForwardOutput> {
        if clip.memory.len() != self.config.memory_length {
            return Err(Error::contract(format!(
                "clip has {} memory frames, model expects {}",
                clip.memory.len(),
                self.config.memory_length
            )));
        }
        let (_, h, w) = clip.query.chw()?;
        if let Some(bad) = clip.memory.iter().find(|f| f.shape() != clip.query.shape()) {
            return Err(Error::shape(format!(
                "memory frame {:?} does not match query frame {:?}",
                bad.shape(),
                clip.query.shape()
            )));
        }

        let query = tape.leaf(normalize_frame(&clip.query));
        let (low, high) = self.backbone_forward(tape, vars, query)?;

        let (fused, attention) = if self.config.memory_length == 0 {
            (self.encode_query_value(tape, vars, high)?, None)
        } else {
            let mut memory = Vec::with_capacity(clip.memory.len());
            for frame in &clip.memory {
                let f = tape.leaf(normalize_frame(frame));
                memory.push(self.backbone_forward(tape, vars, f)?.1);
            }
            let enc = self.encode(tape, vars, &memory, high)?;
            let (readout, s) = temporal_memory_attention(tape, &enc, self.config.attention_scaling)?;
            let fused = aggregate_features(tape, readout, enc.query_value, self.config.aggregation)?;
            (fused, Some(s))
        };

        let main_logits = self.segmentation_head(tape, vars, fused, h, w)?;
        let aux_logits = self.aux_head(tape, vars, low, h, w)?;
        Ok(ForwardOutput { main_logits, aux_logits, attention })
    }

    /// `main CE + aux_weight · aux CE` against the query label.
    pub fn loss(&self, tape: &mut GradTape, out: &ForwardOutput, label: &LabelMap, aux_weight: f64) -> Result<Losses> {
        let main = tape.cross_entropy(out.main_logits, label)?;
        let aux = tape.cross_entropy(out.aux_logits, label)?;
        let total = if aux_weight == 0.0 {
            main
        } else {
            let weighted = tape.scale(aux, aux_weight);
            tape.add(main, weighted)?
        };
        Ok(Losses { total, main, aux })
    }

    pub fn predict(&self, clip: &VideoClip) -> Result<Prediction> {
        let mut tape = GradTape::new();
        let vars = self.params.bind(&mut tape);
        let out = self.forward(&mut tape, &vars, clip)?;
        let attention = match out.attention {
            Some(s) => {
                let (_, h, w) = clip.query.chw()?;
                let os = self.config.output_stride();
                Some(AttentionMap::new(tape.value(s).clone(), self.config.memory_length, h / os, w / os)?)
            }
            None => None,
        };
        Ok(Prediction {
            main_logits: tape.value(out.main_logits).clone(),
            aux_logits: tape.value(out.aux_logits).clone(),
            attention,
        })
    }
}

/// Maps `[0, 1]` intensities to `[-1, 1]`.
pub fn normalize_frame(frame: &Tensor) -> Tensor {
    Tensor::new(frame.shape().to_vec(), frame.data().iter().map(|v| 2.0 * v - 1.0).collect()).expect("same shape")
}

fn prepend_axis(shape: &[usize]) -> Vec<usize> {
    let mut s = Vec::with_capacity(shape.len() + 1);
    s.push(1);
    s.extend_from_slice(shape);
    s
}

/// Per-pixel argmax over the class axis of `C×H×W` logits; ties go to the
/// lowest class index.
pub fn argmax_labels(logits: &Tensor) -> Result<LabelMap> {
    let (c, h, w) = logits.chw()?;
    let hw = h * w;
    let x = logits.data();
    let labels = (0..hw)
        .map(|px| {
            let mut best = 0;
            for ch in 1..c {
                if x[ch * hw + px] > x[best * hw + px] {
                    best = ch;
                }
            }
            best as u8
        })
        .collect();
    LabelMap::new(h, w, labels)
}
