//! Small convolutional network with a classifier or embedding head.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, ParamId, Tape};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::tensor::Tensor;

pub const DEFAULT_EMBEDDING_DIM: usize = 16;
pub const DEFAULT_INPUT_SIDE: usize = 18;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Layer {
    Conv3x3 { channels: usize },
    MaxPool2x2,
    Dense { width: usize },
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Head {
    Classifier { num_classes: usize },
    Embedding { dim: usize },
}

impl Head {
    pub fn width(&self) -> usize {
        match *self {
            Head::Classifier { num_classes } => num_classes,
            Head::Embedding { dim } => dim,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputShape {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub input: InputShape,
    pub layers: Vec<Layer>,
    pub head: Head,
}

/// Shape bookkeeping for one weighted layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WeightedLayer {
    pub name: String,
    pub weight_shape: Vec<usize>,
    pub bias_shape: Vec<usize>,
}

impl LayerSpec {
    /// conv3x3(8) → relu → maxpool → conv3x3(16) → relu → maxpool → dense(32)
    /// → relu → head, on 18×18 RGB input.
    pub fn desk_default(head: Head) -> Self {
        Self {
            input: InputShape {
                width: DEFAULT_INPUT_SIDE,
                height: DEFAULT_INPUT_SIDE,
                channels: 3,
            },
            layers: vec![
                Layer::Conv3x3 { channels: 8 },
                Layer::Relu,
                Layer::MaxPool2x2,
                Layer::Conv3x3 { channels: 16 },
                Layer::Relu,
                Layer::MaxPool2x2,
                Layer::Dense { width: 32 },
                Layer::Relu,
            ],
            head,
        }
    }

    /// Walks the stack, checking that spatial dims stay valid, and returns
    /// the weighted layers in order (the head last).
    pub fn plan(&self) -> Result<Vec<WeightedLayer>> {
        enum State {
            Spatial(usize, usize, usize),
            Flat(usize),
        }
        let InputShape { width, height, channels } = self.input;
        if width == 0 || height == 0 || !(channels == 1 || channels == 3) {
            return Err(Error::config(format!("invalid input shape {:?}", self.input)));
        }
        let mut state = State::Spatial(channels, height, width);
        let mut out = Vec::new();
        let (mut convs, mut denses) = (0, 0);
        let flat_len = |s: &State| match *s {
            State::Spatial(c, h, w) => c * h * w,
            State::Flat(n) => n,
        };
        for (i, layer) in self.layers.iter().enumerate() {
            match *layer {
                Layer::Conv3x3 { channels: oc } => {
                    let State::Spatial(c, h, w) = state else {
                        return Err(Error::config(format!("layer {i}: conv3x3 after a dense layer")));
                    };
                    if h < 3 || w < 3 || oc == 0 {
                        return Err(Error::config(format!(
                            "layer {i}: conv3x3({oc}) on {h}×{w} would leave no output"
                        )));
                    }
                    convs += 1;
                    out.push(WeightedLayer {
                        name: format!("conv{convs}"),
                        weight_shape: vec![oc, c, 3, 3],
                        bias_shape: vec![oc],
                    });
                    state = State::Spatial(oc, h - 2, w - 2);
                }
                Layer::MaxPool2x2 => {
                    let State::Spatial(c, h, w) = state else {
                        return Err(Error::config(format!("layer {i}: maxpool2x2 after a dense layer")));
                    };
                    if h % 2 != 0 || w % 2 != 0 {
                        return Err(Error::config(format!(
                            "layer {i}: maxpool2x2 needs even spatial dims, got {h}×{w}"
                        )));
                    }
                    state = State::Spatial(c, h / 2, w / 2);
                }
                Layer::Dense { width: n } => {
                    if n == 0 {
                        return Err(Error::config(format!("layer {i}: dense width must be positive")));
                    }
                    denses += 1;
                    out.push(WeightedLayer {
                        name: format!("dense{denses}"),
                        weight_shape: vec![flat_len(&state), n],
                        bias_shape: vec![n],
                    });
                    state = State::Flat(n);
                }
                Layer::Relu => {}
            }
        }
        let hw = self.head.width();
        if hw == 0 || matches!(self.head, Head::Classifier { num_classes: 1 }) {
            return Err(Error::config(format!("head {} is too narrow", self.head)));
        }
        out.push(WeightedLayer {
            name: "head".into(),
            weight_shape: vec![flat_len(&state), hw],
            bias_shape: vec![hw],
        });
        Ok(out)
    }

    pub fn param_count(&self) -> Result<usize> {
        Ok(self
            .plan()?
            .iter()
            .map(|l| l.weight_shape.iter().product::<usize>() + l.bias_shape.iter().product::<usize>())
            .sum())
    }

    /// Names of every weighted layer except the last dense layer and the
    /// head, i.e. the layers held fixed during fine-tuning.
    pub fn finetune_freeze_mask(&self) -> Result<BTreeSet<String>> {
        let plan = self.plan()?;
        let last_dense = plan.iter().rposition(|l| l.name.starts_with("dense"));
        Ok(plan
            .iter()
            .enumerate()
            .filter(|(i, l)| l.name != "head" && Some(*i) != last_dense)
            .map(|(_, l)| l.name.clone())
            .collect())
    }
}

/// Named parameter tensors plus the set of layers excluded from updates.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    frozen: BTreeSet<String>,
}

impl ModelParams {
    fn from_plan(plan: &[WeightedLayer], mut fill: impl FnMut(&WeightedLayer, bool) -> Tensor) -> Self {
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for layer in plan {
            names.push(format!("{}.weight", layer.name));
            tensors.push(fill(layer, true));
            names.push(format!("{}.bias", layer.name));
            tensors.push(fill(layer, false));
        }
        Self {
            names,
            tensors,
            frozen: BTreeSet::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub(crate) fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Layer a tensor belongs to (`conv1.weight` → `conv1`).
    pub fn layer_of(&self, id: ParamId) -> &str {
        let n = &self.names[id.0];
        n.split_once('.').map_or(n.as_str(), |(layer, _)| layer)
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.frozen.contains(self.layer_of(id))
    }

    pub fn frozen(&self) -> &BTreeSet<String> {
        &self.frozen
    }

    pub fn set_frozen(&mut self, layers: BTreeSet<String>) -> Result<()> {
        for l in &layers {
            if !self.names.iter().any(|n| n.split_once('.').map(|p| p.0) == Some(l.as_str())) {
                return Err(Error::config(format!("freeze mask names unknown layer '{l}'")));
            }
        }
        self.frozen = layers;
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Replaces one tensor, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let slot = &mut self.tensors[id.0];
        if slot.shape() != value.shape() {
            return Err(Error::config(format!(
                "{}: shape {:?} does not match {:?}",
                self.names[id.0],
                value.shape(),
                slot.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    /// Bitwise equality, including the freeze mask.
    pub fn bit_eq(&self, other: &ModelParams) -> bool {
        self.names == other.names
            && self.frozen == other.frozen
            && self.tensors.len() == other.tensors.len()
            && self.tensors.iter().zip(&other.tensors).all(|(a, b)| {
                a.shape() == b.shape()
                    && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

/// Class scores for one image.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub logits: Tensor,
    pub probabilities: Tensor,
    pub logits_node: NodeId,
    pub log_probs_node: NodeId,
    pub probs_node: NodeId,
}

/// Unit-norm feature vector for one image.
#[derive(Debug, Clone)]
pub struct Embedding {
    pub vector: Tensor,
    pub node: NodeId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    spec: LayerSpec,
    params: ModelParams,
}

impl Model {
    /// Glorot-uniform weights, zero biases.
    pub fn init(spec: LayerSpec, seed: u64) -> Result<Self> {
        let plan = spec.plan()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = ModelParams::from_plan(&plan, |layer, is_weight| {
            if !is_weight {
                return Tensor::zeros(&layer.bias_shape);
            }
            let s = &layer.weight_shape;
            let (fan_in, fan_out) = if s.len() == 4 {
                (s[1] * 9, s[0] * 9)
            } else {
                (s[0], s[1])
            };
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let n = s.iter().product();
            let data = (0..n).map(|_| rng.random_range(-limit..limit)).collect();
            Tensor::from_parts_unchecked(s.clone(), data)
        });
        Ok(Self { spec, params })
    }

    pub fn zeros(spec: LayerSpec) -> Result<Self> {
        let plan = spec.plan()?;
        let params = ModelParams::from_plan(&plan, |layer, is_weight| {
            Tensor::zeros(if is_weight { &layer.weight_shape } else { &layer.bias_shape })
        });
        Ok(Self { spec, params })
    }

    pub fn from_parts(spec: LayerSpec, params: ModelParams) -> Result<Self> {
        check_params(&spec, &params)?;
        Ok(Self { spec, params })
    }

    pub fn spec(&self) -> &LayerSpec {
        &self.spec
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ModelParams {
        &mut self.params
    }

    pub fn into_params(self) -> ModelParams {
        self.params
    }

    fn check_input(&self, image: &Image) -> Result<()> {
        let InputShape { width, height, channels } = self.spec.input;
        if image.width() != width || image.height() != height || image.channels() != channels {
            return Err(Error::config(format!(
                "image is {}×{}×{}, network expects {width}×{height}×{channels}",
                image.width(),
                image.height(),
                image.channels()
            )));
        }
        Ok(())
    }

    /// Runs the stack up to the raw head output.
    pub fn forward(&self, tape: &mut Tape, image: &Image) -> Result<NodeId> {
        self.check_input(image)?;
        let bind = |tape: &mut Tape, idx: usize| {
            let id = ParamId(idx);
            tape.param(id, self.params.get(id), !self.params.is_frozen(id))
        };
        let mut x = tape.constant(image.to_tensor());
        let mut next = 0;
        let mut flat = false;
        for layer in &self.spec.layers {
            x = match *layer {
                Layer::Conv3x3 { .. } => {
                    let (w, b) = (bind(tape, next), bind(tape, next + 1));
                    next += 2;
                    let y = tape.conv2d(x, w)?;
                    tape.add_channel_bias(y, b)?
                }
                Layer::MaxPool2x2 => tape.maxpool2x2(x)?,
                Layer::Relu => tape.relu(x)?,
                Layer::Dense { .. } => {
                    if !flat {
                        let n = tape.value(x).len();
                        x = tape.reshape(x, vec![1, n])?;
                        flat = true;
                    }
                    let (w, b) = (bind(tape, next), bind(tape, next + 1));
                    next += 2;
                    let y = tape.matmul(x, w)?;
                    tape.add_bias(y, b)?
                }
            };
        }
        if !flat {
            let n = tape.value(x).len();
            x = tape.reshape(x, vec![1, n])?;
        }
        let (w, b) = (bind(tape, next), bind(tape, next + 1));
        let y = tape.matmul(x, w)?;
        let y = tape.add_bias(y, b)?;
        let width = self.spec.head.width();
        Ok(tape.reshape(y, vec![width])?)
    }

    pub fn forward_classifier(&self, tape: &mut Tape, image: &Image) -> Result<Prediction> {
        if !matches!(self.spec.head, Head::Classifier { .. }) {
            return Err(Error::config("forward_classifier needs a classifier head"));
        }
        let logits_node = self.forward(tape, image)?;
        let log_probs_node = tape.log_softmax(logits_node)?;
        let probs_node = tape.softmax(logits_node)?;
        Ok(Prediction {
            logits: tape.value(logits_node).clone(),
            probabilities: tape.value(probs_node).clone(),
            logits_node,
            log_probs_node,
            probs_node,
        })
    }

    pub fn forward_embedding(&self, tape: &mut Tape, image: &Image) -> Result<Embedding> {
        if !matches!(self.spec.head, Head::Embedding { .. }) {
            return Err(Error::config("forward_embedding needs an embedding head"));
        }
        let raw = self.forward(tape, image)?;
        let node = tape.l2_normalize(raw)?;
        Ok(Embedding {
            vector: tape.value(node).clone(),
            node,
        })
    }

    /// Embedding vector without keeping the tape.
    pub fn embed(&self, image: &Image) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        Ok(self.forward_embedding(&mut tape, image)?.vector.into_data())
    }

    /// Class probabilities without keeping the tape.
    pub fn predict(&self, image: &Image) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        Ok(self.forward_classifier(&mut tape, image)?.probabilities.into_data())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.to_bytes_with_meta(&BTreeMap::new())
    }

    /// Serializes with extra `meta key value` header lines. Keys and values
    /// must be single tokens.
    pub fn to_bytes_with_meta(&self, meta: &BTreeMap<String, String>) -> Vec<u8> {
        let mut header = String::new();
        header.push_str(MAGIC);
        header.push('\n');
        let InputShape { width, height, channels } = self.spec.input;
        header.push_str(&format!("input {width} {height} {channels}\n"));
        header.push_str("layers");
        for l in &self.spec.layers {
            header.push(' ');
            header.push_str(&l.to_string());
        }
        header.push('\n');
        header.push_str(&format!("head {}\n", self.spec.head));
        header.push_str("frozen");
        for l in &self.params.frozen {
            header.push(' ');
            header.push_str(l);
        }
        header.push('\n');
        for (k, v) in meta {
            header.push_str(&format!("meta {k} {v}\n"));
        }
        for (name, t) in self.params.names.iter().zip(&self.params.tensors) {
            header.push_str("tensor ");
            header.push_str(name);
            for d in t.shape() {
                header.push_str(&format!(" {d}"));
            }
            header.push('\n');
        }
        header.push_str("payload\n");
        let mut bytes = header.into_bytes();
        for t in &self.params.tensors {
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        bytes
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_bytes_with_meta(bytes).map(|(m, _)| m)
    }

    /// Parses a params file and returns its `meta` lines alongside the model.
    pub fn from_bytes_with_meta(bytes: &[u8]) -> Result<(Self, BTreeMap<String, String>)> {
        let mut meta = BTreeMap::new();
        let mut cursor = Cursor { bytes, pos: 0 };
        let magic = cursor.line()?;
        if magic.1 != MAGIC {
            return Err(Error::parse(magic.0, format!("expected '{MAGIC}' header")));
        }

        let (off, line) = cursor.line()?;
        let fields = keyword(off, &line, "input")?;
        let nums: Vec<usize> = fields
            .iter()
            .map(|f| f.parse().map_err(|_| Error::parse(off, format!("bad input dimension '{f}'"))))
            .collect::<Result<_>>()?;
        let [width, height, channels] = nums[..] else {
            return Err(Error::parse(off, "input line needs width, height and channels"));
        };

        let (off, line) = cursor.line()?;
        let layers = keyword(off, &line, "layers")?
            .iter()
            .map(|t| t.parse::<Layer>().map_err(|e| Error::parse(off, e.to_string())))
            .collect::<Result<Vec<_>>>()?;

        let (off, line) = cursor.line()?;
        let head_tok = keyword(off, &line, "head")?;
        let [head_tok] = &head_tok[..] else {
            return Err(Error::parse(off, "head line needs exactly one token"));
        };
        let head = head_tok.parse::<Head>().map_err(|e| Error::parse(off, e.to_string()))?;

        let (off, line) = cursor.line()?;
        let frozen: BTreeSet<String> = keyword(off, &line, "frozen")?.iter().map(|s| s.to_string()).collect();

        let mut entries = Vec::new();
        loop {
            let (off, line) = cursor.line()?;
            if line == "payload" {
                break;
            }
            if let Some(rest) = line.strip_prefix("meta ") {
                let fields: Vec<&str> = rest.split_whitespace().collect();
                let [k, v] = fields[..] else {
                    return Err(Error::parse(off, "meta line needs a key and a value"));
                };
                if !entries.is_empty() {
                    return Err(Error::parse(off, "meta lines must precede tensor lines"));
                }
                meta.insert(k.to_string(), v.to_string());
                continue;
            }
            let fields = keyword(off, &line, "tensor")?;
            let Some((name, dims)) = fields.split_first() else {
                return Err(Error::parse(off, "tensor line needs a name"));
            };
            let shape = dims
                .iter()
                .map(|d| match d.parse::<usize>() {
                    Ok(v) if v > 0 => Ok(v),
                    _ => Err(Error::parse(off, format!("bad dimension '{d}' for {name}"))),
                })
                .collect::<Result<Vec<_>>>()?;
            entries.push((off, name.to_string(), shape));
        }

        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (off, name, shape) in entries {
            let n: usize = shape.iter().product();
            let start = cursor.pos;
            let Some(chunk) = bytes.get(start..start + n * 8) else {
                return Err(Error::parse(
                    bytes.len(),
                    format!("payload truncated inside {name} (declared at byte {off})"),
                ));
            };
            let data: Vec<f64> = chunk
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            cursor.pos += n * 8;
            let t = Tensor::new(shape, data).map_err(|e| Error::parse(start, format!("{name}: {e}")))?;
            names.push(name);
            tensors.push(t);
        }
        if cursor.pos != bytes.len() {
            return Err(Error::parse(cursor.pos, "trailing bytes after payload"));
        }

        let spec = LayerSpec {
            input: InputShape { width, height, channels },
            layers,
            head,
        };
        let params = ModelParams { names, tensors, frozen };
        check_params(&spec, &params)?;
        Ok((Self { spec, params }, meta))
    }
}

/// Loads parameters and checks them against an expected architecture.
pub fn load_params(path: impl AsRef<Path>, expected: &LayerSpec) -> Result<ModelParams> {
    let model = Model::load(path)?;
    if model.spec != *expected {
        return Err(Error::config(format!(
            "parameter file architecture {} does not match the configured {}",
            describe(&model.spec),
            describe(expected)
        )));
    }
    Ok(model.params)
}

pub fn save_params(path: impl AsRef<Path>, spec: &LayerSpec, params: &ModelParams) -> Result<()> {
    Model::from_parts(spec.clone(), params.clone())?.save(path)
}

fn describe(spec: &LayerSpec) -> String {
    let layers: Vec<String> = spec.layers.iter().map(Layer::to_string).collect();
    format!(
        "{}x{}x{} [{}] {}",
        spec.input.width,
        spec.input.height,
        spec.input.channels,
        layers.join(" "),
        spec.head
    )
}

fn check_params(spec: &LayerSpec, params: &ModelParams) -> Result<()> {
    let plan = spec.plan()?;
    if params.tensors.len() != plan.len() * 2 {
        return Err(Error::config(format!(
            "architecture has {} weighted layers but {} tensors were given",
            plan.len(),
            params.tensors.len()
        )));
    }
    for (i, layer) in plan.iter().enumerate() {
        for (slot, (suffix, shape)) in [("weight", &layer.weight_shape), ("bias", &layer.bias_shape)]
            .into_iter()
            .enumerate()
        {
            let idx = 2 * i + slot;
            let expected_name = format!("{}.{suffix}", layer.name);
            if params.names[idx] != expected_name {
                return Err(Error::config(format!(
                    "layer {}: expected tensor {expected_name}, found {}",
                    layer.name, params.names[idx]
                )));
            }
            if params.tensors[idx].shape() != shape.as_slice() {
                return Err(Error::config(format!(
                    "layer {}: tensor {expected_name} has shape {:?}, architecture expects {:?}",
                    layer.name,
                    params.tensors[idx].shape(),
                    shape
                )));
            }
        }
    }
    for l in &params.frozen {
        if !plan.iter().any(|p| &p.name == l) {
            return Err(Error::config(format!("freeze mask names unknown layer '{l}'")));
        }
    }
    Ok(())
}

const MAGIC: &str = "stabletrain-params 1";

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    /// Next `\n`-terminated header line with its starting offset.
    fn line(&mut self) -> Result<(usize, String)> {
        let start = self.pos;
        let rest = &self.bytes[start..];
        let Some(end) = rest.iter().position(|b| *b == b'\n') else {
            return Err(Error::parse(start, "unexpected end of header"));
        };
        let line = std::str::from_utf8(&rest[..end])
            .map_err(|e| Error::parse(start + e.valid_up_to(), "header is not UTF-8"))?;
        self.pos = start + end + 1;
        Ok((start, line.to_string()))
    }
}

fn keyword<'a>(offset: usize, line: &'a str, expect: &str) -> Result<Vec<&'a str>> {
    let mut it = line.split_whitespace();
    match it.next() {
        Some(k) if k == expect => Ok(it.collect()),
        _ => Err(Error::parse(offset, format!("expected '{expect}' line, found '{line}'"))),
    }
}

impl fmt::Display for Layer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Layer::Conv3x3 { channels } => write!(f, "conv3x3:{channels}"),
            Layer::MaxPool2x2 => f.write_str("maxpool2x2"),
            Layer::Dense { width } => write!(f, "dense:{width}"),
            Layer::Relu => f.write_str("relu"),
        }
    }
}

impl FromStr for Layer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let num = |v: &str| {
            v.parse::<usize>()
                .map_err(|_| Error::config(format!("layer '{s}': '{v}' is not a count")))
        };
        match s.split_once(':') {
            Some(("conv3x3", v)) => Ok(Layer::Conv3x3 { channels: num(v)? }),
            Some(("dense", v)) => Ok(Layer::Dense { width: num(v)? }),
            None if s == "maxpool2x2" => Ok(Layer::MaxPool2x2),
            None if s == "relu" => Ok(Layer::Relu),
            _ => Err(Error::config(format!("unknown layer '{s}'"))),
        }
    }
}

impl fmt::Display for Head {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Head::Classifier { num_classes } => write!(f, "classifier:{num_classes}"),
            Head::Embedding { dim } => write!(f, "embedding:{dim}"),
        }
    }
}

impl FromStr for Head {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, v) = s
            .split_once(':')
            .ok_or_else(|| Error::config(format!("head '{s}' is not kind:width")))?;
        let n = v
            .parse::<usize>()
            .map_err(|_| Error::config(format!("head '{s}': '{v}' is not a count")))?;
        match kind {
            "classifier" => Ok(Head::Classifier { num_classes: n }),
            "embedding" => Ok(Head::Embedding { dim: n }),
            _ => Err(Error::config(format!("unknown head kind '{kind}'"))),
        }
    }
}

macro_rules! string_serde {
    ($t:ty) => {
        impl TryFrom<String> for $t {
            type Error = Error;
            fn try_from(s: String) -> Result<Self> {
                s.parse()
            }
        }
        impl From<$t> for String {
            fn from(v: $t) -> String {
                v.to_string()
            }
        }
    };
}
string_serde!(Layer);
string_serde!(Head);

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec(head: Head) -> LayerSpec {
        LayerSpec {
            input: InputShape { width: 10, height: 10, channels: 3 },
            layers: vec![
                Layer::Conv3x3 { channels: 3 },
                Layer::Relu,
                Layer::MaxPool2x2,
                Layer::Dense { width: 8 },
                Layer::Relu,
            ],
            head,
        }
    }

    fn image(seed: u64, side: usize) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let px = (0..side * side * 3).map(|_| rng.random_range(0.0..1.0)).collect();
        Image::new(side, side, 3, px).unwrap()
    }

    #[test]
    fn default_architecture_plan() {
        let spec = LayerSpec::desk_default(Head::Embedding { dim: 16 });
        let plan = spec.plan().unwrap();
        let names: Vec<_> = plan.iter().map(|l| l.name.as_str()).collect();
        assert_eq!(names, ["conv1", "conv2", "dense1", "head"]);
        assert_eq!(plan[2].weight_shape, vec![16 * 3 * 3, 32]);
        assert_eq!(spec.param_count().unwrap(), 224 + 1168 + 4640 + 528);
        let mask = spec.finetune_freeze_mask().unwrap();
        assert_eq!(mask.into_iter().collect::<Vec<_>>(), ["conv1", "conv2"]);
    }

    #[test]
    fn odd_pool_input_rejected() {
        let mut spec = LayerSpec::desk_default(Head::Embedding { dim: 16 });
        spec.input.width = 32;
        spec.input.height = 32;
        assert!(matches!(spec.plan(), Err(Error::Config(_))));
    }

    #[test]
    fn zero_weights_give_uniform_probabilities() {
        let model = Model::zeros(tiny_spec(Head::Classifier { num_classes: 4 })).unwrap();
        let p = model.predict(&image(1, 10)).unwrap();
        for v in p {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn probabilities_form_a_simplex() {
        let model = Model::init(tiny_spec(Head::Classifier { num_classes: 5 }), 3).unwrap();
        for s in 0..100 {
            let p = model.predict(&image(s, 10)).unwrap();
            assert!(p.iter().all(|v| *v > 0.0));
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn embeddings_are_unit_norm_and_deterministic() {
        let model = Model::init(tiny_spec(Head::Embedding { dim: 6 }), 4).unwrap();
        let mut prev: Option<Vec<f64>> = None;
        for s in 0..100 {
            let e = model.embed(&image(s, 10)).unwrap();
            let n = e.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-9);
            if let Some(p) = &prev {
                let d = p.iter().zip(&e).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                assert!((0.0..=2.0 + 1e-12).contains(&d));
            }
            prev = Some(e);
        }
        let img = image(0, 10);
        assert_eq!(model.embed(&img).unwrap(), model.embed(&img).unwrap());
    }

    #[test]
    fn wrong_image_size_is_config_error() {
        let model = Model::init(tiny_spec(Head::Embedding { dim: 6 }), 4).unwrap();
        assert!(matches!(model.embed(&image(0, 12)), Err(Error::Config(_))));
        assert!(matches!(model.predict(&image(0, 10)), Err(Error::Config(_))));
    }

    #[test]
    fn save_load_round_trip_is_bit_exact() {
        let mut model = Model::init(LayerSpec::desk_default(Head::Embedding { dim: 16 }), 11).unwrap();
        let mask = model.spec().finetune_freeze_mask().unwrap();
        model.params_mut().set_frozen(mask).unwrap();
        let back = Model::from_bytes(&model.to_bytes()).unwrap();
        assert!(back.params().bit_eq(model.params()));
        assert_eq!(back.spec(), model.spec());
        assert_eq!(back.to_bytes(), model.to_bytes());
    }

    #[test]
    fn meta_lines_round_trip() {
        let model = Model::init(tiny_spec(Head::Embedding { dim: 6 }), 12).unwrap();
        let meta: BTreeMap<String, String> = [("config_digest".to_string(), "ab12".to_string())].into();
        let bytes = model.to_bytes_with_meta(&meta);
        let (back, got) = Model::from_bytes_with_meta(&bytes).unwrap();
        assert_eq!(got, meta);
        assert!(back.params().bit_eq(model.params()));
        assert_eq!(Model::from_bytes(&bytes).unwrap().to_bytes(), model.to_bytes());
    }

    #[test]
    fn empty_file_is_parse_error() {
        assert!(matches!(Model::from_bytes(b""), Err(Error::Parse { offset: 0, .. })));
    }

    #[test]
    fn truncated_payload_is_parse_error() {
        let model = Model::init(tiny_spec(Head::Embedding { dim: 4 }), 1).unwrap();
        let bytes = model.to_bytes();
        let err = Model::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, Error::Parse { .. }), "{err}");
    }

    #[test]
    fn wrong_dense_width_names_layer() {
        let model = Model::init(tiny_spec(Head::Embedding { dim: 4 }), 1).unwrap();
        let text = String::from_utf8_lossy(&model.to_bytes()).into_owned();
        // declare dense:9 while the stored tensors are 8 wide
        let header_end = text.find("payload\n").unwrap() + "payload\n".len();
        let payload = model.to_bytes()[header_end..].to_vec();
        let header = text[..header_end].replace("dense:8", "dense:9");
        let mut bytes = header.into_bytes();
        bytes.extend(payload);
        let err = Model::from_bytes(&bytes).unwrap_err();
        match err {
            Error::Config(msg) => assert!(msg.contains("dense1"), "{msg}"),
            other => panic!("expected configuration error, got {other}"),
        }
    }

    #[test]
    fn load_params_checks_expected_architecture() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.params");
        let spec = tiny_spec(Head::Embedding { dim: 4 });
        let model = Model::init(spec.clone(), 2).unwrap();
        save_params(&path, &spec, model.params()).unwrap();
        assert!(load_params(&path, &spec).unwrap().bit_eq(model.params()));
        let other = tiny_spec(Head::Embedding { dim: 5 });
        assert!(matches!(load_params(&path, &other), Err(Error::Config(_))));
    }

    #[test]
    fn layer_tokens_round_trip() {
        for l in [Layer::Conv3x3 { channels: 8 }, Layer::MaxPool2x2, Layer::Dense { width: 3 }, Layer::Relu] {
            assert_eq!(l.to_string().parse::<Layer>().unwrap(), l);
        }
        assert!("conv5x5:3".parse::<Layer>().is_err());
        let spec = LayerSpec::desk_default(Head::Classifier { num_classes: 4 });
        let json = serde_json::to_string(&spec).unwrap();
        assert!(json.contains("\"conv3x3:8\""));
        assert_eq!(serde_json::from_str::<LayerSpec>(&json).unwrap(), spec);
    }
}
