//! Residual U-shape network: spec, symbolic shape planner, parameters,
//! forward pass with deep-supervision heads, and checkpoint archives.
//!
//! Encoder level `l` holds `blocks_per_level[l]` residual blocks at
//! `filters_per_level[l]` channels. Channel and resolution changes happen
//! only in the strided transition convolutions and in the decoder's
//! upsample blocks, so residual skips are plain additions.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian, ReadBytesExt, WriteBytesExt};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::losses::default_ds_weights;
use crate::rng::seeded;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkSpec {
    pub in_channels: usize,
    pub levels: usize,
    pub blocks_per_level: Vec<usize>,
    pub filters_per_level: Vec<usize>,
    /// Stride of each encoder transition (levels - 1 entries).
    pub downsample_strides: Vec<[usize; 3]>,
    pub kernel: [usize; 3],
    pub negative_slope: f64,
    pub num_classes: usize,
    pub deep_supervision_levels: usize,
    pub ds_weights: Vec<f64>,
    pub norm_eps: f64,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        Self {
            in_channels: 3,
            levels: 5,
            blocks_per_level: vec![1, 2, 3, 4, 4],
            filters_per_level: vec![32, 64, 128, 256, 320],
            downsample_strides: vec![[2, 2, 2]; 4],
            kernel: [3, 3, 3],
            negative_slope: 0.01,
            num_classes: 5,
            deep_supervision_levels: 4,
            ds_weights: default_ds_weights(),
            norm_eps: 1e-5,
        }
    }
}

impl NetworkSpec {
    /// Same topology with filters [4, 8, 16, 32, 40], for CPU-scale work.
    pub fn tiny(num_classes: usize) -> Self {
        Self {
            filters_per_level: vec![4, 8, 16, 32, 40],
            num_classes,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.levels < 2 {
            return fail(format!("need at least 2 levels, got {}", self.levels));
        }
        if self.blocks_per_level.len() != self.levels || self.filters_per_level.len() != self.levels {
            return fail(format!(
                "blocks_per_level ({}) and filters_per_level ({}) must have {} entries",
                self.blocks_per_level.len(),
                self.filters_per_level.len(),
                self.levels
            ));
        }
        if self.downsample_strides.len() != self.levels - 1 {
            return fail(format!("need {} downsample strides", self.levels - 1));
        }
        if self.downsample_strides.iter().flatten().any(|&s| s == 0) {
            return fail("strides must be positive".into());
        }
        if self.filters_per_level.windows(2).any(|w| w[1] < w[0]) || self.filters_per_level[0] == 0 {
            return fail(format!("filters must be positive and nondecreasing: {:?}", self.filters_per_level));
        }
        if self.filters_per_level[1..].iter().any(|&f| f < 2) {
            return fail("filters beyond level 1 must be >= 2 to halve in the decoder".into());
        }
        if self.kernel.iter().any(|k| k % 2 == 0) {
            return fail(format!("kernel {:?} must be odd", self.kernel));
        }
        if self.in_channels == 0 || self.num_classes < 2 {
            return fail("need >= 1 input channel and >= 2 classes".into());
        }
        if self.deep_supervision_levels == 0
            || self.deep_supervision_levels > self.levels - 1
            || self.ds_weights.len() != self.deep_supervision_levels
        {
            return fail(format!(
                "deep_supervision_levels {} must be in [1, {}] with one weight each",
                self.deep_supervision_levels,
                self.levels - 1
            ));
        }
        let sum: f64 = self.ds_weights.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return fail(format!("ds_weights sum to {sum}, not 1"));
        }
        Ok(())
    }

    /// Cumulative stride from full resolution down to `level` (0-based).
    pub fn cumulative_stride(&self, level: usize) -> [usize; 3] {
        let mut s = [1; 3];
        for t in &self.downsample_strides[..level] {
            for a in 0..3 {
                s[a] *= t[a];
            }
        }
        s
    }

    fn pad(&self) -> [usize; 3] {
        self.kernel.map(|k| k / 2)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Stage {
    pub name: String,
    /// (channels, x, y, z)
    pub shape: [usize; 4],
}

/// Symbolic per-stage output shapes; nothing is allocated.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ShapePlan {
    pub stages: Vec<Stage>,
}

impl ShapePlan {
    pub fn get(&self, name: &str) -> Option<[usize; 4]> {
        self.stages.iter().find(|s| s.name == name).map(|s| s.shape)
    }

    pub fn bottleneck(&self) -> [usize; 4] {
        self.get("bottleneck").expect("plan always has a bottleneck")
    }

    pub fn output(&self) -> [usize; 4] {
        self.get("out1").expect("plan always has out1")
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let w = self.stages.iter().map(|st| st.name.len()).max().unwrap_or(5).max(5);
        s.push_str(&format!("{:<w$}  shape (C, X, Y, Z)\n", "stage"));
        for st in &self.stages {
            let [c, x, y, z] = st.shape;
            s.push_str(&format!("{:<w$}  ({c}, {x}, {y}, {z})\n", st.name));
        }
        s
    }
}

pub fn shape_plan(spec: &NetworkSpec, input_shape: [usize; 4]) -> Result<ShapePlan> {
    spec.validate()?;
    let [ch, x, y, z] = input_shape;
    if ch != spec.in_channels {
        return Err(Error::shape(format!("{} input channels", spec.in_channels), ch));
    }
    let full = [x, y, z];
    let total = spec.cumulative_stride(spec.levels - 1);
    for a in 0..3 {
        if full[a] == 0 || full[a] % total[a] != 0 {
            return Err(Error::Indivisible {
                axis: a,
                extent: full[a],
                multiple: total[a],
            });
        }
    }
    let dims = |l: usize| {
        let s = spec.cumulative_stride(l);
        [full[0] / s[0], full[1] / s[1], full[2] / s[2]]
    };
    let f = &spec.filters_per_level;
    let with = |c: usize, d: [usize; 3]| [c, d[0], d[1], d[2]];
    let mut stages = vec![Stage {
        name: "input".into(),
        shape: input_shape,
    }];
    let last = spec.levels - 1;
    for l in 0..spec.levels {
        let name = if l == last { "bottleneck".to_string() } else { format!("enc{}", l + 1) };
        stages.push(Stage {
            name,
            shape: with(f[l], dims(l)),
        });
    }
    for l in (0..last).rev() {
        let n = l + 1;
        stages.push(Stage {
            name: format!("dec{n}.reduce"),
            shape: with(f[l + 1] / 2, dims(l + 1)),
        });
        stages.push(Stage {
            name: format!("dec{n}.up"),
            shape: with(f[l], dims(l)),
        });
        stages.push(Stage {
            name: format!("dec{n}.concat"),
            shape: with(2 * f[l], dims(l)),
        });
        stages.push(Stage {
            name: format!("dec{n}"),
            shape: with(f[l], dims(l)),
        });
    }
    for l in 0..spec.deep_supervision_levels {
        stages.push(Stage {
            name: format!("out{}", l + 1),
            shape: with(spec.num_classes, dims(l)),
        });
    }
    Ok(ShapePlan { stages })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParamKind {
    ConvWeight,
    Bias,
    NormScale,
    NormShift,
}

impl ParamKind {
    /// Convolution kernels receive weight decay; biases and norm affines do not.
    pub fn is_weight(self) -> bool {
        matches!(self, ParamKind::ConvWeight)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub kind: ParamKind,
    pub init: String,
}

/// Named learnable arrays in a deterministic (sorted) order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterSet {
    params: BTreeMap<String, Param>,
}

impl ParameterSet {
    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.get_mut(name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::NameMismatch(format!("no parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> Vec<String> {
        self.params.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params.values().all(|p| p.value.is_finite())
    }

    pub fn insert(&mut self, name: impl Into<String>, param: Param) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter `{name}`")));
        }
        self.params.insert(name, param);
        Ok(())
    }
}

struct Builder {
    params: ParameterSet,
    rng: crate::rng::Rng,
    gain: f64,
}

impl Builder {
    fn he(&mut self, name: String, shape: &[usize], fan_in: usize) {
        let std = self.gain / (fan_in as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("finite std");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        let p = Param {
            value: Tensor::from_vec(shape, data).expect("shape"),
            kind: ParamKind::ConvWeight,
            init: format!("he_normal(fan_in={fan_in}, std={std:.6e})"),
        };
        self.params.insert(name, p).expect("unique names");
    }

    fn constant(&mut self, name: String, n: usize, v: f64, kind: ParamKind) {
        let p = Param {
            value: Tensor::full(&[n], v),
            kind,
            init: format!("constant({v})"),
        };
        self.params.insert(name, p).expect("unique names");
    }

    fn conv(&mut self, prefix: &str, cin: usize, cout: usize, k: [usize; 3]) {
        self.he(format!("{prefix}.weight"), &[cout, cin, k[0], k[1], k[2]], cin * k.iter().product::<usize>());
        self.constant(format!("{prefix}.bias"), cout, 0.0, ParamKind::Bias);
    }

    fn norm(&mut self, prefix: &str, c: usize) {
        self.constant(format!("{prefix}.scale"), c, 1.0, ParamKind::NormScale);
        self.constant(format!("{prefix}.shift"), c, 0.0, ParamKind::NormShift);
    }

    fn conv_norm(&mut self, prefix: &str, cin: usize, cout: usize, k: [usize; 3]) {
        self.conv(&format!("{prefix}.conv"), cin, cout, k);
        self.norm(&format!("{prefix}.norm"), cout);
    }
}

/// Creates He-initialized parameters (rectifier gain, fan-in); biases and
/// norm offsets zero, norm scales one.
pub fn build(spec: &NetworkSpec, seed: u64) -> Result<ParameterSet> {
    spec.validate()?;
    let gain = (2.0 / (1.0 + spec.negative_slope * spec.negative_slope)).sqrt();
    let mut b = Builder {
        params: ParameterSet::default(),
        rng: seeded(seed, 0),
        gain,
    };
    let f = &spec.filters_per_level;
    let k = spec.kernel;
    b.conv_norm("enc1.stem", spec.in_channels, f[0], k);
    for l in 0..spec.levels {
        if l > 0 {
            b.conv_norm(&format!("enc{}.down", l + 1), f[l - 1], f[l], k);
        }
        for j in 0..spec.blocks_per_level[l] {
            for c in 1..=2 {
                b.conv_norm(&format!("enc{}.block{j}.conv{c}", l + 1), f[l], f[l], k);
            }
        }
    }
    for l in (0..spec.levels - 1).rev() {
        let n = l + 1;
        let half = f[l + 1] / 2;
        b.conv(&format!("dec{n}.reduce"), f[l + 1], half, [1, 1, 1]);
        let s = spec.downsample_strides[l];
        b.he(format!("dec{n}.up.weight"), &[half, f[l], s[0], s[1], s[2]], half);
        b.constant(format!("dec{n}.up.bias"), f[l], 0.0, ParamKind::Bias);
        b.conv_norm(&format!("dec{n}.block"), 2 * f[l], f[l], k);
    }
    for l in 0..spec.deep_supervision_levels {
        b.conv(&format!("head{}", l + 1), f[l], spec.num_classes, [1, 1, 1]);
    }
    Ok(b.params)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Logit nodes per deep-supervision level; index 0 is full resolution.
#[derive(Clone, Debug)]
pub struct ForwardOutputs {
    pub logits: Vec<NodeId>,
    /// Named intermediate nodes, keyed like [`ShapePlan`] stages.
    pub stages: Vec<(String, NodeId)>,
}

struct Fwd<'a> {
    g: &'a mut Graph,
    params: &'a ParameterSet,
    spec: &'a NetworkSpec,
}

impl Fwd<'_> {
    fn p(&mut self, name: &str) -> Result<NodeId> {
        let t = self.params.tensor(name)?;
        Ok(self.g.param(name, t))
    }

    fn conv(&mut self, prefix: &str, x: NodeId, stride: [usize; 3], pad: [usize; 3]) -> Result<NodeId> {
        let w = self.p(&format!("{prefix}.weight"))?;
        let b = self.p(&format!("{prefix}.bias"))?;
        self.g.conv3d(x, w, Some(b), stride, pad)
    }

    fn conv_norm_act(&mut self, prefix: &str, x: NodeId, stride: [usize; 3]) -> Result<NodeId> {
        let pad = self.spec.pad();
        let h = self.conv(&format!("{prefix}.conv"), x, stride, pad)?;
        let gamma = self.p(&format!("{prefix}.norm.scale"))?;
        let beta = self.p(&format!("{prefix}.norm.shift"))?;
        let h = self.g.instance_norm(h, gamma, beta, self.spec.norm_eps);
        Ok(self.g.leaky_relu(h, self.spec.negative_slope))
    }

    fn residual(&mut self, prefix: &str, x: NodeId) -> Result<NodeId> {
        let h = self.conv_norm_act(&format!("{prefix}.conv1"), x, [1; 3])?;
        let h = self.conv_norm_act(&format!("{prefix}.conv2"), h, [1; 3])?;
        self.g.add(x, h)
    }
}

/// Runs the network on `input` (a (B, C_in, X, Y, Z) node).
///
/// Instance statistics are always per sample and channel, so `mode` does
/// not change the computation.
pub fn forward(
    graph: &mut Graph,
    params: &ParameterSet,
    spec: &NetworkSpec,
    input: NodeId,
    _mode: Mode,
) -> Result<ForwardOutputs> {
    let s = graph.value(input).shape().to_vec();
    if s.len() != 5 {
        return Err(Error::shape("(B, C, X, Y, Z)", &s));
    }
    shape_plan(spec, [s[1], s[2], s[3], s[4]])?;
    let mut fw = Fwd {
        g: graph,
        params,
        spec,
    };
    let mut stages = Vec::new();
    let mut skips = Vec::with_capacity(spec.levels);
    let mut x = fw.conv_norm_act("enc1.stem", input, [1; 3])?;
    for l in 0..spec.levels {
        if l > 0 {
            x = fw.conv_norm_act(&format!("enc{}.down", l + 1), x, spec.downsample_strides[l - 1])?;
        }
        for j in 0..spec.blocks_per_level[l] {
            x = fw.residual(&format!("enc{}.block{j}", l + 1), x)?;
        }
        let name = if l == spec.levels - 1 { "bottleneck".to_string() } else { format!("enc{}", l + 1) };
        stages.push((name, x));
        skips.push(x);
    }
    let mut decoded = vec![None; spec.levels - 1];
    for l in (0..spec.levels - 1).rev() {
        let n = l + 1;
        let r = fw.conv(&format!("dec{n}.reduce"), x, [1; 3], [0; 3])?;
        let w = fw.p(&format!("dec{n}.up.weight"))?;
        let b = fw.p(&format!("dec{n}.up.bias"))?;
        let u = fw.g.conv_transpose3d(r, w, Some(b), spec.downsample_strides[l])?;
        let c = fw.g.concat_channels(skips[l], u)?;
        x = fw.conv_norm_act(&format!("dec{n}.block"), c, [1; 3])?;
        stages.push((format!("dec{n}.reduce"), r));
        stages.push((format!("dec{n}.up"), u));
        stages.push((format!("dec{n}.concat"), c));
        stages.push((format!("dec{n}"), x));
        decoded[l] = Some(x);
    }
    let mut logits = Vec::with_capacity(spec.deep_supervision_levels);
    for l in 0..spec.deep_supervision_levels {
        let feat = decoded[l].expect("decoder level computed");
        let o = fw.conv(&format!("head{}", l + 1), feat, [1; 3], [0; 3])?;
        stages.push((format!("out{}", l + 1), o));
        logits.push(o);
    }
    Ok(ForwardOutputs { logits, stages })
}

/// Softmax over the class axis.
pub fn softmax_head(logits: &Tensor) -> Tensor {
    crate::ops::softmax_channels(logits)
}

/// Parameters plus their spec: enough to run predictions.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub spec: NetworkSpec,
    pub params: ParameterSet,
}

impl Network {
    pub fn new(spec: NetworkSpec, seed: u64) -> Result<Self> {
        let params = build(&spec, seed)?;
        Ok(Self { spec, params })
    }

    /// Full-resolution class probabilities for a (B, C_in, X, Y, Z) batch.
    pub fn predict_batch(&self, input: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.input(input.clone());
        let out = forward(&mut g, &self.params, &self.spec, x, Mode::Eval)?;
        Ok(softmax_head(g.value(out.logits[0])))
    }

    /// Probabilities (C, X, Y, Z) for one (C_in, X, Y, Z) volume.
    pub fn predict(&self, input: &Tensor) -> Result<Tensor> {
        let s = input.shape();
        if s.len() != 4 {
            return Err(Error::shape("(C, X, Y, Z)", s));
        }
        let batched = input.clone().reshape(&[1, s[0], s[1], s[2], s[3]])?;
        let p = self.predict_batch(&batched)?;
        p.reshape(&[self.spec.num_classes, s[1], s[2], s[3]])
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"ABSEGCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ArrayRecord {
    name: String,
    shape: Vec<usize>,
    kind: ParamKind,
    init: String,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    spec: NetworkSpec,
    step: u64,
    epoch: u64,
    arrays: Vec<ArrayRecord>,
    has_velocity: bool,
}

/// Network state plus training counters and optimizer velocity.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub spec: NetworkSpec,
    pub params: ParameterSet,
    pub step: u64,
    pub epoch: u64,
    pub velocity: Option<BTreeMap<String, Tensor>>,
}

impl Checkpoint {
    pub fn network(&self) -> Network {
        Network {
            spec: self.spec.clone(),
            params: self.params.clone(),
        }
    }

    /// Single-file archive: magic, version, JSON header, then raw
    /// little-endian `f64` arrays (parameters, then velocities).
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = CheckpointHeader {
            version: CHECKPOINT_VERSION,
            spec: self.spec.clone(),
            step: self.step,
            epoch: self.epoch,
            arrays: self
                .params
                .iter()
                .map(|(n, p)| ArrayRecord {
                    name: n.clone(),
                    shape: p.value.shape().to_vec(),
                    kind: p.kind,
                    init: p.init.clone(),
                })
                .collect(),
            has_velocity: self.velocity.is_some(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.write_u32::<LittleEndian>(CHECKPOINT_VERSION).expect("vec write");
        out.write_u64::<LittleEndian>(json.len() as u64).expect("vec write");
        out.extend_from_slice(&json);
        let mut push = |t: &Tensor| {
            let start = out.len();
            out.resize(start + 8 * t.numel(), 0);
            LittleEndian::write_f64_into(t.data(), &mut out[start..]);
        };
        for (_, p) in self.params.iter() {
            push(&p.value);
        }
        if let Some(v) = &self.velocity {
            for name in self.params.names() {
                let t = v
                    .get(&name)
                    .ok_or_else(|| Error::NameMismatch(format!("velocity missing `{name}`")))?;
                push(t);
            }
        }
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(Error::format(path, "magic", "not a checkpoint archive"));
        }
        let mut cur = &bytes[8..];
        let version = cur.read_u32::<LittleEndian>().map_err(|e| Error::io(path, e))?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(path, "version", format!("{version} (supported: {CHECKPOINT_VERSION})")));
        }
        let hlen = cur.read_u64::<LittleEndian>().map_err(|e| Error::io(path, e))? as usize;
        if cur.len() < hlen {
            return Err(Error::format(path, "header", "truncated"));
        }
        let header: CheckpointHeader =
            serde_json::from_slice(&cur[..hlen]).map_err(|e| Error::format(path, "header", e.to_string()))?;
        let mut data = &cur[hlen..];
        let mut take = |shape: &[usize]| -> Result<Tensor> {
            let n: usize = shape.iter().product();
            if data.len() < 8 * n {
                return Err(Error::format(path, "arrays", "truncated payload"));
            }
            let mut v = vec![0.0; n];
            LittleEndian::read_f64_into(&data[..8 * n], &mut v);
            data = &data[8 * n..];
            Tensor::from_vec(shape, v)
        };
        let mut params = ParameterSet::default();
        for rec in &header.arrays {
            let value = take(&rec.shape)?;
            params.insert(
                rec.name.clone(),
                Param {
                    value,
                    kind: rec.kind,
                    init: rec.init.clone(),
                },
            )?;
        }
        let velocity = if header.has_velocity {
            let mut v = BTreeMap::new();
            for rec in &header.arrays {
                v.insert(rec.name.clone(), take(&rec.shape)?);
            }
            Some(v)
        } else {
            None
        };
        if !data.is_empty() {
            return Err(Error::format(path, "arrays", format!("{} trailing bytes", data.len())));
        }
        header.spec.validate()?;
        Ok(Self {
            spec: header.spec,
            params,
            step: header.step,
            epoch: header.epoch,
            velocity,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_bottleneck() {
        let plan = shape_plan(&NetworkSpec::default(), [3, 128, 160, 112]).unwrap();
        assert_eq!(plan.bottleneck(), [320, 8, 10, 7]);
        assert_eq!(plan.output(), [5, 128, 160, 112]);
    }

    #[test]
    fn indivisible_axis_reported() {
        match shape_plan(&NetworkSpec::default(), [3, 128, 150, 112]) {
            Err(Error::Indivisible { axis: 1, multiple: 16, .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn anisotropic_last_transition() {
        let mut spec = NetworkSpec::default();
        spec.downsample_strides[3] = [2, 2, 1];
        let plan = shape_plan(&spec, [3, 128, 160, 112]).unwrap();
        assert_eq!(plan.bottleneck(), [320, 8, 10, 14]);
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = NetworkSpec::default();
        s.blocks_per_level.pop();
        assert!(s.validate().is_err());
        let mut s = NetworkSpec::default();
        s.filters_per_level = vec![32, 16, 128, 256, 320];
        assert!(s.validate().is_err());
        let mut s = NetworkSpec::default();
        s.ds_weights = vec![0.25; 3];
        assert!(s.validate().is_err());
    }

    #[test]
    fn first_kernel_shape() {
        let p = build(&NetworkSpec::default(), 0).unwrap();
        assert_eq!(p.get("enc1.stem.conv.weight").unwrap().value.shape(), &[32, 3, 3, 3, 3]);
    }

    #[test]
    fn build_is_deterministic() {
        let a = build(&NetworkSpec::tiny(3), 7).unwrap();
        let b = build(&NetworkSpec::tiny(3), 7).unwrap();
        assert_eq!(a, b);
        let c = build(&NetworkSpec::tiny(3), 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let spec = NetworkSpec::tiny(3);
        let params = build(&spec, 1).unwrap();
        let velocity = params.iter().map(|(n, p)| (n.clone(), Tensor::full(p.value.shape(), 0.125))).collect();
        let ck = Checkpoint {
            spec,
            params,
            step: 12,
            epoch: 3,
            velocity: Some(velocity),
        };
        let path = dir.path().join("ck.bin");
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
    }

    #[test]
    fn corrupt_checkpoint_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        fs::write(&path, b"not a checkpoint at all").unwrap();
        assert!(Checkpoint::load(&path).is_err());
    }
}
