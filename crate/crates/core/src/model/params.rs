//! Parameter layout, storage, initialisation and checkpoints.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{parse_config_text, AttentionKind, AttentionSource, ModelConfig};
use crate::error::{PahsError, Result};
use crate::kernels::ConvSpec;
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Shape, Tensor};

/// One learnable layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerSpec {
    Conv(ConvSpec),
    /// Affine map on the last axis.
    Linear { fan_in: usize, fan_out: usize },
}

impl LayerSpec {
    fn weight_shape(&self) -> Shape {
        match self {
            LayerSpec::Conv(spec) => spec.weight_shape(),
            LayerSpec::Linear { fan_in, fan_out } => Shape::matrix(1, *fan_out, *fan_in),
        }
    }

    fn bias_shape(&self) -> Option<Shape> {
        match self {
            LayerSpec::Conv(spec) => spec.bias.then(|| spec.bias_shape()),
            LayerSpec::Linear { fan_out, .. } => Some(Shape::new(1, 1, 1, *fan_out)),
        }
    }

    fn fan_in(&self) -> usize {
        match self {
            LayerSpec::Conv(spec) => spec.fan_in(),
            LayerSpec::Linear { fan_in, .. } => *fan_in,
        }
    }
}

/// Prefix of the forward (or only) recurrent cell.
pub const FORWARD: &str = "fwd";
/// Prefix of the backward cell in bidirectional mode.
pub const BACKWARD: &str = "bwd";
/// Prefix of the reconstructor tail.
pub const TAIL: &str = "tail";

/// Ordered layer inventory of a model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Layout {
    layers: IndexMap<String, LayerSpec>,
}

impl Layout {
    pub fn for_config(cfg: &ModelConfig) -> Layout {
        let mut layout = Layout::default();
        layout.add_cell(cfg, FORWARD);
        if cfg.bidirectional {
            layout.add_cell(cfg, BACKWARD);
        }
        layout.add_tail(cfg);
        layout
    }

    fn add(&mut self, name: String, spec: LayerSpec) {
        let prev = self.layers.insert(name, spec);
        debug_assert!(prev.is_none(), "duplicate layer");
    }

    fn conv(&mut self, name: String, spec: ConvSpec) {
        self.add(name, LayerSpec::Conv(spec));
    }

    fn res_block(&mut self, name: &str, channels: usize) {
        self.conv(format!("{name}.conv1"), ConvSpec::same(channels, channels));
        self.conv(format!("{name}.conv2"), ConvSpec::same(channels, channels));
    }

    fn add_cell(&mut self, cfg: &ModelConfig, cell: &str) {
        let c = cfg.c;
        let (third, two_thirds) = (c / 3, 2 * c / 3);

        self.conv(format!("{cell}.extractor.stem"), ConvSpec::same(3, third));
        self.conv(format!("{cell}.extractor.down1"), ConvSpec::down(third, two_thirds));
        for i in 0..cfg.extractor_blocks {
            self.res_block(&format!("{cell}.extractor.stage1.rb{i}"), two_thirds);
        }
        self.conv(format!("{cell}.extractor.down2"), ConvSpec::down(two_thirds, c));
        for i in 0..cfg.extractor_blocks {
            self.res_block(&format!("{cell}.extractor.stage2.rb{i}"), c);
        }

        // One block, applied in both ping-pong roles.
        self.conv(format!("{cell}.pp.conv_in"), ConvSpec::same(c + third, c));
        self.res_block(&format!("{cell}.pp.rb"), c);
        self.conv(format!("{cell}.pp.conv_out"), ConvSpec::same(c, third));

        if cfg.attention != AttentionKind::None {
            let (d, s) = (cfg.attn_dim(), cfg.attn_stride);
            let q_in = match cfg.attention_source {
                AttentionSource::Cross => c,
                AttentionSource::SelfAttention => third,
            };
            self.conv(format!("{cell}.snla.query"), ConvSpec::patchify(q_in, d, s));
            self.conv(format!("{cell}.snla.key"), ConvSpec::patchify(third, d, s));
            self.conv(format!("{cell}.snla.value"), ConvSpec::patchify(third, third, s));
            if cfg.attention == AttentionKind::Selective {
                self.add(
                    format!("{cell}.snla.filter"),
                    LayerSpec::Linear {
                        fan_in: 1,
                        fan_out: 1,
                    },
                );
            }
            self.conv(format!("{cell}.snla.out"), ConvSpec::unpatchify(third, third, s));
        }

        self.conv(format!("{cell}.head.fuse"), ConvSpec::same(third + c, c));
        for i in 0..cfg.head_blocks {
            self.res_block(&format!("{cell}.head.rb{i}"), c);
        }

        self.conv(format!("{cell}.hidden.conv_in"), ConvSpec::same(c, c));
        self.res_block(&format!("{cell}.hidden.rb"), c);
        self.conv(format!("{cell}.hidden.conv_out"), ConvSpec::same(c, third));
    }

    fn add_tail(&mut self, cfg: &ModelConfig) {
        let c = cfg.c;
        let (third, two_thirds) = (c / 3, 2 * c / 3);
        let fused_in = if cfg.bidirectional { 2 * c } else { c };
        self.conv(format!("{TAIL}.up1"), ConvSpec::up(fused_in, two_thirds));
        for i in 0..cfg.tail_blocks {
            self.res_block(&format!("{TAIL}.stage1.rb{i}"), two_thirds);
        }
        self.conv(format!("{TAIL}.up2"), ConvSpec::up(two_thirds, third));
        for i in 0..cfg.tail_blocks {
            self.res_block(&format!("{TAIL}.stage2.rb{i}"), third);
        }
        self.conv(format!("{TAIL}.out"), ConvSpec::same(third, 3));
    }

    pub fn get(&self, name: &str) -> Option<&LayerSpec> {
        self.layers.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &LayerSpec)> {
        self.layers.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }
}

/// Group a tensor belongs to: its first two dotted components
/// (`fwd.pp.conv_in.weight` is in `fwd.pp`).
pub fn group_of(name: &str) -> &str {
    match name.match_indices('.').nth(1) {
        Some((i, _)) => &name[..i],
        None => name,
    }
}

/// Named, ordered collection of learnable tensors.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParameterStore<T> {
    tensors: IndexMap<String, Tensor<T>>,
}

impl<T: Real> ParameterStore<T> {
    pub fn new() -> Self {
        ParameterStore {
            tensors: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Distinct groups in first-appearance order.
    pub fn groups(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for name in self.tensors.keys() {
            let g = group_of(name);
            if out.last() != Some(&g) && !out.contains(&g) {
                out.push(g);
            }
        }
        out
    }

    /// Zeroes every tensor whose name starts with `prefix`. Returns how many
    /// tensors were touched.
    pub fn zero_prefix(&mut self, prefix: &str) -> usize {
        let mut count = 0;
        for (name, t) in self.tensors.iter_mut() {
            if name.starts_with(prefix) {
                t.fill(T::zero());
                count += 1;
            }
        }
        count
    }

    pub fn cast<U: Real>(&self) -> ParameterStore<U> {
        ParameterStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }
}

/// All weights of one model together with the config and layout they follow.
#[derive(Clone, Debug, PartialEq)]
pub struct PahsParameters<T> {
    pub config: ModelConfig,
    pub layout: Layout,
    pub store: ParameterStore<T>,
}

impl<T: Real> PahsParameters<T> {
    /// Uniform `±1/sqrt(fan_in)` initialisation from `config.seed`.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let layout = Layout::for_config(config);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParameterStore::new();
        for (name, spec) in layout.iter() {
            let bound = 1.0 / (spec.fan_in().max(1) as f64).sqrt();
            let mut draw = |shape: Shape| {
                let data = (0..shape.numel())
                    .map(|_| T::from_f64_lossy(rng.gen_range(-bound..bound)))
                    .collect();
                Tensor::new(shape, data).expect("init shape")
            };
            store.insert(format!("{name}.weight"), draw(spec.weight_shape()));
            if let Some(bs) = spec.bias_shape() {
                store.insert(format!("{name}.bias"), draw(bs));
            }
        }
        Ok(PahsParameters {
            config: config.clone(),
            layout,
            store,
        })
    }

    /// Registers every tensor on the tape. With `trainable`, the tensors are
    /// differentiable leaves; otherwise constants.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        let mut vars = HashMap::with_capacity(self.store.len());
        for (name, t) in self.store.iter() {
            let v = if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            };
            vars.insert(name.to_string(), v);
        }
        Bound {
            vars,
            layout: self.layout.clone(),
        }
    }

    pub fn cast<U: Real>(&self) -> PahsParameters<U> {
        PahsParameters {
            config: self.config.clone(),
            layout: self.layout.clone(),
            store: self.store.cast(),
        }
    }

    /// Serialises as a text manifest followed by concatenated PT4 blobs.
    ///
    /// ```text
    /// PAHS-CHECKPOINT 1
    /// config c = 24
    /// ...
    /// tensor fwd.extractor.stem.weight 8 3 3 3
    /// ...
    /// end
    /// <PT4 blob for each tensor, in manifest order>
    /// ```
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut manifest = String::from(CHECKPOINT_HEADER);
        manifest.push('\n');
        for (k, v) in self.config.to_pairs() {
            manifest.push_str(&format!("config {k} = {v}\n"));
        }
        for (name, t) in self.store.iter() {
            let [n, c, h, w] = t.shape().to_array();
            manifest.push_str(&format!("tensor {name} {n} {c} {h} {w}\n"));
        }
        manifest.push_str("end\n");
        let mut out = manifest.into_bytes();
        for (_, t) in self.store.iter() {
            out.extend(t.to_pt4_bytes());
        }
        out
    }

    pub fn from_checkpoint_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let mut config = ModelConfig::default();
        let mut entries: Vec<(String, Shape)> = Vec::new();
        let mut pos = 0;
        let mut first = true;
        loop {
            let rest = &bytes[pos..];
            let nl = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| PahsError::format(origin, "unterminated checkpoint manifest"))?;
            let line = std::str::from_utf8(&rest[..nl])
                .map_err(|_| PahsError::format(origin, "manifest is not UTF-8"))?;
            pos += nl + 1;
            if first {
                if line != CHECKPOINT_HEADER {
                    return Err(PahsError::format(origin, "not a PAHS checkpoint"));
                }
                first = false;
                continue;
            }
            if line == "end" {
                break;
            }
            if let Some(kv) = line.strip_prefix("config ") {
                parse_config_text(kv, &mut config)?;
            } else if let Some(spec) = line.strip_prefix("tensor ") {
                let parts: Vec<&str> = spec.split_whitespace().collect();
                if parts.len() != 5 {
                    return Err(PahsError::format(origin, format!("bad tensor line `{line}`")));
                }
                let dims: Vec<usize> = parts[1..]
                    .iter()
                    .map(|d| d.parse())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| PahsError::format(origin, format!("bad dims in `{line}`")))?;
                entries.push((parts[0].to_string(), Shape::new(dims[0], dims[1], dims[2], dims[3])));
            } else {
                return Err(PahsError::format(origin, format!("unexpected manifest line `{line}`")));
            }
        }
        config.validate()?;
        let layout = Layout::for_config(&config);
        let expected = PahsParameters::<T>::expected_names(&layout);
        for i in 0..entries.len().max(expected.len()) {
            match (entries.get(i), expected.get(i)) {
                (Some((got, _)), Some(want)) if got == want => {}
                (Some((got, _)), _) => {
                    return Err(PahsError::Contract(format!(
                        "{}: tensor {got} does not belong to the architecture of its config",
                        origin.display()
                    )))
                }
                (None, Some(want)) => {
                    return Err(PahsError::Contract(format!(
                        "{}: missing tensor {want}",
                        origin.display()
                    )))
                }
                (None, None) => unreachable!(),
            }
        }

        let mut store = ParameterStore::new();
        for (name, shape) in entries {
            let (t, used) = Tensor::<T>::from_pt4_bytes(&bytes[pos..], origin)?;
            pos += used;
            if t.shape() != shape {
                return Err(PahsError::format(
                    origin,
                    format!("tensor {name}: manifest says {shape}, blob has {}", t.shape()),
                ));
            }
            store.insert(name, t);
        }
        if pos != bytes.len() {
            return Err(PahsError::format(origin, "trailing bytes after checkpoint"));
        }
        let params = PahsParameters {
            config,
            layout,
            store,
        };
        params.check_shapes()?;
        Ok(params)
    }

    fn expected_names(layout: &Layout) -> Vec<String> {
        let mut names = Vec::new();
        for (name, spec) in layout.iter() {
            names.push(format!("{name}.weight"));
            if spec.bias_shape().is_some() {
                names.push(format!("{name}.bias"));
            }
        }
        names
    }

    fn check_shapes(&self) -> Result<()> {
        for (name, spec) in self.layout.iter() {
            let w = self
                .store
                .get(&format!("{name}.weight"))
                .ok_or_else(|| PahsError::Contract(format!("missing tensor {name}.weight")))?;
            if w.shape() != spec.weight_shape() {
                return Err(PahsError::Contract(format!(
                    "tensor {name}.weight has shape {}, expected {}",
                    w.shape(),
                    spec.weight_shape()
                )));
            }
            if let (Some(b), Some(want)) = (self.store.get(&format!("{name}.bias")), spec.bias_shape()) {
                if b.shape() != want {
                    return Err(PahsError::Contract(format!(
                        "tensor {name}.bias has shape {}, expected {want}",
                        b.shape()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_checkpoint_bytes()).map_err(|e| PahsError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| PahsError::io(path, e))?;
        PahsParameters::from_checkpoint_bytes(&bytes, path)
    }
}

pub const CHECKPOINT_HEADER: &str = "PAHS-CHECKPOINT 1";

/// Parameters registered on a tape, looked up by layer name.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: HashMap<String, Var>,
    layout: Layout,
}

/// A convolution layer resolved to tape handles.
#[derive(Clone, Copy, Debug)]
pub struct ConvVars {
    pub weight: Var,
    pub bias: Option<Var>,
    pub spec: ConvSpec,
}

impl Bound {
    /// Handles registered elsewhere, keyed by tensor name.
    pub fn from_vars(vars: impl IntoIterator<Item = (String, Var)>, layout: Layout) -> Self {
        Bound {
            vars: vars.into_iter().collect(),
            layout,
        }
    }

    pub fn var(&self, tensor_name: &str) -> Result<Var> {
        self.vars
            .get(tensor_name)
            .copied()
            .ok_or_else(|| PahsError::Contract(format!("missing parameter {tensor_name}")))
    }

    pub fn has_layer(&self, layer: &str) -> bool {
        self.layout.get(layer).is_some()
    }

    pub fn conv(&self, layer: &str) -> Result<ConvVars> {
        match self.layout.get(layer) {
            Some(LayerSpec::Conv(spec)) => Ok(ConvVars {
                weight: self.var(&format!("{layer}.weight"))?,
                bias: if spec.bias {
                    Some(self.var(&format!("{layer}.bias"))?)
                } else {
                    None
                },
                spec: *spec,
            }),
            _ => Err(PahsError::Contract(format!("no conv layer {layer}"))),
        }
    }

    /// Weight and bias of a linear layer.
    pub fn linear(&self, layer: &str) -> Result<(Var, Var)> {
        match self.layout.get(layer) {
            Some(LayerSpec::Linear { .. }) => Ok((
                self.var(&format!("{layer}.weight"))?,
                self.var(&format!("{layer}.bias"))?,
            )),
            _ => Err(PahsError::Contract(format!("no linear layer {layer}"))),
        }
    }

    /// Every bound tensor, in no particular order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}
