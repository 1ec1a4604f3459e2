//! The super-resolution network.
//!
//! ```text
//! lr -> conv3x3 (extract) = f0 -> B x ERLFB -> (+ f0) -> conv3x3 -> pixel_shuffle(r)
//! ```
//!
//! Each ERLFB runs three conv3x3 + activation stages, an attention gate (ECA by
//! default, ESA for the ablation), a single conv3x3 smoothing step and one
//! block-level residual add.
//!
//! # Parameter schema
//!
//! Parameters are stored in a fixed order that the weight-file format relies
//! on. With `i` the zero-based block index:
//!
//! | name | dims |
//! |------|------|
//! | `extract.weight`, `extract.bias` | `[C, in, 3, 3]`, `[C]` |
//! | `blocks.{i}.refine.{0,1,2}.weight`, `.bias` | `[C, C, 3, 3]`, `[C]` |
//! | `blocks.{i}.eca.weight`, `.bias` (ECA) | `[C, C, 1, 1]`, `[C]` |
//! | `blocks.{i}.esa.{conv1,conv_f,conv2,conv_max,conv3,conv3b,conv4}.*` (ESA) | see [`ESA_CHANNELS`] |
//! | `blocks.{i}.smooth.weight`, `.bias` | `[C, C, 3, 3]`, `[C]` |
//! | `reconstruct.weight`, `reconstruct.bias` | `[in*r*r, C, 3, 3]`, `[in*r*r]` |
//!
//! The default width `C = 40` is the smallest for which the default
//! configuration lands in the 0.35M–0.39M parameter band (361,852 parameters
//! at `r = 2`; 374,848 at `r = 4`).

pub mod blocks;

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Activation, Graph, Shape, Tensor, Var};
use blocks::{AttentionWeights, BlockWeights, ConvWeights, EsaWeights};

/// Default feature width.
pub const DEFAULT_CHANNELS: usize = 40;
pub const DEFAULT_BLOCKS: usize = 6;
/// Reduced width inside the ESA branch.
pub const ESA_CHANNELS: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attention {
    Eca,
    Esa,
}

impl Attention {
    pub const ALL: [Attention; 2] = [Attention::Eca, Attention::Esa];

    pub fn name(self) -> &'static str {
        match self {
            Attention::Eca => "eca",
            Attention::Esa => "esa",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "eca" => Some(Attention::Eca),
            "esa" => Some(Attention::Esa),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub channels: usize,
    pub blocks: usize,
    pub scale: usize,
    pub activation: Activation,
    pub attention: Attention,
    pub in_channels: usize,
    /// Initialization seed; not part of the serialized architecture.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: DEFAULT_CHANNELS,
            blocks: DEFAULT_BLOCKS,
            scale: 2,
            activation: Activation::Tanh,
            attention: Attention::Eca,
            in_channels: 3,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::config("channels", "must be >= 1"));
        }
        if self.blocks == 0 {
            return Err(Error::config("blocks", "must be >= 1"));
        }
        if !matches!(self.scale, 2 | 4) {
            return Err(Error::config("scale", format!("{} is not one of 2, 4", self.scale)));
        }
        if self.in_channels == 0 {
            return Err(Error::config("in_channels", "must be >= 1"));
        }
        Ok(())
    }

    /// The six activation x attention combinations of the architecture ablation.
    pub fn ablation_grid(&self) -> Vec<ModelConfig> {
        let mut out = Vec::with_capacity(6);
        for activation in Activation::ALL {
            for attention in Attention::ALL {
                out.push(ModelConfig {
                    activation,
                    attention,
                    ..self.clone()
                });
            }
        }
        out
    }
}

/// One entry of the ordered parameter schema.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    /// Logical dims as stored on disk: rank 4 for kernels, rank 1 for biases.
    pub dims: Vec<usize>,
    /// Fan-in used for initialization.
    pub fan_in: usize,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.dims.iter().product()
    }

    /// In-memory NCHW shape (biases are `1 x C x 1 x 1`).
    pub fn shape(&self) -> Shape {
        match self.dims.as_slice() {
            [c] => Shape::new(1, *c, 1, 1),
            [n, c, h, w] => Shape::new(*n, *c, *h, *w),
            _ => unreachable!("schema only holds rank-1 and rank-4 entries"),
        }
    }

    pub fn is_bias(&self) -> bool {
        self.dims.len() == 1
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvSlot {
    weight: usize,
    bias: usize,
}

#[derive(Clone, Debug)]
enum AttentionSlot {
    Eca(ConvSlot),
    Esa([ConvSlot; 7]),
}

#[derive(Clone, Debug)]
struct BlockSlot {
    refine: [ConvSlot; 3],
    attention: AttentionSlot,
    smooth: ConvSlot,
}

/// Schema plus the positions of every convolution within it.
#[derive(Clone, Debug)]
struct Layout {
    specs: Vec<ParamSpec>,
    extract: ConvSlot,
    blocks: Vec<BlockSlot>,
    reconstruct: ConvSlot,
}

impl Layout {
    fn new(cfg: &ModelConfig) -> Self {
        let mut specs = Vec::new();
        let mut conv = |name: String, cout: usize, cin: usize, k: usize| {
            let fan_in = cin * k * k;
            specs.push(ParamSpec {
                name: format!("{name}.weight"),
                dims: vec![cout, cin, k, k],
                fan_in,
            });
            specs.push(ParamSpec {
                name: format!("{name}.bias"),
                dims: vec![cout],
                fan_in,
            });
            ConvSlot {
                weight: specs.len() - 2,
                bias: specs.len() - 1,
            }
        };
        let c = cfg.channels;
        let extract = conv("extract".into(), c, cfg.in_channels, 3);
        let blocks = (0..cfg.blocks)
            .map(|i| {
                let refine = [0, 1, 2].map(|j| conv(format!("blocks.{i}.refine.{j}"), c, c, 3));
                let attention = match cfg.attention {
                    Attention::Eca => AttentionSlot::Eca(conv(format!("blocks.{i}.eca"), c, c, 1)),
                    Attention::Esa => {
                        let f = ESA_CHANNELS;
                        let p = format!("blocks.{i}.esa");
                        AttentionSlot::Esa([
                            conv(format!("{p}.conv1"), f, c, 1),
                            conv(format!("{p}.conv_f"), f, f, 1),
                            conv(format!("{p}.conv2"), f, f, 3),
                            conv(format!("{p}.conv_max"), f, f, 3),
                            conv(format!("{p}.conv3"), f, f, 3),
                            conv(format!("{p}.conv3b"), f, f, 3),
                            conv(format!("{p}.conv4"), c, f, 1),
                        ])
                    }
                };
                let smooth = conv(format!("blocks.{i}.smooth"), c, c, 3);
                BlockSlot {
                    refine,
                    attention,
                    smooth,
                }
            })
            .collect();
        let out = cfg.in_channels * cfg.scale * cfg.scale;
        let reconstruct = conv("reconstruct".into(), out, c, 3);
        Layout {
            specs,
            extract,
            blocks,
            reconstruct,
        }
    }
}

/// Ordered parameter schema for a configuration.
pub fn schema(cfg: &ModelConfig) -> Vec<ParamSpec> {
    Layout::new(cfg).specs
}

/// Exact number of scalar parameters the configuration builds.
pub fn param_count(cfg: &ModelConfig) -> usize {
    schema(cfg).iter().map(ParamSpec::numel).sum()
}

/// Network parameters bound as graph variables, grouped by role.
#[derive(Clone, Debug)]
pub struct Bound<T> {
    pub extract: ConvWeights<T>,
    pub blocks: Vec<BlockWeights<T>>,
    pub reconstruct: ConvWeights<T>,
    /// Every bound variable in schema order.
    pub all: Vec<Var<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    config: ModelConfig,
    layout_specs: Vec<ParamSpec>,
    params: Vec<Tensor<T>>,
}

impl<T: Scalar> Model<T> {
    /// Builds a freshly initialized network: uniform kernels
    /// (bound `1 / sqrt(fan_in)`) drawn in schema order from a ChaCha8
    /// stream seeded with `config.seed`, zero biases.
    pub fn build(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let specs = schema(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params = specs
            .iter()
            .map(|spec| {
                if spec.is_bias() {
                    Tensor::zeros(spec.shape())
                } else {
                    let bound = (1.0 / spec.fan_in as f64).sqrt();
                    let data = (0..spec.numel())
                        .map(|_| T::of(rng.random_range(-bound..bound)))
                        .collect();
                    Tensor::from_parts(spec.shape(), data)
                }
            })
            .collect();
        Ok(Model {
            config,
            layout_specs: specs,
            params,
        })
    }

    /// Assembles a model from parameters listed in schema order.
    pub fn from_params(config: ModelConfig, params: Vec<Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let specs = schema(&config);
        if specs.len() != params.len() {
            return Err(Error::invalid(format!(
                "expected {} parameter tensors, got {}",
                specs.len(),
                params.len()
            )));
        }
        for (spec, p) in specs.iter().zip(&params) {
            if spec.shape() != p.shape() {
                return Err(Error::invalid(format!(
                    "parameter `{}` has shape {}, schema expects {:?}",
                    spec.name,
                    p.shape(),
                    spec.dims
                )));
            }
        }
        Ok(Model {
            config,
            layout_specs: specs,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn schema(&self) -> &[ParamSpec] {
        &self.layout_specs
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn named_params(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.layout_specs.iter().map(|s| s.name.as_str()).zip(&self.params)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.named_params().find(|(n, _)| *n == name).map(|(_, t)| t)
    }

    /// Replaces every parameter; shapes must match the schema.
    pub fn set_params(&mut self, params: Vec<Tensor<T>>) -> Result<()> {
        let rebuilt = Model::from_params(self.config.clone(), params)?;
        self.params = rebuilt.params;
        Ok(())
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    /// Converts every parameter to another precision.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            layout_specs: self.layout_specs.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
        }
    }

    /// Registers the parameters as graph leaves.
    pub fn bind(&self, g: &Graph<T>, trainable: bool) -> Bound<T> {
        let all: Vec<Var<T>> = self.params.iter().map(|p| g.leaf(p.clone(), trainable)).collect();
        self.arrange(all)
    }

    /// Uses caller-owned variables, in schema order, as the parameters.
    pub fn bind_vars(&self, vars: &[Var<T>]) -> Result<Bound<T>> {
        if vars.len() != self.params.len() {
            return Err(Error::invalid(format!(
                "{} variables for {} parameters",
                vars.len(),
                self.params.len()
            )));
        }
        for (spec, v) in self.layout_specs.iter().zip(vars) {
            if v.shape() != spec.shape() {
                return Err(Error::shape(
                    "bind_vars",
                    "shape",
                    format!("`{}` is {}, expected {}", spec.name, v.shape(), spec.shape()),
                ));
            }
        }
        Ok(self.arrange(vars.to_vec()))
    }

    fn arrange(&self, all: Vec<Var<T>>) -> Bound<T> {
        let layout = Layout::new(&self.config);
        let cw = |s: ConvSlot| ConvWeights {
            weight: all[s.weight].clone(),
            bias: all[s.bias].clone(),
        };
        let blocks = layout
            .blocks
            .iter()
            .map(|b| BlockWeights {
                refine: b.refine.map(cw),
                attention: match &b.attention {
                    AttentionSlot::Eca(s) => AttentionWeights::Eca(cw(*s)),
                    AttentionSlot::Esa(s) => AttentionWeights::Esa(Box::new(EsaWeights {
                        conv1: cw(s[0]),
                        conv_f: cw(s[1]),
                        conv2: cw(s[2]),
                        conv_max: cw(s[3]),
                        conv3: cw(s[4]),
                        conv3b: cw(s[5]),
                        conv4: cw(s[6]),
                    })),
                },
                smooth: cw(b.smooth),
            })
            .collect();
        Bound {
            extract: cw(layout.extract),
            blocks,
            reconstruct: cw(layout.reconstruct),
            all,
        }
    }

    fn check_input(&self, shape: Shape) -> Result<()> {
        if shape.c != self.config.in_channels {
            return Err(Error::shape(
                "forward",
                "c",
                format!("input has {} channels, model expects {}", shape.c, self.config.in_channels),
            ));
        }
        Ok(())
    }

    /// Differentiable forward pass on bound parameters. The output is not
    /// clamped. `tap` receives `(block index starting at 1, attention output)`.
    pub fn forward_graph(
        &self,
        g: &Graph<T>,
        p: &Bound<T>,
        lr: &Var<T>,
        mut tap: impl FnMut(usize, &Var<T>),
    ) -> Result<Var<T>> {
        self.check_input(lr.shape())?;
        let f0 = p.extract.apply(g, lr)?;
        let mut f = f0.clone();
        for (i, block) in p.blocks.iter().enumerate() {
            let (y, attended) = blocks::erlfb_forward_tapped(g, block, &f, self.config.activation)?;
            tap(i + 1, &attended);
            f = y;
        }
        let rec_in = g.add(&f, &f0)?;
        let rec = p.reconstruct.apply(g, &rec_in)?;
        g.pixel_shuffle(&rec, self.config.scale)
    }

    /// Inference: no tape is recorded and the output is clamped to `[0, 1]`.
    pub fn forward(&self, lr: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(lr.shape())?;
        let g = Graph::inference();
        let p = self.bind(&g, false);
        let x = g.constant(lr.clone());
        let y = self.forward_graph(&g, &p, &x, |_, _| {})?;
        Ok(y.value().clamp(T::zero(), T::one()))
    }

    /// Attention outputs of the requested blocks (indices start at 1).
    pub fn dump_features(&self, lr: &Tensor<T>, indices: &BTreeSet<usize>) -> Result<BTreeMap<usize, Tensor<T>>> {
        if let Some(&bad) = indices.iter().find(|&&i| i == 0 || i > self.config.blocks) {
            return Err(Error::invalid(format!(
                "block index {bad} outside 1..={}",
                self.config.blocks
            )));
        }
        let mut out = BTreeMap::new();
        if indices.is_empty() {
            return Ok(out);
        }
        self.check_input(lr.shape())?;
        let g = Graph::inference();
        let p = self.bind(&g, false);
        let x = g.constant(lr.clone());
        self.forward_graph(&g, &p, &x, |i, v| {
            if indices.contains(&i) {
                out.insert(i, v.value().clone());
            }
        })?;
        Ok(out)
    }
}

/// Anything that maps a low-resolution batch to a high-resolution one.
pub trait Upscaler<T: Scalar> {
    fn scale(&self) -> usize;
    fn upscale(&self, lr: &Tensor<T>) -> Result<Tensor<T>>;
}

impl<T: Scalar> Upscaler<T> for Model<T> {
    fn scale(&self) -> usize {
        self.config.scale
    }

    fn upscale(&self, lr: &Tensor<T>) -> Result<Tensor<T>> {
        self.forward(lr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> ModelConfig {
        ModelConfig {
            channels: 4,
            blocks: 1,
            seed,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn default_width_is_smallest_in_band() {
        let cfg = ModelConfig::default();
        let n = param_count(&cfg);
        assert_eq!(n, 361_852);
        assert!((350_000..=390_000).contains(&n));
        let narrower = ModelConfig {
            channels: DEFAULT_CHANNELS - 1,
            ..cfg.clone()
        };
        assert!(param_count(&narrower) < 350_000);
        let x4 = ModelConfig { scale: 4, ..cfg };
        assert_eq!(param_count(&x4), 374_848);
    }

    #[test]
    fn hand_enumerated_small_schema() {
        // C=4, B=1, r=2, 3 input channels:
        // extract 4*3*9 + 4 = 112
        // refine 3 * (4*4*9 + 4) = 444
        // eca 4*4 + 4 = 20
        // smooth 4*4*9 + 4 = 148
        // reconstruct 12*4*9 + 12 = 444
        assert_eq!(param_count(&small(0)), 112 + 444 + 20 + 148 + 444);
    }

    #[test]
    fn count_matches_built_tensors() {
        for cfg in small(1).ablation_grid() {
            let m = Model::<f32>::build(cfg.clone()).unwrap();
            assert_eq!(m.param_count(), param_count(&cfg));
        }
    }

    #[test]
    fn count_increases_with_width_and_depth() {
        let base = ModelConfig::default();
        for c in 1..48 {
            let a = ModelConfig { channels: c, ..base.clone() };
            let b = ModelConfig { channels: c + 1, ..base.clone() };
            assert!(param_count(&a) < param_count(&b));
        }
        for blocks in 1..10 {
            let a = ModelConfig { blocks, ..base.clone() };
            let b = ModelConfig { blocks: blocks + 1, ..base.clone() };
            assert!(param_count(&a) < param_count(&b));
        }
    }

    #[test]
    fn build_is_deterministic() {
        let a = Model::<f64>::build(small(7)).unwrap();
        let b = Model::<f64>::build(small(7)).unwrap();
        assert_eq!(a, b);
        let c = Model::<f64>::build(small(8)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn invalid_config_names_field() {
        let err = Model::<f32>::build(ModelConfig { scale: 3, ..small(0) }).unwrap_err();
        assert!(err.to_string().contains("`scale`"), "{err}");
        let err = Model::<f32>::build(ModelConfig { channels: 0, ..small(0) }).unwrap_err();
        assert!(err.to_string().contains("`channels`"), "{err}");
    }

    #[test]
    fn minimal_model_runs() {
        let m = Model::<f64>::build(small(3)).unwrap();
        let x = Tensor::full([1, 3, 8, 8], 0.5);
        let y = m.forward(&x).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 3, 16, 16));
        assert!(m.forward(&Tensor::full([1, 1, 8, 8], 0.5)).is_err());
    }

    #[test]
    fn dump_features_checks_indices() {
        let m = Model::<f64>::build(ModelConfig { blocks: 2, ..small(0) }).unwrap();
        let x = Tensor::full([1, 3, 4, 4], 0.25);
        assert!(m.dump_features(&x, &BTreeSet::new()).unwrap().is_empty());
        assert!(m.dump_features(&x, &[0].into()).is_err());
        assert!(m.dump_features(&x, &[3].into()).is_err());
        let f = m.dump_features(&x, &[2].into()).unwrap();
        assert_eq!(f[&2].shape(), Shape::new(1, 4, 4, 4));
    }
}
