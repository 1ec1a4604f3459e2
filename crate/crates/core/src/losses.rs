//! Training objectives: Charbonnier reconstruction, perceptual feature
//! distance and Sobel edge agreement, combined with fixed weights.
//!
//! Every reduction is a mean over elements, so loss magnitudes do not depend
//! on image or batch size.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_charb: f64,
    pub lambda_vgg: f64,
    pub lambda_sobel: f64,
    pub epsilon: f64,
}

impl Default for LossWeights {
    /// `(1, 1e-3, 1e-1)` with `epsilon = 1e-3`.
    fn default() -> Self {
        LossWeights {
            lambda_charb: 1.0,
            lambda_vgg: 1e-3,
            lambda_sobel: 1e-1,
            epsilon: 1e-3,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_charb", self.lambda_charb),
            ("lambda_vgg", self.lambda_vgg),
            ("lambda_sobel", self.lambda_sobel),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(name, format!("{v} must be finite and >= 0")));
            }
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::config("epsilon", format!("{} must be > 0", self.epsilon)));
        }
        Ok(())
    }
}

fn same_shape<T: Scalar>(op: &'static str, a: &Var<T>, b: &Var<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, "shape", format!("{} vs {}", a.shape(), b.shape())));
    }
    Ok(())
}

/// `mean(sqrt((sr - hr)^2 + eps^2))`.
pub fn charbonnier<T: Scalar>(g: &Graph<T>, sr: &Var<T>, hr: &Var<T>, eps: T) -> Result<Var<T>> {
    same_shape("charbonnier", sr, hr)?;
    if eps <= T::zero() {
        return Err(Error::invalid("charbonnier epsilon must be > 0"));
    }
    let d = g.sub(sr, hr)?;
    let d2 = g.offset(&g.square(&d)?, eps * eps)?;
    g.mean(&g.sqrt(&d2)?)
}

pub fn l1_loss<T: Scalar>(g: &Graph<T>, sr: &Var<T>, hr: &Var<T>) -> Result<Var<T>> {
    same_shape("l1", sr, hr)?;
    g.mean(&g.abs(&g.sub(sr, hr)?)?)
}

pub fn l2_loss<T: Scalar>(g: &Graph<T>, sr: &Var<T>, hr: &Var<T>) -> Result<Var<T>> {
    same_shape("l2", sr, hr)?;
    g.mean(&g.square(&g.sub(sr, hr)?)?)
}

/// Separable Sobel factors: central difference and `[1, 2, 1]` smoothing.
const DIFF: [f64; 3] = [-1.0, 0.0, 1.0];
const SMOOTH: [f64; 3] = [1.0, 2.0, 1.0];

/// Block-diagonal `c x c x kh x kw` kernel applying `taps` to each channel.
fn per_channel_kernel<T: Scalar>(c: usize, taps: &[f64; 3], vertical: bool) -> Tensor<T> {
    let (kh, kw) = if vertical { (3, 1) } else { (1, 3) };
    Tensor::from_fn([c, c, kh, kw], |co, ci, y, x| {
        if co == ci {
            T::of(taps[y + x])
        } else {
            T::zero()
        }
    })
}

/// Horizontal and vertical Sobel responses per channel over the valid
/// region, `(h-2) x (w-2)`. Each is a difference pass followed by a
/// smoothing pass along the other axis, so a constant plane maps to exact
/// zeros.
pub fn sobel_map<T: Scalar>(g: &Graph<T>, img: &Var<T>) -> Result<(Var<T>, Var<T>)> {
    let s = img.shape();
    if s.h < 3 || s.w < 3 {
        return Err(Error::shape("sobel_map", "h/w", format!("{}x{} is smaller than 3x3", s.h, s.w)));
    }
    let diff_x = g.constant(per_channel_kernel(s.c, &DIFF, false));
    let diff_y = g.constant(per_channel_kernel(s.c, &DIFF, true));
    let smooth_x = g.constant(per_channel_kernel(s.c, &SMOOTH, false));
    let smooth_y = g.constant(per_channel_kernel(s.c, &SMOOTH, true));
    let gx = g.conv2d(&g.conv2d(img, &diff_x, None, 1, 0)?, &smooth_y, None, 1, 0)?;
    let gy = g.conv2d(&g.conv2d(img, &diff_y, None, 1, 0)?, &smooth_x, None, 1, 0)?;
    Ok((gx, gy))
}

/// `mean((Gx(hr) - Gx(sr))^2) + mean((Gy(hr) - Gy(sr))^2)`.
pub fn sobel_loss<T: Scalar>(g: &Graph<T>, sr: &Var<T>, hr: &Var<T>) -> Result<Var<T>> {
    same_shape("sobel_loss", sr, hr)?;
    let (sx, sy) = sobel_map(g, sr)?;
    let (hx, hy) = sobel_map(g, hr)?;
    let ex = g.mean(&g.square(&g.sub(&hx, &sx)?)?)?;
    let ey = g.mean(&g.square(&g.sub(&hy, &sy)?)?)?;
    g.add(&ex, &ey)
}

/// Fixed feed-forward feature map used by the perceptual loss. Its own
/// weights are graph constants and never receive gradients.
pub trait FeatureExtractor<T: Scalar> {
    fn name(&self) -> &str;
    fn extract(&self, g: &Graph<T>, img: &Var<T>) -> Result<Var<T>>;
}

#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityExtractor;

impl<T: Scalar> FeatureExtractor<T> for IdentityExtractor {
    fn name(&self) -> &str {
        "identity"
    }

    fn extract(&self, _g: &Graph<T>, img: &Var<T>) -> Result<Var<T>> {
        Ok(img.clone())
    }
}

#[derive(Clone, Debug)]
pub enum Layer<T> {
    /// Same-padded convolution.
    Conv { weight: Tensor<T>, bias: Tensor<T> },
    Relu,
    /// 2x2 max pool, stride 2.
    MaxPool,
}

/// A plain stack of convolutions, ReLUs and pools.
#[derive(Clone, Debug)]
pub struct ConvStack<T> {
    name: String,
    in_channels: usize,
    layers: Vec<Layer<T>>,
}

/// Layer widths of VGG-19 up to `conv5_4` (`0` marks a 2x2 max pool).
const VGG19: [usize; 20] = [
    64, 64, 0, 128, 128, 0, 256, 256, 256, 256, 0, 512, 512, 512, 512, 0, 512, 512, 512, 512,
];
const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

impl<T: Scalar> ConvStack<T> {
    pub fn new(name: impl Into<String>, in_channels: usize, layers: Vec<Layer<T>>) -> Result<Self> {
        let mut c = in_channels;
        for (i, layer) in layers.iter().enumerate() {
            if let Layer::Conv { weight, bias } = layer {
                let ws = weight.shape();
                if ws.c != c || bias.len() != ws.n || ws.h % 2 == 0 || ws.h != ws.w {
                    return Err(Error::invalid(format!(
                        "extractor layer {i}: kernel {ws} does not follow {c} input channels"
                    )));
                }
                c = ws.n;
            }
        }
        Ok(ConvStack {
            name: name.into(),
            in_channels,
            layers,
        })
    }

    /// One seeded 3x3 convolution (`in_channels -> width`) followed by ReLU.
    pub fn seeded(seed: u64, in_channels: usize, width: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = (6.0 / (in_channels * 9) as f64).sqrt();
        let weight = Tensor::uniform([width, in_channels, 3, 3], -bound, bound, &mut rng);
        let bias = Tensor::uniform([1, width, 1, 1], -0.1, 0.1, &mut rng);
        ConvStack {
            name: format!("seeded-conv3x3-relu/{seed}"),
            in_channels,
            layers: vec![Layer::Conv { weight, bias }, Layer::Relu],
        }
    }

    /// VGG-19 truncated after the ReLU of `conv5_4`, preceded by ImageNet
    /// normalization. `lookup` must supply `convB_L.weight` / `convB_L.bias`
    /// for every conv layer (e.g. from a tensor archive).
    pub fn vgg19(mut lookup: impl FnMut(&str) -> Option<Tensor<T>>) -> Result<Self> {
        let norm_w = Tensor::from_fn([3, 3, 1, 1], |o, i, _, _| {
            if o == i {
                T::of(1.0 / IMAGENET_STD[o])
            } else {
                T::zero()
            }
        });
        let norm_b = Tensor::from_fn([1, 3, 1, 1], |_, c, _, _| T::of(-IMAGENET_MEAN[c] / IMAGENET_STD[c]));
        let mut layers = vec![Layer::Conv {
            weight: norm_w,
            bias: norm_b,
        }];
        let (mut block, mut idx) = (1, 1);
        for &width in &VGG19 {
            if width == 0 {
                layers.push(Layer::MaxPool);
                block += 1;
                idx = 1;
                continue;
            }
            let base = format!("conv{block}_{idx}");
            let weight = lookup(&format!("{base}.weight"))
                .ok_or_else(|| Error::invalid(format!("missing VGG-19 tensor {base}.weight")))?;
            let bias = lookup(&format!("{base}.bias"))
                .ok_or_else(|| Error::invalid(format!("missing VGG-19 tensor {base}.bias")))?;
            if weight.shape().n != width {
                return Err(Error::invalid(format!(
                    "{base}.weight has {} output channels, expected {width}",
                    weight.shape().n
                )));
            }
            let bias = bias.reshape([1, width, 1, 1])?;
            layers.push(Layer::Conv { weight, bias });
            layers.push(Layer::Relu);
            idx += 1;
        }
        ConvStack::new("vgg19-relu5_4", 3, layers)
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }
}

impl<T: Scalar> FeatureExtractor<T> for ConvStack<T> {
    fn name(&self) -> &str {
        &self.name
    }

    fn extract(&self, g: &Graph<T>, img: &Var<T>) -> Result<Var<T>> {
        if img.shape().c != self.in_channels {
            return Err(Error::shape(
                "perceptual extractor",
                "c",
                format!("{} expects {} channels, got {}", self.name, self.in_channels, img.shape().c),
            ));
        }
        let mut x = img.clone();
        for layer in &self.layers {
            x = match layer {
                Layer::Conv { weight, bias } => {
                    let w = g.constant(weight.clone());
                    let b = g.constant(bias.clone());
                    g.conv2d(&x, &w, Some(&b), 1, weight.shape().h / 2)?
                }
                Layer::Relu => g.relu(&x)?,
                Layer::MaxPool => {
                    let s = x.shape();
                    if s.h < 2 || s.w < 2 {
                        return Err(Error::shape(
                            "perceptual extractor",
                            "h/w",
                            format!("{}x{} too small to pool in {}", s.h, s.w, self.name),
                        ));
                    }
                    g.max_pool2d(&x, 2, 2, 0)?
                }
            };
        }
        Ok(x)
    }
}

/// `mean(|phi(hr) - phi(sr)|)`.
pub fn perceptual_loss<T: Scalar>(
    g: &Graph<T>,
    sr: &Var<T>,
    hr: &Var<T>,
    extractor: &dyn FeatureExtractor<T>,
) -> Result<Var<T>> {
    same_shape("perceptual_loss", sr, hr)?;
    let fs = extractor.extract(g, sr)?;
    let fh = extractor.extract(g, hr)?;
    g.mean(&g.abs(&g.sub(&fh, &fs)?)?)
}

/// Unweighted component values recorded alongside a loss, for logging.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub charbonnier: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub perceptual: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sobel: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l2: Option<f64>,
}

pub struct LossValue<T> {
    pub total: Var<T>,
    pub parts: LossParts,
}

/// `l_charb * charbonnier + l_vgg * perceptual + l_sobel * sobel`.
/// Terms with a zero weight are not evaluated.
pub fn composite_loss<T: Scalar>(
    g: &Graph<T>,
    sr: &Var<T>,
    hr: &Var<T>,
    weights: &LossWeights,
    extractor: &dyn FeatureExtractor<T>,
) -> Result<LossValue<T>> {
    weights.validate()?;
    same_shape("composite_loss", sr, hr)?;
    let mut parts = LossParts::default();
    let mut terms = Vec::new();
    if weights.lambda_charb > 0.0 {
        let v = charbonnier(g, sr, hr, T::of(weights.epsilon))?;
        parts.charbonnier = Some(v.item()?.to_f64_lossy());
        terms.push(g.scale(&v, T::of(weights.lambda_charb))?);
    }
    if weights.lambda_vgg > 0.0 {
        let v = perceptual_loss(g, sr, hr, extractor)?;
        parts.perceptual = Some(v.item()?.to_f64_lossy());
        terms.push(g.scale(&v, T::of(weights.lambda_vgg))?);
    }
    if weights.lambda_sobel > 0.0 {
        let v = sobel_loss(g, sr, hr)?;
        parts.sobel = Some(v.item()?.to_f64_lossy());
        terms.push(g.scale(&v, T::of(weights.lambda_sobel))?);
    }
    let total = sum_terms(g, terms)?;
    Ok(LossValue { total, parts })
}

fn sum_terms<T: Scalar>(g: &Graph<T>, terms: Vec<Var<T>>) -> Result<Var<T>> {
    let mut it = terms.into_iter();
    match it.next() {
        None => Ok(g.constant(Tensor::scalar(T::zero()))),
        Some(first) => it.try_fold(first, |acc, t| g.add(&acc, &t)),
    }
}

/// Objectives compared in the loss ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    Full,
    NoCharb,
    NoVgg,
    NoSobel,
    L1,
    L2,
    /// Perceptual distance alone, through a caller-supplied extractor.
    LpipsPlaceholder,
}

impl LossVariant {
    pub const ALL: [LossVariant; 7] = [
        LossVariant::Full,
        LossVariant::NoCharb,
        LossVariant::NoVgg,
        LossVariant::NoSobel,
        LossVariant::L1,
        LossVariant::L2,
        LossVariant::LpipsPlaceholder,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossVariant::Full => "full",
            LossVariant::NoCharb => "no_charb",
            LossVariant::NoVgg => "no_vgg",
            LossVariant::NoSobel => "no_sobel",
            LossVariant::L1 => "l1",
            LossVariant::L2 => "l2",
            LossVariant::LpipsPlaceholder => "lpips_placeholder",
        }
    }
}

impl fmt::Display for LossVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown loss variant `{s}`")))
    }
}

/// A training objective: a variant plus the base weights it modifies.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Objective {
    pub variant: LossVariant,
    pub weights: LossWeights,
}

impl Objective {
    /// Effective composite weights, or `None` for the plain L1/L2 variants.
    pub fn composite_weights(&self) -> Option<LossWeights> {
        let base = self.weights;
        match self.variant {
            LossVariant::Full => Some(base),
            LossVariant::NoCharb => Some(LossWeights { lambda_charb: 0.0, ..base }),
            LossVariant::NoVgg => Some(LossWeights { lambda_vgg: 0.0, ..base }),
            LossVariant::NoSobel => Some(LossWeights { lambda_sobel: 0.0, ..base }),
            LossVariant::LpipsPlaceholder => Some(LossWeights {
                lambda_charb: 0.0,
                lambda_vgg: 1.0,
                lambda_sobel: 0.0,
                ..base
            }),
            LossVariant::L1 | LossVariant::L2 => None,
        }
    }

    pub fn evaluate<T: Scalar>(
        &self,
        g: &Graph<T>,
        sr: &Var<T>,
        hr: &Var<T>,
        extractor: &dyn FeatureExtractor<T>,
    ) -> Result<LossValue<T>> {
        match self.variant {
            LossVariant::L1 => {
                let total = l1_loss(g, sr, hr)?;
                let parts = LossParts {
                    l1: Some(total.item()?.to_f64_lossy()),
                    ..Default::default()
                };
                Ok(LossValue { total, parts })
            }
            LossVariant::L2 => {
                let total = l2_loss(g, sr, hr)?;
                let parts = LossParts {
                    l2: Some(total.item()?.to_f64_lossy()),
                    ..Default::default()
                };
                Ok(LossValue { total, parts })
            }
            _ => {
                let w = self.composite_weights().expect("composite variant");
                composite_loss(g, sr, hr, &w, extractor)
            }
        }
    }
}

/// The objective for a named ablation variant, using the default weights.
pub fn loss_ablation_suite(variant: &str) -> Result<Objective> {
    Ok(Objective {
        variant: variant.parse()?,
        weights: LossWeights::default(),
    })
}
