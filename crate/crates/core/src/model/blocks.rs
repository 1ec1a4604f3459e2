//! Building blocks of the network: channel attention (ECA), the heavier
//! spatial attention it replaces (ESA), and the residual feature block.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Activation, Graph, Var};

/// Weight and bias of one convolution, bound into a graph.
#[derive(Clone, Debug)]
pub struct ConvWeights<T> {
    pub weight: Var<T>,
    pub bias: Var<T>,
}

impl<T: Scalar> ConvWeights<T> {
    /// Same-size convolution: padding is half the kernel.
    pub fn apply(&self, g: &Graph<T>, x: &Var<T>) -> Result<Var<T>> {
        let pad = self.weight.shape().h / 2;
        g.conv2d(x, &self.weight, Some(&self.bias), 1, pad)
    }

    fn apply_with(&self, g: &Graph<T>, x: &Var<T>, stride: usize, pad: usize) -> Result<Var<T>> {
        g.conv2d(x, &self.weight, Some(&self.bias), stride, pad)
    }
}

/// Convolutions of the spatial attention branch, in application order.
#[derive(Clone, Debug)]
pub struct EsaWeights<T> {
    pub conv1: ConvWeights<T>,
    pub conv_f: ConvWeights<T>,
    pub conv2: ConvWeights<T>,
    pub conv_max: ConvWeights<T>,
    pub conv3: ConvWeights<T>,
    pub conv3b: ConvWeights<T>,
    pub conv4: ConvWeights<T>,
}

#[derive(Clone, Debug)]
pub enum AttentionWeights<T> {
    Eca(ConvWeights<T>),
    Esa(Box<EsaWeights<T>>),
}

#[derive(Clone, Debug)]
pub struct BlockWeights<T> {
    pub refine: [ConvWeights<T>; 3],
    pub attention: AttentionWeights<T>,
    pub smooth: ConvWeights<T>,
}

/// Channel attention: `x * sigmoid(conv1x1(gap(x)))`, with the gate
/// broadcast over the spatial plane.
///
/// The 1x1 convolution mixes all `C` channels (a `C x C` kernel).
pub fn eca<T: Scalar>(g: &Graph<T>, x: &Var<T>, w: &ConvWeights<T>) -> Result<Var<T>> {
    let c = x.shape().c;
    let ws = w.weight.shape();
    if ws.n != c || ws.c != c || ws.h != 1 || ws.w != 1 {
        return Err(Error::shape(
            "eca",
            "c",
            format!("features have {c} channels, weight is {ws}"),
        ));
    }
    let pooled = g.global_avg_pool(x)?;
    let logits = w.apply(g, &pooled)?;
    let gate = g.sigmoid(&logits)?;
    g.channel_scale(x, &gate)
}

/// Smallest spatial extent the ESA stride/pool chain accepts.
pub const ESA_MIN_EXTENT: usize = 3;

/// Spatial attention: channel-reducing 1x1 conv, stride-2 conv, 7x3 max pool,
/// a three-conv group, bilinear upsample back to full size, a 1x1 restore
/// (plus a 1x1 shortcut of the reduced features) and a sigmoid gate
/// multiplied onto the input.
pub fn esa<T: Scalar>(g: &Graph<T>, x: &Var<T>, w: &EsaWeights<T>) -> Result<Var<T>> {
    let s = x.shape();
    if s.h < ESA_MIN_EXTENT || s.w < ESA_MIN_EXTENT {
        return Err(Error::shape(
            "esa",
            "h/w",
            format!("{}x{} is below the {ESA_MIN_EXTENT}x{ESA_MIN_EXTENT} minimum", s.h, s.w),
        ));
    }
    let reduced = w.conv1.apply(g, x)?;
    let down = w.conv2.apply_with(g, &reduced, 2, 0)?;
    let pooled = g.max_pool2d(&down, 7, 3, 3)?;
    let v = g.relu(&w.conv_max.apply(g, &pooled)?)?;
    let v = g.relu(&w.conv3.apply(g, &v)?)?;
    let v = w.conv3b.apply(g, &v)?;
    let up = g.resize_bilinear(&v, s.h, s.w)?;
    let shortcut = w.conv_f.apply(g, &reduced)?;
    let mixed = g.add(&up, &shortcut)?;
    let gate = g.sigmoid(&w.conv4.apply(g, &mixed)?)?;
    g.mul(x, &gate)
}

pub fn attention<T: Scalar>(g: &Graph<T>, x: &Var<T>, w: &AttentionWeights<T>) -> Result<Var<T>> {
    match w {
        AttentionWeights::Eca(w) => eca(g, x, w),
        AttentionWeights::Esa(w) => esa(g, x, w),
    }
}

/// One residual feature block, also returning the attention output.
///
/// `y = smooth(attention(refine(x))) + x` where `refine` is three stacked
/// conv3x3 + activation stages with no inner skips.
pub fn erlfb_forward_tapped<T: Scalar>(
    g: &Graph<T>,
    w: &BlockWeights<T>,
    x: &Var<T>,
    activation: Activation,
) -> Result<(Var<T>, Var<T>)> {
    let c = x.shape().c;
    let expect = w.smooth.weight.shape().n;
    if c != expect {
        return Err(Error::shape("erlfb", "c", format!("input has {c} channels, block expects {expect}")));
    }
    let mut h = x.clone();
    for conv in &w.refine {
        h = g.activation(&conv.apply(g, &h)?, activation)?;
    }
    let attended = attention(g, &h, &w.attention)?;
    let y = g.add(&w.smooth.apply(g, &attended)?, x)?;
    Ok((y, attended))
}

pub fn erlfb_forward<T: Scalar>(
    g: &Graph<T>,
    w: &BlockWeights<T>,
    x: &Var<T>,
    activation: Activation,
) -> Result<Var<T>> {
    erlfb_forward_tapped(g, w, x, activation).map(|(y, _)| y)
}
