//! Layers shared by the encoder, fusion, temporal and decoder modules.

use std::rc::Rc;

use crate::graph::{ConvGeom, Graph, ResizePlan, Var};
use crate::params::{ParamBuilder, ParamId};
use crate::tensor::Tensor;

/// A `[channels, height * width]` feature map inside a graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Fmap {
    pub var: Var,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Fmap {
    pub fn new(var: Var, channels: usize, height: usize, width: usize) -> Self {
        Self {
            var,
            channels,
            height,
            width,
        }
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn with_var(self, var: Var) -> Self {
        Self { var, ..self }
    }

    /// `[tokens, channels]` view.
    pub fn tokens(&self, g: &mut Graph) -> Var {
        g.transpose(self.var)
    }

    pub fn from_tokens(g: &mut Graph, tokens: Var, height: usize, width: usize) -> Self {
        let channels = g.shape(tokens)[1];
        let var = g.transpose(tokens);
        Self::new(var, channels, height, width)
    }
}

/// Token-wise affine map `x·W + b` on `[tokens, in]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(
        pb: &mut ParamBuilder,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
    ) -> Self {
        let mut sub = pb.sub(name);
        let weight = sub.uniform("weight", &[fan_in, fan_out], fan_in);
        let bias = bias.then(|| sub.constant("bias", &[1, fan_out], 0.0));
        Self { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.weight);
        let y = g.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.bcast_add(y, b)
            }
            None => y,
        }
    }
}

/// Square convolution with "same" padding and unit stride.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl Conv2d {
    pub fn new(
        pb: &mut ParamBuilder,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        bias: bool,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let mut sub = pb.sub(name);
        let weight = sub.uniform("weight", &[out_channels, fan_in], fan_in);
        let bias = bias.then(|| sub.constant("bias", &[out_channels, 1], 0.0));
        Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Fmap) -> Fmap {
        assert_eq!(x.channels, self.in_channels, "conv input channels");
        let cols = if self.kernel == 1 {
            x.var
        } else {
            g.im2col(
                x.var,
                ConvGeom {
                    channels: x.channels,
                    height: x.height,
                    width: x.width,
                    kernel: self.kernel,
                    stride: 1,
                    pad: self.kernel / 2,
                },
            )
        };
        let w = g.param(self.weight);
        let mut y = g.matmul(w, cols);
        if let Some(b) = self.bias {
            let b = g.param(b);
            y = g.bcast_add(y, b);
        }
        Fmap::new(y, self.out_channels, x.height, x.width)
    }
}

/// Per-token layer normalization over channels (`[tokens, C]`).
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(pb: &mut ParamBuilder, name: &str, channels: usize) -> Self {
        let mut sub = pb.sub(name);
        Self {
            gamma: sub.constant("gamma", &[1, channels], 1.0),
            beta: sub.constant("beta", &[1, channels], 0.0),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let n = g.normalize_rows(x);
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        let y = g.bcast_mul(n, gamma);
        g.bcast_add(y, beta)
    }
}

/// Batch normalization over the spatial extent of a `[C, H*W]` map,
/// always using the statistics of the current batch.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl BatchNorm {
    pub fn new(pb: &mut ParamBuilder, name: &str, channels: usize) -> Self {
        let mut sub = pb.sub(name);
        Self {
            gamma: sub.constant("gamma", &[channels, 1], 1.0),
            beta: sub.constant("beta", &[channels, 1], 0.0),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Fmap) -> Fmap {
        let n = g.normalize_rows(x.var);
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        let y = g.bcast_mul(n, gamma);
        x.with_var(g.bcast_add(y, beta))
    }
}

/// Convolution → batch norm → ReLU.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub conv: Conv2d,
    pub norm: BatchNorm,
}

impl ConvBlock {
    pub fn new(pb: &mut ParamBuilder, name: &str, cin: usize, cout: usize, kernel: usize) -> Self {
        let mut sub = pb.sub(name);
        Self {
            conv: Conv2d::new(&mut sub, "conv", cin, cout, kernel, false),
            norm: BatchNorm::new(&mut sub, "bn", cout),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Fmap) -> Fmap {
        let y = self.conv.forward(g, x);
        let y = self.norm.forward(g, y);
        y.with_var(g.relu(y.var))
    }
}

/// Two-layer perceptron with GELU on `[tokens, C]`.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(pb: &mut ParamBuilder, name: &str, channels: usize, hidden: usize) -> Self {
        let mut sub = pb.sub(name);
        Self {
            fc1: Linear::new(&mut sub, "fc1", channels, hidden, true),
            fc2: Linear::new(&mut sub, "fc2", hidden, channels, true),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.fc1.forward(g, x);
        let h = g.gelu(h);
        self.fc2.forward(g, h)
    }
}

/// Squeeze-and-excitation: global average pool → MLP → sigmoid → rescale.
#[derive(Clone, Debug)]
pub struct ChannelAttention {
    pub fc1: ParamId,
    pub fc2: ParamId,
}

impl ChannelAttention {
    pub fn new(pb: &mut ParamBuilder, name: &str, channels: usize, reduction: usize) -> Self {
        let hidden = (channels / reduction).max(1);
        let mut sub = pb.sub(name);
        Self {
            fc1: sub.uniform("fc1", &[hidden, channels], channels),
            fc2: sub.uniform("fc2", &[channels, hidden], hidden),
        }
    }

    fn excite(&self, g: &mut Graph, pooled: Var) -> Var {
        let w1 = g.param(self.fc1);
        let w2 = g.param(self.fc2);
        let h = g.matmul(w1, pooled);
        let h = g.relu(h);
        g.matmul(w2, h)
    }

    pub fn weights(&self, g: &mut Graph, x: Fmap) -> Var {
        let avg = g.mean_cols(x.var);
        let e = self.excite(g, avg);
        g.sigmoid(e)
    }

    pub fn forward(&self, g: &mut Graph, x: Fmap) -> Fmap {
        let w = self.weights(g, x);
        x.with_var(g.bcast_mul(x.var, w))
    }
}

/// CBAM channel attention: shared MLP over average- and max-pooled
/// descriptors, summed before the sigmoid.
#[derive(Clone, Debug)]
pub struct CbamChannel(pub ChannelAttention);

impl CbamChannel {
    pub fn weights(&self, g: &mut Graph, x: Fmap) -> Var {
        let avg = g.mean_cols(x.var);
        let max = g.max_cols(x.var);
        let a = self.0.excite(g, avg);
        let m = self.0.excite(g, max);
        let s = g.add(a, m);
        g.sigmoid(s)
    }
}

/// Channel-wise average and max → 7×7 conv → sigmoid → rescale.
#[derive(Clone, Debug)]
pub struct SpatialAttention {
    pub conv: Conv2d,
}

impl SpatialAttention {
    pub fn new(pb: &mut ParamBuilder, name: &str) -> Self {
        Self {
            conv: Conv2d::new(pb, name, 2, 1, 7, true),
        }
    }

    pub fn weights(&self, g: &mut Graph, x: Fmap) -> Var {
        let avg = g.mean_rows(x.var);
        let max = g.max_rows(x.var);
        let stacked = g.concat_rows(&[avg, max]);
        let y = self
            .conv
            .forward(g, Fmap::new(stacked, 2, x.height, x.width));
        g.sigmoid(y.var)
    }

    pub fn forward(&self, g: &mut Graph, x: Fmap) -> Fmap {
        let w = self.weights(g, x);
        x.with_var(g.bcast_mul(x.var, w))
    }
}

/// Convolutional block attention: channel gate then spatial gate.
#[derive(Clone, Debug)]
pub struct Cbam {
    pub channel: CbamChannel,
    pub spatial: SpatialAttention,
    /// Skips both gates; used to isolate the surrounding projection in tests.
    pub bypass: bool,
}

impl Cbam {
    pub fn new(pb: &mut ParamBuilder, name: &str, channels: usize, reduction: usize) -> Self {
        let mut sub = pb.sub(name);
        Self {
            channel: CbamChannel(ChannelAttention::new(
                &mut sub, "channel", channels, reduction,
            )),
            spatial: SpatialAttention::new(&mut sub, "spatial"),
            bypass: false,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Fmap) -> Fmap {
        if self.bypass {
            return x;
        }
        let cw = self.channel.weights(g, x);
        let x = x.with_var(g.bcast_mul(x.var, cw));
        self.spatial.forward(g, x)
    }
}

/// Scaled dot-product attention on token matrices, split into `heads`
/// column groups. Returns `[queries, C]`.
pub fn attention(g: &mut Graph, q: Var, k: Var, v: Var, heads: usize) -> Var {
    let c = g.shape(q)[1];
    assert_eq!(g.shape(k)[1], c, "attention key width");
    assert_eq!(g.shape(k)[0], g.shape(v)[0], "attention key/value count");
    let dh = c / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_cols(q, h * dh, (h + 1) * dh),
                g.slice_cols(k, h * dh, (h + 1) * dh),
                g.slice_cols(v, h * dh, (h + 1) * dh),
            )
        };
        let kt = g.transpose(kh);
        let logits = g.matmul(qh, kt);
        let logits = g.scale(logits, scale);
        let att = g.softmax_rows(logits);
        outs.push(g.matmul(att, vh));
    }
    if heads == 1 {
        outs[0]
    } else {
        g.concat_cols(&outs)
    }
}

/// Bilinear resize of a feature map.
pub fn resize(g: &mut Graph, x: Fmap, height: usize, width: usize) -> Fmap {
    if x.height == height && x.width == width {
        return x;
    }
    let plan = Rc::new(ResizePlan::new(x.height, x.width, height, width));
    let var = g.resize(x.var, plan);
    Fmap::new(var, x.channels, height, width)
}

pub fn concat_channels(g: &mut Graph, parts: &[Fmap]) -> Fmap {
    let (h, w) = (parts[0].height, parts[0].width);
    assert!(
        parts.iter().all(|p| p.height == h && p.width == w),
        "concat spatial mismatch"
    );
    let vars: Vec<Var> = parts.iter().map(|p| p.var).collect();
    let var = g.concat_rows(&vars);
    Fmap::new(var, parts.iter().map(|p| p.channels).sum(), h, w)
}

/// Convenience for tests and hooks: overwrite a stored parameter.
pub fn set_param(store: &mut crate::params::ParamStore, id: ParamId, value: Tensor) {
    let slot = store.get_mut(id);
    assert_eq!(slot.shape(), value.shape(), "parameter shape");
    *slot = value;
}
