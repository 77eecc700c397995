//! Four-stage hierarchical transformer encoder.
//!
//! Stage 1 embeds 4×4 patches; each later stage merges 2×2 neighbourhoods
//! and doubles the width. Every stage runs pre-norm transformer blocks whose
//! attention is full when the token grid fits one window and block-local
//! (non-shifted windows) otherwise. The output is a [`FeaturePyramid`] at
//! strides {4, 8, 16, 32}.

use std::rc::Rc;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::graph::{ConvGeom, Graph, Var};
use crate::imaging::Frame;
use crate::nn::{attention, Fmap, LayerNorm, Linear, Mlp};
use crate::params::{ParamBuilder, ParamId};

/// Four feature maps at strides 4, 8, 16 and 32.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeaturePyramid {
    pub levels: [Fmap; 4],
}

impl FeaturePyramid {
    /// `(side_h, side_w, channels)` of each level.
    pub fn shapes(&self) -> [(usize, usize, usize); 4] {
        self.levels.map(|l| (l.height, l.width, l.channels))
    }

    pub fn check(&self, cfg: &ModelConfig, height: usize, width: usize) -> Result<()> {
        for (i, l) in self.levels.iter().enumerate() {
            let s = cfg.pyramid_strides[i];
            if l.channels != cfg.backbone_channels[i]
                || l.height != height / s
                || l.width != width / s
            {
                return Err(Error::shape(format!(
                    "pyramid level {} is {}x{}x{}, expected {}x{}x{}",
                    i + 1,
                    l.height,
                    l.width,
                    l.channels,
                    height / s,
                    width / s,
                    cfg.backbone_channels[i]
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Block {
    norm1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    proj: Linear,
    norm2: LayerNorm,
    mlp: Mlp,
}

#[derive(Clone, Debug)]
struct Stage {
    /// `[C_out, C_in·p·p]` patch projection.
    embed: ParamId,
    embed_bias: ParamId,
    embed_norm: LayerNorm,
    patch: usize,
    in_channels: usize,
    blocks: Vec<Block>,
    out_norm: LayerNorm,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    stages: Vec<Stage>,
    heads: usize,
    window: usize,
    name: String,
}

impl Backbone {
    pub fn new(pb: &mut ParamBuilder, name: &str, cfg: &ModelConfig) -> Self {
        let mut root = pb.sub(name);
        let mut stages = Vec::with_capacity(4);
        let mut cin = 3;
        for s in 0..4 {
            let mut sp = root.sub(&format!("stage{}", s + 1));
            let c = cfg.backbone_channels[s];
            let patch = if s == 0 { 4 } else { 2 };
            let fan_in = cin * patch * patch;
            let embed = sp.uniform("embed", &[c, fan_in], fan_in);
            let embed_bias = sp.constant("embed_bias", &[c, 1], 0.0);
            let embed_norm = LayerNorm::new(&mut sp, "embed_norm", c);
            let blocks = (0..cfg.backbone_depths[s])
                .map(|b| {
                    let mut bp = sp.sub(&format!("block{b}"));
                    Block {
                        norm1: LayerNorm::new(&mut bp, "norm1", c),
                        q: Linear::new(&mut bp, "q", c, c, true),
                        k: Linear::new(&mut bp, "k", c, c, true),
                        v: Linear::new(&mut bp, "v", c, c, true),
                        proj: Linear::new(&mut bp, "proj", c, c, true),
                        norm2: LayerNorm::new(&mut bp, "norm2", c),
                        mlp: Mlp::new(&mut bp, "mlp", c, cfg.mlp_ratio * c),
                    }
                })
                .collect();
            let out_norm = LayerNorm::new(&mut sp, "out_norm", c);
            stages.push(Stage {
                embed,
                embed_bias,
                embed_norm,
                patch,
                in_channels: cin,
                blocks,
                out_norm,
            });
            cin = c;
        }
        Self {
            stages,
            heads: cfg.heads,
            window: cfg.attn_window,
            name: name.to_string(),
        }
    }

    /// Encodes one `[3, H*W]` input.
    pub fn encode(&self, g: &mut Graph, image: Fmap) -> Result<FeaturePyramid> {
        if image.channels != 3 {
            return Err(Error::shape(format!(
                "backbone expects 3 channels, got {}",
                image.channels
            )));
        }
        if image.height % 32 != 0 || image.width % 32 != 0 || image.height == 0 || image.width == 0
        {
            return Err(Error::shape(format!(
                "backbone input {}x{} is not divisible by 32",
                image.height, image.width
            )));
        }
        g.push_scope(&self.name);
        let mut x = image;
        let mut levels = Vec::with_capacity(4);
        for (s, stage) in self.stages.iter().enumerate() {
            g.push_scope(&format!("stage{}", s + 1));
            let (tokens, h, w) = self.embed(g, stage, x);
            let mut t = tokens;
            for block in &stage.blocks {
                t = self.block(g, block, t, h, w);
            }
            let normed = stage.out_norm.forward(g, t);
            levels.push(Fmap::from_tokens(g, normed, h, w));
            x = Fmap::from_tokens(g, t, h, w);
            g.pop_scope();
        }
        g.pop_scope();
        Ok(FeaturePyramid {
            levels: [levels[0], levels[1], levels[2], levels[3]],
        })
    }

    /// Encodes several same-size inputs with the one parameter set.
    pub fn encode_shared(&self, g: &mut Graph, images: &[Fmap]) -> Result<Vec<FeaturePyramid>> {
        if let Some(first) = images.first() {
            if images.iter().any(|i| {
                i.height != first.height || i.width != first.width || i.channels != first.channels
            }) {
                return Err(Error::shape("encode_shared inputs differ in size"));
            }
        }
        images.iter().map(|&i| self.encode(g, i)).collect()
    }

    fn embed(&self, g: &mut Graph, stage: &Stage, x: Fmap) -> (Var, usize, usize) {
        debug_assert_eq!(x.channels, stage.in_channels);
        let geom = ConvGeom {
            channels: x.channels,
            height: x.height,
            width: x.width,
            kernel: stage.patch,
            stride: stage.patch,
            pad: 0,
        };
        let (h, w) = (geom.out_height(), geom.out_width());
        let cols = g.im2col(x.var, geom);
        let wt = g.param(stage.embed);
        let y = g.matmul(wt, cols);
        let b = g.param(stage.embed_bias);
        let y = g.bcast_add(y, b);
        let t = g.transpose(y);
        (stage.embed_norm.forward(g, t), h, w)
    }

    fn block(&self, g: &mut Graph, b: &Block, x: Var, h: usize, w: usize) -> Var {
        let n = b.norm1.forward(g, x);
        let q = b.q.forward(g, n);
        let k = b.k.forward(g, n);
        let v = b.v.forward(g, n);
        let a = self.windowed_attention(g, q, k, v, h, w);
        let a = b.proj.forward(g, a);
        let x = g.add(x, a);
        let n = b.norm2.forward(g, x);
        let m = b.mlp.forward(g, n);
        g.add(x, m)
    }

    fn windowed_attention(&self, g: &mut Graph, q: Var, k: Var, v: Var, h: usize, w: usize) -> Var {
        let wy = window_side(h, self.window);
        let wx = window_side(w, self.window);
        if wy == h && wx == w {
            return attention(g, q, k, v, self.heads);
        }
        let (order, inverse) = window_permutation(h, w, wy, wx);
        let (order, inverse) = (Rc::new(order), Rc::new(inverse));
        let qp = g.gather_rows(q, order.clone());
        let kp = g.gather_rows(k, order.clone());
        let vp = g.gather_rows(v, order);
        let per = wy * wx;
        let outs: Vec<Var> = (0..h * w / per)
            .map(|i| {
                let qs = g.slice_rows(qp, i * per, (i + 1) * per);
                let ks = g.slice_rows(kp, i * per, (i + 1) * per);
                let vs = g.slice_rows(vp, i * per, (i + 1) * per);
                attention(g, qs, ks, vs, self.heads)
            })
            .collect();
        let joined = g.concat_rows(&outs);
        g.gather_rows(joined, inverse)
    }
}

/// Largest divisor of `side` not exceeding `max`; the whole side if it fits.
fn window_side(side: usize, max: usize) -> usize {
    if side <= max {
        return side;
    }
    (1..=max).rev().find(|d| side % d == 0).unwrap_or(1)
}

/// Row-major token order → window-major order, and its inverse.
fn window_permutation(h: usize, w: usize, wy: usize, wx: usize) -> (Vec<usize>, Vec<usize>) {
    let mut order = Vec::with_capacity(h * w);
    for by in 0..h / wy {
        for bx in 0..w / wx {
            for y in 0..wy {
                for x in 0..wx {
                    order.push((by * wy + y) * w + bx * wx + x);
                }
            }
        }
    }
    let mut inverse = vec![0; order.len()];
    for (i, &o) in order.iter().enumerate() {
        inverse[o] = i;
    }
    (order, inverse)
}

/// Places a frame into the graph as a `[3, H*W]` input.
pub fn frame_input(g: &mut Graph, frame: &Frame, cfg: &ModelConfig) -> Fmap {
    let data = frame.to_planar(cfg.standardization());
    let var = g.input(crate::tensor::Tensor::new(
        &[3, frame.height * frame.width],
        data,
    ));
    Fmap::new(var, 3, frame.height, frame.width)
}
