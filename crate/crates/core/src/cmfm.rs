//! Cross-scale multimodal fusion of RGB and flow pyramids.
//!
//! Both pyramids are projected to a common width C₁ (CBAM followed by a 1×1
//! convolution), then seven cross-attention blocks run as a U-shaped loop:
//! the top branch walks from scale 1 to scale 4, the bottom branch back to
//! scale 1, each block querying with a fresh projected map and attending to
//! the previous block's output. Same-scale outputs are multiplied to form the
//! spatial features `S₁..S₄`.

use crate::backbone::FeaturePyramid;
use crate::config::{CmfmWiring, ModelConfig};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{attention, concat_channels, Cbam, Conv2d, Fmap, LayerNorm, Linear, Mlp};
use crate::params::ParamBuilder;

pub const NUM_BLOCKS: usize = 7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Modality {
    Rgb,
    Flow,
}

/// One of the eight projected input maps: modality and 1-based scale.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct MapRef {
    pub modality: Modality,
    pub scale: usize,
}

/// Four maps of width C₁ for one modality.
#[derive(Clone, Copy, Debug)]
pub struct ProjectedPyramid {
    pub levels: [Fmap; 4],
}

/// `S₁..S₄`, each `C₁` channels at the matching pyramid resolution.
#[derive(Clone, Copy, Debug)]
pub struct SpatialFeatures {
    pub levels: [Fmap; 4],
}

/// Intermediate products of one CMFM pass.
#[derive(Clone, Debug)]
pub struct CmfmTrace {
    /// `F₁..F₇`.
    pub block_outputs: Vec<Fmap>,
    /// Fresh projected map each block consumed, in execution order.
    pub consumed: Vec<MapRef>,
}

/// What a block uses as its memory (keys/values).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Memory {
    Map(MapRef),
    Block(usize),
}

/// Query map and memory of every block for a wiring.
fn schedule(wiring: CmfmWiring) -> [(MapRef, Memory); NUM_BLOCKS] {
    let (q_mod, kv_mod) = match wiring {
        CmfmWiring::Alternating => (Modality::Flow, Modality::Rgb),
        CmfmWiring::Swapped => (Modality::Rgb, Modality::Flow),
    };
    let m = |modality, scale| MapRef { modality, scale };
    [
        (m(q_mod, 2), Memory::Map(m(kv_mod, 1))),
        (m(kv_mod, 3), Memory::Block(0)),
        (m(q_mod, 4), Memory::Block(1)),
        (m(kv_mod, 4), Memory::Block(2)),
        (m(q_mod, 3), Memory::Block(3)),
        (m(kv_mod, 2), Memory::Block(4)),
        (m(q_mod, 1), Memory::Block(5)),
    ]
}

/// CBAM followed by a 1×1 projection to C₁.
#[derive(Clone, Debug)]
pub struct Projection {
    pub cbam: Cbam,
    pub conv: Conv2d,
}

impl Projection {
    pub fn forward(&self, g: &mut Graph, x: Fmap) -> Fmap {
        let r = self.cbam.forward(g, x);
        self.conv.forward(g, r)
    }
}

/// Cross-attention block: `out = MLP(LN(softmax(q·kᵀ/√C)·v)) + q`.
#[derive(Clone, Debug)]
pub struct CrossBlock {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub norm: LayerNorm,
    pub mlp: Mlp,
}

impl CrossBlock {
    pub fn new(pb: &mut ParamBuilder, name: &str, c: usize, mlp_ratio: usize) -> Self {
        let mut sub = pb.sub(name);
        Self {
            wq: Linear::new(&mut sub, "wq", c, c, true),
            wk: Linear::new(&mut sub, "wk", c, c, true),
            wv: Linear::new(&mut sub, "wv", c, c, true),
            norm: LayerNorm::new(&mut sub, "norm", c),
            mlp: Mlp::new(&mut sub, "mlp", c, mlp_ratio * c),
        }
    }

    /// Token-level block on `[Nq, C]` queries and `[Nk, C]` memory.
    pub fn forward_tokens(
        &self,
        g: &mut Graph,
        query: Var,
        memory: Var,
        heads: usize,
    ) -> Result<Var> {
        let (qc, mc) = (g.shape(query)[1], g.shape(memory)[1]);
        if qc != mc {
            return Err(Error::shape(format!(
                "cross-attention width mismatch: query {qc}, memory {mc}"
            )));
        }
        let q = self.wq.forward(g, query);
        let k = self.wk.forward(g, memory);
        let v = self.wv.forward(g, memory);
        let y = attention(g, q, k, v, heads);
        let n = self.norm.forward(g, y);
        let m = self.mlp.forward(g, n);
        Ok(g.add(m, q))
    }
}

#[derive(Clone, Debug)]
pub struct Cmfm {
    pub rgb_proj: Vec<Projection>,
    pub flow_proj: Vec<Projection>,
    pub blocks: Vec<CrossBlock>,
    channels: [usize; 4],
    c1: usize,
    heads: usize,
    wiring: CmfmWiring,
}

impl Cmfm {
    pub fn new(pb: &mut ParamBuilder, cfg: &ModelConfig) -> Self {
        let mut root = pb.sub("cmfm");
        let c1 = cfg.proj_channels;
        let mut proj = |prefix: &str| -> Vec<Projection> {
            (0..4)
                .map(|i| {
                    let c = cfg.backbone_channels[i];
                    let mut sp = root.sub(&format!("{prefix}{}", i + 1));
                    Projection {
                        cbam: Cbam::new(&mut sp, "cbam", c, cfg.cbam_reduction),
                        conv: Conv2d::new(&mut sp, "conv", c, c1, 1, true),
                    }
                })
                .collect()
        };
        let rgb_proj = proj("project_rgb");
        let flow_proj = proj("project_flow");
        let blocks = (0..NUM_BLOCKS)
            .map(|k| CrossBlock::new(&mut root, &format!("block{}", k + 1), c1, cfg.mlp_ratio))
            .collect();
        Self {
            rgb_proj,
            flow_proj,
            blocks,
            channels: cfg.backbone_channels,
            c1,
            heads: cfg.heads,
            wiring: cfg.cmfm_wiring,
        }
    }

    /// `X_i = Conv1×1(CBAM(P_i))` for both pyramids.
    pub fn project_inputs(
        &self,
        g: &mut Graph,
        rgb: &FeaturePyramid,
        flow: &FeaturePyramid,
    ) -> Result<(ProjectedPyramid, ProjectedPyramid)> {
        for (name, p) in [("rgb", rgb), ("flow", flow)] {
            for (i, l) in p.levels.iter().enumerate() {
                if l.channels != self.channels[i] {
                    return Err(Error::shape(format!(
                        "{name} level {} has {} channels, config expects {}",
                        i + 1,
                        l.channels,
                        self.channels[i]
                    )));
                }
            }
        }
        g.push_scope("cmfm/project");
        let run = |g: &mut Graph, projs: &[Projection], p: &FeaturePyramid| -> [Fmap; 4] {
            std::array::from_fn(|i| projs[i].forward(g, p.levels[i]))
        };
        let xg = ProjectedPyramid {
            levels: run(g, &self.rgb_proj, rgb),
        };
        let xo = ProjectedPyramid {
            levels: run(g, &self.flow_proj, flow),
        };
        g.pop_scope();
        Ok((xg, xo))
    }

    /// Runs block `k` (0-based) on feature maps.
    pub fn attention_block(
        &self,
        g: &mut Graph,
        k: usize,
        query: Fmap,
        memory: Fmap,
    ) -> Result<Fmap> {
        let q = query.tokens(g);
        let m = memory.tokens(g);
        let out = self.blocks[k].forward_tokens(g, q, m, self.heads)?;
        Ok(Fmap::from_tokens(g, out, query.height, query.width))
    }

    pub fn run(
        &self,
        g: &mut Graph,
        xg: &ProjectedPyramid,
        xo: &ProjectedPyramid,
    ) -> Result<SpatialFeatures> {
        Ok(self.run_traced(g, xg, xo)?.0)
    }

    pub fn run_traced(
        &self,
        g: &mut Graph,
        xg: &ProjectedPyramid,
        xo: &ProjectedPyramid,
    ) -> Result<(SpatialFeatures, CmfmTrace)> {
        for p in [xg, xo] {
            if p.levels.iter().any(|l| l.channels != self.c1) {
                return Err(Error::shape("projected maps must all have C1 channels"));
            }
        }
        let pick = |r: MapRef| -> Fmap {
            match r.modality {
                Modality::Rgb => xg.levels[r.scale - 1],
                Modality::Flow => xo.levels[r.scale - 1],
            }
        };
        let mut outputs: Vec<Fmap> = Vec::with_capacity(NUM_BLOCKS);
        let mut consumed = Vec::with_capacity(8);
        for (k, (qref, mem)) in schedule(self.wiring).into_iter().enumerate() {
            g.push_scope(&format!("cmfm/block{}", k + 1));
            let memory = match mem {
                Memory::Map(r) => {
                    consumed.push(r);
                    pick(r)
                }
                Memory::Block(j) => outputs[j],
            };
            consumed.push(qref);
            let out = self.attention_block(g, k, pick(qref), memory);
            g.pop_scope();
            outputs.push(out?);
        }
        g.push_scope("cmfm/pair");
        let f = &outputs;
        let mut product = |a: Fmap, b: Fmap| -> Result<Fmap> {
            if a.channels != b.channels || a.height != b.height || a.width != b.width {
                return Err(Error::shape("CMFM pairing needs equal shapes"));
            }
            Ok(a.with_var(g.mul(a.var, b.var)))
        };
        let s2 = product(f[0], f[5]);
        let s3 = product(f[1], f[4]);
        let s4 = product(f[2], f[3]);
        g.pop_scope();
        let spatial = SpatialFeatures {
            levels: [f[6], s2?, s3?, s4?],
        };
        Ok((
            spatial,
            CmfmTrace {
                block_outputs: outputs,
                consumed,
            },
        ))
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        rgb: &FeaturePyramid,
        flow: &FeaturePyramid,
    ) -> Result<SpatialFeatures> {
        let (xg, xo) = self.project_inputs(g, rgb, flow)?;
        self.run(g, &xg, &xo)
    }
}

/// Stand-in fusion for ablations: per level `Conv1×1([G_i, O_i]) → C₁`.
#[derive(Clone, Debug)]
pub struct BasicFusion {
    pub convs: Vec<Conv2d>,
}

impl BasicFusion {
    pub fn new(pb: &mut ParamBuilder, cfg: &ModelConfig) -> Self {
        let mut root = pb.sub("basic_fusion");
        let convs = (0..4)
            .map(|i| {
                let c = cfg.backbone_channels[i];
                Conv2d::new(
                    &mut root,
                    &format!("level{}", i + 1),
                    2 * c,
                    cfg.proj_channels,
                    1,
                    true,
                )
            })
            .collect();
        Self { convs }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        rgb: &FeaturePyramid,
        flow: &FeaturePyramid,
    ) -> Result<SpatialFeatures> {
        g.push_scope("basic_fusion");
        let levels = std::array::from_fn(|i| {
            let cat = concat_channels(g, &[rgb.levels[i], flow.levels[i]]);
            self.convs[i].forward(g, cat)
        });
        g.pop_scope();
        Ok(SpatialFeatures { levels })
    }
}
