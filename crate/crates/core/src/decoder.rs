//! Mask decoders: the coarse primary decoder and the temporal-spatial
//! decoder (TSD) with its simple-gate fusion.

use crate::backbone::FeaturePyramid;
use crate::cmfm::SpatialFeatures;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{
    concat_channels, resize, ChannelAttention, Conv2d, ConvBlock, Fmap, SpatialAttention,
};
use crate::params::ParamBuilder;
use crate::temporal::TemporalFeatures;

/// A decoded mask: full-resolution logits and their sigmoid, both `[1, H*W]`.
#[derive(Clone, Copy, Debug)]
pub struct MaskOutput {
    pub logits: Var,
    pub probs: Var,
    pub height: usize,
    pub width: usize,
}

/// Upsamples level-1 logits ×4 and applies the sigmoid.
fn finish(g: &mut Graph, logits: Fmap) -> MaskOutput {
    let full = resize(g, logits, logits.height * 4, logits.width * 4);
    let probs = g.sigmoid(full.var);
    MaskOutput {
        logits: full.var,
        probs,
        height: full.height,
        width: full.width,
    }
}

/// Coarse mask from one RGB pyramid: lateral 1×1 convs, upsample to
/// level 1, concatenate, two 3×3 conv blocks, 1×1 head.
#[derive(Clone, Debug)]
pub struct PrimaryDecoder {
    pub lateral: Vec<Conv2d>,
    pub fuse1: ConvBlock,
    pub fuse2: ConvBlock,
    pub head: Conv2d,
}

impl PrimaryDecoder {
    pub fn new(pb: &mut ParamBuilder, cfg: &ModelConfig) -> Self {
        let mut root = pb.sub("primary");
        let c1 = cfg.proj_channels;
        let lateral = (0..4)
            .map(|i| {
                Conv2d::new(
                    &mut root,
                    &format!("lateral{}", i + 1),
                    cfg.backbone_channels[i],
                    c1,
                    1,
                    true,
                )
            })
            .collect();
        Self {
            lateral,
            fuse1: ConvBlock::new(&mut root, "fuse1", 4 * c1, c1, 3),
            fuse2: ConvBlock::new(&mut root, "fuse2", c1, c1, 3),
            head: Conv2d::new(&mut root, "head", c1, 1, 1, true),
        }
    }

    pub fn forward(&self, g: &mut Graph, pyramid: &FeaturePyramid) -> MaskOutput {
        g.push_scope("primary_decode");
        let base = pyramid.levels[0];
        let parts: Vec<Fmap> = (0..4)
            .map(|i| {
                let l = self.lateral[i].forward(g, pyramid.levels[i]);
                resize(g, l, base.height, base.width)
            })
            .collect();
        let cat = concat_channels(g, &parts);
        let x = self.fuse1.forward(g, cat);
        let x = self.fuse2.forward(g, x);
        let logits = self.head.forward(g, x);
        let out = finish(g, logits);
        g.pop_scope();
        out
    }
}

/// Splits channels into halves and multiplies them.
pub fn simple_gate(g: &mut Graph, x: Fmap) -> Result<Fmap> {
    if x.channels % 2 != 0 {
        return Err(Error::shape(format!(
            "simple gate needs an even channel count, got {}",
            x.channels
        )));
    }
    let half = x.channels / 2;
    let a = g.slice_rows(x.var, 0, half);
    let b = g.slice_rows(x.var, half, x.channels);
    Ok(Fmap::new(g.mul(a, b), half, x.height, x.width))
}

/// Gated fusion of one temporal level with one spatial level.
#[derive(Clone, Debug)]
pub struct FuseLevel {
    pub project: Conv2d,
    pub ca_t: ChannelAttention,
    pub ca_s: ChannelAttention,
    pub sa_t: SpatialAttention,
    pub sa_s: SpatialAttention,
}

impl FuseLevel {
    fn new(pb: &mut ParamBuilder, name: &str, c: usize, c1: usize, reduction: usize) -> Self {
        let mut sub = pb.sub(name);
        Self {
            project: Conv2d::new(&mut sub, "project", c, c1, 1, true),
            ca_t: ChannelAttention::new(&mut sub, "ca_t", c1, reduction),
            ca_s: ChannelAttention::new(&mut sub, "ca_s", c1, reduction),
            sa_t: SpatialAttention::new(&mut sub, "sa_t"),
            sa_s: SpatialAttention::new(&mut sub, "sa_s"),
        }
    }

    /// Returns `(F^g, F_cat)`.
    pub fn forward(&self, g: &mut Graph, temporal: Fmap, spatial: Fmap) -> Result<(Fmap, Fmap)> {
        if temporal.height != spatial.height || temporal.width != spatial.width {
            return Err(Error::shape("TSD temporal and spatial maps differ in size"));
        }
        if temporal.channels != self.project.in_channels
            || spatial.channels != self.project.out_channels
        {
            return Err(Error::shape(format!(
                "TSD level expects {}/{} channels, got {}/{}",
                self.project.in_channels,
                self.project.out_channels,
                temporal.channels,
                spatial.channels
            )));
        }
        let t = self.project.forward(g, temporal);
        let ct = self.ca_t.forward(g, t);
        let cs = self.ca_s.forward(g, spatial);
        let mean_s = g.mean_rows(spatial.var);
        let gate_s = g.sigmoid(mean_s);
        let mean_t = g.mean_rows(t.var);
        let gate_t = g.sigmoid(mean_t);
        let ft = {
            let m = g.bcast_mul(ct.var, gate_s);
            let s = g.add(m, ct.var);
            self.sa_t.forward(g, ct.with_var(s))
        };
        let fs = {
            let m = g.bcast_mul(cs.var, gate_t);
            let s = g.add(m, cs.var);
            self.sa_s.forward(g, cs.with_var(s))
        };
        let cat = concat_channels(g, &[ft, fs]);
        Ok((simple_gate(g, cat)?, cat))
    }
}

/// `D₄ = F₄`, `D_i = CB([F_i, Up×2(D_{i+1})])`, logits `= Conv1×1(D₁)`.
#[derive(Clone, Debug)]
pub struct TopDown {
    pub blocks: Vec<ConvBlock>,
    pub head: Conv2d,
}

impl TopDown {
    fn new(pb: &mut ParamBuilder, c1: usize) -> Self {
        Self {
            blocks: (0..3)
                .map(|i| ConvBlock::new(pb, &format!("cb{}", i + 1), 2 * c1, c1, 3))
                .collect(),
            head: Conv2d::new(pb, "head", c1, 1, 1, true),
        }
    }

    /// Returns the level-1 logits and `D₁..D₄`.
    pub fn forward(&self, g: &mut Graph, fused: [Fmap; 4]) -> Result<(Fmap, [Fmap; 4])> {
        let mut d = [fused[3]; 4];
        for i in (0..3).rev() {
            let prev = d[i + 1];
            let up = resize(g, prev, prev.height * 2, prev.width * 2);
            if up.height != fused[i].height || up.width != fused[i].width {
                return Err(Error::shape(format!(
                    "decoder level {}: upsampled {}x{} does not meet {}x{}",
                    i + 1,
                    up.height,
                    up.width,
                    fused[i].height,
                    fused[i].width
                )));
            }
            let cat = concat_channels(g, &[fused[i], up]);
            d[i] = self.blocks[i].forward(g, cat);
        }
        Ok((self.head.forward(g, d[0]), d))
    }
}

#[derive(Clone, Debug)]
pub struct Tsd {
    pub levels: Vec<FuseLevel>,
    pub top_down: TopDown,
}

/// Everything one TSD pass produced, for inspection.
#[derive(Clone, Copy, Debug)]
pub struct TsdTrace {
    pub gated: [Fmap; 4],
    pub decoded: [Fmap; 4],
    pub mask: MaskOutput,
}

impl Tsd {
    pub fn new(pb: &mut ParamBuilder, cfg: &ModelConfig) -> Self {
        let mut root = pb.sub("tsd");
        let levels = (0..4)
            .map(|i| {
                FuseLevel::new(
                    &mut root,
                    &format!("fuse{}", i + 1),
                    cfg.backbone_channels[i],
                    cfg.proj_channels,
                    cfg.cbam_reduction,
                )
            })
            .collect();
        Self {
            levels,
            top_down: TopDown::new(&mut root, cfg.proj_channels),
        }
    }

    pub fn fuse_level(
        &self,
        g: &mut Graph,
        level: usize,
        temporal: Fmap,
        spatial: Fmap,
    ) -> Result<Fmap> {
        Ok(self.levels[level].forward(g, temporal, spatial)?.0)
    }

    pub fn decode(&self, g: &mut Graph, gated: [Fmap; 4]) -> Result<(Fmap, [Fmap; 4])> {
        self.top_down.forward(g, gated)
    }

    pub fn forward_traced(
        &self,
        g: &mut Graph,
        temporal: &[Fmap; 4],
        spatial: &SpatialFeatures,
    ) -> Result<TsdTrace> {
        g.push_scope("tsd");
        let result = (|| {
            let mut gated = [temporal[0]; 4];
            for i in 0..4 {
                gated[i] = self.fuse_level(g, i, temporal[i], spatial.levels[i])?;
            }
            let (logits, decoded) = self.decode(g, gated)?;
            Ok(TsdTrace {
                gated,
                decoded,
                mask: finish(g, logits),
            })
        })();
        g.pop_scope();
        result
    }
}

/// Ablation decoder: `Conv1×1([T_i, S_i])` in place of gated fusion.
#[derive(Clone, Debug)]
pub struct SimpleDecoder {
    pub fuse: Vec<Conv2d>,
    pub top_down: TopDown,
}

impl SimpleDecoder {
    pub fn new(pb: &mut ParamBuilder, cfg: &ModelConfig) -> Self {
        let mut root = pb.sub("simple_decoder");
        let c1 = cfg.proj_channels;
        let fuse = (0..4)
            .map(|i| {
                Conv2d::new(
                    &mut root,
                    &format!("fuse{}", i + 1),
                    cfg.backbone_channels[i] + c1,
                    c1,
                    1,
                    true,
                )
            })
            .collect();
        Self {
            fuse,
            top_down: TopDown::new(&mut root, c1),
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        temporal: &[Fmap; 4],
        spatial: &SpatialFeatures,
    ) -> Result<MaskOutput> {
        g.push_scope("simple_decoder");
        let result = (|| {
            let mut fused = [temporal[0]; 4];
            for i in 0..4 {
                let cat = concat_channels(g, &[temporal[i], spatial.levels[i]]);
                fused[i] = self.fuse[i].forward(g, cat);
            }
            let (logits, _) = self.top_down.forward(g, fused)?;
            Ok(finish(g, logits))
        })();
        g.pop_scope();
        result
    }
}

#[derive(Clone, Debug)]
pub enum MaskDecoder {
    Tsd(Tsd),
    Simple(SimpleDecoder),
}

impl MaskDecoder {
    pub fn decode(
        &self,
        g: &mut Graph,
        temporal: &[Fmap; 4],
        spatial: &SpatialFeatures,
    ) -> Result<MaskOutput> {
        match self {
            MaskDecoder::Tsd(t) => Ok(t.forward_traced(g, temporal, spatial)?.mask),
            MaskDecoder::Simple(s) => s.forward(g, temporal, spatial),
        }
    }

    /// Masks for frames `(N-2, N-1, N)`; frame `N-2` reuses the spatial
    /// features of the first flow.
    pub fn predict_masks(
        &self,
        g: &mut Graph,
        temporal: &TemporalFeatures,
        spatial_prev: &SpatialFeatures,
        spatial_cur: &SpatialFeatures,
    ) -> Result<[MaskOutput; 3]> {
        let m_older = self.decode(g, &temporal.frames[0], spatial_prev)?;
        let m_prev = self.decode(g, &temporal.frames[1], spatial_prev)?;
        let m_cur = self.decode(g, &temporal.frames[2], spatial_cur)?;
        Ok([m_older, m_prev, m_cur])
    }
}
