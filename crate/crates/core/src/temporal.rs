//! Temporal attention over the three RGB pyramids of a clip.
//!
//! The current frame uses history-guided attention: its keys and values are
//! the token-wise concatenation of `W(G^{N-2}) ⊙ W(G^{N-1})` and `W(G^N)`.
//! The two earlier frames use residual cross-attention,
//! `T^{N-1} = G^{N-1} + Attn(G^{N-1}, G^{N-2})` and
//! `T^{N-2} = G^{N-2} + Attn(G^{N-2}, G^N)`, each with its own weights.

use crate::backbone::FeaturePyramid;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::nn::{attention, Fmap, Linear};
use crate::params::ParamBuilder;

/// Temporal pyramids for frames `N-2`, `N-1`, `N`, at backbone widths.
#[derive(Clone, Copy, Debug)]
pub struct TemporalFeatures {
    pub frames: [[Fmap; 4]; 3],
}

#[derive(Clone, Debug)]
pub struct Projections {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
}

impl Projections {
    fn new(pb: &mut ParamBuilder, name: &str, c: usize) -> Self {
        let mut sub = pb.sub(name);
        Self {
            wq: Linear::new(&mut sub, "wq", c, c, true),
            wk: Linear::new(&mut sub, "wk", c, c, true),
            wv: Linear::new(&mut sub, "wv", c, c, true),
        }
    }
}

fn same_shape(maps: &[Fmap]) -> Result<()> {
    let f = maps[0];
    if maps
        .iter()
        .any(|m| m.channels != f.channels || m.height != f.height || m.width != f.width)
    {
        return Err(Error::shape("temporal inputs differ in shape"));
    }
    Ok(())
}

/// History-guided attention for one level.
#[derive(Clone, Debug)]
pub struct Hgam {
    pub proj: Projections,
    heads: usize,
}

impl Hgam {
    pub fn new(pb: &mut ParamBuilder, name: &str, c: usize, heads: usize) -> Self {
        Self {
            proj: Projections::new(pb, name, c),
            heads,
        }
    }

    pub fn forward(&self, g: &mut Graph, older: Fmap, prev: Fmap, current: Fmap) -> Result<Fmap> {
        same_shape(&[older, prev, current])?;
        let (t2, t1, t0) = (older.tokens(g), prev.tokens(g), current.tokens(g));
        let q = self.proj.wq.forward(g, t0);
        let k2 = self.proj.wk.forward(g, t2);
        let k1 = self.proj.wk.forward(g, t1);
        let k0 = self.proj.wk.forward(g, t0);
        let v2 = self.proj.wv.forward(g, t2);
        let v1 = self.proj.wv.forward(g, t1);
        let v0 = self.proj.wv.forward(g, t0);
        let kh = g.mul(k2, k1);
        let vh = g.mul(v2, v1);
        let k = g.concat_rows(&[kh, k0]);
        let v = g.concat_rows(&[vh, v0]);
        let out = attention(g, q, k, v, self.heads);
        Ok(Fmap::from_tokens(g, out, current.height, current.width))
    }
}

/// Residual cross-attention for one level.
#[derive(Clone, Debug)]
pub struct Tcam {
    pub proj: Projections,
    heads: usize,
}

impl Tcam {
    pub fn new(pb: &mut ParamBuilder, name: &str, c: usize, heads: usize) -> Self {
        Self {
            proj: Projections::new(pb, name, c),
            heads,
        }
    }

    pub fn forward(&self, g: &mut Graph, query: Fmap, memory: Fmap) -> Result<Fmap> {
        same_shape(&[query, memory])?;
        let tq = query.tokens(g);
        let tm = memory.tokens(g);
        let q = self.proj.wq.forward(g, tq);
        let k = self.proj.wk.forward(g, tm);
        let v = self.proj.wv.forward(g, tm);
        let a = attention(g, q, k, v, self.heads);
        let out = g.add(tq, a);
        Ok(Fmap::from_tokens(g, out, query.height, query.width))
    }
}

#[derive(Clone, Debug)]
pub struct TemporalAttention {
    pub hgam: Vec<Hgam>,
    /// `T^{N-1}` from `(G^{N-1}, G^{N-2})`.
    pub tcam_prev: Vec<Tcam>,
    /// `T^{N-2}` from `(G^{N-2}, G^N)`.
    pub tcam_older: Vec<Tcam>,
}

impl TemporalAttention {
    pub fn new(pb: &mut ParamBuilder, cfg: &ModelConfig) -> Self {
        let mut root = pb.sub("tam");
        let mut hgam = Vec::new();
        let mut tcam_prev = Vec::new();
        let mut tcam_older = Vec::new();
        for i in 0..4 {
            let c = cfg.backbone_channels[i];
            hgam.push(Hgam::new(
                &mut root,
                &format!("hgam{}", i + 1),
                c,
                cfg.heads,
            ));
            tcam_prev.push(Tcam::new(
                &mut root,
                &format!("tcam_prev{}", i + 1),
                c,
                cfg.heads,
            ));
            tcam_older.push(Tcam::new(
                &mut root,
                &format!("tcam_older{}", i + 1),
                c,
                cfg.heads,
            ));
        }
        Self {
            hgam,
            tcam_prev,
            tcam_older,
        }
    }

    /// Inputs ordered `(G^{N-2}, G^{N-1}, G^N)`.
    pub fn forward(
        &self,
        g: &mut Graph,
        pyramids: [&FeaturePyramid; 3],
    ) -> Result<TemporalFeatures> {
        let [older, prev, current] = pyramids;
        let mut frames = [older.levels, prev.levels, current.levels];
        for i in 0..4 {
            g.push_scope("tam/hgam");
            let tn = self.hgam[i].forward(g, older.levels[i], prev.levels[i], current.levels[i]);
            g.pop_scope();
            g.push_scope("tam/tcam");
            let tp = self.tcam_prev[i].forward(g, prev.levels[i], older.levels[i]);
            let to = self.tcam_older[i].forward(g, older.levels[i], current.levels[i]);
            g.pop_scope();
            frames[2][i] = tn?;
            frames[1][i] = tp?;
            frames[0][i] = to?;
        }
        Ok(TemporalFeatures { frames })
    }
}

/// Ablation stand-in: temporal features are the backbone features.
pub fn passthrough(pyramids: [&FeaturePyramid; 3]) -> TemporalFeatures {
    TemporalFeatures {
        frames: pyramids.map(|p| p.levels),
    }
}
