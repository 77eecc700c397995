//! The assembled network and its clip-level forward pass.

use crate::backbone::{frame_input, Backbone, FeaturePyramid};
use crate::cmfm::{BasicFusion, Cmfm, SpatialFeatures};
use crate::config::{ClipWindow, FlowEncoding, ModelConfig};
use crate::decoder::{MaskDecoder, MaskOutput, PrimaryDecoder, SimpleDecoder, Tsd};
use crate::error::{Error, Result};
use crate::flow::{
    clip_max_magnitude, compute_flow, flow_to_color, refine_flow, FlowField, FlowProvider,
    FramePair, MaxMagnitude,
};
use crate::graph::Graph;
use crate::imaging::{Mask, ProbMask};
use crate::nn::{Conv2d, Fmap};
use crate::params::{seeded_rng, ParamBuilder, ParamStore};
use crate::temporal::{passthrough, TemporalAttention, TemporalFeatures};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub enum Fusion {
    Cmfm(Cmfm),
    Basic(BasicFusion),
}

impl Fusion {
    pub fn forward(
        &self,
        g: &mut Graph,
        rgb: &FeaturePyramid,
        flow: &FeaturePyramid,
    ) -> Result<SpatialFeatures> {
        match self {
            Fusion::Cmfm(c) => c.forward(g, rgb, flow),
            Fusion::Basic(b) => b.forward(g, rgb, flow),
        }
    }
}

/// Modules that only exist when flow is used.
#[derive(Clone, Debug)]
pub struct MotionBranch {
    pub flow_backbone: Backbone,
    /// Lifts normalized `(u, v)` to three channels for raw encoding.
    pub flow_lift: Option<Conv2d>,
    pub fusion: Fusion,
    pub temporal: Option<TemporalAttention>,
    pub decoder: MaskDecoder,
}

#[derive(Clone, Debug)]
pub struct MvgdNet {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    pub rgb_backbone: Backbone,
    pub primary: PrimaryDecoder,
    pub motion: Option<MotionBranch>,
}

/// Graph handles for one clip.
#[derive(Clone, Copy, Debug)]
pub struct ClipOutput {
    /// `P_{N-1}`.
    pub primary: MaskOutput,
    /// `M_{N-2}, M_{N-1}, M_N`.
    pub masks: [MaskOutput; 3],
}

/// Evaluated masks for one clip.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipMasks {
    pub primary: ProbMask,
    pub masks: [ProbMask; 3],
}

/// Intermediate values of a forward pass, for inspection.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub rgb: Vec<FeaturePyramid>,
    pub flow: Vec<FeaturePyramid>,
    pub spatial: Vec<SpatialFeatures>,
    pub temporal: Option<TemporalFeatures>,
    /// Refined flows actually encoded, `(N-2→N-1, N-1→N)`.
    pub refined_flows: Vec<FlowField>,
    pub output: ClipOutput,
}

pub fn mask_value(g: &Graph, out: &MaskOutput) -> ProbMask {
    Mask::new(out.height, out.width, g.value(out.probs).data().to_vec())
}

impl MvgdNet {
    /// Builds only the modules the ablation switches enable.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        let cfg = cfg.validate()?;
        let mut params = ParamStore::new();
        let mut rng = seeded_rng(seed);
        let mut pb = ParamBuilder::new(&mut params, &mut rng);
        let rgb_backbone = Backbone::new(&mut pb, "rgb_backbone", &cfg);
        let primary = PrimaryDecoder::new(&mut pb, &cfg);
        let sw = cfg.ablation;
        let motion = sw.use_flow.then(|| {
            let flow_backbone = Backbone::new(&mut pb, "flow_backbone", &cfg);
            let flow_lift = (cfg.flow_encoding == FlowEncoding::Raw)
                .then(|| Conv2d::new(&mut pb, "flow_lift", 2, 3, 1, true));
            let fusion = if sw.use_cmfm {
                Fusion::Cmfm(Cmfm::new(&mut pb, &cfg))
            } else {
                Fusion::Basic(BasicFusion::new(&mut pb, &cfg))
            };
            let temporal = sw.use_tam.then(|| TemporalAttention::new(&mut pb, &cfg));
            let decoder = if sw.use_tsd {
                MaskDecoder::Tsd(Tsd::new(&mut pb, &cfg))
            } else {
                MaskDecoder::Simple(SimpleDecoder::new(&mut pb, &cfg))
            };
            MotionBranch {
                flow_backbone,
                flow_lift,
                fusion,
                temporal,
                decoder,
            }
        });
        Ok(Self {
            cfg,
            params,
            rgb_backbone,
            primary,
            motion,
        })
    }

    /// Names of the top-level modules present in this variant.
    pub fn module_names(&self) -> Vec<&'static str> {
        let mut names = vec!["rgb_backbone", "primary_decoder"];
        if let Some(m) = &self.motion {
            names.push("flow_backbone");
            if m.flow_lift.is_some() {
                names.push("flow_lift");
            }
            names.push(match m.fusion {
                Fusion::Cmfm(_) => "cmfm",
                Fusion::Basic(_) => "basic_fusion",
            });
            names.push(if m.temporal.is_some() {
                "tam"
            } else {
                "temporal_passthrough"
            });
            names.push(match m.decoder {
                MaskDecoder::Tsd(_) => "tsd",
                MaskDecoder::Simple(_) => "simple_decoder",
            });
            if self.cfg.ablation.use_primary_mask {
                names.push("flow_refinement");
            }
        }
        names
    }

    pub fn needs_flow(&self) -> bool {
        self.motion.is_some()
    }

    fn check_clip(&self, clip: &ClipWindow) -> Result<()> {
        let s = self.cfg.input_size;
        if clip.height() != s || clip.width() != s {
            return Err(Error::shape(format!(
                "clip is {}x{}, model expects {s}x{s}",
                clip.height(),
                clip.width()
            )));
        }
        Ok(())
    }

    /// Raw flows `(N-2→N-1, N-1→N)` from a provider.
    pub fn clip_flows(
        &self,
        clip: &ClipWindow,
        provider: &dyn FlowProvider,
    ) -> Result<[FlowField; 2]> {
        let f = &clip.frames;
        let i = clip.indices;
        let a = compute_flow(&FramePair::indexed(&f[0], &f[1], i[1]), provider)
            .map_err(|e| e.in_stage("flow"))?;
        let b = compute_flow(&FramePair::indexed(&f[1], &f[2], i[2]), provider)
            .map_err(|e| e.in_stage("flow"))?;
        Ok([a, b])
    }

    /// Records the full forward pass into `g`. `flows` is required when the
    /// variant uses motion.
    pub fn forward_traced(
        &self,
        g: &mut Graph,
        clip: &ClipWindow,
        flows: Option<&[FlowField; 2]>,
    ) -> Result<ForwardTrace> {
        self.check_clip(clip)?;
        let inputs: Vec<Fmap> = clip
            .frames
            .iter()
            .map(|f| frame_input(g, f, &self.cfg))
            .collect();
        let rgb = self
            .rgb_backbone
            .encode_shared(g, &inputs)
            .map_err(|e| e.in_stage("rgb_backbone"))?;
        let primary = self.primary.forward(g, &rgb[1]);
        self.check_finite(g, &primary, "primary_decode")?;
        let Some(motion) = &self.motion else {
            let masks = [
                self.primary.forward(g, &rgb[0]),
                primary,
                self.primary.forward(g, &rgb[2]),
            ];
            return Ok(ForwardTrace {
                rgb,
                flow: vec![],
                spatial: vec![],
                temporal: None,
                refined_flows: vec![],
                output: ClipOutput { primary, masks },
            });
        };
        let flows = flows
            .ok_or_else(|| Error::Provider("variant uses flow but none was supplied".into()))?;
        let p = mask_value(g, &primary);
        let refined: Vec<FlowField> = if self.cfg.ablation.use_primary_mask {
            flows
                .iter()
                .map(|f| refine_flow(f, &p, self.cfg.refine_threshold))
                .collect::<Result<_>>()
                .map_err(|e| e.in_stage("refine_flow"))?
        } else {
            flows.to_vec()
        };
        let max_mag = match self.cfg.flow_max_mag {
            Some(m) => m,
            None => clip_max_magnitude(&[&refined[0], &refined[1]]),
        };
        let mut flow_inputs = Vec::with_capacity(2);
        for f in &refined {
            let fm = match &motion.flow_lift {
                None => {
                    let img = flow_to_color(f, MaxMagnitude::Fixed(max_mag))
                        .map_err(|e| e.in_stage("flow_to_color"))?;
                    frame_input(g, &img, &self.cfg)
                }
                Some(lift) => {
                    let data = f.to_planar(max_mag);
                    let v = g.input(Tensor::new(&[2, f.height * f.width], data));
                    lift.forward(g, Fmap::new(v, 2, f.height, f.width))
                }
            };
            flow_inputs.push(fm);
        }
        let flow = motion
            .flow_backbone
            .encode_shared(g, &flow_inputs)
            .map_err(|e| e.in_stage("flow_backbone"))?;
        let mut spatial = Vec::with_capacity(2);
        for k in 0..2 {
            spatial.push(
                motion
                    .fusion
                    .forward(g, &rgb[k + 1], &flow[k])
                    .map_err(|e| e.in_stage("fusion"))?,
            );
        }
        let temporal = match &motion.temporal {
            Some(t) => t
                .forward(g, [&rgb[0], &rgb[1], &rgb[2]])
                .map_err(|e| e.in_stage("temporal"))?,
            None => passthrough([&rgb[0], &rgb[1], &rgb[2]]),
        };
        let masks = motion
            .decoder
            .predict_masks(g, &temporal, &spatial[0], &spatial[1])
            .map_err(|e| e.in_stage("decoder"))?;
        for m in &masks {
            self.check_finite(g, m, "decoder")?;
        }
        Ok(ForwardTrace {
            rgb,
            flow,
            spatial,
            temporal: Some(temporal),
            refined_flows: refined,
            output: ClipOutput { primary, masks },
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        clip: &ClipWindow,
        flows: Option<&[FlowField; 2]>,
    ) -> Result<ClipOutput> {
        Ok(self.forward_traced(g, clip, flows)?.output)
    }

    fn check_finite(&self, g: &Graph, out: &MaskOutput, stage: &str) -> Result<()> {
        if g.value(out.logits).all_finite() {
            Ok(())
        } else {
            Err(Error::Numeric {
                stage: stage.into(),
                detail: "non-finite mask logits".into(),
            })
        }
    }

    /// Evaluated masks for one clip, computing flows with `provider`.
    pub fn forward_clip(
        &self,
        clip: &ClipWindow,
        provider: &dyn FlowProvider,
    ) -> Result<ClipMasks> {
        let flows = if self.needs_flow() {
            Some(self.clip_flows(clip, provider)?)
        } else {
            None
        };
        self.forward_clip_with_flows(clip, flows.as_ref())
    }

    pub fn forward_clip_with_flows(
        &self,
        clip: &ClipWindow,
        flows: Option<&[FlowField; 2]>,
    ) -> Result<ClipMasks> {
        let mut g = Graph::new(&self.params);
        let out = self.forward(&mut g, clip, flows)?;
        Ok(ClipMasks {
            primary: mask_value(&g, &out.primary),
            masks: out.masks.map(|m| mask_value(&g, &m)),
        })
    }
}
