//! Model configuration, ablation variants, and clip windowing.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::imaging::{Frame, Mask};

/// Downsampling factor of each pyramid level.
pub const PYRAMID_STRIDES: [usize; 4] = [4, 8, 16, 32];

/// Per-channel statistics used when input standardization is enabled.
pub const INPUT_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const INPUT_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationSwitches {
    pub use_flow: bool,
    pub use_cmfm: bool,
    pub use_tam: bool,
    pub use_tsd: bool,
    pub use_primary_mask: bool,
}

impl Default for AblationSwitches {
    fn default() -> Self {
        Variant::G.switches()
    }
}

/// Rows of the ablation table, each a fixed set of module switches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Backbone + simple decoder, no motion.
    A,
    /// Backbone + flow + basic fusion + simple decoder.
    B,
    /// CMFM + basic temporal + TSD.
    C,
    /// Basic fusion + TAM + TSD.
    D,
    /// CMFM + TAM + simple decoder.
    E,
    /// Full model without primary-mask flow refinement.
    F,
    /// Full model.
    G,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::A,
        Variant::B,
        Variant::C,
        Variant::D,
        Variant::E,
        Variant::F,
        Variant::G,
    ];

    pub fn switches(self) -> AblationSwitches {
        let s = |use_flow, use_cmfm, use_tam, use_tsd, use_primary_mask| AblationSwitches {
            use_flow,
            use_cmfm,
            use_tam,
            use_tsd,
            use_primary_mask,
        };
        match self {
            Variant::A => s(false, false, false, false, false),
            Variant::B => s(true, false, false, false, true),
            Variant::C => s(true, true, false, true, true),
            Variant::D => s(true, false, true, true, true),
            Variant::E => s(true, true, true, false, true),
            Variant::F => s(true, true, true, true, false),
            Variant::G => s(true, true, true, true, true),
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "A" => Ok(Variant::A),
            "B" => Ok(Variant::B),
            "C" => Ok(Variant::C),
            "D" => Ok(Variant::D),
            "E" => Ok(Variant::E),
            "F" => Ok(Variant::F),
            "G" => Ok(Variant::G),
            other => Err(Error::Config(format!("unknown ablation variant {other:?}"))),
        }
    }
}

/// How flow enters the flow backbone.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowEncoding {
    /// Color-wheel image.
    Color,
    /// Normalized `(u, v)` plus a learned 1×1 lift to three channels.
    Raw,
}

/// Which modality supplies the query of each CMFM block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CmfmWiring {
    /// Flow queries at scales 2, 4, 3, 1; RGB at 1 (memory), 3, 4, 2.
    Alternating,
    /// Same loop with the two modalities exchanged.
    Swapped,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_size: usize,
    pub pyramid_strides: [usize; 4],
    pub backbone_channels: [usize; 4],
    pub backbone_depths: [usize; 4],
    /// Side of the square attention window inside the backbone.
    pub attn_window: usize,
    pub heads: usize,
    pub proj_channels: usize,
    pub cbam_reduction: usize,
    pub mlp_ratio: usize,
    pub alpha: f64,
    pub window: usize,
    pub ablation: AblationSwitches,
    pub fbeta_beta_sq: f64,
    pub binarize_threshold: f64,
    pub standardize_input: bool,
    pub flow_encoding: FlowEncoding,
    /// Fixed color-wheel normalization; `None` uses the per-clip 95th percentile.
    pub flow_max_mag: Option<f64>,
    /// Hard threshold applied to the primary mask before flow refinement.
    pub refine_threshold: Option<f64>,
    pub cmfm_wiring: CmfmWiring,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_size: 384,
            pyramid_strides: PYRAMID_STRIDES,
            backbone_channels: [128, 256, 512, 1024],
            backbone_depths: [2, 2, 2, 2],
            attn_window: 12,
            heads: 1,
            proj_channels: 128,
            cbam_reduction: 16,
            mlp_ratio: 4,
            alpha: 0.125,
            window: 3,
            ablation: AblationSwitches::default(),
            fbeta_beta_sq: 0.3,
            binarize_threshold: 0.5,
            standardize_input: true,
            flow_encoding: FlowEncoding::Color,
            flow_max_mag: None,
            refine_threshold: None,
            cmfm_wiring: CmfmWiring::Alternating,
        }
    }
}

impl ModelConfig {
    /// 64×64 inputs, channels {16, 32, 64, 128}, C₁ = 16.
    pub fn tiny() -> Self {
        Self {
            input_size: 64,
            backbone_channels: [16, 32, 64, 128],
            backbone_depths: [1, 1, 1, 1],
            proj_channels: 16,
            cbam_reduction: 4,
            ..Self::default()
        }
    }

    pub fn with_variant(mut self, v: Variant) -> Self {
        self.ablation = v.switches();
        self
    }

    /// Returns the config unchanged if every invariant holds, otherwise
    /// names the first violated one.
    pub fn validate(self) -> Result<Self> {
        if self.pyramid_strides != PYRAMID_STRIDES {
            return Err(Error::Config(format!(
                "pyramid strides must be {PYRAMID_STRIDES:?}, got {:?}",
                self.pyramid_strides
            )));
        }
        if self.backbone_channels[0] == 0 {
            return Err(Error::Config("backbone channels must be positive".into()));
        }
        for i in 1..4 {
            if self.backbone_channels[i] != self.backbone_channels[0] << i {
                return Err(Error::Config(format!(
                    "channel doubling law violated at level {i}: expected {}, got {}",
                    self.backbone_channels[0] << i,
                    self.backbone_channels[i]
                )));
            }
        }
        if self.input_size == 0 || self.input_size % 32 != 0 {
            return Err(Error::Config(format!(
                "input_size {} violates divisibility by 32",
                self.input_size
            )));
        }
        if self.proj_channels == 0 || self.proj_channels % 2 != 0 {
            return Err(Error::Config(format!(
                "proj_channels {} must be even and positive",
                self.proj_channels
            )));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::Config(format!("alpha {} must be > 0", self.alpha)));
        }
        if self.window != 3 {
            return Err(Error::Config(format!(
                "window must be 3, got {}",
                self.window
            )));
        }
        if self.heads == 0
            || self.backbone_channels.iter().any(|c| c % self.heads != 0)
            || self.proj_channels % self.heads != 0
        {
            return Err(Error::Config(format!(
                "heads {} must divide every channel width",
                self.heads
            )));
        }
        if self.attn_window == 0 || self.mlp_ratio == 0 || self.cbam_reduction == 0 {
            return Err(Error::Config(
                "attn_window, mlp_ratio and cbam_reduction must be positive".into(),
            ));
        }
        if self.backbone_depths.iter().any(|&d| d == 0) {
            return Err(Error::Config("backbone depths must be positive".into()));
        }
        for (name, t) in [
            ("binarize_threshold", Some(self.binarize_threshold)),
            ("refine_threshold", self.refine_threshold),
        ] {
            if let Some(t) = t {
                if !(t > 0.0 && t < 1.0) {
                    return Err(Error::Config(format!("{name} {t} must lie in (0, 1)")));
                }
            }
        }
        if !(self.fbeta_beta_sq > 0.0) {
            return Err(Error::Config("fbeta_beta_sq must be > 0".into()));
        }
        if let Some(m) = self.flow_max_mag {
            if !(m > 0.0) {
                return Err(Error::Config(format!("flow_max_mag {m} must be > 0")));
            }
        }
        Ok(self)
    }

    /// Spatial side of pyramid level `level` (0-based).
    pub fn level_side(&self, level: usize) -> usize {
        self.input_size / self.pyramid_strides[level]
    }

    pub fn standardization(&self) -> Option<([f64; 3], [f64; 3])> {
        self.standardize_input.then_some((INPUT_MEAN, INPUT_STD))
    }

    pub fn from_kv_str(text: &str) -> Result<Self> {
        let file: ConfigFile =
            toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        file.into_config()?.validate()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_kv_str(&text)
    }

    /// Flat `key = value` rendering accepted by [`ModelConfig::from_kv_str`].
    pub fn to_kv_string(&self) -> String {
        toml::to_string(&ConfigFile::from_config(self)).expect("config serializes")
    }

    /// SHA-256 of the canonical key-value rendering, hex encoded.
    pub fn hash_hex(&self) -> String {
        let digest = Sha256::digest(self.to_kv_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// On-disk form: every key optional, applied over the chosen preset.
#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    #[serde(skip_serializing_if = "Option::is_none")]
    preset: Option<String>,
    input_size: Option<usize>,
    pyramid_strides: Option<[usize; 4]>,
    backbone_channels: Option<[usize; 4]>,
    backbone_depths: Option<[usize; 4]>,
    attn_window: Option<usize>,
    heads: Option<usize>,
    proj_channels: Option<usize>,
    cbam_reduction: Option<usize>,
    mlp_ratio: Option<usize>,
    alpha: Option<f64>,
    window: Option<usize>,
    use_flow: Option<bool>,
    use_cmfm: Option<bool>,
    use_tam: Option<bool>,
    use_tsd: Option<bool>,
    use_primary_mask: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    ablate: Option<String>,
    fbeta_beta_sq: Option<f64>,
    binarize_threshold: Option<f64>,
    standardize_input: Option<bool>,
    flow_encoding: Option<FlowEncoding>,
    #[serde(skip_serializing_if = "Option::is_none")]
    flow_max_mag: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    refine_threshold: Option<f64>,
    cmfm_wiring: Option<CmfmWiring>,
}

impl ConfigFile {
    fn into_config(self) -> Result<ModelConfig> {
        let mut c = match self.preset.as_deref() {
            None | Some("default") => ModelConfig::default(),
            Some("tiny") => ModelConfig::tiny(),
            Some(p) => return Err(Error::Config(format!("unknown preset {p:?}"))),
        };
        if let Some(v) = &self.ablate {
            c.ablation = v.parse::<Variant>()?.switches();
        }
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = self.$f { c.$f = v; } )* };
        }
        set!(
            input_size,
            pyramid_strides,
            backbone_channels,
            backbone_depths,
            attn_window,
            heads,
            proj_channels,
            cbam_reduction,
            mlp_ratio,
            alpha,
            window,
            fbeta_beta_sq,
            binarize_threshold,
            standardize_input,
            flow_encoding,
            cmfm_wiring
        );
        macro_rules! set_ablation {
            ($($f:ident),*) => { $( if let Some(v) = self.$f { c.ablation.$f = v; } )* };
        }
        set_ablation!(use_flow, use_cmfm, use_tam, use_tsd, use_primary_mask);
        if self.flow_max_mag.is_some() {
            c.flow_max_mag = self.flow_max_mag;
        }
        if self.refine_threshold.is_some() {
            c.refine_threshold = self.refine_threshold;
        }
        Ok(c)
    }

    fn from_config(c: &ModelConfig) -> Self {
        Self {
            preset: None,
            input_size: Some(c.input_size),
            pyramid_strides: Some(c.pyramid_strides),
            backbone_channels: Some(c.backbone_channels),
            backbone_depths: Some(c.backbone_depths),
            attn_window: Some(c.attn_window),
            heads: Some(c.heads),
            proj_channels: Some(c.proj_channels),
            cbam_reduction: Some(c.cbam_reduction),
            mlp_ratio: Some(c.mlp_ratio),
            alpha: Some(c.alpha),
            window: Some(c.window),
            use_flow: Some(c.ablation.use_flow),
            use_cmfm: Some(c.ablation.use_cmfm),
            use_tam: Some(c.ablation.use_tam),
            use_tsd: Some(c.ablation.use_tsd),
            use_primary_mask: Some(c.ablation.use_primary_mask),
            ablate: None,
            fbeta_beta_sq: Some(c.fbeta_beta_sq),
            binarize_threshold: Some(c.binarize_threshold),
            standardize_input: Some(c.standardize_input),
            flow_encoding: Some(c.flow_encoding),
            flow_max_mag: c.flow_max_mag,
            refine_threshold: c.refine_threshold,
            cmfm_wiring: Some(c.cmfm_wiring),
        }
    }
}

impl fmt::Display for ModelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_kv_string())
    }
}

/// Every run of `window` consecutive indices, advancing by `stride`.
pub fn make_windows(video_len: usize, window: usize, stride: usize) -> Result<Vec<Vec<usize>>> {
    if window == 0 || stride == 0 {
        return Err(Error::Config("window and stride must be positive".into()));
    }
    if video_len < window {
        return Err(Error::ClipTooShort {
            len: video_len,
            window,
        });
    }
    Ok((0..=video_len - window)
        .step_by(stride)
        .map(|s| (s..s + window).collect())
        .collect())
}

/// Three consecutive frames `(N-2, N-1, N)` with optional ground truth.
#[derive(Clone, Debug)]
pub struct ClipWindow {
    pub frames: Vec<Frame>,
    pub gt_masks: Option<Vec<Mask>>,
    pub indices: [usize; 3],
}

impl ClipWindow {
    pub fn new(
        frames: Vec<Frame>,
        gt_masks: Option<Vec<Mask>>,
        indices: [usize; 3],
    ) -> Result<Self> {
        if frames.len() != 3 {
            return Err(Error::shape(format!(
                "clip needs 3 frames, got {}",
                frames.len()
            )));
        }
        let (h, w) = (frames[0].height, frames[0].width);
        if frames.iter().any(|f| f.height != h || f.width != w) {
            return Err(Error::shape("clip frames differ in size"));
        }
        if let Some(m) = &gt_masks {
            if m.len() != 3 || m.iter().any(|m| m.height != h || m.width != w) {
                return Err(Error::shape("clip masks must be 3 maps of the frame size"));
            }
        }
        if indices[1] != indices[0] + 1 || indices[2] != indices[1] + 1 {
            return Err(Error::shape(format!(
                "clip indices {indices:?} are not consecutive"
            )));
        }
        Ok(Self {
            frames,
            gt_masks,
            indices,
        })
    }

    pub fn height(&self) -> usize {
        self.frames[0].height
    }

    pub fn width(&self) -> usize {
        self.frames[0].width
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn default_config_is_valid() {
        let c = ModelConfig::default();
        assert_eq!(c.clone().validate().unwrap(), c);
        ModelConfig::tiny().validate().unwrap();
    }

    #[test]
    fn channel_law_violation_is_named() {
        let c = ModelConfig {
            backbone_channels: [128, 256, 500, 1024],
            ..ModelConfig::default()
        };
        let msg = c.validate().unwrap_err().to_string();
        assert!(
            msg.contains("channel doubling law violated at level 2"),
            "{msg}"
        );
    }

    #[test]
    fn input_size_must_divide_by_32() {
        let c = ModelConfig {
            input_size: 100,
            ..ModelConfig::default()
        };
        let msg = c.validate().unwrap_err().to_string();
        assert!(msg.contains("divisibility by 32"), "{msg}");
    }

    #[test]
    fn odd_projection_and_nonpositive_alpha_rejected() {
        let c = ModelConfig {
            proj_channels: 15,
            ..ModelConfig::tiny()
        };
        assert!(c.validate().is_err());
        let c = ModelConfig {
            alpha: 0.0,
            ..ModelConfig::tiny()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn windows_enumerate() {
        assert_eq!(
            make_windows(5, 3, 1).unwrap(),
            vec![vec![0, 1, 2], vec![1, 2, 3], vec![2, 3, 4]]
        );
        assert_eq!(make_windows(3, 3, 1).unwrap(), vec![vec![0, 1, 2]]);
        assert!(matches!(
            make_windows(2, 3, 1),
            Err(Error::ClipTooShort { len: 2, window: 3 })
        ));
    }

    #[test]
    fn kv_roundtrip_and_unknown_keys() {
        let c = ModelConfig::tiny().with_variant(Variant::E);
        let text = c.to_kv_string();
        assert_eq!(ModelConfig::from_kv_str(&text).unwrap(), c);
        let err = ModelConfig::from_kv_str("preset = \"tiny\"\nbogus = 1\n").unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
    }

    #[test]
    fn preset_and_overrides() {
        let c =
            ModelConfig::from_kv_str("preset = \"tiny\"\nablate = \"A\"\nalpha = 0.25\n").unwrap();
        assert_eq!(c.input_size, 64);
        assert_eq!(c.ablation, Variant::A.switches());
        assert_eq!(c.alpha, 0.25);
    }

    #[test]
    fn config_hash_tracks_content() {
        let a = ModelConfig::tiny();
        let b = ModelConfig::tiny().with_variant(Variant::C);
        assert_eq!(a.hash_hex(), ModelConfig::tiny().hash_hex());
        assert_ne!(a.hash_hex(), b.hash_hex());
    }

    #[test]
    fn variants_are_distinct() {
        for (i, a) in Variant::ALL.iter().enumerate() {
            for b in &Variant::ALL[i + 1..] {
                assert_ne!(a.switches(), b.switches(), "{a:?} vs {b:?}");
            }
        }
    }

    proptest! {
        #[test]
        fn windows_cover_every_frame(len in 3usize..60) {
            let w = make_windows(len, 3, 1).unwrap();
            prop_assert_eq!(w.len(), len - 2);
            let mut seen = vec![false; len];
            for (k, win) in w.iter().enumerate() {
                prop_assert!(win.windows(2).all(|p| p[0] < p[1]));
                if k > 0 {
                    prop_assert!(w[k - 1][0] < win[0]);
                }
                for &i in win {
                    seen[i] = true;
                }
            }
            prop_assert!(seen.into_iter().all(|s| s));
        }
    }
}
