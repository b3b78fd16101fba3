//! The full change detection network: encoders, per-scale fusion and heads.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use crate::encoders::{
    argmax_channels, image_encode, init_image_encoder, init_map_encoder, map_encode,
    predict_premap, resize_map_features, EncoderConfig, FeaturePyramid, FeatureSource,
};
use crate::error::{Error, Result};
use crate::fusion::{fuse, init_fusion, FusionConfig, FusionKind, Regime, ScaleInputs};
use crate::heads::{
    contrastive_loss, init_prediction_head, init_projection, predict_binary, predict_semantic,
    total_loss, HeadConfig, LossReport, LossTerms, ScdPlacement, IGNORE_LABEL,
};
use crate::params::{Bound, ParamStore};
use crate::raster::{
    degrade_resolution, merge_classes, one_hot, ChangeMask, ClassSet, ImageRaster, SemanticMap,
};
use crate::tensor::{Scalar, Tape, Var};

/// Transform applied to the pre-change map before it reaches the model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Degradation {
    None,
    /// Class id to superclass id; superclasses are `0..=max`.
    HighLevel(BTreeMap<u8, u8>),
    /// Majority-vote block downsampling, restored to full size.
    LowRes(usize),
    /// Replace the map with the semantic head's prediction from the pre-change image.
    PredictedPremap,
}

impl fmt::Display for Degradation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Degradation::None => f.write_str("none"),
            Degradation::HighLevel(_) => f.write_str("high_level"),
            Degradation::LowRes(k) => write!(f, "low_res({k})"),
            Degradation::PredictedPremap => f.write_str("predicted_premap"),
        }
    }
}

impl Degradation {
    /// Number of classes the map encoder sees.
    pub fn map_classes(&self, num_classes: usize) -> usize {
        match self {
            Degradation::HighLevel(m) => m.values().max().map_or(1, |&v| v as usize + 1),
            _ => num_classes,
        }
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        match self {
            Degradation::HighLevel(m) => {
                for c in 0..num_classes {
                    if !m.contains_key(&(c as u8)) {
                        return Err(Error::Config(format!(
                            "degradation.mapping does not cover class {c}"
                        )));
                    }
                }
                if self.map_classes(num_classes) < 2 {
                    return Err(Error::Config(
                        "degradation.mapping must keep at least 2 superclasses".into(),
                    ));
                }
                Ok(())
            }
            Degradation::LowRes(0) => Err(Error::Config(
                "degradation low_res factor must be at least 1".into(),
            )),
            _ => Ok(()),
        }
    }

    /// Apply a map-only degradation; `PredictedPremap` is handled by the model.
    pub fn apply(&self, m: &SemanticMap) -> Result<SemanticMap> {
        match self {
            Degradation::None | Degradation::PredictedPremap => Ok(m.clone()),
            Degradation::LowRes(k) => degrade_resolution(m, *k),
            Degradation::HighLevel(mapping) => {
                let n = self.map_classes(m.num_classes());
                let target = Arc::new(ClassSet::numbered("super", n)?);
                merge_classes(m, mapping, target)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub regime: Regime,
    pub fusion_kind: FusionKind,
    pub k: usize,
    /// Hidden width of the fusion MLPs; 0 means the scale's feature width.
    pub fusion_hidden: usize,
    /// Share one fusion module across scales (needs equal widths).
    pub tie_scales: bool,
    pub encoder: EncoderConfig,
    pub head: HeadConfig,
    /// Classes of the semantic maps.
    pub num_classes: usize,
    /// Classes of the map fed to the map encoder.
    pub map_classes: usize,
}

impl ModelConfig {
    pub fn fusion(&self, s: usize) -> FusionConfig {
        FusionConfig {
            k: self.k,
            d_f: self.encoder.channels[s],
            d_h: self.fusion_hidden,
            regime: self.regime,
            kind: self.fusion_kind,
        }
    }

    pub fn fusion_prefix(&self, s: usize) -> String {
        if self.tie_scales {
            "fusion.shared".into()
        } else {
            format!("fusion.s{s}")
        }
    }

    /// The contrastive term needs map features, so it is off without a map.
    pub fn contrastive_active(&self) -> bool {
        self.head.contrastive_enabled && self.regime.uses_map()
    }

    pub fn effective_head(&self) -> HeadConfig {
        HeadConfig {
            contrastive_enabled: self.contrastive_active(),
            ..self.head.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.head.validate()?;
        for s in 0..self.encoder.num_scales() {
            self.fusion(s).validate()?;
        }
        if self.tie_scales && self.encoder.channels.iter().any(|&c| c != self.encoder.channels[0]) {
            return Err(Error::Config(
                "fusion.tie_scales needs equal encoder channels at every scale".into(),
            ));
        }
        if self.num_classes < 2 || self.num_classes > 256 {
            return Err(Error::Config("model.num_classes must be in 2..=256".into()));
        }
        if self.map_classes < 1 {
            return Err(Error::Config("model.map_classes must be positive".into()));
        }
        Ok(())
    }
}

/// Inputs of one sample; which of them are read depends on the regime.
#[derive(Debug, Clone, Copy)]
pub struct ModelInput<'a> {
    pub image_pre: &'a ImageRaster,
    pub image_post: &'a ImageRaster,
    pub map_pre: Option<&'a SemanticMap>,
}

#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub binary_logits: Var,
    pub semantic_logits: Option<Var>,
    pub f1: Option<FeaturePyramid>,
    pub f2: FeaturePyramid,
    pub g1_scales: Vec<Var>,
    pub fused: FeaturePyramid,
    /// Attention weights per scale (attention fusion only).
    pub attention: Vec<Option<Var>>,
    pub size: (usize, usize),
}

#[derive(Debug, Clone)]
pub struct ChangeModel {
    cfg: ModelConfig,
}

impl ChangeModel {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn init_params<T: Scalar>(&self, seed: u64) -> ParamStore<T> {
        let c = &self.cfg;
        let mut p = ParamStore::new();
        init_image_encoder(&c.encoder, seed, &mut p);
        if c.regime.uses_map() {
            init_map_encoder(&c.encoder, c.map_classes, seed, &mut p);
        }
        let d_g = c.encoder.map_channels;
        for s in 0..c.encoder.num_scales() {
            if c.tie_scales && s > 0 {
                break;
            }
            init_fusion(&c.fusion(s), &c.fusion_prefix(s), c.encoder.channels[s], d_g, seed, &mut p);
        }
        let widths = &c.encoder.channels;
        init_prediction_head("head.bin", widths, c.head.width, 2, seed, &mut p);
        if c.head.scd_placement != ScdPlacement::None {
            init_prediction_head("head.sem", widths, c.head.width, c.num_classes, seed, &mut p);
        }
        if c.contrastive_active() {
            init_projection(&c.head, widths, d_g, seed, &mut p);
        }
        p
    }

    fn encode_image<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        img: &ImageRaster,
        source: FeatureSource,
    ) -> Result<FeaturePyramid> {
        let x = tape.constant(img.to_tensor());
        image_encode(tape, bound, &self.cfg.encoder, x, source)
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        input: ModelInput<'_>,
    ) -> Result<ModelOutput> {
        let c = &self.cfg;
        let size = (input.image_post.height(), input.image_post.width());
        if (input.image_pre.height(), input.image_pre.width()) != size {
            return Err(Error::Data("pre and post images differ in size".into()));
        }
        let f2 = self.encode_image(tape, bound, input.image_post, FeatureSource::ImagePost)?;
        let f1 = if c.regime.uses_pre_image() {
            Some(self.encode_image(tape, bound, input.image_pre, FeatureSource::ImagePre)?)
        } else {
            None
        };
        let g1_scales = if c.regime.uses_map() {
            let m = input
                .map_pre
                .ok_or_else(|| Error::Config(format!("regime {} needs a pre-change map", c.regime)))?;
            if m.num_classes() != c.map_classes {
                return Err(Error::Config(format!(
                    "map has {} classes, model expects {}",
                    m.num_classes(),
                    c.map_classes
                )));
            }
            let x = tape.constant(one_hot(m));
            let g = map_encode(tape, bound, x)?;
            resize_map_features(tape, g, &f2)?
        } else {
            Vec::new()
        };

        let mut fused = Vec::with_capacity(f2.len());
        let mut attention = Vec::with_capacity(f2.len());
        for s in 0..f2.len() {
            let x = ScaleInputs {
                f1: f1.as_ref().map(|f| f.levels[s].features),
                f2: f2.levels[s].features,
                g1: g1_scales.get(s).copied(),
            };
            let out = fuse(tape, bound, &c.fusion_prefix(s), &c.fusion(s), x)?;
            fused.push(out.fused);
            attention.push(out.attention);
        }
        let fused = f2.with_features(FeatureSource::Fused, fused);
        let binary_logits = predict_binary(tape, bound, &fused, size)?;
        let semantic_logits = match c.head.scd_placement {
            ScdPlacement::None => None,
            ScdPlacement::OnPostFeatures => {
                Some(predict_semantic(tape, bound, &c.head, &f2, size)?)
            }
            ScdPlacement::OnFused => Some(predict_semantic(tape, bound, &c.head, &fused, size)?),
        };
        Ok(ModelOutput {
            binary_logits,
            semantic_logits,
            f1,
            f2,
            g1_scales,
            fused,
            attention,
            size,
        })
    }

    /// Training loss against the true change mask and post-change map.
    pub fn loss<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        out: &ModelOutput,
        change: &ChangeMask,
        map_post: Option<&SemanticMap>,
    ) -> Result<(Var, LossReport)> {
        let head = self.cfg.effective_head();
        let b: Vec<u32> = change.values().iter().map(|&v| v as u32).collect();
        let ce_binary = tape.cross_entropy(out.binary_logits, &b, IGNORE_LABEL)?;
        let ce_semantic = match out.semantic_logits {
            Some(logits) => {
                let m2 = map_post.ok_or_else(|| {
                    Error::Config("semantic head enabled but no post-change map given".into())
                })?;
                let t: Vec<u32> = m2.labels().iter().map(|&v| v as u32).collect();
                Some(tape.cross_entropy(logits, &t, IGNORE_LABEL)?)
            }
            None => None,
        };
        let contrastive = if head.contrastive_enabled {
            Some(contrastive_loss(
                tape,
                bound,
                &head,
                &out.g1_scales,
                out.f1.as_ref(),
                &out.f2,
                change,
            )?)
        } else {
            None
        };
        total_loss(
            tape,
            LossTerms {
                contrastive,
                ce_binary,
                ce_semantic,
            },
            &head,
        )
    }

    /// Pre-change map from the semantic head applied to the pre-change image.
    pub fn predict_premap<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        image_pre: &ImageRaster,
        classes: Arc<ClassSet>,
    ) -> Result<SemanticMap> {
        if self.cfg.head.scd_placement != ScdPlacement::OnPostFeatures {
            return Err(Error::Config(
                "predicted_premap needs the semantic head on uni-temporal features (scd_placement = on_post_features)"
                    .into(),
            ));
        }
        let f1 = self.encode_image(tape, bound, image_pre, FeatureSource::ImagePre)?;
        let size = (image_pre.height(), image_pre.width());
        predict_premap(tape, bound, &self.cfg.head, &f1, classes, size)
    }
}

/// Change mask from two-class logits; ties count as unchanged.
pub fn binary_prediction<T: Scalar>(tape: &Tape<T>, logits: Var, size: (usize, usize)) -> Result<ChangeMask> {
    let labels = argmax_channels(tape.value(logits))?;
    ChangeMask::new(size.0, size.1, labels)
}

pub fn semantic_prediction<T: Scalar>(
    tape: &Tape<T>,
    logits: Var,
    size: (usize, usize),
    classes: Arc<ClassSet>,
) -> Result<SemanticMap> {
    let labels = argmax_channels(tape.value(logits))?;
    SemanticMap::new(size.0, size.1, labels, classes)
}
