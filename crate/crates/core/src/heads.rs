//! Prediction heads, the projection head and the training losses.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::encoders::{FeaturePyramid, FeatureSource};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::raster::ChangeMask;
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Label value skipped by the cross-entropy terms.
pub const IGNORE_LABEL: u32 = 255;
const COS_EPS: f64 = 1e-8;

/// Where the semantic (post-change map) head reads its features from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScdPlacement {
    OnPostFeatures,
    OnFused,
    None,
}

impl fmt::Display for ScdPlacement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScdPlacement::OnPostFeatures => "on_post_features",
            ScdPlacement::OnFused => "on_fused",
            ScdPlacement::None => "none",
        })
    }
}

impl FromStr for ScdPlacement {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "on_post_features" => Ok(ScdPlacement::OnPostFeatures),
            "on_fused" => Ok(ScdPlacement::OnFused),
            "none" => Ok(ScdPlacement::None),
            _ => Err(Error::Config(format!(
                "unknown scd placement {s:?} (on_post_features, on_fused, none)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub contrastive: f64,
    pub binary: f64,
    pub semantic: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            contrastive: 1.0,
            binary: 1.0,
            semantic: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadConfig {
    pub scd_placement: ScdPlacement,
    pub contrastive_enabled: bool,
    pub stop_grad_on_map: bool,
    pub project_map: bool,
    pub weights: LossWeights,
    /// Common per-scale width of the prediction heads.
    pub width: usize,
    /// Hidden width of the projection head; 0 means the feature width.
    pub proj_hidden: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            scd_placement: ScdPlacement::None,
            contrastive_enabled: true,
            stop_grad_on_map: true,
            project_map: false,
            weights: LossWeights::default(),
            width: 32,
            proj_hidden: 0,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        let w = &self.weights;
        for (name, v) in [
            ("contrastive", w.contrastive),
            ("binary", w.binary),
            ("semantic", w.semantic),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "HeadConfig.loss_weights.{name} must be a finite value >= 0, got {v}"
                )));
            }
        }
        if self.width == 0 {
            return Err(Error::Config("HeadConfig.width must be positive".into()));
        }
        Ok(())
    }
}

/// A prediction head over pyramid levels with the given channel counts.
pub fn init_prediction_head<T: Scalar>(
    prefix: &str,
    level_channels: &[usize],
    width: usize,
    outputs: usize,
    seed: u64,
    params: &mut ParamStore<T>,
) {
    for (s, &c) in level_channels.iter().enumerate() {
        params.init_linear(seed, &format!("{prefix}.s{s}"), width, c);
    }
    params.init_linear(
        seed,
        &format!("{prefix}.out"),
        outputs,
        width * level_channels.len(),
    );
}

/// Projection `D_s -> D_g` per scale, plus the optional map projection.
pub fn init_projection<T: Scalar>(
    cfg: &HeadConfig,
    level_channels: &[usize],
    d_g: usize,
    seed: u64,
    params: &mut ParamStore<T>,
) {
    for (s, &c) in level_channels.iter().enumerate() {
        let hidden = if cfg.proj_hidden == 0 { c } else { cfg.proj_hidden };
        params.init_linear(seed, &format!("proj.s{s}.l1"), hidden, c);
        params.init_linear(seed, &format!("proj.s{s}.l2"), d_g, hidden);
        if cfg.project_map {
            params.init_linear(seed, &format!("proj.map.s{s}"), d_g, d_g);
        }
    }
}

fn linear<T: Scalar>(tape: &mut Tape<T>, bound: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let w = bound.get(&format!("{prefix}.w"))?;
    let b = bound.get(&format!("{prefix}.b"))?;
    tape.pointwise_linear(x, w, Some(b))
}

/// Per-scale linear + ReLU, upsample to `size`, concatenate, final linear.
pub fn prediction_head<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Bound,
    prefix: &str,
    pyramid: &FeaturePyramid,
    size: (usize, usize),
) -> Result<Var> {
    if pyramid.is_empty() {
        return Err(Error::Contract(format!("{prefix}: empty feature pyramid")));
    }
    let mut ups = Vec::with_capacity(pyramid.len());
    for (s, l) in pyramid.levels.iter().enumerate() {
        let y = linear(tape, bound, &format!("{prefix}.s{s}"), l.features)?;
        let y = tape.relu(y);
        ups.push(tape.bilinear_resize(y, size.0, size.1)?);
    }
    let cat = tape.concat(&ups)?;
    linear(tape, bound, &format!("{prefix}.out"), cat)
}

/// Two change logits per pixel from fused features.
pub fn predict_binary<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Bound,
    fused: &FeaturePyramid,
    size: (usize, usize),
) -> Result<Var> {
    prediction_head(tape, bound, "head.bin", fused, size)
}

/// Class logits per pixel; `source` must agree with the configured placement.
pub fn predict_semantic<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Bound,
    cfg: &HeadConfig,
    source: &FeaturePyramid,
    size: (usize, usize),
) -> Result<Var> {
    let ok = match cfg.scd_placement {
        ScdPlacement::OnPostFeatures => matches!(
            source.source,
            FeatureSource::ImagePost | FeatureSource::ImagePre
        ),
        ScdPlacement::OnFused => source.source == FeatureSource::Fused,
        ScdPlacement::None => false,
    };
    if !ok {
        return Err(Error::Config(format!(
            "semantic head placed {} cannot read {:?} features",
            cfg.scd_placement, source.source
        )));
    }
    prediction_head(tape, bound, "head.sem", source, size)
}

/// Shared projection `pi` at scale `s`.
pub fn project<T: Scalar>(tape: &mut Tape<T>, bound: &Bound, s: usize, f: Var) -> Result<Var> {
    let h = linear(tape, bound, &format!("proj.s{s}.l1"), f)?;
    let h = tape.relu(h);
    linear(tape, bound, &format!("proj.s{s}.l2"), h)
}

/// Mean over pixels of
/// `-cos(g, p1) + (1-b) * -cos(g, p2) + b * max(cos(g, p2), 0)`,
/// with the `p1` term dropped when absent.
pub fn contrastive_scale_loss<T: Scalar>(
    tape: &mut Tape<T>,
    g: Var,
    p1: Option<Var>,
    p2: Var,
    b: &ChangeMask,
) -> Result<Var> {
    let eps = T::from_f64_lossy(COS_EPS);
    let sim2 = tape.cosine_similarity(g, p2, eps)?;
    let s = tape.shape(sim2).to_vec();
    for (axis, want) in [(1, b.height()), (2, b.width())] {
        let found = s.get(axis - 1).copied().unwrap_or(0);
        if found != want {
            return Err(Error::Dimension {
                op: "contrastive_loss",
                axis,
                expected: want,
                found,
            });
        }
    }
    let changed: Vec<T> = b.values().iter().map(|&v| T::from_f64_lossy(v as f64)).collect();
    let kept: Vec<T> = changed.iter().map(|&c| T::one() - c).collect();
    let changed = tape.constant(Tensor::from_vec(s.clone(), changed)?);
    let kept = tape.constant(Tensor::from_vec(s, kept)?);

    let pull = tape.scale(sim2, -T::one());
    let pull = tape.mul(pull, kept)?;
    let push = tape.relu(sim2);
    let push = tape.mul(push, changed)?;
    let mut px = tape.add(pull, push)?;
    if let Some(p1) = p1 {
        let sim1 = tape.cosine_similarity(g, p1, eps)?;
        px = tape.sub(px, sim1)?;
    }
    Ok(tape.mean(px))
}

/// Contrastive term over all scales against resized map features `g1_scales`.
pub fn contrastive_loss<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Bound,
    cfg: &HeadConfig,
    g1_scales: &[Var],
    f1: Option<&FeaturePyramid>,
    f2: &FeaturePyramid,
    b: &ChangeMask,
) -> Result<Var> {
    if g1_scales.len() != f2.len() || f1.is_some_and(|f| f.len() != f2.len()) {
        return Err(Error::Dimension {
            op: "contrastive_loss",
            axis: 0,
            expected: f2.len(),
            found: g1_scales.len(),
        });
    }
    let mut total = None;
    for (s, (&g, l2)) in g1_scales.iter().zip(&f2.levels).enumerate() {
        let mut g = if cfg.stop_grad_on_map {
            tape.stop_gradient(g)
        } else {
            g
        };
        if cfg.project_map {
            g = linear(tape, bound, &format!("proj.map.s{s}"), g)?;
        }
        let p2 = project(tape, bound, s, l2.features)?;
        let p1 = match f1 {
            Some(f1) => Some(project(tape, bound, s, f1.levels[s].features)?),
            None => None,
        };
        let mask = b.max_pool(l2.stride);
        let l = contrastive_scale_loss(tape, g, p1, p2, &mask)?;
        total = Some(match total {
            None => l,
            Some(t) => tape.add(t, l)?,
        });
    }
    let total = total.expect("non-empty pyramid");
    Ok(tape.scale(total, T::from_f64_lossy(1.0 / f2.len() as f64)))
}

/// Per-step loss breakdown; addends are already weighted and sum to `total`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub contrastive: Option<f64>,
    pub ce_binary: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ce_semantic: Option<f64>,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
            && self.ce_binary.is_finite()
            && self.contrastive.is_none_or(f64::is_finite)
            && self.ce_semantic.is_none_or(f64::is_finite)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub contrastive: Option<Var>,
    pub ce_binary: Var,
    pub ce_semantic: Option<Var>,
}

/// Weighted sum of the enabled terms.
pub fn total_loss<T: Scalar>(
    tape: &mut Tape<T>,
    terms: LossTerms,
    cfg: &HeadConfig,
) -> Result<(Var, LossReport)> {
    if cfg.contrastive_enabled && terms.contrastive.is_none() {
        return Err(Error::Config("contrastive loss enabled but not computed".into()));
    }
    if cfg.scd_placement != ScdPlacement::None && terms.ce_semantic.is_none() {
        return Err(Error::Config(
            "semantic head enabled but no semantic target given".into(),
        ));
    }
    let w = &cfg.weights;
    let mut parts: Vec<(Var, f64)> = vec![(terms.ce_binary, w.binary)];
    let contrastive = terms.contrastive.filter(|_| cfg.contrastive_enabled);
    let semantic = terms
        .ce_semantic
        .filter(|_| cfg.scd_placement != ScdPlacement::None);
    parts.extend(contrastive.map(|v| (v, w.contrastive)));
    parts.extend(semantic.map(|v| (v, w.semantic)));

    let weighted: Vec<Var> = parts
        .iter()
        .map(|&(v, wt)| tape.scale(v, T::from_f64_lossy(wt)))
        .collect();
    let mut total = weighted[0];
    for &v in &weighted[1..] {
        total = tape.add(total, v)?;
    }
    let val = |tape: &Tape<T>, v: Var| tape.value(v).item().to_f64_lossy();
    let mut it = weighted.iter().skip(1);
    let report = LossReport {
        total: val(tape, total),
        ce_binary: val(tape, weighted[0]),
        contrastive: contrastive.map(|_| val(tape, *it.next().expect("weighted term"))),
        ce_semantic: semantic.map(|_| val(tape, *it.next().expect("weighted term"))),
    };
    Ok((total, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::Level;
    use crate::synth::stream;
    use crate::tensor::grad_check;

    fn col(tape: &mut Tape<f64>, v: &[f64]) -> Var {
        tape.constant(Tensor::from_vec(vec![v.len(), 1, 1], v.to_vec()).unwrap())
    }

    fn closed(g: &[f64], p1: Option<&[f64]>, p2: &[f64], b: u8) -> f64 {
        let mut tape = Tape::new();
        let g = col(&mut tape, g);
        let p1 = p1.map(|p| col(&mut tape, p));
        let p2 = col(&mut tape, p2);
        let mask = ChangeMask::new(1, 1, vec![b]).unwrap();
        let l = contrastive_scale_loss(&mut tape, g, p1, p2, &mask).unwrap();
        tape.value(l).item()
    }

    #[test]
    fn contrastive_closed_forms() {
        let g = [1.0, 2.0, -1.0];
        let par = [2.0, 4.0, -2.0];
        let perp = [2.0, -1.0, 0.0];
        let anti = [-1.0, -2.0, 1.0];
        assert!((closed(&g, Some(&par), &par, 0) + 2.0).abs() < 1e-6);
        assert!((closed(&g, Some(&g), &perp, 1) + 1.0).abs() < 1e-6);
        assert!((closed(&g, Some(&par), &anti, 1) + 1.0).abs() < 1e-6);
        assert!((closed(&g, None, &anti, 1)).abs() < 1e-6);
        assert!((closed(&g, None, &anti, 0) - 1.0).abs() < 1e-6);
    }

    fn pyramid(tape: &mut Tape<f64>, vars: Vec<Var>, src: FeatureSource) -> FeaturePyramid {
        let levels = vars
            .into_iter()
            .enumerate()
            .map(|(s, features)| Level {
                stride: 2 << s,
                features,
            })
            .collect();
        FeaturePyramid::new(tape, src, levels, (8, 8)).unwrap()
    }

    #[test]
    fn contrastive_gradients_seed_17() {
        // stop-gradient off so the map-feature inputs are checked too
        let cfg = HeadConfig {
            project_map: true,
            stop_grad_on_map: false,
            ..HeadConfig::default()
        };
        let mut params = ParamStore::<f64>::new();
        init_projection(&cfg, &[3, 4], 2, 17, &mut params);
        let names: Vec<String> = params.names().cloned().collect();
        let mut inputs: Vec<Tensor<f64>> =
            names.iter().map(|n| params.get(n).unwrap().clone()).collect();
        let mut rng = stream(17, 0);
        for shape in [[3, 4, 4], [4, 2, 2], [3, 4, 4], [4, 2, 2], [2, 4, 4], [2, 2, 2]] {
            inputs.push(Tensor::uniform(shape.to_vec(), -1.0, 1.0, &mut rng));
        }
        let mut labels = vec![0u8; 64];
        labels[0..9].iter_mut().for_each(|v| *v = 1);
        labels[40] = 1;
        let b = ChangeMask::new(8, 8, labels).unwrap();
        assert!(b.max_pool(2).values().contains(&0) && b.max_pool(2).values().contains(&1));
        let r = grad_check(
            |tape, v| {
                let n = names.len();
                let bound = Bound::from_pairs(names.iter().cloned().zip(v.iter().copied()));
                let f1 = pyramid(tape, vec![v[n], v[n + 1]], FeatureSource::ImagePre);
                let f2 = pyramid(tape, vec![v[n + 2], v[n + 3]], FeatureSource::ImagePost);
                contrastive_loss(tape, &bound, &cfg, &[v[n + 4], v[n + 5]], Some(&f1), &f2, &b)
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-5, "{r:?}");
    }

    #[test]
    fn stop_gradient_blocks_map_features() {
        let cfg = HeadConfig::default();
        let mut params = ParamStore::<f64>::new();
        init_projection(&cfg, &[3], 2, 1, &mut params);
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let mut rng = stream(1, 0);
        let g = tape.leaf(Tensor::uniform(vec![2, 4, 4], -1.0, 1.0, &mut rng), true);
        let f2 = tape.leaf(Tensor::uniform(vec![3, 4, 4], -1.0, 1.0, &mut rng), true);
        let f2 = pyramid(&mut tape, vec![f2], FeatureSource::ImagePost);
        let b = ChangeMask::zeros(8, 8).unwrap();
        let l = contrastive_loss(&mut tape, &bound, &cfg, &[g], None, &f2, &b).unwrap();
        tape.backward(l).unwrap();
        assert!(tape.grad(g).is_none_or(|gr| gr.iter().all(|&v| v == 0.0)));
        let pg = params.grads_from(&tape, &bound);
        assert!(pg.get("proj.s0.l1.w").unwrap().data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn head_output_matches_raster_size_and_rejects_wrong_source() {
        let mut params = ParamStore::<f64>::new();
        init_prediction_head("head.bin", &[3, 4], 5, 2, 0, &mut params);
        init_prediction_head("head.sem", &[3, 4], 5, 4, 0, &mut params);
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let a = tape.constant(Tensor::full(vec![3, 4, 4], 0.5));
        let c = tape.constant(Tensor::full(vec![4, 2, 2], 0.5));
        let fused = pyramid(&mut tape, vec![a, c], FeatureSource::Fused);
        let y = predict_binary(&mut tape, &bound, &fused, (8, 8)).unwrap();
        assert_eq!(tape.shape(y), &[2, 8, 8]);
        let y2 = predict_binary(&mut tape, &bound, &fused, (8, 8)).unwrap();
        assert_eq!(tape.value(y), tape.value(y2));
        let cfg = HeadConfig {
            scd_placement: ScdPlacement::OnPostFeatures,
            ..HeadConfig::default()
        };
        assert!(matches!(
            predict_semantic(&mut tape, &bound, &cfg, &fused, (8, 8)),
            Err(Error::Config(_))
        ));
        let cfg = HeadConfig {
            scd_placement: ScdPlacement::OnFused,
            ..cfg
        };
        let s = predict_semantic(&mut tape, &bound, &cfg, &fused, (8, 8)).unwrap();
        assert_eq!(tape.shape(s), &[4, 8, 8]);
        let empty = FeaturePyramid {
            source: FeatureSource::Fused,
            levels: vec![],
        };
        assert!(matches!(
            predict_binary(&mut tape, &bound, &empty, (8, 8)),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn total_loss_bookkeeping() {
        let mut tape = Tape::<f64>::new();
        let c = tape.leaf(Tensor::scalar(-0.7), true);
        let b = tape.leaf(Tensor::scalar(0.4), true);
        let s = tape.leaf(Tensor::scalar(1.3), true);
        let cfg = HeadConfig {
            scd_placement: ScdPlacement::OnFused,
            weights: LossWeights {
                contrastive: 0.5,
                binary: 2.0,
                semantic: 1.0,
            },
            ..HeadConfig::default()
        };
        let terms = LossTerms {
            contrastive: Some(c),
            ce_binary: b,
            ce_semantic: Some(s),
        };
        let (t, r) = total_loss(&mut tape, terms, &cfg).unwrap();
        let sum = r.contrastive.unwrap() + r.ce_binary + r.ce_semantic.unwrap();
        assert!((sum - r.total).abs() < 1e-6);
        assert!((tape.value(t).item() - (-0.35 + 0.8 + 1.3)).abs() < 1e-12);

        let off = HeadConfig {
            contrastive_enabled: false,
            ..HeadConfig::default()
        };
        let (_, r) = total_loss(&mut tape, terms, &off).unwrap();
        assert_eq!(r.contrastive, None);
        assert_eq!(r.total, 0.4);
        let json = serde_json::to_string(&r).unwrap();
        assert!(!json.contains("contrastive") && !json.contains("ce_semantic"));

        let zero = HeadConfig {
            weights: LossWeights {
                contrastive: 0.0,
                binary: 0.0,
                semantic: 0.0,
            },
            ..cfg
        };
        let (t, r) = total_loss(&mut tape, terms, &zero).unwrap();
        assert_eq!(r.total, 0.0);
        tape.backward(t).unwrap();
        for v in [c, b, s] {
            assert!(tape.grad(v).unwrap().iter().all(|&g| g == 0.0));
        }
        let missing = LossTerms {
            ce_semantic: None,
            ..terms
        };
        assert!(matches!(total_loss(&mut tape, missing, &cfg), Err(Error::Config(_))));
    }
}
