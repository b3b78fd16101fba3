//! Shared-weight image pyramid encoder and the shallow map encoder.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::heads::{predict_semantic, HeadConfig};
use crate::params::{Bound, ParamStore};
use crate::raster::{ClassSet, SemanticMap};
use crate::tensor::{ConvSpec, Scalar, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    /// Output channels per scale; the number of scales is its length.
    pub channels: Vec<usize>,
    /// Map feature width `D_g`.
    pub map_channels: usize,
    pub image_channels: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            channels: vec![16, 32, 64],
            map_channels: 32,
            image_channels: 3,
        }
    }
}

impl EncoderConfig {
    pub fn num_scales(&self) -> usize {
        self.channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() {
            return Err(Error::Config("EncoderConfig.num_scales must be at least 1".into()));
        }
        if self.channels.contains(&0) {
            return Err(Error::Config("EncoderConfig.channels must be positive".into()));
        }
        if self.map_channels == 0 {
            return Err(Error::Config("EncoderConfig.map_channels must be positive".into()));
        }
        if self.image_channels == 0 {
            return Err(Error::Config("EncoderConfig.image_channels must be positive".into()));
        }
        Ok(())
    }

    /// Stride of scale `s` (0-based) relative to the input raster.
    pub fn stride(s: usize) -> usize {
        1 << (s + 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureSource {
    ImagePre,
    ImagePost,
    MapPre,
    Fused,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Level {
    pub stride: usize,
    pub features: Var,
}

/// Per-scale features living on one tape.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeaturePyramid {
    pub source: FeatureSource,
    pub levels: Vec<Level>,
}

impl FeaturePyramid {
    /// Checks strides increase and each level is `ceil(full / stride)` in size.
    pub fn new<T: Scalar>(
        tape: &Tape<T>,
        source: FeatureSource,
        levels: Vec<Level>,
        full: (usize, usize),
    ) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::Contract("feature pyramid has no levels".into()));
        }
        for (i, l) in levels.iter().enumerate() {
            if i > 0 && l.stride <= levels[i - 1].stride {
                return Err(Error::Contract("pyramid strides must increase".into()));
            }
            let s = tape.shape(l.features);
            let want = (full.0.div_ceil(l.stride), full.1.div_ceil(l.stride));
            if s.len() != 3 || (s[1], s[2]) != want {
                return Err(Error::Shape {
                    op: "feature_pyramid",
                    msg: format!("level {i} has shape {s:?}, expected spatial {want:?}"),
                });
            }
        }
        Ok(Self { source, levels })
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn features(&self) -> Vec<Var> {
        self.levels.iter().map(|l| l.features).collect()
    }

    pub fn with_features(&self, source: FeatureSource, features: Vec<Var>) -> Self {
        Self {
            source,
            levels: self
                .levels
                .iter()
                .zip(features)
                .map(|(l, features)| Level {
                    stride: l.stride,
                    features,
                })
                .collect(),
        }
    }
}

pub fn init_image_encoder<T: Scalar>(cfg: &EncoderConfig, seed: u64, params: &mut ParamStore<T>) {
    let mut prev = cfg.image_channels;
    for (s, &c) in cfg.channels.iter().enumerate() {
        params.init_conv(seed, &format!("enc.img.s{s}.down"), c, prev, 3);
        params.init_conv(seed, &format!("enc.img.s{s}.res_a"), c, c, 3);
        params.init_conv(seed, &format!("enc.img.s{s}.res_b"), c, c, 3);
        prev = c;
    }
}

pub fn init_map_encoder<T: Scalar>(
    cfg: &EncoderConfig,
    num_classes: usize,
    seed: u64,
    params: &mut ParamStore<T>,
) {
    let d = cfg.map_channels;
    params.init_linear(seed, "enc.map.pw", d, num_classes);
    params.init_conv(seed, "enc.map.c1", d, d, 5);
    params.init_conv(seed, "enc.map.c2", d, d, 5);
}

fn conv<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Bound,
    prefix: &str,
    x: Var,
    spec: ConvSpec,
) -> Result<Var> {
    let w = bound.get(&format!("{prefix}.w"))?;
    let b = bound.get(&format!("{prefix}.b"))?;
    tape.conv2d(x, w, Some(b), spec)
}

fn param_dim<T: Scalar>(tape: &Tape<T>, bound: &Bound, name: &str, axis: usize) -> Result<usize> {
    Ok(tape.shape(bound.get(name)?)[axis])
}

/// Encode an image tensor `[C, H, W]` into a pyramid with strides 2, 4, 8, ...
pub fn image_encode<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Bound,
    cfg: &EncoderConfig,
    image: Var,
    source: FeatureSource,
) -> Result<FeaturePyramid> {
    let shape = tape.shape(image).to_vec();
    let expected = param_dim(tape, bound, "enc.img.s0.down.w", 1)?;
    if shape.len() != 3 || shape[0] != expected {
        return Err(Error::Config(format!(
            "image has shape {shape:?}, encoder expects {expected} channels"
        )));
    }
    let mut x = image;
    let mut levels = Vec::with_capacity(cfg.num_scales());
    for s in 0..cfg.num_scales() {
        let p = format!("enc.img.s{s}");
        let y = conv(tape, bound, &format!("{p}.down"), x, ConvSpec::strided(2))?;
        let mut y = tape.relu(y);
        for (block, dil) in [("res_a", 1), ("res_b", 2)] {
            let r = conv(tape, bound, &format!("{p}.{block}"), y, ConvSpec::dilated(dil))?;
            let r = tape.relu(r);
            y = tape.add(y, r)?;
        }
        levels.push(Level {
            stride: EncoderConfig::stride(s),
            features: y,
        });
        x = y;
    }
    FeaturePyramid::new(tape, source, levels, (shape[1], shape[2]))
}

/// Encode a one-hot map `[|C|, H, W]` into `[D_g, H, W]` at full resolution.
pub fn map_encode<T: Scalar>(tape: &mut Tape<T>, bound: &Bound, one_hot: Var) -> Result<Var> {
    let shape = tape.shape(one_hot).to_vec();
    let expected = param_dim(tape, bound, "enc.map.pw.w", 1)?;
    if shape.len() != 3 || shape[0] != expected {
        return Err(Error::Config(format!(
            "map has shape {shape:?}, map encoder expects {expected} classes"
        )));
    }
    let w = bound.get("enc.map.pw.w")?;
    let b = bound.get("enc.map.pw.b")?;
    let g = tape.pointwise_linear(one_hot, w, Some(b))?;
    let g = tape.relu(g);
    let g = conv(tape, bound, "enc.map.c1", g, ConvSpec::dilated(2))?;
    let g = tape.relu(g);
    conv(tape, bound, "enc.map.c2", g, ConvSpec::dilated(2))
}

/// Bilinearly resize map features to every level of `pyramid`.
pub fn resize_map_features<T: Scalar>(
    tape: &mut Tape<T>,
    g: Var,
    pyramid: &FeaturePyramid,
) -> Result<Vec<Var>> {
    pyramid
        .levels
        .iter()
        .map(|l| {
            let s = tape.shape(l.features);
            let (h, w) = (s[1], s[2]);
            tape.bilinear_resize(g, h, w)
        })
        .collect()
}

/// Per-pixel argmax over the channel axis of `[C, H, W]`; ties go to the smallest channel.
pub fn argmax_channels<T: Scalar>(t: &Tensor<T>) -> Result<Vec<u8>> {
    let s = t.shape();
    if s.len() != 3 {
        return Err(Error::Shape {
            op: "argmax_channels",
            msg: format!("expected [C, H, W], got {s:?}"),
        });
    }
    if s[0] > 256 {
        return Err(Error::Config(format!("{} channels do not fit u8 labels", s[0])));
    }
    let n = s[1] * s[2];
    let d = t.data();
    Ok((0..n)
        .map(|p| {
            let mut best = 0;
            for c in 1..s[0] {
                if d[c * n + p] > d[best * n + p] {
                    best = c;
                }
            }
            best as u8
        })
        .collect())
}

/// Pre-change map estimated from uni-temporal features by the semantic head.
pub fn predict_premap<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Bound,
    head: &HeadConfig,
    f1: &FeaturePyramid,
    classes: Arc<ClassSet>,
    size: (usize, usize),
) -> Result<SemanticMap> {
    let logits = predict_semantic(tape, bound, head, f1, size)?;
    let c = tape.shape(logits)[0];
    if c != classes.len() {
        return Err(Error::Config(format!(
            "semantic head predicts {c} classes, class set has {}",
            classes.len()
        )));
    }
    let labels = argmax_channels(tape.value(logits))?;
    SemanticMap::new(size.0, size.1, labels, classes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::one_hot;
    use crate::tensor::grad_check;

    fn small_cfg() -> EncoderConfig {
        EncoderConfig {
            channels: vec![2, 3],
            map_channels: 2,
            image_channels: 3,
        }
    }

    #[test]
    fn pyramid_sizes_follow_strides() {
        let cfg = EncoderConfig::default();
        let mut p = ParamStore::<f32>::new();
        init_image_encoder(&cfg, 0, &mut p);
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape);
        let img = tape.constant(Tensor::full(vec![3, 64, 64], 0.5));
        let pyr = image_encode(&mut tape, &bound, &cfg, img, FeatureSource::ImagePost).unwrap();
        let sizes: Vec<_> = pyr.levels.iter().map(|l| tape.shape(l.features).to_vec()).collect();
        assert_eq!(sizes, vec![vec![16, 32, 32], vec![32, 16, 16], vec![64, 8, 8]]);
        let again = image_encode(&mut tape, &bound, &cfg, img, FeatureSource::ImagePost).unwrap();
        for (a, b) in pyr.levels.iter().zip(&again.levels) {
            assert_eq!(tape.value(a.features), tape.value(b.features));
            assert!(tape.value(a.features).all_finite());
        }
    }

    #[test]
    fn channel_mismatch_is_config_error() {
        let cfg = small_cfg();
        let mut p = ParamStore::<f64>::new();
        init_image_encoder(&cfg, 0, &mut p);
        init_map_encoder(&cfg, 4, 0, &mut p);
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape);
        let img = tape.constant(Tensor::zeros(vec![4, 8, 8]));
        assert!(matches!(
            image_encode(&mut tape, &bound, &cfg, img, FeatureSource::ImagePre),
            Err(Error::Config(_))
        ));
        let m = tape.constant(Tensor::zeros(vec![5, 8, 8]));
        assert!(matches!(map_encode(&mut tape, &bound, m), Err(Error::Config(_))));
    }

    #[test]
    fn map_features_are_local_to_receptive_field() {
        let cfg = EncoderConfig {
            map_channels: 6,
            ..small_cfg()
        };
        let classes = Arc::new(ClassSet::numbered("c", 3).unwrap());
        let mut p = ParamStore::<f64>::new();
        init_map_encoder(&cfg, 3, 5, &mut p);
        let a = SemanticMap::constant(24, 24, 1, classes.clone()).unwrap();
        let mut labels = a.labels().to_vec();
        // pixel (0, 23) is outside the 17x17 window around (12, 4)
        labels[23] = 2;
        let b = SemanticMap::new(24, 24, labels, classes).unwrap();
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape);
        let xa = tape.constant(one_hot(&a));
        let xb = tape.constant(one_hot(&b));
        let ga = map_encode(&mut tape, &bound, xa).unwrap();
        let gb = map_encode(&mut tape, &bound, xb).unwrap();
        let (va, vb) = (tape.value(ga).data(), tape.value(gb).data());
        for c in 0..6 {
            let p = c * 576 + 12 * 24 + 4;
            assert_eq!(va[p].to_bits(), vb[p].to_bits());
        }
        assert_ne!(va, vb);
        // constant map: interior pixels agree
        let interior = |i: usize, j: usize| va[i * 24 + j];
        assert_eq!(interior(10, 10).to_bits(), interior(12, 13).to_bits());
    }

    #[test]
    fn resize_to_unit_stride_is_identity() {
        let mut tape = Tape::<f64>::new();
        let g = tape.constant(Tensor::full(vec![2, 8, 8], 0.25));
        let lvl = tape.constant(Tensor::zeros(vec![1, 8, 8]));
        let lvl2 = tape.constant(Tensor::zeros(vec![1, 2, 2]));
        let pyr = FeaturePyramid {
            source: FeatureSource::ImagePost,
            levels: vec![
                Level { stride: 1, features: lvl },
                Level { stride: 4, features: lvl2 },
            ],
        };
        let r = resize_map_features(&mut tape, g, &pyr).unwrap();
        assert_eq!(tape.value(r[0]), tape.value(g));
        assert!(tape.value(r[1]).data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn argmax_ties_to_smallest() {
        let t = Tensor::from_vec(vec![3, 1, 2], vec![0.0, 1.0, 2.0, 1.0, 2.0, 0.5]).unwrap();
        assert_eq!(argmax_channels(&t).unwrap(), vec![1, 0]);
        let u = Tensor::<f64>::zeros(vec![3, 2, 2]);
        assert_eq!(argmax_channels(&u).unwrap(), vec![0; 4]);
    }

    #[test]
    fn encoders_pass_gradient_check() {
        let cfg = small_cfg();
        let mut p = ParamStore::<f64>::new();
        init_image_encoder(&cfg, 9, &mut p);
        init_map_encoder(&cfg, 3, 9, &mut p);
        let names: Vec<String> = p.names().cloned().collect();
        let mut inputs: Vec<Tensor<f64>> = names.iter().map(|n| p.get(n).unwrap().clone()).collect();
        let mut rng = crate::synth::stream(9, 1);
        inputs.push(Tensor::uniform(vec![3, 8, 8], 0.0, 1.0, &mut rng));
        inputs.push(Tensor::uniform(vec![3, 8, 8], 0.0, 1.0, &mut rng));
        let r = grad_check(
            |tape, v| {
                let bound = bind_vars(&names, v);
                let k = names.len();
                let pyr = image_encode(tape, &bound, &cfg, v[k], FeatureSource::ImagePost)?;
                let g = map_encode(tape, &bound, v[k + 1])?;
                let mut acc = tape.sum(g);
                for l in &pyr.levels {
                    let sq = tape.mul(l.features, l.features)?;
                    let s = tape.sum(sq);
                    acc = tape.add(acc, s)?;
                }
                Ok(acc)
            },
            &inputs,
            1e-3,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-5, "{r:?}");
    }

    fn bind_vars(names: &[String], vars: &[Var]) -> Bound {
        Bound::from_pairs(names.iter().cloned().zip(vars.iter().copied()))
    }
}
