//! Map-conditioned attention fusion and concatenation baselines.
//!
//! The attention fusion turns the concatenated per-pixel inputs into `K` candidate
//! views `h_k` and lets the map features alone decide, per output channel, how to
//! mix them:
//!
//! ```text
//! f[d,i,j] = sum_k softmax_k(W g[:,i,j] + c)[k,d] * h[k,d,i,j]
//! ```

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::raster::{write_raster, Raster};
use crate::tensor::{Scalar, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Regime {
    BiTemporal,
    Conditional,
    CrossModal,
}

impl Regime {
    pub fn uses_pre_image(self) -> bool {
        self != Regime::CrossModal
    }

    pub fn uses_map(self) -> bool {
        self != Regime::BiTemporal
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::BiTemporal => "bi_temporal",
            Regime::Conditional => "conditional",
            Regime::CrossModal => "cross_modal",
        })
    }
}

impl FromStr for Regime {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bi_temporal" => Ok(Regime::BiTemporal),
            "conditional" => Ok(Regime::Conditional),
            "cross_modal" => Ok(Regime::CrossModal),
            _ => Err(Error::Config(format!(
                "unknown regime {s:?} (bi_temporal, conditional, cross_modal)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum FusionKind {
    MapFormer,
    Concat,
}

impl fmt::Display for FusionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionKind::MapFormer => "mapformer",
            FusionKind::Concat => "concat",
        })
    }
}

impl FromStr for FusionKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mapformer" => Ok(FusionKind::MapFormer),
            "concat" => Ok(FusionKind::Concat),
            _ => Err(Error::Config(format!(
                "unknown fusion kind {s:?} (mapformer, concat)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionConfig {
    pub k: usize,
    pub d_f: usize,
    /// Hidden width of the view MLPs; 0 means `d_f`.
    pub d_h: usize,
    pub regime: Regime,
    pub kind: FusionKind,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            k: 4,
            d_f: 16,
            d_h: 0,
            regime: Regime::Conditional,
            kind: FusionKind::MapFormer,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::Config("FusionConfig.K must be at least 1".into()));
        }
        if self.d_f < 1 {
            return Err(Error::Config("FusionConfig.D_f must be at least 1".into()));
        }
        if self.kind == FusionKind::MapFormer && self.regime == Regime::BiTemporal {
            return Err(Error::Config(
                "FusionConfig: mapformer fusion needs a map input and is invalid in the bi_temporal regime"
                    .into(),
            ));
        }
        Ok(())
    }

    pub fn hidden(&self) -> usize {
        if self.d_h == 0 {
            self.d_f
        } else {
            self.d_h
        }
    }

    /// Channel count of the concatenated fusion input.
    pub fn input_channels(&self, d_img: usize, d_g: usize) -> usize {
        let images = if self.regime.uses_pre_image() { 2 } else { 1 };
        images * d_img + if self.regime.uses_map() { d_g } else { 0 }
    }
}

/// One fusion module; `prefix` is e.g. `fusion.s0`.
pub fn init_fusion<T: Scalar>(
    cfg: &FusionConfig,
    prefix: &str,
    d_img: usize,
    d_g: usize,
    seed: u64,
    params: &mut ParamStore<T>,
) {
    let c_in = cfg.input_channels(d_img, d_g);
    let d_h = cfg.hidden();
    match cfg.kind {
        FusionKind::MapFormer => {
            params.init_linear(seed, &format!("{prefix}.mlp1"), cfg.k * d_h, c_in);
            params.init_linear(seed, &format!("{prefix}.mlp2"), cfg.k * cfg.d_f, d_h);
            params.init_linear(seed, &format!("{prefix}.attn"), cfg.k * cfg.d_f, d_g);
        }
        FusionKind::Concat => {
            params.init_linear(seed, &format!("{prefix}.mlp1"), d_h, c_in);
            params.init_linear(seed, &format!("{prefix}.mlp2"), cfg.d_f, d_h);
        }
    }
}

/// Inputs at one scale.
#[derive(Debug, Clone, Copy)]
pub struct ScaleInputs {
    pub f1: Option<Var>,
    pub f2: Var,
    pub g1: Option<Var>,
}

#[derive(Debug, Clone, Copy)]
pub struct FusionOutput {
    /// `[D_f, H, W]`
    pub fused: Var,
    /// `[K, D_f, H, W]`, attention fusion only.
    pub attention: Option<Var>,
    /// `[K, D_f, H, W]`, attention fusion only.
    pub views: Option<Var>,
}

fn linear_params(bound: &Bound, prefix: &str) -> Result<(Var, Option<Var>)> {
    Ok((
        bound.get(&format!("{prefix}.w"))?,
        Some(bound.get(&format!("{prefix}.b"))?),
    ))
}

fn check_spatial<T: Scalar>(tape: &Tape<T>, op: &'static str, inputs: &[Var]) -> Result<()> {
    let first = tape.shape(inputs[0]);
    for &v in &inputs[1..] {
        let s = tape.shape(v);
        for axis in 1..3 {
            if s.get(axis) != first.get(axis) {
                return Err(Error::Dimension {
                    op,
                    axis,
                    expected: first.get(axis).copied().unwrap_or(0),
                    found: s.get(axis).copied().unwrap_or(0),
                });
            }
        }
    }
    Ok(())
}

fn gather_inputs(cfg: &FusionConfig, x: &ScaleInputs, op: &str) -> Result<Vec<Var>> {
    let mut v = Vec::with_capacity(3);
    match (cfg.regime.uses_pre_image(), x.f1) {
        (true, Some(f1)) => v.push(f1),
        (false, None) => {}
        (true, None) => {
            return Err(Error::Config(format!(
                "{op}: regime {} needs pre-change image features",
                cfg.regime
            )))
        }
        (false, Some(_)) => {
            return Err(Error::Config(format!(
                "{op}: regime {} takes no pre-change image features",
                cfg.regime
            )))
        }
    }
    v.push(x.f2);
    match (cfg.regime.uses_map(), x.g1) {
        (true, Some(g)) => v.push(g),
        (false, None) => {}
        (true, None) => {
            return Err(Error::Config(format!(
                "{op}: regime {} needs map features g1",
                cfg.regime
            )))
        }
        (false, Some(_)) => {
            return Err(Error::Config(format!(
                "{op}: regime {} takes no map features",
                cfg.regime
            )))
        }
    }
    Ok(v)
}

pub fn fuse_mapformer<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Bound,
    prefix: &str,
    cfg: &FusionConfig,
    x: ScaleInputs,
) -> Result<FusionOutput> {
    const OP: &str = "fuse_mapformer";
    if cfg.kind != FusionKind::MapFormer {
        return Err(Error::Config(format!("{OP}: configured fusion is {}", cfg.kind)));
    }
    cfg.validate()?;
    let g1 = x
        .g1
        .ok_or_else(|| Error::Config(format!("{OP}: missing map features g1")))?;
    let inputs = gather_inputs(cfg, &x, OP)?;
    check_spatial(tape, OP, &inputs)?;
    let (h, w) = (tape.shape(x.f2)[1], tape.shape(x.f2)[2]);
    let (k, d_f) = (cfg.k, cfg.d_f);

    let cat = tape.concat(&inputs)?;
    let views = tape.grouped_pointwise_mlp(
        cat,
        linear_params(bound, &format!("{prefix}.mlp1"))?,
        linear_params(bound, &format!("{prefix}.mlp2"))?,
        k,
    )?;
    let views = tape.reshape(views, vec![k, d_f, h, w])?;

    let (aw, ab) = linear_params(bound, &format!("{prefix}.attn"))?;
    let logits = tape.pointwise_linear(g1, aw, ab)?;
    let logits = tape.reshape(logits, vec![k, d_f, h, w])?;
    let attention = tape.softmax(logits, 0)?;

    let weighted = tape.mul(attention, views)?;
    let fused = tape.sum_axis(weighted, 0)?;
    Ok(FusionOutput {
        fused,
        attention: Some(attention),
        views: Some(views),
    })
}

pub fn fuse_concat<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Bound,
    prefix: &str,
    cfg: &FusionConfig,
    x: ScaleInputs,
) -> Result<FusionOutput> {
    const OP: &str = "fuse_concat";
    let inputs = gather_inputs(cfg, &x, OP)?;
    check_spatial(tape, OP, &inputs)?;
    let cat = tape.concat(&inputs)?;
    let (w1, b1) = linear_params(bound, &format!("{prefix}.mlp1"))?;
    let (w2, b2) = linear_params(bound, &format!("{prefix}.mlp2"))?;
    let hidden = tape.pointwise_linear(cat, w1, b1)?;
    let hidden = tape.relu(hidden);
    let fused = tape.pointwise_linear(hidden, w2, b2)?;
    Ok(FusionOutput {
        fused,
        attention: None,
        views: None,
    })
}

pub fn fuse<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Bound,
    prefix: &str,
    cfg: &FusionConfig,
    x: ScaleInputs,
) -> Result<FusionOutput> {
    match cfg.kind {
        FusionKind::MapFormer => fuse_mapformer(tape, bound, prefix, cfg, x),
        FusionKind::Concat => fuse_concat(tape, bound, prefix, cfg, x),
    }
}

/// Argmax-over-views label raster for one attention channel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionLabels {
    pub channel: usize,
    pub height: usize,
    pub width: usize,
    /// Values in `0..K`.
    pub labels: Vec<u8>,
}

impl AttentionLabels {
    pub fn to_raster(&self) -> Raster {
        Raster::U8 {
            channels: 1,
            height: self.height as u32,
            width: self.width as u32,
            data: self.labels.clone(),
        }
    }

    pub fn file_name(scale: usize, channel: usize) -> String {
        format!("attn_scale{scale}_ch{channel}.cdr")
    }

    pub fn write(&self, dir: &Path, scale: usize) -> Result<()> {
        write_raster(&self.to_raster(), &dir.join(Self::file_name(scale, self.channel)))?;
        Ok(())
    }
}

/// For every requested channel `d`, `argmax_k a[k,d,i,j]` with ties to the smallest `k`.
pub fn export_attention_argmax<T: Scalar>(
    a: &Tensor<T>,
    channel_ids: &[usize],
) -> Result<Vec<AttentionLabels>> {
    let s = a.shape();
    if s.len() != 4 {
        return Err(Error::Shape {
            op: "export_attention_argmax",
            msg: format!("expected [K, D_f, H, W], got {s:?}"),
        });
    }
    let (k, d_f, h, w) = (s[0], s[1], s[2], s[3]);
    if k > 256 {
        return Err(Error::Config(format!("K = {k} does not fit u8 labels")));
    }
    let n = h * w;
    let data = a.data();
    channel_ids
        .iter()
        .map(|&d| {
            if d >= d_f {
                return Err(Error::Config(format!(
                    "attention channel {d} out of range (D_f = {d_f})"
                )));
            }
            let at = |kk: usize, p: usize| data[(kk * d_f + d) * n + p];
            let labels = (0..n)
                .map(|p| {
                    let mut best = 0;
                    for kk in 1..k {
                        if at(kk, p) > at(best, p) {
                            best = kk;
                        }
                    }
                    best as u8
                })
                .collect();
            Ok(AttentionLabels {
                channel: d,
                height: h,
                width: w,
                labels,
            })
        })
        .collect()
}
