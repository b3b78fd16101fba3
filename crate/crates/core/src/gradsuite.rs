//! Finite-difference sweep over every differentiable operation and whole models.
//!
//! Each entry reduces its output to a scalar through fixed random weights and
//! compares analytic gradients with central differences in `f64`.

use std::sync::Arc;
use std::time::Instant;

use rand::Rng;

use crate::encoders::EncoderConfig;
use crate::error::Result;
use crate::fusion::{fuse_concat, fuse_mapformer, init_fusion, FusionConfig, FusionKind, Regime, ScaleInputs};
use crate::heads::{contrastive_scale_loss, HeadConfig, ScdPlacement, IGNORE_LABEL};
use crate::model::{ChangeModel, ModelConfig, ModelInput};
use crate::params::{Bound, ParamStore};
use crate::raster::ChangeMask;
use crate::synth::{generate_sample, stream, WorldConfig};
use crate::tensor::{grad_check, ConvSpec, GradCheckReport, Tape, Tensor, Var};

/// Relative tolerance every entry must meet.
pub const TOLERANCE: f64 = 1e-5;
const STEP: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct SuiteEntry {
    pub name: String,
    pub report: GradCheckReport,
    pub seconds: f64,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error < TOLERANCE
    }
}

fn rand_tensor(seed: u64, tag: u64, shape: &[usize]) -> Tensor<f64> {
    Tensor::uniform(shape.to_vec(), -1.0, 1.0, &mut stream(seed, tag))
}

/// `sum(y * r)` for fixed random `r`, so every output coordinate matters.
fn probe(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let r = rand_tensor(seed, 0xfeed, tape.shape(y));
    let r = tape.constant(r);
    let p = tape.mul(y, r)?;
    Ok(tape.sum(p))
}

type OpFn = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

struct Case {
    name: &'static str,
    shapes: Vec<Vec<usize>>,
    f: OpFn,
}

fn case(
    name: &'static str,
    shapes: &[&[usize]],
    f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'static,
) -> Case {
    Case {
        name,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        f: Box::new(f),
    }
}

fn op_cases(seed: u64) -> Vec<Case> {
    let labels: Vec<u32> = {
        let mut rng = stream(seed, 0x1abe1);
        (0..16).map(|i| if i == 5 { IGNORE_LABEL } else { rng.random_range(0..3) }).collect()
    };
    let mask = {
        let mut rng = stream(seed, 0x3a5c);
        ChangeMask::new(4, 4, (0..16).map(|_| rng.random_range(0..2u8)).collect())
            .expect("binary values")
    };
    vec![
        case("conv2d k3 stride2", &[&[2, 6, 6], &[3, 2, 3, 3], &[3]], move |t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), ConvSpec::strided(2))?;
            probe(t, y, seed)
        }),
        case("conv2d k5 dilation2", &[&[2, 7, 7], &[2, 2, 5, 5], &[2]], move |t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), ConvSpec::dilated(2))?;
            probe(t, y, seed)
        }),
        case("pointwise_linear", &[&[3, 4, 4], &[5, 3], &[5]], move |t, v| {
            let y = t.pointwise_linear(v[0], v[1], Some(v[2]))?;
            probe(t, y, seed)
        }),
        case("grouped_linear", &[&[6, 3, 3], &[4, 3], &[4]], move |t, v| {
            let y = t.grouped_linear(v[0], v[1], Some(v[2]), 2)?;
            probe(t, y, seed)
        }),
        case(
            "grouped_pointwise_mlp",
            &[&[4, 3, 3], &[6, 4], &[6], &[6, 2], &[6]],
            move |t, v| {
                let y = t.grouped_pointwise_mlp(v[0], (v[1], Some(v[2])), (v[3], Some(v[4])), 3)?;
                probe(t, y, seed)
            },
        ),
        case("add", &[&[2, 3], &[2, 3]], move |t, v| {
            let y = t.add(v[0], v[1])?;
            probe(t, y, seed)
        }),
        case("sub", &[&[2, 3], &[2, 3]], move |t, v| {
            let y = t.sub(v[0], v[1])?;
            probe(t, y, seed)
        }),
        case("mul", &[&[2, 3], &[2, 3]], move |t, v| {
            let y = t.mul(v[0], v[1])?;
            probe(t, y, seed)
        }),
        case("scale", &[&[2, 3]], move |t, v| {
            let y = t.scale(v[0], -1.7);
            probe(t, y, seed)
        }),
        case("relu", &[&[3, 4]], move |t, v| {
            let y = t.relu(v[0]);
            probe(t, y, seed)
        }),
        case("reshape", &[&[2, 6]], move |t, v| {
            let y = t.reshape(v[0], vec![3, 2, 2])?;
            probe(t, y, seed)
        }),
        case("concat", &[&[2, 2, 2], &[1, 2, 2]], move |t, v| {
            let y = t.concat(&[v[0], v[1]])?;
            probe(t, y, seed)
        }),
        case("softmax", &[&[4]], move |t, v| {
            let y = t.softmax(v[0], 0)?;
            probe(t, y, seed)
        }),
        case("softmax axis0 of [3,2,2]", &[&[3, 2, 2]], move |t, v| {
            let y = t.softmax(v[0], 0)?;
            probe(t, y, seed)
        }),
        case("sum_axis", &[&[3, 2, 2]], move |t, v| {
            let y = t.sum_axis(v[0], 0)?;
            probe(t, y, seed)
        }),
        case("sum", &[&[3, 2]], |t, v| Ok(t.sum(v[0]))),
        case("mean", &[&[3, 2]], |t, v| Ok(t.mean(v[0]))),
        case("cosine_similarity", &[&[4, 3, 3], &[4, 3, 3]], move |t, v| {
            let y = t.cosine_similarity(v[0], v[1], 1e-8)?;
            probe(t, y, seed)
        }),
        case("cross_entropy", &[&[3, 4, 4]], move |t, v| {
            t.cross_entropy(v[0], &labels, IGNORE_LABEL)
        }),
        case("bilinear_resize down", &[&[2, 8, 8]], move |t, v| {
            let y = t.bilinear_resize(v[0], 3, 5)?;
            probe(t, y, seed)
        }),
        case("bilinear_resize up", &[&[2, 3, 3]], move |t, v| {
            let y = t.bilinear_resize(v[0], 7, 4)?;
            probe(t, y, seed)
        }),
        case("stop_gradient", &[&[2, 3]], move |t, v| {
            // sum(stop_gradient(x) * y) against y; x is a fixed constant
            let x = t.leaf(rand_tensor(seed, 0x5709, &[2, 3]), true);
            let s = t.stop_gradient(x);
            let y = t.mul(s, v[0])?;
            probe(t, y, seed)
        }),
        case("contrastive_loss", &[&[3, 4, 4], &[3, 4, 4], &[3, 4, 4]], move |t, v| {
            contrastive_scale_loss(t, v[0], Some(v[1]), v[2], &mask)
        }),
        fusion_case("fuse_mapformer", seed, FusionKind::MapFormer, Regime::Conditional),
        fusion_case("fuse_mapformer cross_modal", seed, FusionKind::MapFormer, Regime::CrossModal),
        fusion_case("fuse_concat", seed, FusionKind::Concat, Regime::Conditional),
        fusion_case("fuse_concat bi_temporal", seed, FusionKind::Concat, Regime::BiTemporal),
    ]
}

/// Fusion at one 4x4 scale with its parameters as checked inputs.
fn fusion_case(name: &'static str, seed: u64, kind: FusionKind, regime: Regime) -> Case {
    let cfg = FusionConfig {
        k: 3,
        d_f: 2,
        d_h: 3,
        regime,
        kind,
    };
    let (d_img, d_g) = (2, 3);
    let mut params = ParamStore::<f64>::new();
    init_fusion(&cfg, "fu", d_img, d_g, seed, &mut params);
    let names: Vec<String> = params.names().cloned().collect();
    let mut shapes: Vec<Vec<usize>> = vec![vec![d_img, 4, 4], vec![d_img, 4, 4], vec![d_g, 4, 4]];
    shapes.extend(params.iter().map(|(_, t)| t.shape().to_vec()));
    Case {
        name,
        shapes,
        f: Box::new(move |t, v| {
            let bound = Bound::from_pairs(names.iter().cloned().zip(v[3..].iter().copied()));
            let x = ScaleInputs {
                f1: regime.uses_pre_image().then_some(v[0]),
                f2: v[1],
                g1: regime.uses_map().then_some(v[2]),
            };
            let out = match kind {
                FusionKind::MapFormer => fuse_mapformer(t, &bound, "fu", &cfg, x)?,
                FusionKind::Concat => fuse_concat(t, &bound, "fu", &cfg, x)?,
            };
            probe(t, out.fused, seed)
        }),
    }
}

/// Small model configuration used for whole-model checks.
pub fn tiny_model(regime: Regime, kind: FusionKind, placement: ScdPlacement) -> ModelConfig {
    ModelConfig {
        regime,
        fusion_kind: kind,
        k: 2,
        fusion_hidden: 0,
        tie_scales: false,
        encoder: EncoderConfig {
            channels: vec![3, 4],
            map_channels: 3,
            image_channels: 3,
        },
        head: HeadConfig {
            scd_placement: placement,
            // the analytic gradient honours stop-gradient but finite differences
            // cannot, so the whole-model check runs with it off
            stop_grad_on_map: false,
            width: 3,
            ..HeadConfig::default()
        },
        num_classes: 3,
        map_classes: 3,
    }
}

/// Total training loss of a 16x16 sample with every parameter checked.
fn model_case(name: &'static str, seed: u64, cfg: ModelConfig) -> Result<Case> {
    let world = WorldConfig {
        height: 16,
        width: 16,
        num_classes: 3,
        num_seed_regions: 4,
        change_rate_target: 0.15,
        change_blob_count: 2,
        seed,
        ..WorldConfig::default()
    };
    let sample = Arc::new(generate_sample(&world, 0)?);
    let model = ChangeModel::new(cfg)?;
    let params = model.init_params::<f64>(seed);
    let names: Vec<String> = params.names().cloned().collect();
    Ok(Case {
        name,
        shapes: params.iter().map(|(_, t)| t.shape().to_vec()).collect(),
        f: Box::new(move |t, v| {
            let bound = Bound::from_pairs(names.iter().cloned().zip(v.iter().copied()));
            let s = &sample;
            let input = ModelInput {
                image_pre: &s.image_pre,
                image_post: &s.image_post,
                map_pre: Some(&s.map_pre),
            };
            let out = model.forward(t, &bound, input)?;
            let (loss, _) = model.loss(t, &bound, &out, &s.change, Some(&s.map_post))?;
            Ok(loss)
        }),
    })
}

/// Run every entry; `on_entry` sees each result as it completes.
pub fn run_suite(seed: u64, mut on_entry: impl FnMut(&SuiteEntry)) -> Result<Vec<SuiteEntry>> {
    let mut cases: Vec<(Case, Option<Vec<Tensor<f64>>>)> =
        op_cases(seed).into_iter().map(|c| (c, None)).collect();
    for (name, regime, kind, placement) in [
        ("model bi_temporal/concat", Regime::BiTemporal, FusionKind::Concat, ScdPlacement::OnPostFeatures),
        ("model conditional/mapformer", Regime::Conditional, FusionKind::MapFormer, ScdPlacement::OnPostFeatures),
        ("model cross_modal/mapformer", Regime::CrossModal, FusionKind::MapFormer, ScdPlacement::OnFused),
    ] {
        let cfg = tiny_model(regime, kind, placement);
        let params = ChangeModel::new(cfg.clone())?.init_params::<f64>(seed);
        let inputs = params.iter().map(|(_, t)| t.clone()).collect();
        cases.push((model_case(name, seed, cfg)?, Some(inputs)));
    }
    let mut out = Vec::with_capacity(cases.len());
    for (c, inputs) in cases {
        let inputs = inputs.unwrap_or_else(|| {
            c.shapes
                .iter()
                .enumerate()
                .map(|(i, s)| rand_tensor(seed, i as u64 + 1, s))
                .collect()
        });
        let start = Instant::now();
        let report = grad_check(&c.f, &inputs, STEP)?;
        let entry = SuiteEntry {
            name: c.name.to_string(),
            report,
            seconds: start.elapsed().as_secs_f64(),
        };
        on_entry(&entry);
        out.push(entry);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_operation_passes() {
        let entries = run_suite(0, |_| {}).unwrap();
        for e in &entries {
            assert!(e.passed(), "{}: {:?}", e.name, e.report);
            assert!(e.report.coords_checked > 0, "{}", e.name);
        }
        assert!(entries.iter().filter(|e| e.name.starts_with("model ")).count() == 3);
    }
}
