//! Acceptance criteria, one PASS/FAIL line each.
//!
//! Run with `cargo test --release --test acceptance`. Failures are reported in the
//! output; set `ACCEPTANCE_STRICT=1` to also turn them into a non-zero exit.

use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use mapfuse_core::config::RunConfig;
use mapfuse_core::dataset::{Dataset, MANIFEST_FILE};
use mapfuse_core::encoders::EncoderConfig;
use mapfuse_core::fusion::{fuse_mapformer, init_fusion, FusionConfig, FusionKind, Regime, ScaleInputs};
use mapfuse_core::gradsuite;
use mapfuse_core::heads::contrastive_scale_loss;
use mapfuse_core::metrics::{binary_change_iou, miou, scs, semantic_change_score};
use mapfuse_core::model::{ChangeModel, Degradation, ModelInput};
use mapfuse_core::params::ParamStore;
use mapfuse_core::raster::{
    decode_raster, encode_raster, write_map, ChangeMask, ClassSet, Raster, SemanticMap,
};
use mapfuse_core::synth::{generate_split, stream, WorldConfig};
use mapfuse_core::tensor::{Tape, Tensor};
use mapfuse_core::train::{ExperimentConfig, Trainer};
use rand::Rng;
use std::sync::Arc;

/// BC margin of conditional-mapformer over bi-temporal-concat, frozen after one
/// calibration run on seed 0.
const ORDERING_MARGIN: f64 = 0.05;
const ORDERING_BUDGET_S: f64 = 30.0 * 60.0;
const GRAD_SUITE_BUDGET_S: f64 = 120.0;
const SEEDS: [u64; 3] = [0, 1, 2];

struct Outcome {
    name: &'static str,
    pass: bool,
    detail: String,
}

fn report(name: &'static str, pass: bool, detail: String) -> Outcome {
    println!("ACCEPTANCE {} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    Outcome { name, pass, detail }
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let entries = gradsuite::run_suite(0, |_| {}).expect("suite runs");
    let secs = start.elapsed().as_secs_f64();
    let worst = entries
        .iter()
        .max_by(|a, b| a.report.max_rel_error.total_cmp(&b.report.max_rel_error))
        .expect("entries");
    let failed: Vec<&str> = entries.iter().filter(|e| !e.passed()).map(|e| e.name.as_str()).collect();
    let models = entries.iter().filter(|e| e.name.starts_with("model ")).count();
    report(
        "gradient suite",
        failed.is_empty() && models == 3 && secs < GRAD_SUITE_BUDGET_S,
        format!(
            "{} entries, worst {:.2e} ({}), failed {failed:?}, {secs:.1}s",
            entries.len(),
            worst.report.max_rel_error,
            worst.name
        ),
    )
}

/// Attention fusion evaluated pixel by pixel from the raw parameter arrays.
fn fusion_scalar_oracle(
    params: &ParamStore<f64>,
    k: usize,
    d_f: usize,
    d_h: usize,
    inputs: &[&Tensor<f64>],
    g: &Tensor<f64>,
    hw: usize,
) -> Vec<f64> {
    let w1 = params.get("fu.mlp1.w").unwrap().data();
    let b1 = params.get("fu.mlp1.b").unwrap().data();
    let w2 = params.get("fu.mlp2.w").unwrap().data();
    let b2 = params.get("fu.mlp2.b").unwrap().data();
    let wa = params.get("fu.attn.w").unwrap().data();
    let ba = params.get("fu.attn.b").unwrap().data();
    let d_g = g.shape()[0];
    let mut out = vec![0.0; d_f * hw];
    for p in 0..hw {
        let mut x = Vec::new();
        for t in inputs {
            for c in 0..t.shape()[0] {
                x.push(t.data()[c * hw + p]);
            }
        }
        let c_in = x.len();
        for d in 0..d_f {
            let mut logits = vec![0.0; k];
            let mut views = vec![0.0; k];
            for kk in 0..k {
                let row = kk * d_f + d;
                let mut z = ba[row];
                for c in 0..d_g {
                    z += wa[row * d_g + c] * g.data()[c * hw + p];
                }
                logits[kk] = z;
                let mut v = b2[row];
                for j in 0..d_h {
                    let hid = kk * d_h + j;
                    let mut a = b1[hid];
                    for c in 0..c_in {
                        a += w1[hid * c_in + c] * x[c];
                    }
                    v += w2[row * d_h + j] * a.max(0.0);
                }
                views[kk] = v;
            }
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            out[d * hw + p] = (0..k).map(|kk| (logits[kk] - m).exp() / z * views[kk]).sum();
        }
    }
    out
}

fn fusion_oracle() -> Outcome {
    let (d_img, d_g, d_f, d_h, h, w) = (3, 2, 3, 4, 4, 4);
    let mut worst: f64 = 0.0;
    let mut worst_norm: f64 = 0.0;
    let mut ks = Vec::new();
    for inst in 0..20u64 {
        let k = [1, 2, 3, 5][inst as usize % 4];
        ks.push(k);
        let regime = if inst % 2 == 0 { Regime::Conditional } else { Regime::CrossModal };
        let cfg = FusionConfig { k, d_f, d_h, regime, kind: FusionKind::MapFormer };
        let mut params = ParamStore::<f64>::new();
        init_fusion(&cfg, "fu", d_img, d_g, 100 + inst, &mut params);
        let mut rng = stream(200 + inst, 0);
        let f1 = Tensor::<f64>::uniform(vec![d_img, h, w], -1.0, 1.0, &mut rng);
        let f2 = Tensor::<f64>::uniform(vec![d_img, h, w], -1.0, 1.0, &mut rng);
        let g = Tensor::<f64>::uniform(vec![d_g, h, w], -2.0, 2.0, &mut rng);

        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let v1 = tape.constant(f1.clone());
        let v2 = tape.constant(f2.clone());
        let vg = tape.constant(g.clone());
        let x = ScaleInputs {
            f1: regime.uses_pre_image().then_some(v1),
            f2: v2,
            g1: Some(vg),
        };
        let out = fuse_mapformer(&mut tape, &bound, "fu", &cfg, x).expect("fusion runs");
        let inputs: Vec<&Tensor<f64>> = match regime {
            Regime::Conditional => vec![&f1, &f2, &g],
            _ => vec![&f2, &g],
        };
        let oracle = fusion_scalar_oracle(&params, k, d_f, d_h, &inputs, &g, h * w);
        for (a, b) in tape.value(out.fused).data().iter().zip(&oracle) {
            worst = worst.max((a - b).abs());
        }
        let a = tape.value(out.attention.unwrap()).data().to_vec();
        let n = d_f * h * w;
        for i in 0..n {
            let s: f64 = (0..k).map(|kk| a[kk * n + i]).sum();
            worst_norm = worst_norm.max((s - 1.0).abs());
            assert!((0..k).all(|kk| a[kk * n + i] >= 0.0));
        }
    }
    report(
        "fusion oracle",
        worst < 1e-6 && worst_norm < 1e-6,
        format!("20 instances K={ks:?}: max |f - oracle| {worst:.2e}, max |sum_k a - 1| {worst_norm:.2e}"),
    )
}

fn contrastive_closed_forms() -> Outcome {
    let (c, h, w) = (4, 3, 3);
    let n = h * w;
    let mut rng = stream(31, 0);
    let g = Tensor::<f64>::uniform(vec![c, h, w], -1.0, 1.0, &mut rng);
    let gd = g.data().to_vec();
    let scaled = |s: f64| Tensor::from_vec(vec![c, h, w], gd.iter().map(|v| v * s).collect()).unwrap();
    // per pixel, a vector orthogonal to g: rotate the first two coordinates, zero the rest
    let ortho = {
        let mut v = vec![0.0; c * n];
        for p in 0..n {
            v[p] = -gd[n + p];
            v[n + p] = gd[p];
        }
        Tensor::from_vec(vec![c, h, w], v).unwrap()
    };
    let loss = |p1: Option<&Tensor<f64>>, p2: &Tensor<f64>, b: u8| -> f64 {
        let mut t = Tape::new();
        let gv = t.constant(g.clone());
        let p1 = p1.map(|p| t.constant(p.clone()));
        let p2 = t.constant(p2.clone());
        let mask = ChangeMask::new(h, w, vec![b; n]).unwrap();
        let l = contrastive_scale_loss(&mut t, gv, p1, p2, &mask).unwrap();
        t.value(l).item()
    };
    let p1r = Tensor::<f64>::uniform(vec![c, h, w], -1.0, 1.0, &mut rng);
    let mut cos_sum = 0.0;
    for p in 0..n {
        let (mut dot, mut nu, mut nv) = (0.0, 0.0, 0.0);
        for ch in 0..c {
            let (u, v) = (gd[ch * n + p], p1r.data()[ch * n + p]);
            dot += u * v;
            nu += u * u;
            nv += v * v;
        }
        cos_sum += dot / (nu.sqrt() * nv.sqrt());
    }
    let cases = [
        ("parallel b=0", loss(Some(&scaled(2.0)), &scaled(0.5), 0), -2.0),
        ("orthogonal b=1", loss(Some(&scaled(1.0)), &ortho, 1), -1.0),
        ("opposite b=1 clamps", loss(Some(&p1r), &scaled(-1.0), 1), -cos_sum / n as f64),
    ];
    let closed_ok = cases.iter().all(|(_, got, want)| (got - want).abs() < 1e-6);

    // stop-gradient: the contrastive term alone leaves the map encoder without gradient
    let data = tiny_dataset();
    let s = &data.samples[0].1;
    let grads_of = |stop: bool, ce: f64| {
        let mut cfg = tiny_experiment();
        cfg.head.stop_grad_on_map = stop;
        cfg.head.weights.binary = ce;
        let model = ChangeModel::new(cfg.model_config(5)).unwrap();
        let params = model.init_params::<f64>(3);
        let mut t = Tape::new();
        let bound = params.bind(&mut t);
        let input = ModelInput { image_pre: &s.image_pre, image_post: &s.image_post, map_pre: Some(&s.map_pre) };
        let out = model.forward(&mut t, &bound, input).unwrap();
        let (l, _) = model.loss(&mut t, &bound, &out, &s.change, None).unwrap();
        t.backward(l).unwrap();
        let g = params.grads_from(&t, &bound);
        g.iter()
            .filter(|(name, _)| name.starts_with("enc.map."))
            .flat_map(|(_, t)| t.data().to_vec())
            .map(f64::abs)
            .fold(0.0, f64::max)
    };
    let stopped = grads_of(true, 0.0);
    let open = grads_of(false, 0.0);
    let fusion_path = grads_of(true, 1.0);
    let stop_ok = stopped == 0.0 && open > 0.0 && fusion_path > 0.0;
    report(
        "contrastive closed forms",
        closed_ok && stop_ok,
        format!(
            "{}; map-encoder max|grad| contrastive-only stop-grad {stopped:e}, without stop-grad {open:.2e}, with CE {fusion_path:.2e}",
            cases.iter().map(|(n, g, w)| format!("{n} {g:.9} (want {w:.9})")).collect::<Vec<_>>().join(", ")
        ),
    )
}

fn metric_oracles() -> Outcome {
    let classes = Arc::new(ClassSet::numbered("c", 4).unwrap());
    let (h, w) = (8, 8);
    let mut mismatches = 0;
    let mut sc_vs_miou = 0;
    let mut rng = stream(41, 0);
    for _ in 0..100 {
        let mut labels = || -> Vec<u8> { (0..h * w).map(|_| rng.random_range(0..4u8)).collect() };
        let m2 = labels();
        let m2_hat = labels();
        // sparse masks with some all-empty draws
        let density = rng.random_range(0.0..0.5);
        let mut bits = || -> Vec<u8> { (0..h * w).map(|_| (rng.random::<f64>() < density) as u8).collect() };
        let b = bits();
        let b_hat = bits();

        // brute force
        let inter = (0..h * w).filter(|&p| b[p] == 1 && b_hat[p] == 1).count();
        let union = (0..h * w).filter(|&p| b[p] == 1 || b_hat[p] == 1).count();
        let bc_o = if union == 0 { 1.0 } else { inter as f64 / union as f64 };
        let class_mean = |within: &dyn Fn(usize) -> bool| -> f64 {
            let mut sum = 0.0;
            let mut counted = 0;
            for c in 0..4u8 {
                let mut i = 0;
                let mut u = 0;
                for p in 0..h * w {
                    if !within(p) {
                        continue;
                    }
                    let (t, q) = (m2[p] == c, m2_hat[p] == c);
                    i += (t && q) as usize;
                    u += (t || q) as usize;
                }
                if u > 0 {
                    sum += i as f64 / u as f64;
                    counted += 1;
                }
            }
            if counted == 0 { 1.0 } else { sum / counted as f64 }
        };
        let sc_o = class_mean(&|p| b[p] == 1);
        let miou_o = class_mean(&|_| true);

        let mk = |v: &Vec<u8>| SemanticMap::new(h, w, v.clone(), classes.clone()).unwrap();
        let (t2, p2) = (mk(&m2), mk(&m2_hat));
        let bm = ChangeMask::new(h, w, b.clone()).unwrap();
        let bhm = ChangeMask::new(h, w, b_hat.clone()).unwrap();
        let bc = binary_change_iou(&bm, &bhm).unwrap();
        let sc = semantic_change_score(&t2, &p2, &bm).unwrap().score;
        let mi = miou(&t2, &p2).unwrap().score;
        if bc != bc_o || sc != sc_o || mi != miou_o || scs(bc, sc) != (bc_o + sc_o) / 2.0 {
            mismatches += 1;
        }
        let all = ChangeMask::new(h, w, vec![1; h * w]).unwrap();
        if semantic_change_score(&t2, &p2, &all).unwrap().score != mi {
            sc_vs_miou += 1;
        }
    }
    report(
        "metric oracles",
        mismatches == 0 && sc_vs_miou == 0,
        format!("100 random 8x8 instances: {mismatches} oracle mismatches, {sc_vs_miou} sc(b=1) != miou"),
    )
}

fn format_checks() -> Outcome {
    let mut rng = stream(51, 0);
    let mut bad = 0;
    for i in 0..20 {
        let (c, h, w) = (rng.random_range(1..4u16), rng.random_range(1..9u32), rng.random_range(1..9u32));
        let n = (c as u32 * h * w) as usize;
        let r = if i % 2 == 0 {
            Raster::U8 { channels: c, height: h, width: w, data: (0..n).map(|_| rng.random()).collect() }
        } else {
            let mut data: Vec<f32> = (0..n).map(|_| f32::from_bits(rng.random::<u32>() & 0x7f7f_ffff)).collect();
            data[0] = -0.0;
            Raster::F32 { channels: c, height: h, width: w, data }
        };
        let bytes = encode_raster(&r);
        let back = decode_raster(&bytes).unwrap();
        if encode_raster(&back) != bytes || bytes.len() != 15 + n * if i % 2 == 0 { 1 } else { 4 } {
            bad += 1;
        }
    }
    let dir = tempfile::tempdir().unwrap();
    let classes = Arc::new(ClassSet::numbered("c", 3).unwrap());
    let m = SemanticMap::new(2, 2, vec![0, 1, 2, 1], classes).unwrap();
    let p = dir.path().join("m.cdr");
    write_map(&m, &p).unwrap();
    let size = std::fs::metadata(&p).unwrap().len();
    report(
        "format",
        bad == 0 && size == 19,
        format!("20 random u8/f32 rasters, {bad} round-trip failures; 2x2 u8 map file is {size} bytes"),
    )
}

fn tiny_experiment() -> ExperimentConfig {
    let mut head = mapfuse_core::heads::HeadConfig::default();
    head.width = 4;
    ExperimentConfig {
        encoder: EncoderConfig { channels: vec![3, 4], map_channels: 3, image_channels: 3 },
        head,
        k: 2,
        ..ExperimentConfig::default()
    }
}

fn tiny_dataset() -> Dataset {
    let w = WorldConfig { height: 16, width: 16, change_rate_target: 0.2, ..WorldConfig::default() };
    Dataset {
        classes: w.class_set(),
        samples: (0..2).map(|i| (i, mapfuse_core::synth::generate_sample(&w, i).unwrap())).collect(),
    }
}

/// Settings of the desk-scale experiment protocol.
fn protocol() -> RunConfig {
    let text = include_str!("../../../configs/protocol.cfg");
    RunConfig::parse(text, "protocol.cfg", &[]).expect("protocol config")
}

fn write_splits(cfg: &RunConfig, dir: &Path) {
    generate_split(&cfg.world, 0, cfg.train_samples, &dir.join("train")).unwrap();
    generate_split(&cfg.world, cfg.train_samples as u64, cfg.test_samples, &dir.join("test")).unwrap();
}

fn files_identical(a: &Path, b: &Path) -> bool {
    let mut names: Vec<_> = std::fs::read_dir(a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    !names.is_empty()
        && names.iter().all(|n| std::fs::read(a.join(n)).ok() == std::fs::read(b.join(n)).ok())
}

fn determinism(cfg: &RunConfig) -> Outcome {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    write_splits(cfg, a.path());
    write_splits(cfg, b.path());
    let data_same = ["train", "test"]
        .iter()
        .all(|s| files_identical(&a.path().join(s), &b.path().join(s)));

    let train = Dataset::load(&a.path().join("train").join(MANIFEST_FILE)).unwrap();
    let test = Dataset::load(&a.path().join("test").join(MANIFEST_FILE)).unwrap();
    let run = || {
        let mut c = cfg.experiment.clone();
        c.steps = 100;
        let mut t = Trainer::new(c, train.classes.clone()).unwrap();
        let mut log = String::new();
        t.run(&train, None, |r| Ok(log.push_str(&(serde_json::to_string(r).unwrap() + "\n"))), |_, _| Ok(()))
            .unwrap();
        let metrics = serde_json::to_string(&t.evaluate(&test, &Degradation::None).unwrap()).unwrap();
        (log, metrics)
    };
    let (l1, m1) = run();
    let (l2, m2) = run();
    report(
        "determinism",
        data_same && l1 == l2 && m1 == m2,
        format!(
            "datasets byte-identical {data_same}, 100-step loss logs identical {}, metric reports identical {}",
            l1 == l2,
            m1 == m2
        ),
    )
}

struct Cell {
    label: &'static str,
    sets: &'static [&'static str],
}

const CELLS: &[Cell] = &[
    Cell { label: "conditional-mapformer", sets: &["regime=conditional", "fusion.kind=mapformer"] },
    Cell { label: "conditional-concat", sets: &["regime=conditional", "fusion.kind=concat"] },
    Cell { label: "bi_temporal-concat", sets: &["regime=bi_temporal", "fusion.kind=concat"] },
    Cell { label: "cross_modal-mapformer", sets: &["regime=cross_modal", "fusion.kind=mapformer"] },
    Cell { label: "conditional-mapformer w/o contrastive", sets: &["regime=conditional", "head.contrastive=false"] },
    Cell {
        label: "conditional-mapformer high_level",
        sets: &["regime=conditional", "degradation=high_level", "degradation.mapping=0:0,1:0,2:1,3:1,4:2"],
    },
    Cell {
        label: "conditional-mapformer low_res x8",
        sets: &["regime=conditional", "degradation=low_res", "degradation.factor=8"],
    },
];

struct CellResult {
    bc: Vec<f64>,
    wall_s: Vec<f64>,
}

impl CellResult {
    fn median(&self) -> f64 {
        let mut v = self.bc.clone();
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    }
}

fn run_cells(base: &RunConfig, train: &Dataset, test: &Dataset) -> Vec<CellResult> {
    CELLS
        .iter()
        .map(|cell| {
            let mut r = CellResult { bc: Vec::new(), wall_s: Vec::new() };
            for seed in SEEDS {
                let mut sets: Vec<String> = cell.sets.iter().map(|s| s.to_string()).collect();
                sets.push(format!("seed={seed}"));
                let text = base.to_text();
                let cfg = RunConfig::parse(&text, "protocol", &sets).unwrap().experiment;
                let start = Instant::now();
                let mut t = Trainer::new(cfg.clone(), train.classes.clone()).unwrap();
                t.run(train, None, |_| Ok(()), |_, _| Ok(())).unwrap();
                let bc = t.evaluate(test, &cfg.degradation).unwrap().bc;
                let secs = start.elapsed().as_secs_f64();
                println!("  {:<40} seed {seed}: BC {bc:.4} ({secs:.0}s)", cell.label);
                r.bc.push(bc);
                r.wall_s.push(secs);
            }
            r
        })
        .collect()
}

fn experiments(cfg: &RunConfig) -> Vec<Outcome> {
    let dir = tempfile::tempdir().unwrap();
    write_splits(cfg, dir.path());
    let train = Dataset::load(&dir.path().join("train").join(MANIFEST_FILE)).unwrap();
    let test = Dataset::load(&dir.path().join("test").join(MANIFEST_FILE)).unwrap();
    let r = run_cells(cfg, &train, &test);
    let med: Vec<f64> = r.iter().map(CellResult::median).collect();
    let (cm, cc, bt, xm, nc, hl, lr) = (med[0], med[1], med[2], med[3], med[4], med[5], med[6]);
    let ordering_s: f64 = r[..3].iter().flat_map(|c| c.wall_s.iter()).sum();
    vec![
        report(
            "ordering experiment",
            cm > cc && cc > bt && cm - bt >= ORDERING_MARGIN && ordering_s < ORDERING_BUDGET_S,
            format!(
                "median BC conditional-mapformer {cm:.4} > conditional-concat {cc:.4} > bi_temporal-concat {bt:.4}, \
                 margin {:.4} (need {ORDERING_MARGIN}), {ordering_s:.0}s",
                cm - bt
            ),
        ),
        report(
            "cross-modal viability",
            xm > bt,
            format!("median BC cross_modal-mapformer {xm:.4} vs bi_temporal-concat {bt:.4}"),
        ),
        report(
            "ablation and degradation direction",
            nc <= cm && hl <= cm && lr <= cm && hl > bt && lr > bt,
            format!(
                "median BC full {cm:.4}, w/o contrastive {nc:.4}, high_level {hl:.4}, low_res x8 {lr:.4}, bi_temporal {bt:.4}"
            ),
        ),
    ]
}

fn main() -> ExitCode {
    let cfg = protocol();
    let mut outcomes = vec![
        gradient_suite(),
        fusion_oracle(),
        contrastive_closed_forms(),
        metric_oracles(),
        format_checks(),
        determinism(&cfg),
    ];
    outcomes.extend(experiments(&cfg));
    let failed: Vec<&Outcome> = outcomes.iter().filter(|o| !o.pass).collect();
    println!("acceptance: {} passed, {} failed", outcomes.len() - failed.len(), failed.len());
    for o in &failed {
        println!("  failed: {}: {}", o.name, o.detail);
    }
    let strict = std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    if failed.is_empty() || !strict { ExitCode::SUCCESS } else { ExitCode::FAILURE }
}
