//! Training, evaluation and checkpointing.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::config;
use crate::dataset::Dataset;
use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::fusion::{FusionKind, Regime};
use crate::heads::{HeadConfig, LossReport};
use crate::metrics::{MetricsAccumulator, MetricsReport};
use crate::model::{
    binary_prediction, semantic_prediction, ChangeModel, Degradation, ModelConfig, ModelInput,
};
use crate::params::{decode_table, encode_table, Cursor, ParamStore};
use crate::raster::{ChangeMask, ClassSet, Sample, SemanticMap};
use crate::synth::{mix64, stream};
use crate::tensor::{Scalar, Tape, Tensor};

const STREAM_BATCHES: u64 = 0x4241_5443_4845_5331;
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CDP1";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction and a constant step size.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T: Scalar> {
    pub cfg: AdamConfig,
    pub t: u64,
    pub m: ParamStore<T>,
    pub v: ParamStore<T>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: AdamConfig, params: &ParamStore<T>) -> Self {
        Self {
            cfg,
            t: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &ParamStore<T>) -> Result<()> {
        self.t += 1;
        let c = |x: f64| T::from_f64_lossy(x);
        let (b1, b2) = (c(self.cfg.beta1), c(self.cfg.beta2));
        let t = i32::try_from(self.t).unwrap_or(i32::MAX);
        let corr1 = T::one() - b1.powi(t);
        let corr2 = T::one() - b2.powi(t);
        let (lr, eps) = (c(self.cfg.lr), c(self.cfg.eps));
        for (name, p) in params.iter_mut() {
            let missing = || Error::Contract(format!("optimizer has no state for {name}"));
            let g = grads.get(name).ok_or_else(missing)?.data();
            let m = self.m.get_mut(name).ok_or_else(missing)?.data_mut();
            let v = self.v.get_mut(name).ok_or_else(missing)?.data_mut();
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                m[i] = b1 * m[i] + (T::one() - b1) * g[i];
                v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
                let mh = m[i] / corr1;
                let vh = v[i] / corr2;
                *w -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub regime: Regime,
    pub fusion_kind: FusionKind,
    pub k: usize,
    pub fusion_hidden: usize,
    pub tie_scales: bool,
    pub encoder: EncoderConfig,
    pub head: HeadConfig,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub steps: u64,
    /// Evaluate on the test set every this many steps; 0 disables.
    pub eval_every: u64,
    pub train_manifest: Option<PathBuf>,
    pub test_manifest: Option<PathBuf>,
    pub degradation: Degradation,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            regime: Regime::Conditional,
            fusion_kind: FusionKind::MapFormer,
            k: 4,
            fusion_hidden: 0,
            tie_scales: false,
            encoder: EncoderConfig::default(),
            head: HeadConfig::default(),
            adam: AdamConfig::default(),
            batch_size: 1,
            steps: 2000,
            eval_every: 0,
            train_manifest: None,
            test_manifest: None,
            degradation: Degradation::None,
        }
    }
}

impl ExperimentConfig {
    pub fn model_config(&self, num_classes: usize) -> ModelConfig {
        ModelConfig {
            regime: self.regime,
            fusion_kind: self.fusion_kind,
            k: self.k,
            fusion_hidden: self.fusion_hidden,
            tie_scales: self.tie_scales,
            encoder: self.encoder.clone(),
            head: self.head.clone(),
            num_classes,
            map_classes: self.degradation.map_classes(num_classes),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let a = &self.adam;
        if !(a.lr > 0.0 && a.lr.is_finite()) {
            return Err(Error::Config(format!("optim.lr must be > 0, got {}", a.lr)));
        }
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) {
            return Err(Error::Config("optim.beta1 and optim.beta2 must lie in [0, 1)".into()));
        }
        if !(a.eps > 0.0) {
            return Err(Error::Config("optim.eps must be > 0".into()));
        }
        if self.steps == 0 {
            return Err(Error::Config("train.steps must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be > 0".into()));
        }
        if self.degradation != Degradation::None && !self.regime.uses_map() {
            return Err(Error::Config(format!(
                "degradation {} needs a regime with a pre-change map",
                self.degradation
            )));
        }
        if self.degradation == Degradation::PredictedPremap {
            if self.regime != Regime::Conditional {
                return Err(Error::Config(
                    "predicted_premap needs the conditional regime (the pre-change image)".into(),
                ));
            }
            if self.head.scd_placement != crate::heads::ScdPlacement::OnPostFeatures {
                return Err(Error::Config(
                    "predicted_premap needs head.scd_placement = on_post_features".into(),
                ));
            }
        }
        if let Degradation::HighLevel(m) = &self.degradation {
            if m.is_empty() {
                return Err(Error::Config("degradation.mapping is empty".into()));
            }
        }
        // class count is only known from data; 2 is enough to check the wiring
        let mut mc = self.model_config(2);
        mc.map_classes = mc.map_classes.max(1);
        mc.validate()
    }

    /// Hash of every setting that shapes the model or its optimizer.
    pub fn config_hash(&self) -> u64 {
        let text = config::experiment_to_text(self);
        let model_lines = text
            .lines()
            .filter(|l| !(l.starts_with("train.") || l.starts_with("data.")))
            .collect::<Vec<_>>()
            .join("\n");
        model_lines
            .bytes()
            .fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
                (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
            })
    }
}

/// Parameters, optimizer moments and bookkeeping needed to resume or evaluate.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub config_hash: u64,
    pub config_text: String,
    pub classes: ClassSet,
    pub params: ParamStore<f32>,
    pub adam_m: ParamStore<f32>,
    pub adam_v: ParamStore<f32>,
}

fn put_text(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn get_text(cur: &mut Cursor<'_>) -> Result<String> {
    let n = cur.u32()? as usize;
    String::from_utf8(cur.take(n)?.to_vec())
        .map_err(|_| Error::Data("checkpoint text is not UTF-8".into()))
}

impl Checkpoint {
    /// `CDP1`, step u64, config hash u64, config text, class names, tensor table.
    /// Optimizer moments are stored in the same table as `adam.m.*` / `adam.v.*`.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = CHECKPOINT_MAGIC.to_vec();
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.config_hash.to_le_bytes());
        put_text(&mut out, &self.config_text);
        put_text(&mut out, &self.classes.to_text());
        let mut table = self.params.clone();
        for (prefix, store) in [("adam.m.", &self.adam_m), ("adam.v.", &self.adam_v)] {
            for (name, t) in store.iter() {
                table.insert(format!("{prefix}{name}"), t.clone());
            }
        }
        encode_table(&table, &mut out);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor::new(bytes);
        if cur.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Data("not a checkpoint (bad magic)".into()));
        }
        let step = cur.u64()?;
        let config_hash = cur.u64()?;
        let config_text = get_text(&mut cur)?;
        let classes = ClassSet::from_text(&get_text(&mut cur)?)?;
        let table = decode_table(&mut cur)?;
        if cur.remaining() != 0 {
            return Err(Error::Data(format!(
                "checkpoint has {} trailing bytes",
                cur.remaining()
            )));
        }
        let mut params = ParamStore::new();
        let mut adam_m = ParamStore::new();
        let mut adam_v = ParamStore::new();
        for (name, t) in table.iter() {
            if let Some(n) = name.strip_prefix("adam.m.") {
                adam_m.insert(n, t.clone());
            } else if let Some(n) = name.strip_prefix("adam.v.") {
                adam_v.insert(n, t.clone());
            } else {
                params.insert(name.clone(), t.clone());
            }
        }
        Ok(Self {
            step,
            config_hash,
            config_text,
            classes,
            params,
            adam_m,
            adam_v,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }

    pub fn config(&self) -> Result<ExperimentConfig> {
        config::experiment_from_text(&self.config_text)
    }
}

/// One line of the loss log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    #[serde(flatten)]
    pub report: LossReport,
}

/// Sample indices for training step `step` (0-based): consecutive slices of
/// per-epoch shuffles, so the order depends only on `(seed, step)`.
pub fn batch_indices(seed: u64, step: u64, batch_size: usize, n: usize) -> Vec<usize> {
    let mut cache: Option<(u64, Vec<usize>)> = None;
    (0..batch_size as u64)
        .map(|j| {
            let pos = step * batch_size as u64 + j;
            let epoch = pos / n as u64;
            if cache.as_ref().is_none_or(|(e, _)| *e != epoch) {
                let mut perm: Vec<usize> = (0..n).collect();
                perm.shuffle(&mut stream(mix64(seed) ^ STREAM_BATCHES, epoch));
                cache = Some((epoch, perm));
            }
            cache.as_ref().expect("filled").1[(pos % n as u64) as usize]
        })
        .collect()
}

/// Map input for the model after map-only degradation.
fn map_input(deg: &Degradation, m: &SemanticMap) -> Result<SemanticMap> {
    deg.apply(m)
}

pub struct Trainer {
    cfg: ExperimentConfig,
    model: ChangeModel,
    classes: Arc<ClassSet>,
    params: ParamStore<f32>,
    adam: Adam<f32>,
    map_cache: BTreeMap<u64, SemanticMap>,
}

impl Trainer {
    pub fn new(cfg: ExperimentConfig, classes: Arc<ClassSet>) -> Result<Self> {
        cfg.validate()?;
        cfg.degradation.validate(classes.len())?;
        let model = ChangeModel::new(cfg.model_config(classes.len()))?;
        let params = model.init_params::<f32>(cfg.seed);
        let adam = Adam::new(cfg.adam, &params);
        Ok(Self {
            cfg,
            model,
            classes,
            params,
            adam,
            map_cache: BTreeMap::new(),
        })
    }

    /// Resume from a checkpoint written by a run with the same model settings.
    pub fn resume(cfg: ExperimentConfig, ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.config_hash != cfg.config_hash() {
            return Err(Error::Config(
                "checkpoint was written with different model settings".into(),
            ));
        }
        let mut t = Self::new(cfg, Arc::new(ckpt.classes.clone()))?;
        let names = |p: &ParamStore<f32>| p.names().cloned().collect::<Vec<_>>();
        if names(&ckpt.params) != names(&t.params)
            || names(&ckpt.adam_m) != names(&t.params)
            || names(&ckpt.adam_v) != names(&t.params)
        {
            return Err(Error::Data("checkpoint parameters do not match the model".into()));
        }
        t.params = ckpt.params.clone();
        t.adam.m = ckpt.adam_m.clone();
        t.adam.v = ckpt.adam_v.clone();
        t.adam.t = ckpt.step;
        Ok(t)
    }

    pub fn step_count(&self) -> u64 {
        self.adam.t
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.params
    }

    pub fn model(&self) -> &ChangeModel {
        &self.model
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            step: self.adam.t,
            config_hash: self.cfg.config_hash(),
            config_text: config::experiment_to_text(&self.cfg),
            classes: (*self.classes).clone(),
            params: self.params.clone(),
            adam_m: self.adam.m.clone(),
            adam_v: self.adam.v.clone(),
        }
    }

    fn check_classes(&self, data: &Dataset) -> Result<()> {
        if *data.classes != *self.classes {
            return Err(Error::Data(
                "dataset class set differs from the model's".into(),
            ));
        }
        Ok(())
    }

    /// One optimizer step on the next batch.
    pub fn step(&mut self, data: &Dataset) -> Result<LossRecord> {
        self.check_classes(data)?;
        let step = self.adam.t;
        let idx = batch_indices(self.cfg.seed, step, self.cfg.batch_size, data.len());
        let mut grads = self.params.zeros_like();
        let mut sum = LossReport {
            total: 0.0,
            contrastive: None,
            ce_binary: 0.0,
            ce_semantic: None,
        };
        for &i in &idx {
            let (id, sample) = &data.samples[i];
            let map = if self.model.config().regime.uses_map() {
                if !self.map_cache.contains_key(id) {
                    let m = map_input(&self.cfg.degradation, &sample.map_pre)?;
                    self.map_cache.insert(*id, m);
                }
                self.map_cache.get(id)
            } else {
                None
            };
            let mut tape = Tape::new();
            let bound = self.params.bind(&mut tape);
            let input = ModelInput {
                image_pre: &sample.image_pre,
                image_post: &sample.image_post,
                map_pre: map,
            };
            let out = self.model.forward(&mut tape, &bound, input)?;
            let (loss, r) = self.model.loss(
                &mut tape,
                &bound,
                &out,
                &sample.change,
                Some(&sample.map_post),
            )?;
            tape.backward(loss)?;
            let g = self.params.grads_from(&tape, &bound);
            for ((_, acc), (_, gi)) in grads.iter_mut().zip(g.iter()) {
                for (a, &b) in acc.data_mut().iter_mut().zip(gi.data()) {
                    *a += b;
                }
            }
            sum.total += r.total;
            sum.ce_binary += r.ce_binary;
            sum.contrastive = r.contrastive.map(|c| c + sum.contrastive.unwrap_or(0.0));
            sum.ce_semantic = r.ce_semantic.map(|c| c + sum.ce_semantic.unwrap_or(0.0));
        }
        let n = idx.len() as f64;
        let report = LossReport {
            total: sum.total / n,
            contrastive: sum.contrastive.map(|v| v / n),
            ce_binary: sum.ce_binary / n,
            ce_semantic: sum.ce_semantic.map(|v| v / n),
        };
        if !report.is_finite() || grads.iter().any(|(_, g)| !g.all_finite()) {
            return Err(Error::NonFinite {
                step: step + 1,
                last_finite: None,
            });
        }
        let inv = 1.0 / idx.len() as f32;
        for (_, g) in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= inv);
        }
        self.adam.step(&mut self.params, &grads)?;
        Ok(LossRecord {
            step: step + 1,
            report,
        })
    }

    /// Train up to `cfg.steps`, calling `on_record` after every step and `on_eval`
    /// after every scheduled evaluation.
    pub fn run(
        &mut self,
        train: &Dataset,
        test: Option<&Dataset>,
        mut on_record: impl FnMut(&LossRecord) -> Result<()>,
        mut on_eval: impl FnMut(u64, &MetricsReport) -> Result<()>,
    ) -> Result<()> {
        let mut last: Option<LossReport> = None;
        while self.adam.t < self.cfg.steps {
            let rec = match self.step(train) {
                Ok(r) => r,
                Err(Error::NonFinite { step, .. }) => {
                    return Err(Error::NonFinite {
                        step,
                        last_finite: last,
                    })
                }
                Err(e) => return Err(e),
            };
            on_record(&rec)?;
            last = Some(rec.report);
            let every = self.cfg.eval_every;
            if let (Some(test), true) = (test, every > 0 && self.adam.t % every == 0) {
                let report = self.evaluate(test, &self.cfg.degradation.clone())?;
                on_eval(self.adam.t, &report)?;
            }
        }
        Ok(())
    }

    pub fn predict(&self, sample: &Sample, degradation: &Degradation) -> Result<Prediction> {
        predict_sample(&self.model, &self.params, &self.classes, sample, degradation)
    }

    pub fn evaluate(&self, data: &Dataset, degradation: &Degradation) -> Result<MetricsReport> {
        self.check_classes(data)?;
        evaluate(&self.model, &self.params, &self.classes, data, degradation)
    }
}

/// Model outputs for one sample.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub change: ChangeMask,
    pub map_post: Option<SemanticMap>,
    /// `[K, D_f, H_s, W_s]` per scale for attention fusion.
    pub attention: Vec<Option<Tensor<f32>>>,
}

pub fn predict_sample(
    model: &ChangeModel,
    params: &ParamStore<f32>,
    classes: &Arc<ClassSet>,
    sample: &Sample,
    degradation: &Degradation,
) -> Result<Prediction> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let map = if model.config().regime.uses_map() {
        Some(match degradation {
            Degradation::PredictedPremap => {
                model.predict_premap(&mut tape, &bound, &sample.image_pre, classes.clone())?
            }
            d => map_input(d, &sample.map_pre)?,
        })
    } else {
        None
    };
    let input = ModelInput {
        image_pre: &sample.image_pre,
        image_post: &sample.image_post,
        map_pre: map.as_ref(),
    };
    let out = model.forward(&mut tape, &bound, input)?;
    let change = binary_prediction(&tape, out.binary_logits, out.size)?;
    let map_post = out
        .semantic_logits
        .map(|l| semantic_prediction(&tape, l, out.size, classes.clone()))
        .transpose()?;
    let attention = out
        .attention
        .iter()
        .map(|a| a.map(|v| tape.value(v).clone()))
        .collect();
    Ok(Prediction {
        change,
        map_post,
        attention,
    })
}

/// Pooled-count metrics over a dataset.
pub fn evaluate(
    model: &ChangeModel,
    params: &ParamStore<f32>,
    classes: &Arc<ClassSet>,
    data: &Dataset,
    degradation: &Degradation,
) -> Result<MetricsReport> {
    if *data.classes != **classes {
        return Err(Error::Data("dataset class set differs from the model's".into()));
    }
    let mut acc = MetricsAccumulator::new(classes.len());
    for (_, s) in &data.samples {
        let p = predict_sample(model, params, classes, s, degradation)?;
        acc.add(&s.change, &p.change, p.map_post.as_ref().map(|m| (&s.map_post, m)))?;
    }
    acc.finish()
}

/// Model and parameters restored from a checkpoint.
pub fn load_model(ckpt: &Checkpoint) -> Result<(ExperimentConfig, ChangeModel, Arc<ClassSet>)> {
    let cfg = ckpt.config()?;
    let classes = Arc::new(ckpt.classes.clone());
    let model = ChangeModel::new(cfg.model_config(classes.len()))?;
    let expected = model.init_params::<f32>(0);
    for (name, t) in expected.iter() {
        match ckpt.params.get(name) {
            Some(p) if p.shape() == t.shape() => {}
            _ => {
                return Err(Error::Data(format!(
                    "checkpoint parameter {name} is missing or has the wrong shape"
                )))
            }
        }
    }
    Ok((cfg, model, classes))
}

/// One row of a results matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixRow {
    pub regime: Regime,
    pub fusion: FusionKind,
    pub k: usize,
    pub seed: u64,
    pub label: String,
    pub result: std::result::Result<MetricsReport, String>,
    pub wall_s: f64,
}

pub const MATRIX_HEADER: &str = "regime,fusion,K,seed,bc,sc,scs,miou,wall_s";

impl MatrixRow {
    /// K is only meaningful for attention fusion; concat rows report 0.
    pub fn k_column(&self) -> usize {
        match self.fusion {
            FusionKind::MapFormer => self.k,
            FusionKind::Concat => 0,
        }
    }

    pub fn csv_line(&self) -> String {
        let f = |v: Option<f64>| v.map_or_else(|| "nan".to_string(), |x| format!("{x:.6}"));
        let (bc, sc, scs, miou) = match &self.result {
            Ok(r) => (
                Some(r.bc),
                r.sc.as_ref().map(|s| s.score),
                r.scs,
                r.miou.as_ref().map(|s| s.score),
            ),
            Err(_) => (None, None, None, None),
        };
        format!(
            "{},{},{},{},{},{},{},{},{:.3}",
            self.regime,
            self.fusion,
            self.k_column(),
            self.seed,
            f(bc),
            f(sc),
            f(scs),
            f(miou),
            self.wall_s
        )
    }
}

/// Train and test every configuration; failures are kept as rows.
/// Rows come back sorted by regime, fusion, K and seed.
pub fn run_matrix(
    grid: &[(String, ExperimentConfig)],
    train: &Dataset,
    test: &Dataset,
    mut progress: impl FnMut(&MatrixRow),
) -> Vec<MatrixRow> {
    let mut rows: Vec<MatrixRow> = grid
        .iter()
        .map(|(label, cfg)| {
            let start = Instant::now();
            let result = (|| {
                let mut t = Trainer::new(cfg.clone(), train.classes.clone())?;
                t.run(train, None, |_| Ok(()), |_, _| Ok(()))?;
                t.evaluate(test, &cfg.degradation)
            })()
            .map_err(|e| e.to_string());
            let row = MatrixRow {
                regime: cfg.regime,
                fusion: cfg.fusion_kind,
                k: cfg.k,
                seed: cfg.seed,
                label: label.clone(),
                result,
                wall_s: start.elapsed().as_secs_f64(),
            };
            progress(&row);
            row
        })
        .collect();
    rows.sort_by(|a, b| {
        (a.regime, a.fusion, a.k_column(), a.seed).cmp(&(b.regime, b.fusion, b.k_column(), b.seed))
    });
    rows
}

pub fn write_matrix_csv(rows: &[MatrixRow], path: &Path) -> Result<()> {
    let mut s = String::from(MATRIX_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv_line());
        s.push('\n');
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Files written by [`train_to_dir`].
pub const CHECKPOINT_FILE: &str = "checkpoint.cdp";
pub const LOSS_LOG_FILE: &str = "loss_log.jsonl";
pub const EVAL_LOG_FILE: &str = "eval_log.jsonl";

/// Train from the configured manifests, writing checkpoint and logs into `out_dir`.
/// An existing checkpoint in `out_dir` with matching settings is resumed.
pub fn train_to_dir(cfg: &ExperimentConfig, out_dir: &Path, resume: bool) -> Result<Checkpoint> {
    let train_path = cfg
        .train_manifest
        .as_ref()
        .ok_or_else(|| Error::Config("data.train is not set".into()))?;
    let train = Dataset::load(train_path)?;
    let test = cfg.test_manifest.as_ref().map(|p| Dataset::load(p)).transpose()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let ckpt_path = out_dir.join(CHECKPOINT_FILE);
    let mut trainer = if resume && ckpt_path.exists() {
        Trainer::resume(cfg.clone(), &Checkpoint::load(&ckpt_path)?)?
    } else {
        Trainer::new(cfg.clone(), train.classes.clone())?
    };
    let open = |name: &str, append: bool| -> Result<std::fs::File> {
        let p = out_dir.join(name);
        std::fs::OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(&p)
            .map_err(|e| Error::io(&p, e))
    };
    let append = trainer.step_count() > 0;
    let mut loss_log = open(LOSS_LOG_FILE, append)?;
    let mut eval_log = open(EVAL_LOG_FILE, append)?;
    let loss_path = out_dir.join(LOSS_LOG_FILE);
    let eval_path = out_dir.join(EVAL_LOG_FILE);
    trainer.run(
        &train,
        test.as_ref(),
        |rec| {
            let line = serde_json::to_string(rec).expect("serializable");
            writeln!(loss_log, "{line}").map_err(|e| Error::io(&loss_path, e))
        },
        |step, report| {
            let mut v = serde_json::to_value(report).expect("serializable");
            v["step"] = step.into();
            log::info!("step {step}: test bc {:.4}", report.bc);
            writeln!(eval_log, "{v}").map_err(|e| Error::io(&eval_path, e))
        },
    )?;
    let ckpt = trainer.checkpoint();
    ckpt.save(&ckpt_path)?;
    Ok(ckpt)
}
