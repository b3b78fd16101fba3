//! Flat `key = value` configuration files.
//!
//! One assignment per line, `#` starts a comment, dotted keys address nested
//! settings. Overrides (`key=value`) are applied after the file. Every key has a
//! default and [`RunConfig::to_text`] echoes all of them.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::Degradation;
use crate::synth::WorldConfig;
use crate::train::ExperimentConfig;

/// Everything a CLI invocation can configure.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub world: WorldConfig,
    /// Samples written to the train and test splits by data generation.
    pub train_samples: usize,
    pub test_samples: usize,
    pub experiment: ExperimentConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            world: WorldConfig::default(),
            train_samples: 200,
            test_samples: 50,
            experiment: ExperimentConfig::default(),
        }
    }
}

const DEFAULT_LOW_RES_FACTOR: usize = 8;

/// Degradation is spread over three keys; it is assembled once all are known.
#[derive(Debug, Clone)]
struct DegradationKeys {
    kind: String,
    factor: usize,
    mapping: BTreeMap<u8, u8>,
}

impl DegradationKeys {
    fn of(d: &Degradation) -> Self {
        let mut k = Self {
            kind: "none".into(),
            factor: DEFAULT_LOW_RES_FACTOR,
            mapping: BTreeMap::new(),
        };
        match d {
            Degradation::None => {}
            Degradation::HighLevel(m) => {
                k.kind = "high_level".into();
                k.mapping = m.clone();
            }
            Degradation::LowRes(f) => {
                k.kind = "low_res".into();
                k.factor = *f;
            }
            Degradation::PredictedPremap => k.kind = "predicted_premap".into(),
        }
        k
    }

    fn build(&self) -> Result<Degradation> {
        Ok(match self.kind.as_str() {
            "none" => Degradation::None,
            "high_level" => Degradation::HighLevel(self.mapping.clone()),
            "low_res" => Degradation::LowRes(self.factor),
            "predicted_premap" => Degradation::PredictedPremap,
            other => {
                return Err(Error::Config(format!(
                    "unknown degradation {other:?} (none, high_level, low_res, predicted_premap)"
                )))
            }
        })
    }
}

fn mapping_text(m: &BTreeMap<u8, u8>) -> String {
    m.iter().map(|(a, b)| format!("{a}:{b}")).collect::<Vec<_>>().join(",")
}

fn parse_mapping(v: &str) -> std::result::Result<BTreeMap<u8, u8>, String> {
    let mut out = BTreeMap::new();
    for pair in v.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (a, b) = pair
            .split_once(':')
            .ok_or_else(|| format!("expected class:superclass pairs, got {pair:?}"))?;
        let a: u8 = parse(a.trim())?;
        let b: u8 = parse(b.trim())?;
        if out.insert(a, b).is_some() {
            return Err(format!("class {a} is mapped twice"));
        }
    }
    Ok(out)
}

fn parse<T: FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse::<T>()
        .map_err(|_| format!("expected {}, got {v:?}", std::any::type_name::<T>()))
}

fn parse_bool(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("expected true or false, got {v:?}")),
    }
}

fn parse_list(v: &str) -> std::result::Result<Vec<usize>, String> {
    v.split(',').map(|p| parse(p.trim())).collect()
}

fn parse_enum<T: FromStr<Err = Error>>(v: &str) -> std::result::Result<T, String> {
    v.parse::<T>().map_err(|e| match e {
        Error::Config(m) => m,
        e => e.to_string(),
    })
}

fn opt_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

fn path_text(p: &Option<PathBuf>) -> String {
    p.as_ref().map_or_else(String::new, |p| p.display().to_string())
}

/// Canonical key order of the echo.
pub const KEYS: &[&str] = &[
    "seed",
    "regime",
    "fusion.kind",
    "fusion.K",
    "fusion.hidden",
    "fusion.tie_scales",
    "encoder.channels",
    "encoder.map_channels",
    "head.scd_placement",
    "head.contrastive",
    "head.stop_grad_on_map",
    "head.project_map",
    "head.width",
    "head.proj_hidden",
    "loss.w_contrastive",
    "loss.w_binary",
    "loss.w_semantic",
    "optim.lr",
    "optim.beta1",
    "optim.beta2",
    "optim.eps",
    "degradation",
    "degradation.factor",
    "degradation.mapping",
    "train.batch_size",
    "train.steps",
    "train.eval_every",
    "data.train",
    "data.test",
    "world.height",
    "world.width",
    "world.classes",
    "world.regions",
    "world.change_rate",
    "world.blobs",
    "world.noise",
    "world.drift",
    "world.seed",
    "world.train",
    "world.test",
];

struct Draft {
    cfg: RunConfig,
    deg: DegradationKeys,
}

impl Draft {
    fn new(cfg: RunConfig) -> Self {
        let deg = DegradationKeys::of(&cfg.experiment.degradation);
        Self { cfg, deg }
    }

    fn get(&self, key: &str) -> String {
        let e = &self.cfg.experiment;
        let w = &self.cfg.world;
        match key {
            "seed" => e.seed.to_string(),
            "regime" => e.regime.to_string(),
            "fusion.kind" => e.fusion_kind.to_string(),
            "fusion.K" => e.k.to_string(),
            "fusion.hidden" => e.fusion_hidden.to_string(),
            "fusion.tie_scales" => e.tie_scales.to_string(),
            "encoder.channels" => e
                .encoder
                .channels
                .iter()
                .map(|c| c.to_string())
                .collect::<Vec<_>>()
                .join(","),
            "encoder.map_channels" => e.encoder.map_channels.to_string(),
            "head.scd_placement" => e.head.scd_placement.to_string(),
            "head.contrastive" => e.head.contrastive_enabled.to_string(),
            "head.stop_grad_on_map" => e.head.stop_grad_on_map.to_string(),
            "head.project_map" => e.head.project_map.to_string(),
            "head.width" => e.head.width.to_string(),
            "head.proj_hidden" => e.head.proj_hidden.to_string(),
            "loss.w_contrastive" => e.head.weights.contrastive.to_string(),
            "loss.w_binary" => e.head.weights.binary.to_string(),
            "loss.w_semantic" => e.head.weights.semantic.to_string(),
            "optim.lr" => e.adam.lr.to_string(),
            "optim.beta1" => e.adam.beta1.to_string(),
            "optim.beta2" => e.adam.beta2.to_string(),
            "optim.eps" => e.adam.eps.to_string(),
            "degradation" => self.deg.kind.clone(),
            "degradation.factor" => self.deg.factor.to_string(),
            "degradation.mapping" => mapping_text(&self.deg.mapping),
            "train.batch_size" => e.batch_size.to_string(),
            "train.steps" => e.steps.to_string(),
            "train.eval_every" => e.eval_every.to_string(),
            "data.train" => path_text(&e.train_manifest),
            "data.test" => path_text(&e.test_manifest),
            "world.height" => w.height.to_string(),
            "world.width" => w.width.to_string(),
            "world.classes" => w.num_classes.to_string(),
            "world.regions" => w.num_seed_regions.to_string(),
            "world.change_rate" => w.change_rate_target.to_string(),
            "world.blobs" => w.change_blob_count.to_string(),
            "world.noise" => w.appearance_noise_sigma.to_string(),
            "world.drift" => w.temporal_drift_sigma.to_string(),
            "world.seed" => w.seed.to_string(),
            "world.train" => self.cfg.train_samples.to_string(),
            "world.test" => self.cfg.test_samples.to_string(),
            _ => unreachable!("key list and getters disagree on {key}"),
        }
    }

    fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        let e = &mut self.cfg.experiment;
        let w = &mut self.cfg.world;
        match key {
            "seed" => e.seed = parse(v)?,
            "regime" => e.regime = parse_enum(v)?,
            "fusion.kind" => e.fusion_kind = parse_enum(v)?,
            "fusion.K" => e.k = parse(v)?,
            "fusion.hidden" => e.fusion_hidden = parse(v)?,
            "fusion.tie_scales" => e.tie_scales = parse_bool(v)?,
            "encoder.channels" => e.encoder.channels = parse_list(v)?,
            "encoder.map_channels" => e.encoder.map_channels = parse(v)?,
            "head.scd_placement" => e.head.scd_placement = parse_enum(v)?,
            "head.contrastive" => e.head.contrastive_enabled = parse_bool(v)?,
            "head.stop_grad_on_map" => e.head.stop_grad_on_map = parse_bool(v)?,
            "head.project_map" => e.head.project_map = parse_bool(v)?,
            "head.width" => e.head.width = parse(v)?,
            "head.proj_hidden" => e.head.proj_hidden = parse(v)?,
            "loss.w_contrastive" => e.head.weights.contrastive = parse(v)?,
            "loss.w_binary" => e.head.weights.binary = parse(v)?,
            "loss.w_semantic" => e.head.weights.semantic = parse(v)?,
            "optim.lr" => e.adam.lr = parse(v)?,
            "optim.beta1" => e.adam.beta1 = parse(v)?,
            "optim.beta2" => e.adam.beta2 = parse(v)?,
            "optim.eps" => e.adam.eps = parse(v)?,
            "degradation" => self.deg.kind = v.to_string(),
            "degradation.factor" => self.deg.factor = parse(v)?,
            "degradation.mapping" => self.deg.mapping = parse_mapping(v)?,
            "train.batch_size" => e.batch_size = parse(v)?,
            "train.steps" => e.steps = parse(v)?,
            "train.eval_every" => e.eval_every = parse(v)?,
            "data.train" => e.train_manifest = opt_path(v),
            "data.test" => e.test_manifest = opt_path(v),
            "world.height" => w.height = parse(v)?,
            "world.width" => w.width = parse(v)?,
            "world.classes" => w.num_classes = parse(v)?,
            "world.regions" => w.num_seed_regions = parse(v)?,
            "world.change_rate" => w.change_rate_target = parse(v)?,
            "world.blobs" => w.change_blob_count = parse(v)?,
            "world.noise" => w.appearance_noise_sigma = parse(v)?,
            "world.drift" => w.temporal_drift_sigma = parse(v)?,
            "world.seed" => w.seed = parse(v)?,
            "world.train" => self.cfg.train_samples = parse(v)?,
            "world.test" => self.cfg.test_samples = parse(v)?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    fn finish(mut self) -> Result<RunConfig> {
        self.cfg.experiment.degradation = self.deg.build()?;
        self.cfg.world.validate()?;
        self.cfg.experiment.validate()?;
        self.cfg
            .experiment
            .degradation
            .validate(self.cfg.world.num_classes)?;
        Ok(self.cfg)
    }
}

/// Split `key = value`; `None` for blank and comment-only lines.
fn split_line(line: &str) -> Option<std::result::Result<(&str, &str), String>> {
    let line = line.split('#').next().unwrap_or("").trim();
    if line.is_empty() {
        return None;
    }
    Some(match line.split_once('=') {
        Some((k, v)) if !k.trim().is_empty() => Ok((k.trim(), v.trim())),
        _ => Err(format!("expected `key = value`, got {line:?}")),
    })
}

impl RunConfig {
    /// Parse file text (`origin` names it in errors), then apply overrides in order.
    pub fn parse(text: &str, origin: &str, overrides: &[String]) -> Result<Self> {
        let mut draft = Draft::new(RunConfig::default());
        let mut seen = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let n = i + 1;
            let fail = |msg: String| Error::Config(format!("{origin}:{n}: {msg}"));
            let Some(kv) = split_line(line) else { continue };
            let (k, v) = kv.map_err(fail)?;
            if let Some(prev) = seen.insert(k.to_string(), n) {
                return Err(fail(format!("{k} already set on line {prev}")));
            }
            draft.set(k, v).map_err(|m| fail(format!("{k}: {m}")))?;
        }
        for o in overrides {
            let fail = |msg: String| Error::Config(format!("--set {o}: {msg}"));
            let (k, v) = split_line(o)
                .unwrap_or_else(|| Err("empty override".into()))
                .map_err(fail)?;
            draft.set(k, v).map_err(fail)?;
        }
        draft.finish()
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                Self::parse(&text, &p.display().to_string(), overrides)
            }
            None => Self::parse("", "<defaults>", overrides),
        }
    }

    /// Every key with its effective value, in canonical order.
    pub fn to_text(&self) -> String {
        let draft = Draft::new(self.clone());
        let keys: String = KEYS.iter().map(|k| format!("{k} = {}\n", draft.get(k))).collect();
        format!("{PROTOCOL_NOTE}\n{keys}")
    }
}

/// Leads every echoed config: the defaults are a desk-scale substitute protocol
/// (synthetic world, small encoder, short training), not a benchmark setup.
pub const PROTOCOL_NOTE: &str = "# desk-scale defaults: synthetic data, small pyramid encoder, short training";

/// Canonical text of the experiment keys only.
pub fn experiment_to_text(cfg: &ExperimentConfig) -> String {
    let draft = Draft::new(RunConfig {
        experiment: cfg.clone(),
        ..RunConfig::default()
    });
    KEYS.iter()
        .filter(|k| !k.starts_with("world."))
        .map(|k| format!("{k} = {}\n", draft.get(k)))
        .collect()
}

/// Inverse of [`experiment_to_text`].
pub fn experiment_from_text(text: &str) -> Result<ExperimentConfig> {
    let mut draft = Draft::new(RunConfig::default());
    for (i, line) in text.lines().enumerate() {
        let fail = |msg: String| Error::Data(format!("stored config line {}: {msg}", i + 1));
        let Some(kv) = split_line(line) else { continue };
        let (k, v) = kv.map_err(fail)?;
        if k.starts_with("world.") {
            return Err(fail(format!("unexpected key {k}")));
        }
        draft.set(k, v).map_err(fail)?;
    }
    draft.cfg.experiment.degradation = draft.deg.build()?;
    draft.cfg.experiment.validate()?;
    Ok(draft.cfg.experiment)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::{FusionKind, Regime};

    #[test]
    fn empty_file_echoes_every_default() {
        let cfg = RunConfig::parse("", "t", &[]).unwrap();
        assert_eq!(cfg, RunConfig::default());
        let text = cfg.to_text();
        assert_eq!(text.lines().count(), KEYS.len() + 1);
        assert!(text.starts_with("# desk-scale"));
        assert!(text.contains("fusion.K = 4\n"));
        assert!(text.contains("optim.lr = 0.001\n"));
        assert_eq!(RunConfig::parse(&text, "echo", &[]).unwrap(), cfg);
    }

    #[test]
    fn zero_k_names_the_field() {
        let err = RunConfig::parse("fusion.K = 0", "t", &[]).unwrap_err();
        assert!(err.to_string().contains("FusionConfig.K"), "{err}");
    }

    #[test]
    fn override_beats_file() {
        let cfg = RunConfig::parse("fusion.K = 4\n", "t", &["fusion.K=6".into()]).unwrap();
        assert_eq!(cfg.experiment.k, 6);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let text = "# header\nseed = 3\n\nfusion.Q = 2\n";
        let err = RunConfig::parse(text, "cfg.txt", &[]).unwrap_err().to_string();
        assert!(err.contains("cfg.txt:4") && err.contains("fusion.Q"), "{err}");

        let err = RunConfig::parse("seed = x", "c", &[]).unwrap_err().to_string();
        assert!(err.contains("c:1"), "{err}");
        let err = RunConfig::parse("seed 3", "c", &[]).unwrap_err().to_string();
        assert!(err.contains("c:1"), "{err}");
        let err = RunConfig::parse("seed = 1\nseed = 2", "c", &[]).unwrap_err().to_string();
        assert!(err.contains("c:2"), "{err}");
        assert!(RunConfig::parse("", "c", &["nope=1".into()]).is_err());
    }

    #[test]
    fn constraint_violations_are_config_errors() {
        for text in [
            "regime = bi_temporal",
            "optim.lr = 0",
            "train.steps = 0",
            "degradation = high_level\ndegradation.mapping = 0:0,1:1",
            "world.change_rate = 1.5",
            "degradation = sideways",
        ] {
            assert!(
                matches!(RunConfig::parse(text, "c", &[]), Err(Error::Config(_))),
                "{text}"
            );
        }
    }

    #[test]
    fn comments_lists_and_degradations() {
        let text = "regime = bi_temporal # no map\nfusion.kind = concat\n\
                    encoder.channels = 8, 16\n";
        let cfg = RunConfig::parse(text, "c", &[]).unwrap();
        assert_eq!(cfg.experiment.regime, Regime::BiTemporal);
        assert_eq!(cfg.experiment.fusion_kind, FusionKind::Concat);
        assert_eq!(cfg.experiment.encoder.channels, vec![8, 16]);

        let text = "degradation = high_level\ndegradation.mapping = 0:0,1:0,2:1,3:1,4:1\n";
        let cfg = RunConfig::parse(text, "c", &[]).unwrap();
        assert_eq!(cfg.experiment.degradation.map_classes(5), 2);
        let cfg = RunConfig::parse("degradation = low_res", "c", &[]).unwrap();
        assert_eq!(cfg.experiment.degradation, Degradation::LowRes(8));
    }

    #[test]
    fn experiment_text_round_trips() {
        let text = "degradation = low_res\ndegradation.factor = 4\nfusion.K = 3\ndata.train = a/b.tsv";
        let cfg = RunConfig::parse(text, "c", &[]).unwrap().experiment;
        let echoed = experiment_to_text(&cfg);
        assert!(!echoed.contains("world."));
        assert_eq!(experiment_from_text(&echoed).unwrap(), cfg);
    }
}
