//! Checkpoint-driven prediction, attention export and scoring of prediction folders.

use std::path::Path;
use std::sync::Arc;

use crate::dataset::{Manifest, ManifestEntry};
use crate::error::{Error, Result};
use crate::fusion::{export_attention_argmax, FusionKind};
use crate::metrics::{MetricsAccumulator, MetricsReport};
use crate::model::{ChangeModel, Degradation};
use crate::params::ParamStore;
use crate::raster::{read_map, read_mask, write_map, write_mask, ClassSet};
use crate::train::{load_model, predict_sample, Checkpoint};

/// A checkpoint ready for inference.
pub struct Predictor {
    pub model: ChangeModel,
    pub params: ParamStore<f32>,
    pub classes: Arc<ClassSet>,
    pub degradation: Degradation,
}

impl Predictor {
    /// `degradation` overrides the one the checkpoint was trained with.
    pub fn from_checkpoint(ckpt: Checkpoint, degradation: Option<Degradation>) -> Result<Self> {
        let (cfg, model, classes) = load_model(&ckpt)?;
        let degradation = degradation.unwrap_or(cfg.degradation);
        degradation.validate(classes.len())?;
        if !model.config().regime.uses_map() && degradation != Degradation::None {
            return Err(Error::Config(format!(
                "degradation {degradation} needs a regime with a pre-change map"
            )));
        }
        if degradation.map_classes(classes.len()) != model.config().map_classes {
            return Err(Error::Config(format!(
                "degradation {degradation} yields {} map classes, the checkpoint expects {}",
                degradation.map_classes(classes.len()),
                model.config().map_classes
            )));
        }
        Ok(Self {
            model,
            params: ckpt.params,
            classes,
            degradation,
        })
    }

    fn manifest(&self, path: &Path) -> Result<Manifest> {
        let m = Manifest::read(path)?;
        if *m.classes()? != *self.classes {
            return Err(Error::Data(format!(
                "{}: class set differs from the checkpoint's",
                path.display()
            )));
        }
        Ok(m)
    }

    /// Write the predicted change mask (and post-change map when the model has a
    /// semantic head) of every sample under the manifest's file names.
    pub fn predict_to_dir(&self, manifest: &Path, out_dir: &Path) -> Result<usize> {
        let m = self.manifest(manifest)?;
        std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        for e in &m.entries {
            let s = m.load_sample(e, &self.classes)?;
            let p = predict_sample(&self.model, &self.params, &self.classes, &s, &self.degradation)?;
            write_mask(&p.change, &out_dir.join(&e.change))?;
            if let Some(m2) = &p.map_post {
                write_map(m2, &out_dir.join(&e.map_post))?;
            }
        }
        Ok(m.entries.len())
    }

    /// Argmax-over-K attention rasters for `channels` at every scale of each
    /// selected sample, under `out_dir/<id>/`.
    pub fn export_attention(
        &self,
        manifest: &Path,
        ids: Option<&[u64]>,
        channels: &[usize],
        out_dir: &Path,
    ) -> Result<usize> {
        if self.model.config().fusion_kind != FusionKind::MapFormer {
            return Err(Error::Config("attention export needs mapformer fusion".into()));
        }
        let m = self.manifest(manifest)?;
        let selected: Vec<&ManifestEntry> = match ids {
            Some(ids) => ids
                .iter()
                .map(|id| {
                    m.entries
                        .iter()
                        .find(|e| e.id == *id)
                        .ok_or_else(|| Error::Data(format!("sample {id} is not in the manifest")))
                })
                .collect::<Result<_>>()?,
            None => m.entries.iter().collect(),
        };
        let mut written = 0;
        for e in selected {
            let s = m.load_sample(e, &self.classes)?;
            let p = predict_sample(&self.model, &self.params, &self.classes, &s, &self.degradation)?;
            let dir = out_dir.join(format!("{:05}", e.id));
            std::fs::create_dir_all(&dir).map_err(|err| Error::io(&dir, err))?;
            for (scale, a) in p.attention.iter().enumerate() {
                let a = a.as_ref().ok_or_else(|| Error::Contract("missing attention".into()))?;
                for labels in export_attention_argmax(a, channels)? {
                    labels.write(&dir, scale)?;
                    written += 1;
                }
            }
        }
        Ok(written)
    }
}

/// Score the predictions in `pred_dir` (named as in the manifest) against ground
/// truth. Semantic scores are reported only when every post-change map is present.
pub fn score_directory(manifest: &Path, pred_dir: &Path) -> Result<MetricsReport> {
    let m = Manifest::read(manifest)?;
    let classes = m.classes()?;
    let semantic = m.entries.iter().all(|e| pred_dir.join(&e.map_post).exists());
    let mut acc = MetricsAccumulator::new(classes.len());
    for e in &m.entries {
        let b = read_mask(&m.dir.join(&e.change))?;
        let b_hat = read_mask(&pred_dir.join(&e.change))?;
        if semantic {
            let m2 = read_map(&m.dir.join(&e.map_post), classes.clone())?;
            let m2_hat = read_map(&pred_dir.join(&e.map_post), classes.clone())?;
            acc.add(&b, &b_hat, Some((&m2, &m2_hat)))?;
        } else {
            acc.add(&b, &b_hat, None)?;
        }
    }
    acc.finish()
}
