//! Change detection scores from integer pixel counts.
//!
//! * BC: IoU of the binary change masks.
//! * SC: class-mean IoU restricted to pixels the ground truth marks as changed.
//! * SCS: `(BC + SC) / 2`.
//! * mIoU: class-mean IoU over all pixels.
//!
//! Classes with an empty union are left out of the means. When no class is left
//! the score is 1.0 and the report flags the empty denominator.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{ChangeMask, SemanticMap};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IouCounts {
    pub intersection: u64,
    pub union: u64,
}

impl IouCounts {
    fn add(&mut self, o: IouCounts) {
        self.intersection += o.intersection;
        self.union += o.union;
    }
}

/// Mean IoU over classes with positive union, the classes counted, and whether
/// the mean was vacuous.
fn class_mean(counts: &[IouCounts]) -> (f64, Vec<usize>, bool) {
    let counted: Vec<usize> = (0..counts.len()).filter(|&c| counts[c].union > 0).collect();
    if counted.is_empty() {
        return (1.0, counted, true);
    }
    let sum: f64 = counted
        .iter()
        .map(|&c| counts[c].intersection as f64 / counts[c].union as f64)
        .sum();
    (sum / counted.len() as f64, counted, false)
}

fn check_mask_sizes(a: &ChangeMask, b: &ChangeMask) -> Result<()> {
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(Error::Data(format!(
            "mask sizes differ: {}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    Ok(())
}

fn check_maps(a: &SemanticMap, b: &SemanticMap) -> Result<()> {
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(Error::Data(format!(
            "map sizes differ: {}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    if a.classes() != b.classes() {
        return Err(Error::Data("maps use different class sets".into()));
    }
    Ok(())
}

pub fn binary_change_counts(b: &ChangeMask, pred: &ChangeMask) -> Result<IouCounts> {
    check_mask_sizes(b, pred)?;
    let mut c = IouCounts::default();
    for (&x, &y) in b.values().iter().zip(pred.values()) {
        c.intersection += (x & y) as u64;
        c.union += (x | y) as u64;
    }
    Ok(c)
}

fn ratio_or_one(c: IouCounts) -> f64 {
    if c.union == 0 {
        1.0
    } else {
        c.intersection as f64 / c.union as f64
    }
}

/// IoU of the changed pixels; two empty masks score 1.0.
pub fn binary_change_iou(b: &ChangeMask, pred: &ChangeMask) -> Result<f64> {
    Ok(ratio_or_one(binary_change_counts(b, pred)?))
}

/// Per-class counts over pixels where `within` is set (all pixels when `None`).
fn class_counts(
    truth: &SemanticMap,
    pred: &SemanticMap,
    within: Option<&ChangeMask>,
) -> Result<Vec<IouCounts>> {
    check_maps(truth, pred)?;
    if let Some(b) = within {
        if (b.height(), b.width()) != (truth.height(), truth.width()) {
            return Err(Error::Data("change mask and map sizes differ".into()));
        }
    }
    let mut counts = vec![IouCounts::default(); truth.num_classes()];
    for (p, (&t, &q)) in truth.labels().iter().zip(pred.labels()).enumerate() {
        if within.is_some_and(|b| b.values()[p] == 0) {
            continue;
        }
        if t == q {
            counts[t as usize].intersection += 1;
            counts[t as usize].union += 1;
        } else {
            counts[t as usize].union += 1;
            counts[q as usize].union += 1;
        }
    }
    Ok(counts)
}

/// Class-mean IoU with detail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub score: f64,
    pub per_class: Vec<IouCounts>,
    pub counted_classes: Vec<usize>,
    /// No class had a positive union; `score` is 1.0 by convention.
    pub empty_denominator: bool,
}

impl ClassScore {
    fn from_counts(per_class: Vec<IouCounts>) -> Self {
        let (score, counted_classes, empty_denominator) = class_mean(&per_class);
        Self {
            score,
            per_class,
            counted_classes,
            empty_denominator,
        }
    }
}

/// SC: class-mean IoU on the pixels changed in `b`.
pub fn semantic_change_score(
    m2: &SemanticMap,
    pred: &SemanticMap,
    b: &ChangeMask,
) -> Result<ClassScore> {
    Ok(ClassScore::from_counts(class_counts(m2, pred, Some(b))?))
}

pub fn scs(bc: f64, sc: f64) -> f64 {
    (bc + sc) / 2.0
}

pub fn miou(m: &SemanticMap, pred: &SemanticMap) -> Result<ClassScore> {
    Ok(ClassScore::from_counts(class_counts(m, pred, None)?))
}

/// Means of per-sample scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacroScores {
    pub bc: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub sc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub scs: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub miou: Option<f64>,
}

/// Pooled-count scores; semantic fields are absent when no post-change map was predicted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub samples: usize,
    pub bc: f64,
    pub bc_counts: IouCounts,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub sc: Option<ClassScore>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub scs: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub miou: Option<ClassScore>,
    /// Per-sample averaging, reported next to the pooled numbers.
    pub per_sample_mean: MacroScores,
}

/// Sums counts over samples; scores are computed once at the end.
#[derive(Debug, Clone)]
pub struct MetricsAccumulator {
    num_classes: usize,
    bc: IouCounts,
    sc: Vec<IouCounts>,
    miou: Vec<IouCounts>,
    semantic: Option<bool>,
    per_sample: Vec<(f64, Option<(f64, f64)>)>,
}

impl MetricsAccumulator {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            bc: IouCounts::default(),
            sc: vec![IouCounts::default(); num_classes],
            miou: vec![IouCounts::default(); num_classes],
            semantic: None,
            per_sample: Vec::new(),
        }
    }

    /// Add one sample; `maps` is `(m2, predicted m2)` when semantic output exists.
    /// Either every sample carries maps or none does.
    pub fn add(
        &mut self,
        b: &ChangeMask,
        pred: &ChangeMask,
        maps: Option<(&SemanticMap, &SemanticMap)>,
    ) -> Result<()> {
        if self.semantic.is_some_and(|s| s != maps.is_some()) {
            return Err(Error::Data(
                "samples mix semantic and binary-only predictions".into(),
            ));
        }
        let bc = binary_change_counts(b, pred)?;
        let sem = match maps {
            Some((m2, m2_pred)) => {
                if m2.num_classes() != self.num_classes {
                    return Err(Error::Data(format!(
                        "map has {} classes, metrics configured for {}",
                        m2.num_classes(),
                        self.num_classes
                    )));
                }
                let sc = class_counts(m2, m2_pred, Some(b))?;
                let mi = class_counts(m2, m2_pred, None)?;
                for c in 0..self.num_classes {
                    self.sc[c].add(sc[c]);
                    self.miou[c].add(mi[c]);
                }
                Some((class_mean(&sc).0, class_mean(&mi).0))
            }
            None => None,
        };
        self.bc.add(bc);
        self.semantic = Some(maps.is_some());
        self.per_sample.push((ratio_or_one(bc), sem));
        Ok(())
    }

    pub fn finish(&self) -> Result<MetricsReport> {
        let n = self.per_sample.len();
        if n == 0 {
            return Err(Error::Data("no samples were scored".into()));
        }
        let semantic = self.semantic == Some(true);
        let bc = ratio_or_one(self.bc);
        let sc = semantic.then(|| ClassScore::from_counts(self.sc.clone()));
        let miou = semantic.then(|| ClassScore::from_counts(self.miou.clone()));
        let mean = |f: &dyn Fn(&(f64, Option<(f64, f64)>)) -> f64| {
            self.per_sample.iter().map(f).sum::<f64>() / n as f64
        };
        let m_bc = mean(&|s| s.0);
        let m_sc = semantic.then(|| mean(&|s| s.1.expect("semantic").0));
        let m_scs = semantic.then(|| mean(&|s| scs(s.0, s.1.expect("semantic").0)));
        let m_miou = semantic.then(|| mean(&|s| s.1.expect("semantic").1));
        Ok(MetricsReport {
            samples: n,
            bc,
            bc_counts: self.bc,
            scs: sc.as_ref().map(|s| scs(bc, s.score)),
            sc,
            miou,
            per_sample_mean: MacroScores {
                bc: m_bc,
                sc: m_sc,
                scs: m_scs,
                miou: m_miou,
            },
        })
    }
}
