//! Seeded generator of co-registered bi-temporal samples.
//!
//! Maps are Voronoi partitions with random class per cell; post-change maps stamp
//! elliptical blobs of new classes; images render each class with a fixed palette
//! colour plus pixel noise, and the post epoch adds a per-class colour drift.
//! Every sample is a pure function of `(seed, sample index)`.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dataset::{Manifest, ManifestEntry};
use crate::error::{Error, Result};
use crate::raster::{
    derive_change, write_image, write_map, write_mask, ChangeMask, ClassSet, ImageRaster, Sample,
    SemanticMap,
};

const STREAM_PALETTE: u64 = 0x5041_4c45_5454_4531;
const STREAM_MAP: u64 = 1;
const STREAM_CHANGE: u64 = 2;
const STREAM_NOISE_PRE: u64 = 3;
const STREAM_NOISE_POST: u64 = 4;
const STREAM_DRIFT: u64 = 5;

const BISECTION_STEPS: usize = 32;
const RATE_TOLERANCE: f64 = 0.2;
const MIN_PALETTE_DISTANCE: f64 = 0.3;

#[derive(Debug, Clone, PartialEq)]
pub struct WorldConfig {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    /// Voronoi site count.
    pub num_seed_regions: usize,
    /// Target fraction of changed pixels, in (0, 1).
    pub change_rate_target: f64,
    pub change_blob_count: usize,
    pub appearance_noise_sigma: f64,
    pub temporal_drift_sigma: f64,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            num_classes: 5,
            num_seed_regions: 12,
            change_rate_target: 0.05,
            change_blob_count: 3,
            appearance_noise_sigma: 0.1,
            temporal_drift_sigma: 0.05,
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(format!("WorldConfig: {msg}")));
        if self.height == 0 || self.width == 0 {
            return fail("height and width must be positive".into());
        }
        if !(2..=256).contains(&self.num_classes) {
            return fail(format!("num_classes {} must be in 2..=256", self.num_classes));
        }
        if self.num_seed_regions == 0 {
            return fail("num_seed_regions must be positive".into());
        }
        if !(self.change_rate_target > 0.0 && self.change_rate_target < 1.0) {
            return fail(format!(
                "change_rate_target {} must lie in (0,1)",
                self.change_rate_target
            ));
        }
        if !(self.appearance_noise_sigma >= 0.0 && self.temporal_drift_sigma >= 0.0) {
            return fail("sigmas must be non-negative".into());
        }
        Ok(())
    }

    pub fn class_set(&self) -> Arc<ClassSet> {
        Arc::new(ClassSet::numbered("class", self.num_classes).expect("validated class count"))
    }
}

/// Pre- or post-change acquisition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Epoch {
    Pre,
    Post,
}

/// splitmix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent stream `tag` of `seed`.
pub fn stream(seed: u64, tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix64(seed ^ mix64(tag)))
}

fn sample_seed(seed: u64, index: u64) -> u64 {
    mix64(mix64(seed).wrapping_add(index))
}

/// Class colours, kept apart by rejection sampling.
pub fn palette(cfg: &WorldConfig) -> Vec<[f64; 3]> {
    let mut rng = stream(cfg.seed, STREAM_PALETTE);
    let mut colors: Vec<[f64; 3]> = Vec::with_capacity(cfg.num_classes);
    let mut attempts = 0;
    while colors.len() < cfg.num_classes {
        let c = [(); 3].map(|_| rng.random_range(0.1..0.9));
        attempts += 1;
        let far = colors.iter().all(|o| {
            let d2: f64 = o.iter().zip(&c).map(|(a, b)| (a - b) * (a - b)).sum();
            d2.sqrt() >= MIN_PALETTE_DISTANCE
        });
        if far || attempts > 10_000 {
            colors.push(c);
        }
    }
    colors
}

fn voronoi_map<R: Rng>(cfg: &WorldConfig, classes: Arc<ClassSet>, rng: &mut R) -> SemanticMap {
    let sites: Vec<(f64, f64, u8)> = (0..cfg.num_seed_regions)
        .map(|_| {
            (
                rng.random_range(0.0..cfg.height as f64),
                rng.random_range(0.0..cfg.width as f64),
                rng.random_range(0..cfg.num_classes) as u8,
            )
        })
        .collect();
    let mut labels = Vec::with_capacity(cfg.height * cfg.width);
    for i in 0..cfg.height {
        for j in 0..cfg.width {
            let (y, x) = (i as f64 + 0.5, j as f64 + 0.5);
            let mut best = (f64::INFINITY, 0u8);
            for &(sy, sx, c) in &sites {
                let d = (sy - y).powi(2) + (sx - x).powi(2);
                if d < best.0 {
                    best = (d, c);
                }
            }
            labels.push(best.1);
        }
    }
    SemanticMap::new(cfg.height, cfg.width, labels, classes).expect("labels in range")
}

/// Voronoi partition map, deterministic in `cfg.seed`.
pub fn generate_map(cfg: &WorldConfig) -> Result<SemanticMap> {
    cfg.validate()?;
    Ok(voronoi_map(
        cfg,
        cfg.class_set(),
        &mut stream(cfg.seed, STREAM_MAP),
    ))
}

struct Blob {
    cy: f64,
    cx: f64,
    ra: f64,
    rb: f64,
    cos: f64,
    sin: f64,
    label_offset: usize,
}

fn stamp(m1: &SemanticMap, blobs: &[Blob], scale: f64) -> SemanticMap {
    let (h, w) = (m1.height(), m1.width());
    let c = m1.num_classes();
    let mut labels = m1.labels().to_vec();
    let mut inside = Vec::new();
    for b in blobs {
        let (ra, rb) = (b.ra * scale, b.rb * scale);
        let reach = ra.max(rb).ceil() as isize + 1;
        inside.clear();
        let (ci, cj) = (b.cy.floor() as isize, b.cx.floor() as isize);
        for i in (ci - reach).max(0)..(ci + reach + 1).min(h as isize) {
            for j in (cj - reach).max(0)..(cj + reach + 1).min(w as isize) {
                let (dy, dx) = (i as f64 + 0.5 - b.cy, j as f64 + 0.5 - b.cx);
                let u = (dx * b.cos + dy * b.sin) / ra;
                let v = (-dx * b.sin + dy * b.cos) / rb;
                if u * u + v * v <= 1.0 {
                    inside.push(i as usize * w + j as usize);
                }
            }
        }
        if inside.is_empty() {
            continue;
        }
        let mut hist = vec![0usize; c];
        for &p in &inside {
            hist[m1.labels()[p] as usize] += 1;
        }
        let mut majority = 0;
        for (k, &n) in hist.iter().enumerate() {
            if n > hist[majority] {
                majority = k;
            }
        }
        let new = ((majority + b.label_offset) % c) as u8;
        for &p in &inside {
            labels[p] = new;
        }
    }
    SemanticMap::new(h, w, labels, m1.classes().clone()).expect("labels in range")
}

fn changes_with<R: Rng>(m1: &SemanticMap, cfg: &WorldConfig, rng: &mut R) -> SemanticMap {
    if cfg.change_blob_count == 0 {
        return m1.clone();
    }
    let c = m1.num_classes();
    let blobs: Vec<Blob> = (0..cfg.change_blob_count)
        .map(|_| {
            let theta = rng.random_range(0.0..PI);
            Blob {
                cy: rng.random_range(0.0..m1.height() as f64),
                cx: rng.random_range(0.0..m1.width() as f64),
                ra: rng.random_range(0.6..1.4),
                rb: rng.random_range(0.6..1.4),
                cos: theta.cos(),
                sin: theta.sin(),
                label_offset: rng.random_range(1..c),
            }
        })
        .collect();
    let total = (m1.height() * m1.width()) as f64;
    let target = cfg.change_rate_target;
    let rate = |m2: &SemanticMap| {
        let changed = m1
            .labels()
            .iter()
            .zip(m2.labels())
            .filter(|(a, b)| a != b)
            .count();
        changed as f64 / total
    };
    let (mut lo, mut hi) = (0.25f64, 2.0 * m1.height().max(m1.width()) as f64);
    let mut best: Option<(f64, SemanticMap)> = None;
    for _ in 0..BISECTION_STEPS {
        let mid = (lo * hi).sqrt();
        let m2 = stamp(m1, &blobs, mid);
        let r = rate(&m2);
        let err = (r - target).abs();
        if best.as_ref().is_none_or(|(e, _)| err < *e) {
            best = Some((err, m2));
        }
        if err <= RATE_TOLERANCE * target {
            break;
        }
        if r < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let (err, m2) = best.expect("at least one bisection step");
    if err > RATE_TOLERANCE * target {
        log::warn!(
            "change rate target {target} unreachable; best effort misses by {err:.4}"
        );
    }
    m2
}

/// Post-change map: blobs relabelled to a class other than their pre-change majority,
/// scaled by bisection towards `cfg.change_rate_target`.
pub fn inject_changes(m1: &SemanticMap, cfg: &WorldConfig) -> Result<SemanticMap> {
    cfg.validate()?;
    if m1.num_classes() != cfg.num_classes {
        return Err(Error::Config(format!(
            "map has {} classes, config {}",
            m1.num_classes(),
            cfg.num_classes
        )));
    }
    Ok(changes_with(m1, cfg, &mut stream(cfg.seed, STREAM_CHANGE)))
}

fn render_with<R: Rng>(
    m: &SemanticMap,
    colors: &[[f64; 3]],
    drift: Option<&[[f64; 3]]>,
    sigma: f64,
    rng: &mut R,
) -> ImageRaster {
    let n = m.height() * m.width();
    let noise = Normal::new(0.0, sigma.max(0.0)).expect("valid sigma");
    let mut values = vec![0f32; 3 * n];
    for ch in 0..3 {
        for (p, &l) in m.labels().iter().enumerate() {
            let mut v = colors[l as usize][ch];
            if let Some(d) = drift {
                v += d[l as usize][ch];
            }
            if sigma > 0.0 {
                v += noise.sample(rng);
            }
            values[ch * n + p] = v.clamp(0.0, 1.0) as f32;
        }
    }
    ImageRaster::new(3, m.height(), m.width(), values).expect("clamped values")
}

fn drift_with<R: Rng>(cfg: &WorldConfig, rng: &mut R) -> Vec<[f64; 3]> {
    let normal = Normal::new(0.0, cfg.temporal_drift_sigma).expect("valid sigma");
    (0..cfg.num_classes)
        .map(|_| [(); 3].map(|_| normal.sample(rng)))
        .collect()
}

/// Three-channel rendering of `m`; the post epoch adds per-class palette drift.
pub fn render_image(m: &SemanticMap, epoch: Epoch, cfg: &WorldConfig) -> Result<ImageRaster> {
    cfg.validate()?;
    if m.num_classes() != cfg.num_classes {
        return Err(Error::Config("map class count differs from config".into()));
    }
    let colors = palette(cfg);
    let (drift, tag) = match epoch {
        Epoch::Pre => (None, STREAM_NOISE_PRE),
        Epoch::Post => (
            Some(drift_with(cfg, &mut stream(cfg.seed, STREAM_DRIFT))),
            STREAM_NOISE_POST,
        ),
    };
    Ok(render_with(
        m,
        &colors,
        drift.as_deref(),
        cfg.appearance_noise_sigma,
        &mut stream(cfg.seed, tag),
    ))
}

/// Sample `index` of the world described by `cfg`; the palette is shared by all indices.
pub fn generate_sample(cfg: &WorldConfig, index: u64) -> Result<Sample> {
    cfg.validate()?;
    let classes = cfg.class_set();
    let colors = palette(cfg);
    let seed = sample_seed(cfg.seed, index);
    let map_pre = voronoi_map(cfg, classes, &mut stream(seed, STREAM_MAP));
    let map_post = changes_with(&map_pre, cfg, &mut stream(seed, STREAM_CHANGE));
    let drift = drift_with(cfg, &mut stream(seed, STREAM_DRIFT));
    let sigma = cfg.appearance_noise_sigma;
    let image_pre = render_with(
        &map_pre,
        &colors,
        None,
        sigma,
        &mut stream(seed, STREAM_NOISE_PRE),
    );
    let image_post = render_with(
        &map_post,
        &colors,
        Some(&drift),
        sigma,
        &mut stream(seed, STREAM_NOISE_POST),
    );
    let change: ChangeMask = derive_change(&map_pre, &map_post)?;
    Sample::new(image_pre, image_post, map_pre, map_post, change)
}

/// Write samples `0..n_samples` plus `classes.txt` and `manifest.tsv` into `out_dir`.
pub fn generate_dataset(cfg: &WorldConfig, n_samples: usize, out_dir: &Path) -> Result<Manifest> {
    generate_split(cfg, 0, n_samples, out_dir)
}

/// Like [`generate_dataset`] for the index range `first..first + n_samples`.
pub fn generate_split(
    cfg: &WorldConfig,
    first: u64,
    n_samples: usize,
    out_dir: &Path,
) -> Result<Manifest> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    cfg.class_set().write(&out_dir.join("classes.txt"))?;
    let mut entries = Vec::with_capacity(n_samples);
    for index in first..first + n_samples as u64 {
        let s = generate_sample(cfg, index)?;
        let entry = ManifestEntry::for_id(index, s.change.change_rate());
        write_image(&s.image_pre, &out_dir.join(&entry.img_pre))?;
        write_image(&s.image_post, &out_dir.join(&entry.img_post))?;
        write_map(&s.map_pre, &out_dir.join(&entry.map_pre))?;
        write_map(&s.map_post, &out_dir.join(&entry.map_post))?;
        write_mask(&s.change, &out_dir.join(&entry.change))?;
        entries.push(entry);
    }
    let manifest = Manifest {
        dir: out_dir.to_path_buf(),
        entries,
    };
    manifest.write(&out_dir.join("manifest.tsv"))?;
    Ok(manifest)
}
