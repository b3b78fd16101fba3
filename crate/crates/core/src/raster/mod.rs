//! Images, semantic maps and change masks, plus the label transforms applied to them.

mod format;

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub use format::{
    decode_raster, encode_raster, read_image, read_map, read_mask, read_raster, write_image,
    write_map, write_mask, write_raster, FormatError, Raster, RasterDType, MAGIC,
};

/// Ordered, unique class names; a class id is its index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassSet {
    names: Vec<String>,
}

impl ClassSet {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.len() < 2 {
            return Err(Error::Config(format!(
                "class set needs at least 2 classes, got {}",
                names.len()
            )));
        }
        if names.len() > 256 {
            return Err(Error::Config("class ids must fit in u8".into()));
        }
        for (i, n) in names.iter().enumerate() {
            if n.is_empty() || n.contains('\n') {
                return Err(Error::Config(format!("invalid class name at id {i}")));
            }
            if names[..i].contains(n) {
                return Err(Error::Config(format!("duplicate class name {n:?}")));
            }
        }
        Ok(Self { names })
    }

    /// `prefix0, prefix1, ...`
    pub fn numbered(prefix: &str, n: usize) -> Result<Self> {
        Self::new((0..n).map(|i| format!("{prefix}{i}")))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Sidecar text format: one name per line, line index = id.
    pub fn to_text(&self) -> String {
        let mut s = self.names.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::new(text.lines().filter(|l| !l.is_empty()))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

fn check_dims(height: usize, width: usize, channels: usize, len: usize) -> Result<()> {
    if height == 0 || width == 0 || channels == 0 {
        return Err(Error::Data("raster extents must be positive".into()));
    }
    if height * width * channels != len {
        return Err(Error::Data(format!(
            "raster {channels}x{height}x{width} needs {} values, got {len}",
            height * width * channels
        )));
    }
    Ok(())
}

/// Channel-major float image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRaster {
    height: usize,
    width: usize,
    channels: usize,
    values: Vec<f32>,
}

impl ImageRaster {
    pub fn new(channels: usize, height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        check_dims(height, width, channels, values.len())?;
        if let Some(i) = values
            .iter()
            .position(|v| !v.is_finite() || !(0.0..=1.0).contains(v))
        {
            return Err(Error::Data(format!(
                "image value {} at index {i} outside [0,1]",
                values[i]
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            values,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_vec(
            vec![self.channels, self.height, self.width],
            self.values.iter().map(|&v| T::from_f64_lossy(v as f64)).collect(),
        )
        .expect("validated extents")
    }
}

/// Per-pixel class ids over a shared [`ClassSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticMap {
    height: usize,
    width: usize,
    labels: Vec<u8>,
    classes: Arc<ClassSet>,
}

impl SemanticMap {
    pub fn new(height: usize, width: usize, labels: Vec<u8>, classes: Arc<ClassSet>) -> Result<Self> {
        check_dims(height, width, 1, labels.len())?;
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes.len()) {
            return Err(Error::Data(format!(
                "label {bad} out of range for {} classes",
                classes.len()
            )));
        }
        Ok(Self {
            height,
            width,
            labels,
            classes,
        })
    }

    pub fn constant(height: usize, width: usize, label: u8, classes: Arc<ClassSet>) -> Result<Self> {
        Self::new(height, width, vec![label; height * width], classes)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn classes(&self) -> &Arc<ClassSet> {
        &self.classes
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn get(&self, i: usize, j: usize) -> u8 {
        self.labels[i * self.width + j]
    }

    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.classes.len()];
        for &l in &self.labels {
            h[l as usize] += 1;
        }
        h
    }
}

/// Binary per-pixel change indicator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChangeMask {
    height: usize,
    width: usize,
    values: Vec<u8>,
}

impl ChangeMask {
    pub fn new(height: usize, width: usize, values: Vec<u8>) -> Result<Self> {
        check_dims(height, width, 1, values.len())?;
        if values.iter().any(|&v| v > 1) {
            return Err(Error::Data("change mask values must be 0 or 1".into()));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Result<Self> {
        Self::new(height, width, vec![0; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn count_changed(&self) -> usize {
        self.values.iter().filter(|&&v| v == 1).count()
    }

    pub fn change_rate(&self) -> f64 {
        self.count_changed() as f64 / self.values.len() as f64
    }

    /// A coarse pixel is changed iff any covered fine pixel is; output is `ceil(H/s) x ceil(W/s)`.
    pub fn max_pool(&self, stride: usize) -> ChangeMask {
        let (h, w) = (self.height.div_ceil(stride), self.width.div_ceil(stride));
        let mut out = vec![0u8; h * w];
        for i in 0..self.height {
            for j in 0..self.width {
                let o = &mut out[(i / stride) * w + j / stride];
                *o |= self.values[i * self.width + j];
            }
        }
        ChangeMask {
            height: h,
            width: w,
            values: out,
        }
    }
}

/// A co-registered bi-temporal sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image_pre: ImageRaster,
    pub image_post: ImageRaster,
    pub map_pre: SemanticMap,
    pub map_post: SemanticMap,
    pub change: ChangeMask,
}

impl Sample {
    /// Checks shared extents and that `change` is derived from the two maps.
    pub fn new(
        image_pre: ImageRaster,
        image_post: ImageRaster,
        map_pre: SemanticMap,
        map_post: SemanticMap,
        change: ChangeMask,
    ) -> Result<Self> {
        let (h, w) = (map_pre.height, map_pre.width);
        let dims = [
            (image_pre.height, image_pre.width),
            (image_post.height, image_post.width),
            (map_post.height, map_post.width),
            (change.height, change.width),
        ];
        if dims.iter().any(|&d| d != (h, w)) {
            return Err(Error::Data("sample rasters differ in size".into()));
        }
        if derive_change(&map_pre, &map_post)? != change {
            return Err(Error::Data(
                "change mask is inconsistent with the semantic maps".into(),
            ));
        }
        Ok(Self {
            image_pre,
            image_post,
            map_pre,
            map_post,
            change,
        })
    }

    pub fn height(&self) -> usize {
        self.map_pre.height
    }

    pub fn width(&self) -> usize {
        self.map_pre.width
    }
}

fn check_same_grid(a: &SemanticMap, b: &SemanticMap) -> Result<()> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(Error::Data(format!(
            "map sizes differ: {}x{} vs {}x{}",
            a.height, a.width, b.height, b.width
        )));
    }
    if a.classes != b.classes {
        return Err(Error::Data("maps use different class sets".into()));
    }
    Ok(())
}

/// Pixelwise inequality of two maps.
pub fn derive_change(m1: &SemanticMap, m2: &SemanticMap) -> Result<ChangeMask> {
    check_same_grid(m1, m2)?;
    let values = m1
        .labels
        .iter()
        .zip(&m2.labels)
        .map(|(a, b)| (a != b) as u8)
        .collect();
    ChangeMask::new(m1.height, m1.width, values)
}

/// Relabel every class through `mapping` into the `target` class set.
///
/// The mapping must cover every class of `m`.
pub fn merge_classes(
    m: &SemanticMap,
    mapping: &BTreeMap<u8, u8>,
    target: Arc<ClassSet>,
) -> Result<SemanticMap> {
    let mut table = vec![0u8; m.classes.len()];
    for (id, slot) in table.iter_mut().enumerate() {
        let to = *mapping.get(&(id as u8)).ok_or_else(|| {
            Error::Config(format!("class mapping does not cover class id {id}"))
        })?;
        if to as usize >= target.len() {
            return Err(Error::Config(format!(
                "class {id} maps to {to}, outside the {} target classes",
                target.len()
            )));
        }
        *slot = to;
    }
    let labels = m.labels.iter().map(|&l| table[l as usize]).collect();
    SemanticMap::new(m.height, m.width, labels, target)
}

/// Simulate coarse map information: majority label per `factor x factor` block
/// (ties to the smallest id), expanded back to full size.
pub fn degrade_resolution(m: &SemanticMap, factor: usize) -> Result<SemanticMap> {
    if factor == 0 || factor > m.height.min(m.width) {
        return Err(Error::Config(format!(
            "degradation factor {factor} must be in 1..={}",
            m.height.min(m.width)
        )));
    }
    if factor == 1 {
        return Ok(m.clone());
    }
    let (bh, bw) = (m.height.div_ceil(factor), m.width.div_ceil(factor));
    let c = m.classes.len();
    let mut counts = vec![0usize; bh * bw * c];
    for i in 0..m.height {
        for j in 0..m.width {
            let b = (i / factor) * bw + j / factor;
            counts[b * c + m.get(i, j) as usize] += 1;
        }
    }
    let block_label: Vec<u8> = counts
        .chunks(c)
        .map(|hist| {
            let mut best = 0;
            for (k, &n) in hist.iter().enumerate() {
                if n > hist[best] {
                    best = k;
                }
            }
            best as u8
        })
        .collect();
    let mut labels = Vec::with_capacity(m.labels.len());
    for i in 0..m.height {
        for j in 0..m.width {
            labels.push(block_label[(i / factor) * bw + j / factor]);
        }
    }
    SemanticMap::new(m.height, m.width, labels, m.classes.clone())
}

/// One-hot encoding `[|C|, H, W]`.
pub fn one_hot<T: Scalar>(m: &SemanticMap) -> Tensor<T> {
    let n = m.labels.len();
    let mut data = vec![T::zero(); m.classes.len() * n];
    for (p, &l) in m.labels.iter().enumerate() {
        data[l as usize * n + p] = T::one();
    }
    Tensor::from_vec(vec![m.classes.len(), m.height, m.width], data).expect("extents")
}
