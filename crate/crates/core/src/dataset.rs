//! Sample manifests and in-memory datasets.
//!
//! A manifest is UTF-8 text with one tab-separated line per sample:
//! `<id> <img_pre> <img_post> <map_pre> <map_post> <change> <change_rate>`.
//! Paths are relative to the manifest's directory, which also holds `classes.txt`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::raster::{read_image, read_map, read_mask, ClassSet, Sample};

pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const CLASSES_FILE: &str = "classes.txt";

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub id: u64,
    pub img_pre: String,
    pub img_post: String,
    pub map_pre: String,
    pub map_post: String,
    pub change: String,
    pub change_rate: f64,
}

impl ManifestEntry {
    /// Entry with the conventional file names for sample `id`.
    pub fn for_id(id: u64, change_rate: f64) -> Self {
        Self {
            id,
            img_pre: format!("{id:05}_img_pre.cdr"),
            img_post: format!("{id:05}_img_post.cdr"),
            map_pre: format!("{id:05}_map_pre.cdr"),
            map_post: format!("{id:05}_map_post.cdr"),
            change: format!("{id:05}_change.cdr"),
            change_rate,
        }
    }

    fn parse(line: &str, lineno: usize) -> Result<Self> {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 7 {
            return Err(Error::Data(format!(
                "manifest line {lineno}: expected 7 tab-separated fields, got {}",
                fields.len()
            )));
        }
        let id = fields[0]
            .parse()
            .map_err(|_| Error::Data(format!("manifest line {lineno}: bad id {:?}", fields[0])))?;
        let change_rate = fields[6].parse().map_err(|_| {
            Error::Data(format!("manifest line {lineno}: bad change rate {:?}", fields[6]))
        })?;
        Ok(Self {
            id,
            img_pre: fields[1].into(),
            img_post: fields[2].into(),
            map_pre: fields[3].into(),
            map_post: fields[4].into(),
            change: fields[5].into(),
            change_rate,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    /// Directory the entry paths are relative to.
    pub dir: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}\t{}\t{:.6}",
                e.id, e.img_pre, e.img_post, e.map_pre, e.map_post, e.change, e.change_rate
            )
            .expect("string write");
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let entries = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| ManifestEntry::parse(l, i + 1))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            dir: path.parent().map(Path::to_path_buf).unwrap_or_default(),
            entries,
        })
    }

    pub fn classes(&self) -> Result<Arc<ClassSet>> {
        Ok(Arc::new(ClassSet::read(&self.dir.join(CLASSES_FILE))?))
    }

    pub fn load_sample(&self, entry: &ManifestEntry, classes: &Arc<ClassSet>) -> Result<Sample> {
        let p = |name: &str| self.dir.join(name);
        Sample::new(
            read_image(&p(&entry.img_pre))?,
            read_image(&p(&entry.img_post))?,
            read_map(&p(&entry.map_pre), classes.clone())?,
            read_map(&p(&entry.map_post), classes.clone())?,
            read_mask(&p(&entry.change))?,
        )
    }
}

/// All samples of a manifest, loaded into memory in manifest order.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub classes: Arc<ClassSet>,
    pub samples: Vec<(u64, Sample)>,
}

impl Dataset {
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let manifest = Manifest::read(manifest_path)?;
        let classes = manifest.classes()?;
        let samples = manifest
            .entries
            .iter()
            .map(|e| Ok((e.id, manifest.load_sample(e, &classes)?)))
            .collect::<Result<Vec<_>>>()?;
        if samples.is_empty() {
            return Err(Error::Data(format!(
                "manifest {} lists no samples",
                manifest_path.display()
            )));
        }
        Ok(Self { classes, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}
