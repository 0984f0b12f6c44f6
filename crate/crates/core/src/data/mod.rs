//! Paired visible/thermal datasets.
//!
//! On disk a dataset is a directory:
//!
//! ```text
//! root/
//!   visible/<id>.pgm      binary PGM (P5), 8-bit
//!   thermal/<id>.pgm      same size as the visible image
//!   annotations/<id>.txt  optional, one `x y w h` box per line
//!   tags.txt              optional, one `<id> <tag>` per line
//! ```
//!
//! Images are paired by file stem and returned sorted by id.

pub mod pgm;
pub mod synth;

pub use synth::{
    derive_seed, generate_benchmark, generate_synthetic, make_shift_pair, Benchmark, DomainShift,
    Modality, SplitSizes, SynthConfig,
};

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::labels::{read_annotation, write_annotation, BoxAnnotation};
use crate::tensor::Tensor;
use pgm::{read_pgm, write_pgm, Gray8};

/// One aligned visible/thermal image pair with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePair {
    id: String,
    visible: Tensor,
    thermal: Tensor,
    pub annotation: Option<BoxAnnotation>,
    /// Free-form split label such as `day` or `night`.
    pub tag: Option<String>,
}

impl ImagePair {
    /// Both images must be `(1, h, w)` tensors of the same shape with values in `[0, 1]`.
    pub fn new(id: impl Into<String>, visible: Tensor, thermal: Tensor) -> Result<Self> {
        let id = id.into();
        let (c, h, w) = visible.dims3()?;
        if c != 1 || visible.shape() != thermal.shape() || h == 0 || w == 0 {
            return Err(Error::InvalidInput(format!(
                "{id}: visible {:?} and thermal {:?} must be equal single-channel images",
                visible.shape(),
                thermal.shape()
            )));
        }
        let in_range = |t: &Tensor| t.data().iter().all(|v| (0.0..=1.0).contains(v));
        if !in_range(&visible) || !in_range(&thermal) {
            return Err(Error::InvalidInput(format!(
                "{id}: pixel values must lie in [0, 1]"
            )));
        }
        Ok(Self {
            id,
            visible,
            thermal,
            annotation: None,
            tag: None,
        })
    }

    pub fn with_annotation(mut self, annotation: BoxAnnotation) -> Self {
        self.annotation = Some(annotation);
        self
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn visible(&self) -> &Tensor {
        &self.visible
    }

    pub fn thermal(&self) -> &Tensor {
        &self.thermal
    }

    pub fn height(&self) -> usize {
        self.visible.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.visible.shape()[2]
    }

    pub fn is_labeled(&self) -> bool {
        self.annotation.is_some()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub pairs: Vec<ImagePair>,
}

impl Dataset {
    pub fn new(pairs: Vec<ImagePair>) -> Self {
        Self { pairs }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, ImagePair> {
        self.pairs.iter()
    }

    pub fn first_unlabeled(&self) -> Option<&ImagePair> {
        self.pairs.iter().find(|p| !p.is_labeled())
    }

    pub fn tags(&self) -> BTreeSet<&str> {
        self.pairs.iter().filter_map(|p| p.tag.as_deref()).collect()
    }
}

fn stems(dir: &Path, ext: &str) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    if !dir.is_dir() {
        return Ok(out);
    }
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) != Some(ext) {
            continue;
        }
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::format(&path, "file name is not valid UTF-8"))?
            .to_string();
        out.insert(stem, path);
    }
    Ok(out)
}

fn image_tensor(img: &Gray8) -> Result<Tensor> {
    Tensor::from_map(img.height, img.width, img.to_unit())
}

pub fn load_dataset(root: &Path) -> Result<Dataset> {
    if !root.is_dir() {
        return Err(Error::io(
            root,
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset directory not found"),
        ));
    }
    let visible = stems(&root.join("visible"), "pgm")?;
    let thermal = stems(&root.join("thermal"), "pgm")?;
    let annotations = stems(&root.join("annotations"), "txt")?;

    for (id, path) in &visible {
        if !thermal.contains_key(id) {
            return Err(Error::format(path, format!("no matching thermal/{id}.pgm")));
        }
    }
    for (id, path) in &thermal {
        if !visible.contains_key(id) {
            return Err(Error::format(path, format!("no matching visible/{id}.pgm")));
        }
    }
    for (id, path) in &annotations {
        if !visible.contains_key(id) {
            return Err(Error::format(
                path,
                format!("annotation for missing image {id}"),
            ));
        }
    }

    let tags_path = root.join("tags.txt");
    let mut tags = BTreeMap::new();
    if tags_path.is_file() {
        let text = std::fs::read_to_string(&tags_path).map_err(|e| Error::io(&tags_path, e))?;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (id, tag) = line.split_once(char::is_whitespace).ok_or_else(|| {
                Error::format(
                    &tags_path,
                    format!("line {}: expected `<id> <tag>`", lineno + 1),
                )
            })?;
            tags.insert(id.to_string(), tag.trim().to_string());
        }
    }

    let mut pairs = Vec::with_capacity(visible.len());
    for (id, vpath) in &visible {
        let tpath = &thermal[id];
        let v = read_pgm(vpath)?;
        let t = read_pgm(tpath)?;
        if (v.width, v.height) != (t.width, t.height) {
            return Err(Error::format(
                tpath,
                format!(
                    "thermal image is {}x{} but visible image is {}x{}",
                    t.width, t.height, v.width, v.height
                ),
            ));
        }
        let mut pair = ImagePair::new(id.clone(), image_tensor(&v)?, image_tensor(&t)?)
            .map_err(|e| Error::format(vpath, e.to_string()))?;
        if let Some(apath) = annotations.get(id) {
            pair.annotation = Some(read_annotation(apath, id)?);
        }
        pair.tag = tags.get(id).cloned();
        pairs.push(pair);
    }
    Ok(Dataset { pairs })
}

/// Writes `dataset` under `root` in the layout [`load_dataset`] reads.
pub fn save_dataset(dataset: &Dataset, root: &Path) -> Result<()> {
    for sub in ["visible", "thermal", "annotations"] {
        let dir = root.join(sub);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let mut tag_lines = String::new();
    for pair in &dataset.pairs {
        let (h, w) = (pair.height(), pair.width());
        write_pgm(
            &Gray8::from_unit(h, w, pair.visible.data()),
            &root.join("visible").join(format!("{}.pgm", pair.id)),
        )?;
        write_pgm(
            &Gray8::from_unit(h, w, pair.thermal.data()),
            &root.join("thermal").join(format!("{}.pgm", pair.id)),
        )?;
        if let Some(ann) = &pair.annotation {
            write_annotation(
                ann,
                &root.join("annotations").join(format!("{}.txt", pair.id)),
            )?;
        }
        if let Some(tag) = &pair.tag {
            tag_lines.push_str(&format!("{} {tag}\n", pair.id));
        }
    }
    if !tag_lines.is_empty() {
        let path = root.join("tags.txt");
        std::fs::write(&path, tag_lines).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}
