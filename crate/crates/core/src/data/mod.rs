//! Documents, labels and dataset IO.
//!
//! A dataset is a JSONL file with one document per line:
//!
//! ```text
//! {"id": "r-1", "width": 600, "height": 800,
//!  "tokens": [{"text": "TOTAL", "bbox": [20, 700, 90, 720], "label": "DontCare"}]}
//! ```
//!
//! `label` may be omitted for inference-only documents. An optional `type`
//! field groups documents for per-type train/test splitting.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub mod synth;

pub use synth::{synth_generate, LayoutStyle, SynthSpec};

/// Axis-aligned box in image pixels, serialized as `[x_left, y_top, x_right, y_bottom]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x_left: f64,
    pub y_top: f64,
    pub x_right: f64,
    pub y_bottom: f64,
}

impl BBox {
    pub fn new(x_left: f64, y_top: f64, x_right: f64, y_bottom: f64) -> Result<Self> {
        let b = BBox {
            x_left,
            y_top,
            x_right,
            y_bottom,
        };
        b.validate()?;
        Ok(b)
    }

    fn validate(&self) -> Result<()> {
        let v = [self.x_left, self.y_top, self.x_right, self.y_bottom];
        if v.iter().any(|c| !c.is_finite()) {
            return Err(Error::BadBBox(format!("non-finite coordinate in {v:?}")));
        }
        if self.x_left > self.x_right {
            return Err(Error::BadBBox(format!(
                "x_left {} > x_right {}",
                self.x_left, self.x_right
            )));
        }
        if self.y_top > self.y_bottom {
            return Err(Error::BadBBox(format!(
                "y_top {} > y_bottom {}",
                self.y_top, self.y_bottom
            )));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x_right - self.x_left
    }

    pub fn height(&self) -> f64 {
        self.y_bottom - self.y_top
    }

    pub fn center(&self) -> (f64, f64) {
        (
            self.x_left + self.width() / 2.0,
            self.y_top + self.height() / 2.0,
        )
    }

    /// Clamps into `[0, width] x [0, height]`; returns whether anything moved.
    fn clamp_to(&mut self, width: f64, height: f64) -> bool {
        let before = *self;
        self.x_left = self.x_left.clamp(0.0, width);
        self.x_right = self.x_right.clamp(0.0, width);
        self.y_top = self.y_top.clamp(0.0, height);
        self.y_bottom = self.y_bottom.clamp(0.0, height);
        before != *self
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x_left, b.y_top, b.x_right, b.y_bottom]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawToken {
    pub text: String,
    pub bbox: BBox,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub width: f64,
    pub height: f64,
    #[serde(default, rename = "type", skip_serializing_if = "Option::is_none")]
    pub doc_type: Option<String>,
    pub tokens: Vec<RawToken>,
}

impl Document {
    /// Checks structural invariants, clamping out-of-image boxes with a warning.
    /// Labels, when present, must belong to `classes`.
    pub fn validate(&mut self, classes: &ClassSet) -> Result<()> {
        if !(self.width > 0.0 && self.height > 0.0 && self.width.is_finite() && self.height.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "document {:?} has non-positive size {}x{}",
                self.id, self.width, self.height
            )));
        }
        for (i, t) in self.tokens.iter_mut().enumerate() {
            if t.text.trim().is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "document {:?} token {i} has empty text",
                    self.id
                )));
            }
            t.bbox.validate()?;
            if t.bbox.clamp_to(self.width, self.height) {
                warn!(
                    "document {:?} token {i} ({:?}) clamped into the {}x{} image",
                    self.id, t.text, self.width, self.height
                );
            }
            if let Some(label) = &t.label {
                if classes.index_of(label).is_none() {
                    return Err(Error::UnknownLabel(label.clone()));
                }
            }
        }
        Ok(())
    }

    /// Class index per token; `None` for unlabeled tokens.
    pub fn label_indices(&self, classes: &ClassSet) -> Vec<Option<usize>> {
        self.tokens
            .iter()
            .map(|t| t.label.as_deref().and_then(|l| classes.index_of(l)))
            .collect()
    }
}

/// Ordered class names; index 0 is the background class.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct ClassSet {
    names: Vec<String>,
}

pub const RECEIPT_CLASSES: [&str; 9] = [
    "DontCare",
    "VendorName",
    "VendorTaxID",
    "InvoiceDate",
    "InvoiceNumber",
    "ExpenseAmount",
    "BaseAmount",
    "TaxAmount",
    "TaxRate",
];

impl ClassSet {
    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.len() < 2 {
            return Err(Error::InvalidArgument(
                "a class set needs a background class and at least one key class".into(),
            ));
        }
        let mut seen = std::collections::HashSet::new();
        for n in &names {
            if !seen.insert(n) {
                return Err(Error::InvalidArgument(format!("duplicate class name {n:?}")));
            }
        }
        Ok(ClassSet { names })
    }

    pub fn receipts() -> Self {
        ClassSet {
            names: RECEIPT_CLASSES.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn background(&self) -> &str {
        &self.names[0]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn name(&self, index: usize) -> Option<&str> {
        self.names.get(index).map(String::as_str)
    }

    /// Reads a JSON array of names.
    pub fn load(path: &Path) -> Result<Self> {
        let names: Vec<String> = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        ClassSet::new(names)
    }
}

impl Default for ClassSet {
    fn default() -> Self {
        ClassSet::receipts()
    }
}

impl TryFrom<Vec<String>> for ClassSet {
    type Error = Error;

    fn try_from(v: Vec<String>) -> Result<Self> {
        ClassSet::new(v)
    }
}

impl From<ClassSet> for Vec<String> {
    fn from(c: ClassSet) -> Self {
        c.names
    }
}

/// Parses and validates one JSONL line. `line` is 1-based and only used in
/// error messages.
pub fn parse_document(text: &str, line: usize, classes: &ClassSet) -> Result<Document> {
    let mut doc: Document = serde_json::from_str(text).map_err(|e| Error::Parse {
        line,
        message: e.to_string(),
    })?;
    doc.validate(classes).map_err(|e| Error::Parse {
        line,
        message: e.to_string(),
    })?;
    Ok(doc)
}

pub fn load_dataset(path: &Path, classes: &ClassSet) -> Result<Vec<Document>> {
    let reader = BufReader::new(File::open(path)?);
    let mut docs = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        docs.push(parse_document(&line, i + 1, classes)?);
    }
    Ok(docs)
}

pub fn save_dataset(path: &Path, docs: &[Document]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_dataset(&mut w, docs)?;
    w.flush()?;
    Ok(())
}

pub fn write_dataset<W: Write>(w: &mut W, docs: &[Document]) -> Result<()> {
    for d in docs {
        serde_json::to_writer(&mut *w, d)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

fn check_ratio(ratio: f64) -> Result<()> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidArgument(format!("split ratio {ratio} outside (0, 1)")));
    }
    Ok(())
}

/// Seeded shuffle, then the first `round(ratio * N)` documents go to training.
pub fn split_dataset(docs: &[Document], ratio: f64, seed: u64) -> Result<(Vec<Document>, Vec<Document>)> {
    check_ratio(ratio)?;
    if docs.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "cannot split {} document(s)",
            docs.len()
        )));
    }
    Ok(split_group(docs.to_vec(), ratio, seed))
}

/// Applies [`split_dataset`]'s rule within each document type (documents
/// without a type form one group). Groups are processed in type-name order,
/// each with its own shuffle stream.
pub fn split_dataset_by_type(
    docs: &[Document],
    ratio: f64,
    seed: u64,
) -> Result<(Vec<Document>, Vec<Document>)> {
    check_ratio(ratio)?;
    if docs.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "cannot split {} document(s)",
            docs.len()
        )));
    }
    let mut groups: BTreeMap<Option<&str>, Vec<Document>> = BTreeMap::new();
    for d in docs {
        groups.entry(d.doc_type.as_deref()).or_default().push(d.clone());
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (stream, group) in groups.into_values().enumerate() {
        let (a, b) = split_group(group, ratio, seed.wrapping_add(stream as u64));
        train.extend(a);
        test.extend(b);
    }
    Ok((train, test))
}

fn split_group(mut docs: Vec<Document>, ratio: f64, seed: u64) -> (Vec<Document>, Vec<Document>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    docs.shuffle(&mut rng);
    let n_train = (ratio * docs.len() as f64).round() as usize;
    let test = docs.split_off(n_train.min(docs.len()));
    (docs, test)
}

/// Document count per type, for reporting.
pub fn type_counts(docs: &[Document]) -> HashMap<String, usize> {
    let mut counts = HashMap::new();
    for d in docs {
        *counts
            .entry(d.doc_type.clone().unwrap_or_else(|| "-".into()))
            .or_insert(0) += 1;
    }
    counts
}
