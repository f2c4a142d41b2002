//! Annotation model: images, person boxes, labeled person pairs, and the
//! validation pass every downstream stage relies on.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::taxonomy::{builtin_taxonomy, RelationTaxonomy};

/// Axis-aligned person bounding box in normalized image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PersonBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl PersonBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        let b = PersonBox { x0, y0, x1, y1 };
        b.validate().map_err(Error::Precondition)?;
        Ok(b)
    }

    fn validate(&self) -> std::result::Result<(), String> {
        let coords = [self.x0, self.y0, self.x1, self.y1];
        if coords
            .iter()
            .any(|c| !c.is_finite() || *c < 0.0 || *c > 1.0)
        {
            return Err(format!("coordinates outside [0,1]: {self:?}"));
        }
        if self.x0 >= self.x1 || self.y0 >= self.y1 {
            return Err(format!(
                "degenerate box (x0 < x1 and y0 < y1 required): {self:?}"
            ));
        }
        Ok(())
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0)
    }
}

/// One annotated image: identity, pixel size, and person boxes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub persons: Vec<PersonBox>,
}

/// One classification instance: an ordered person pair inside an image.
///
/// Pairs are ordered; `(i, j)` and `(j, i)` may both exist with the same
/// label. Symmetry is a property to test, not an assumption.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairSample {
    pub image_id: String,
    pub i: usize,
    pub j: usize,
    pub label: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Val => write!(f, "val"),
            Split::Test => write!(f, "test"),
        }
    }
}

/// A full annotated split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub taxonomy: RelationTaxonomy,
    pub images: Vec<ImageRecord>,
    pub samples: Vec<PairSample>,
    pub split: Split,
}

/// One violated invariant found by [`validate_dataset`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationIssue {
    /// Short machine-stable kind, e.g. "self-pair", "label out of range".
    pub kind: String,
    /// Where the issue was found ("image 3", "sample 7", ...).
    pub location: String,
    pub message: String,
}

/// Outcome of a dataset validation pass; empty iff the dataset is valid.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub issues: Vec<ValidationIssue>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.issues.is_empty()
    }

    fn push(&mut self, kind: &str, location: String, message: String) {
        self.issues.push(ValidationIssue {
            kind: kind.to_string(),
            location,
            message,
        });
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for issue in &self.issues {
            writeln!(
                f,
                "  [{}] {}: {}",
                issue.kind, issue.location, issue.message
            )?;
        }
        Ok(())
    }
}

/// Checks every structural invariant and reports all violations.
///
/// Never fails: problems become report entries so callers can show every
/// issue at once rather than the first.
pub fn validate_dataset(ds: &Dataset) -> ValidationReport {
    let mut report = ValidationReport::default();

    if let Err(e) = ds.taxonomy.validate() {
        report.push("taxonomy", "taxonomy".into(), e.to_string());
    }

    let mut ids: HashMap<&str, usize> = HashMap::new();
    for (idx, image) in ds.images.iter().enumerate() {
        let loc = format!("image {idx} ({})", image.image_id);
        if let Some(prev) = ids.insert(&image.image_id, idx) {
            report.push(
                "duplicate image id",
                loc.clone(),
                format!("image id `{}` already used by image {prev}", image.image_id),
            );
        }
        if image.persons.is_empty() {
            report.push(
                "no persons",
                loc.clone(),
                "image has no person boxes".into(),
            );
        }
        if image.width == 0 || image.height == 0 {
            report.push(
                "zero size",
                loc.clone(),
                "image width/height must be positive".into(),
            );
        }
        for (pidx, person) in image.persons.iter().enumerate() {
            if let Err(e) = person.validate() {
                report.push("invalid box", format!("{loc}, person {pidx}"), e);
            }
        }
    }

    let n_classes = ds.taxonomy.len();
    for (idx, sample) in ds.samples.iter().enumerate() {
        let loc = format!("sample {idx}");
        let image = ids.get(sample.image_id.as_str()).map(|&i| &ds.images[i]);
        match image {
            None => report.push(
                "unknown image",
                loc.clone(),
                format!("sample references missing image `{}`", sample.image_id),
            ),
            Some(image) => {
                let n = image.persons.len();
                if sample.i >= n || sample.j >= n {
                    report.push(
                        "person index out of range",
                        loc.clone(),
                        format!(
                            "pair ({}, {}) but image has {n} persons",
                            sample.i, sample.j
                        ),
                    );
                }
            }
        }
        if sample.i == sample.j {
            report.push(
                "self-pair",
                loc.clone(),
                format!("pair indices must differ, got ({}, {})", sample.i, sample.j),
            );
        }
        if sample.label >= n_classes {
            report.push(
                "label out of range",
                loc,
                format!(
                    "label {} but taxonomy has {n_classes} classes",
                    sample.label
                ),
            );
        }
    }

    report
}

// --- annotation ingestion ----------------------------------------------------

/// On-disk annotation schema. Boxes may be given in pixel or normalized
/// coordinates; loading always normalizes.
#[derive(Debug, Deserialize)]
struct RawAnnotations {
    taxonomy: RawTaxonomy,
    images: Vec<RawImage>,
    samples: Vec<RawSample>,
    #[serde(default = "default_coords")]
    coords: String,
    #[serde(default)]
    split: Option<Split>,
}

fn default_coords() -> String {
    "normalized".to_string()
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum RawTaxonomy {
    Builtin(String),
    Inline(RelationTaxonomy),
}

#[derive(Debug, Deserialize)]
struct RawImage {
    id: String,
    width: u32,
    height: u32,
    persons: Vec<[f64; 4]>,
}

#[derive(Debug, Deserialize)]
struct RawSample {
    image: String,
    i: usize,
    j: usize,
    label: usize,
}

/// Loads and validates annotations from the canonical JSON schema.
pub fn load_annotations(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)?;
    parse_annotations(&text)
}

/// Parses annotation JSON; see `load_annotations`.
pub fn parse_annotations(text: &str) -> Result<Dataset> {
    let raw: RawAnnotations = serde_json::from_str(text)?;

    let taxonomy = match raw.taxonomy {
        RawTaxonomy::Builtin(name) => builtin_taxonomy(&name)?,
        RawTaxonomy::Inline(tax) => {
            tax.validate()?;
            tax
        }
    };

    let pixel = match raw.coords.as_str() {
        "pixel" => true,
        "normalized" => false,
        other => {
            return Err(Error::Config(format!(
                "unknown coords mode `{other}` (expected \"normalized\" or \"pixel\")"
            )))
        }
    };

    let images = raw
        .images
        .into_iter()
        .map(|img| {
            let (w, h) = (img.width as f64, img.height as f64);
            let persons = img
                .persons
                .iter()
                .map(|&[x0, y0, x1, y1]| {
                    if pixel {
                        PersonBox {
                            x0: x0 / w,
                            y0: y0 / h,
                            x1: x1 / w,
                            y1: y1 / h,
                        }
                    } else {
                        PersonBox { x0, y0, x1, y1 }
                    }
                })
                .collect();
            ImageRecord {
                image_id: img.id,
                width: img.width,
                height: img.height,
                persons,
            }
        })
        .collect();

    let samples = raw
        .samples
        .into_iter()
        .map(|s| PairSample {
            image_id: s.image,
            i: s.i,
            j: s.j,
            label: s.label,
        })
        .collect();

    let ds = Dataset {
        taxonomy,
        images,
        samples,
        split: raw.split.unwrap_or(Split::Train),
    };

    let report = validate_dataset(&ds);
    if !report.is_empty() {
        return Err(Error::InvalidDataset(report));
    }
    Ok(ds)
}

impl Dataset {
    pub fn image(&self, image_id: &str) -> Option<&ImageRecord> {
        self.images.iter().find(|img| img.image_id == image_id)
    }

    /// Distinct image ids referenced by at least one sample, in first-use order.
    pub fn sampled_image_ids(&self) -> Vec<&str> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for s in &self.samples {
            if seen.insert(s.image_id.as_str()) {
                out.push(s.image_id.as_str());
            }
        }
        out
    }
}
