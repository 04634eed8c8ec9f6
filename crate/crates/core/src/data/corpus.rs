//! Line-delimited corpus files.
//!
//! The first line is a header object, every following line one scene:
//!
//! ```text
//! {"format":"point-corpus","version":1,"d_f":36}
//! {"scene_id":"s0","persons":[{"person_id":"p0","feature":[...],"label":"important"},...],"global_feature":[...]}
//! ```
//!
//! `label` is `"important"`, `"non-important"`, or absent for unlabeled
//! corpora. Blank lines are ignored. Writing always produces this exact
//! compact layout, so writing a loaded canonical file reproduces it byte for
//! byte.

use std::fmt::Write as _;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::relation::SceneFeatures;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Label {
    Important,
    NonImportant,
}

impl Label {
    /// Classifier output index: 1 for important, 0 otherwise.
    pub fn class_index(self) -> usize {
        match self {
            Label::Important => 1,
            Label::NonImportant => 0,
        }
    }

    pub fn is_important(self) -> bool {
        self == Label::Important
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PersonRecord {
    pub person_id: String,
    pub feature: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<Label>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub scene_id: String,
    pub persons: Vec<PersonRecord>,
    pub global_feature: Vec<f64>,
}

impl SceneRecord {
    pub fn features(&self) -> Result<SceneFeatures> {
        let rows: Vec<&[f64]> = self.persons.iter().map(|p| p.feature.as_slice()).collect();
        SceneFeatures::new(&rows, &self.global_feature)
    }

    /// Labels of every person, or `None` if any person is unlabeled.
    pub fn labels(&self) -> Option<Vec<Label>> {
        self.persons.iter().map(|p| p.label).collect()
    }

    pub fn is_labeled(&self) -> bool {
        self.persons.iter().all(|p| p.label.is_some())
    }

    /// Checks dimensions against `d_f`, and labels when `require_labels`.
    pub fn validate(&self, feature_dim: usize, require_labels: bool) -> Result<()> {
        if self.persons.is_empty() {
            return Err(Error::Data(format!("scene {}: no persons", self.scene_id)));
        }
        if self.global_feature.len() != feature_dim {
            return Err(Error::Data(format!(
                "scene {}: global feature has dimension {}, corpus declares d_f = {}",
                self.scene_id,
                self.global_feature.len(),
                feature_dim
            )));
        }
        for p in &self.persons {
            if p.feature.len() != feature_dim {
                return Err(Error::Data(format!(
                    "scene {}: person {} has dimension {}, corpus declares d_f = {}",
                    self.scene_id,
                    p.person_id,
                    p.feature.len(),
                    feature_dim
                )));
            }
            if p.feature.iter().any(|x| !x.is_finite()) {
                return Err(Error::Data(format!(
                    "scene {}: person {} has a non-finite feature",
                    self.scene_id, p.person_id
                )));
            }
        }
        if self.global_feature.iter().any(|x| !x.is_finite()) {
            return Err(Error::Data(format!(
                "scene {}: non-finite global feature",
                self.scene_id
            )));
        }
        let labeled = self.persons.iter().filter(|p| p.label.is_some()).count();
        if require_labels || labeled > 0 {
            if labeled != self.persons.len() {
                return Err(Error::Data(format!(
                    "scene {}: {} of {} persons are labeled",
                    self.scene_id,
                    labeled,
                    self.persons.len()
                )));
            }
            if !self.persons.iter().any(|p| p.label == Some(Label::Important)) {
                return Err(Error::Data(format!(
                    "scene {}: no person is labeled important",
                    self.scene_id
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    /// Declared feature dimension; zero for an empty file without header.
    pub feature_dim: usize,
    pub scenes: Vec<SceneRecord>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    d_f: usize,
}

const FORMAT: &str = "point-corpus";
const VERSION: u32 = 1;

impl Corpus {
    pub fn new(feature_dim: usize, scenes: Vec<SceneRecord>) -> Self {
        Corpus { feature_dim, scenes }
    }

    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }

    pub fn person_count(&self) -> usize {
        self.scenes.iter().map(|s| s.persons.len()).sum()
    }

    /// Parses corpus text. With `require_labels` every scene must be fully
    /// labeled with at least one important person.
    pub fn parse(text: &str, require_labels: bool) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let Some((idx, first)) = lines.next() else {
            warn!("corpus is empty");
            return Ok(Corpus::new(0, Vec::new()));
        };
        let header: Header = serde_json::from_str(first).map_err(|e| Error::Parse {
            line: idx + 1,
            message: format!("bad header: {}", e),
        })?;
        if header.format != FORMAT || header.version != VERSION {
            return Err(Error::Parse {
                line: idx + 1,
                message: format!("unsupported corpus format {} v{}", header.format, header.version),
            });
        }
        let mut scenes = Vec::new();
        for (idx, line) in lines {
            let scene: SceneRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
                line: idx + 1,
                message: e.to_string(),
            })?;
            scene.validate(header.d_f, require_labels)?;
            scenes.push(scene);
        }
        if scenes.is_empty() {
            warn!("corpus holds no scenes");
        }
        Ok(Corpus::new(header.d_f, scenes))
    }

    pub fn to_text(&self) -> Result<String> {
        let header = Header {
            format: FORMAT.into(),
            version: VERSION,
            d_f: self.feature_dim,
        };
        let json = |e: serde_json::Error| Error::Data(e.to_string());
        let mut out = serde_json::to_string(&header).map_err(json)?;
        out.push('\n');
        for scene in &self.scenes {
            let _ = writeln!(out, "{}", serde_json::to_string(scene).map_err(json)?);
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()?).map_err(|e| Error::io(path, e))
    }
}

/// Reads a labeled corpus.
pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Corpus::parse(&text, true)
}

/// Reads a corpus whose labels may be absent.
pub fn load_unlabeled_corpus(path: &Path) -> Result<Corpus> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Corpus::parse(&text, false)
}
