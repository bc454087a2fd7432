use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest magnification factor a record may carry.
pub const MAX_MAGNIFICATION: u32 = 14;

/// One labelled micro-expression clip.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipRecord {
    pub clip_id: String,
    pub subject_id: String,
    pub label: String,
    /// Frame directory or packed `.mef` tensor, relative to the manifest directory.
    pub frames_path: PathBuf,
    pub onset_index: usize,
    pub apex_index: usize,
    pub source_dataset: String,
    /// 0 for an unmagnified original.
    #[serde(default)]
    pub magnification_factor: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Task {
    #[serde(rename = "SDE3")]
    Sde3,
    #[serde(rename = "SDE5")]
    Sde5,
    #[serde(rename = "CDE3")]
    Cde3,
}

/// Ordered task classes plus the mapping from raw dataset labels onto them.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSpace {
    pub task: Task,
    pub classes: Vec<String>,
    #[serde(default)]
    pub merge_map: BTreeMap<String, String>,
}

pub const CDE3_CLASSES: [&str; 3] = ["negative", "positive", "surprise"];

impl LabelSpace {
    pub fn new(task: Task, classes: Vec<String>, merge_map: BTreeMap<String, String>) -> Result<Self> {
        let ls = Self {
            task,
            classes,
            merge_map,
        };
        ls.validate()?;
        Ok(ls)
    }

    /// Composite three-class grouping (negative / positive / surprise).
    pub fn cde3() -> Self {
        let mut merge = BTreeMap::new();
        for raw in [
            "negative", "anger", "contempt", "disgust", "fear", "sadness", "repression",
        ] {
            merge.insert(raw.to_string(), "negative".to_string());
        }
        for raw in ["positive", "happiness"] {
            merge.insert(raw.to_string(), "positive".to_string());
        }
        merge.insert("surprise".to_string(), "surprise".to_string());
        Self {
            task: Task::Cde3,
            classes: CDE3_CLASSES.iter().map(|s| s.to_string()).collect(),
            merge_map: merge,
        }
    }

    /// Single-database label space whose raw labels are already the classes.
    pub fn identity(task: Task, classes: &[&str]) -> Result<Self> {
        let merge = classes
            .iter()
            .map(|c| (c.to_string(), c.to_string()))
            .collect();
        Self::new(task, classes.iter().map(|s| s.to_string()).collect(), merge)
    }

    pub fn validate(&self) -> Result<()> {
        let expected = match self.task {
            Task::Sde3 | Task::Cde3 => 3,
            Task::Sde5 => 5,
        };
        if self.classes.len() != expected {
            return Err(Error::InvalidArgument(format!(
                "{:?} needs {} classes, got {}",
                self.task,
                expected,
                self.classes.len()
            )));
        }
        let unique: BTreeSet<_> = self.classes.iter().collect();
        if unique.len() != self.classes.len() {
            return Err(Error::InvalidArgument("duplicate class names".into()));
        }
        if self.task == Task::Cde3 {
            let want: BTreeSet<&str> = CDE3_CLASSES.into_iter().collect();
            let got: BTreeSet<&str> = self.classes.iter().map(String::as_str).collect();
            if want != got {
                return Err(Error::InvalidArgument(format!(
                    "CDE3 classes must be {:?}, got {:?}",
                    CDE3_CLASSES, self.classes
                )));
            }
        }
        for (raw, target) in &self.merge_map {
            if !self.classes.contains(target) {
                return Err(Error::InvalidArgument(format!(
                    "merge map sends `{}` to unknown class `{}`",
                    raw, target
                )));
            }
        }
        Ok(())
    }

    pub fn index_of(&self, class: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == class)
    }

    /// Maps a raw dataset label onto its task class.
    pub fn map_raw(&self, raw: &str) -> Result<&str> {
        if let Some(t) = self.merge_map.get(raw) {
            return Ok(t);
        }
        self.classes
            .iter()
            .find(|c| c.as_str() == raw)
            .map(String::as_str)
            .ok_or_else(|| Error::UnknownLabel(raw.to_string()))
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    label_space: LabelSpace,
    frame_size: (usize, usize),
    preprocessed: bool,
}

/// A set of clips sharing one label space and frame size.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<ClipRecord>,
    pub label_space: LabelSpace,
    /// `(height, width)` in pixels.
    pub frame_size: (usize, usize),
    pub preprocessed: bool,
    /// Directory relative frame paths resolve against.
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn new(label_space: LabelSpace, frame_size: (usize, usize), root: impl Into<PathBuf>) -> Self {
        Self {
            records: Vec::new(),
            label_space,
            frame_size,
            preprocessed: true,
            root: root.into(),
        }
    }

    pub fn resolve(&self, record: &ClipRecord) -> PathBuf {
        if record.frames_path.is_absolute() {
            record.frames_path.clone()
        } else {
            self.root.join(&record.frames_path)
        }
    }

    /// Checks every record invariant. Does not touch the filesystem.
    pub fn validate(&self) -> Result<()> {
        self.label_space.validate()?;
        if !self.preprocessed {
            return Err(Error::InvalidArgument(
                "manifest must declare preprocessed faces (detection and cropping happen upstream)".into(),
            ));
        }
        let mut ids = BTreeSet::new();
        for r in &self.records {
            let bad = |m: String| {
                Err(Error::InvalidRecord {
                    clip_id: r.clip_id.clone(),
                    message: m,
                })
            };
            if r.onset_index >= r.apex_index {
                return bad(format!(
                    "onset_index {} must be below apex_index {}",
                    r.onset_index, r.apex_index
                ));
            }
            if self.label_space.index_of(&r.label).is_none() {
                return bad(format!("label `{}` is not in the label space", r.label));
            }
            if r.magnification_factor > MAX_MAGNIFICATION {
                return bad(format!(
                    "magnification factor {} exceeds {}",
                    r.magnification_factor, MAX_MAGNIFICATION
                ));
            }
            if r.subject_id.is_empty() {
                return bad("empty subject_id".into());
            }
            if !ids.insert(r.clip_id.as_str()) {
                return bad("duplicate clip_id".into());
            }
        }
        Ok(())
    }

    /// Distinct subject ids in first-appearance order.
    pub fn subjects(&self) -> Vec<String> {
        let mut seen = BTreeSet::new();
        self.records
            .iter()
            .filter(|r| seen.insert(r.subject_id.clone()))
            .map(|r| r.subject_id.clone())
            .collect()
    }

    pub fn class_counts(&self) -> BTreeMap<String, usize> {
        let mut m: BTreeMap<String, usize> = self
            .label_space
            .classes
            .iter()
            .map(|c| (c.clone(), 0))
            .collect();
        for r in &self.records {
            *m.entry(r.label.clone()).or_default() += 1;
        }
        m
    }

    pub fn label_index(&self, r: &ClipRecord) -> usize {
        self.label_space
            .index_of(&r.label)
            .expect("validated label")
    }

    /// Copy holding only the records accepted by `keep`.
    pub fn filtered(&self, keep: impl Fn(&ClipRecord) -> bool) -> Self {
        Self {
            records: self.records.iter().filter(|r| keep(r)).cloned().collect(),
            ..self.clone()
        }
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let header = Header {
            label_space: self.label_space.clone(),
            frame_size: self.frame_size,
            preprocessed: self.preprocessed,
        };
        let mut out = serde_json::to_string(&header)?;
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn parse(text: &str, root: impl Into<PathBuf>) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty());
        let (_, first) = lines.next().ok_or(Error::ManifestParse {
            line: 1,
            message: "empty manifest".into(),
        })?;
        let header: Header = serde_json::from_str(first).map_err(|e| Error::ManifestParse {
            line: 1,
            message: e.to_string(),
        })?;
        let mut records = Vec::new();
        for (i, line) in lines {
            let r: ClipRecord = serde_json::from_str(line).map_err(|e| Error::ManifestParse {
                line: i + 1,
                message: e.to_string(),
            })?;
            records.push(r);
        }
        let m = Self {
            records,
            label_space: header.label_space,
            frame_size: header.frame_size,
            preprocessed: header.preprocessed,
            root: root.into(),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(p) = path.parent() {
            fs::create_dir_all(p).map_err(|e| Error::io(p, e))?;
        }
        fs::write(path, self.to_jsonl()?).map_err(|e| Error::io(path, e))
    }
}

/// Reads, validates and checks the frame paths of a manifest file.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let m = DatasetManifest::parse(&text, root)?;
    for r in &m.records {
        let p = m.resolve(r);
        if !p.exists() {
            return Err(Error::MissingFrames {
                clip_id: r.clip_id.clone(),
                path: p,
            });
        }
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: &str, onset: usize, apex: usize) -> ClipRecord {
        ClipRecord {
            clip_id: id.into(),
            subject_id: "s1".into(),
            label: "positive".into(),
            frames_path: PathBuf::from(id),
            onset_index: onset,
            apex_index: apex,
            source_dataset: "synthetic".into(),
            magnification_factor: 0,
        }
    }

    fn manifest(records: Vec<ClipRecord>) -> DatasetManifest {
        let mut m = DatasetManifest::new(LabelSpace::cde3(), (32, 32), "");
        m.records = records;
        m
    }

    #[test]
    fn two_records_round_trip() {
        let m = manifest(vec![record("a", 0, 1), record("b", 2, 5)]);
        let back = DatasetManifest::parse(&m.to_jsonl().unwrap(), "").unwrap();
        assert_eq!(back.records.len(), 2);
        assert_eq!(back, m);
    }

    #[test]
    fn onset_after_apex_names_the_clip() {
        let m = manifest(vec![record("bad_clip", 3, 3)]);
        match m.validate() {
            Err(Error::InvalidRecord { clip_id, .. }) => assert_eq!(clip_id, "bad_clip"),
            other => panic!("unexpected {:?}", other),
        }
    }

    #[test]
    fn unknown_label_and_oversized_factor_are_rejected() {
        let mut r = record("x", 0, 1);
        r.label = "joy".into();
        assert!(manifest(vec![r]).validate().is_err());
        let mut r = record("y", 0, 1);
        r.magnification_factor = 15;
        assert!(manifest(vec![r]).validate().is_err());
    }

    #[test]
    fn unpreprocessed_manifest_is_rejected() {
        let mut m = manifest(vec![record("a", 0, 1)]);
        m.preprocessed = false;
        assert!(m.validate().is_err());
    }

    #[test]
    fn cde3_merges_raw_labels() {
        let ls = LabelSpace::cde3();
        assert_eq!(ls.map_raw("happiness").unwrap(), "positive");
        assert_eq!(ls.map_raw("disgust").unwrap(), "negative");
        assert!(ls.map_raw("joy").is_err());
        let bad = LabelSpace::new(
            Task::Cde3,
            vec!["a".into(), "b".into(), "c".into()],
            BTreeMap::new(),
        );
        assert!(bad.is_err());
    }

    #[test]
    fn garbage_line_reports_its_number() {
        let m = manifest(vec![record("a", 0, 1)]);
        let text = m.to_jsonl().unwrap() + "{not json\n";
        match DatasetManifest::parse(&text, "") {
            Err(Error::ManifestParse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {:?}", other),
        }
    }
}
