//! Line-delimited JSON shot manifests.
//!
//! Each non-blank line is one JSON object:
//!
//! ```text
//! {"shot_id":"s0001","media_uri":"media/s0001.srv","frame_start":0,"frame_end":16,"fps":24.0,"scale":"MS","movement":"static","split":"train"}
//! ```
//!
//! An optional first line `{"manifest_header":{"train":N,"val":N,"test":N}}`
//! declares per-split counts, which are then checked. Keys other than the
//! documented ones are kept verbatim and written back out.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use serde_json::{Map, Value};

use crate::data::labels::{MovementType, ScaleType, Split};
use crate::error::{Error, Result};

const KNOWN_KEYS: [&str; 8] = ["shot_id", "media_uri", "frame_start", "frame_end", "fps", "scale", "movement", "split"];
const HEADER_KEY: &str = "manifest_header";

/// One annotated shot.
#[derive(Debug, Clone, PartialEq)]
pub struct ShotRecord {
    pub shot_id: String,
    pub media_uri: String,
    pub frame_start: u64,
    pub frame_end: u64,
    pub fps: f64,
    pub scale: Option<ScaleType>,
    pub movement: Option<MovementType>,
    pub split: Split,
    /// Unrecognized keys, preserved on round-trip.
    pub extra: BTreeMap<String, Value>,
}

impl ShotRecord {
    pub fn num_frames(&self) -> u64 {
        self.frame_end - self.frame_start
    }

    /// Checks the record-local invariants. `line` is used in error messages.
    pub fn validate(&self, line: usize) -> Result<()> {
        if self.frame_end <= self.frame_start {
            return Err(Error::InvalidFrameSpan { line, start: self.frame_start, end: self.frame_end });
        }
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return Err(Error::Parse { line, message: format!("fps must be positive, got {}", self.fps) });
        }
        if self.shot_id.is_empty() {
            return Err(Error::Parse { line, message: "empty shot_id".into() });
        }
        if self.split != Split::Predict && (self.scale.is_none() || self.movement.is_none()) {
            return Err(Error::Parse {
                line,
                message: format!("shot `{}` in split {} needs both scale and movement labels", self.shot_id, self.split),
            });
        }
        Ok(())
    }

    fn to_json(&self) -> Value {
        let mut m = Map::new();
        for (k, v) in &self.extra {
            m.insert(k.clone(), v.clone());
        }
        m.insert("shot_id".into(), self.shot_id.clone().into());
        m.insert("media_uri".into(), self.media_uri.clone().into());
        m.insert("frame_start".into(), self.frame_start.into());
        m.insert("frame_end".into(), self.frame_end.into());
        m.insert("fps".into(), self.fps.into());
        if let Some(s) = self.scale {
            m.insert("scale".into(), s.as_str().into());
        }
        if let Some(mv) = self.movement {
            m.insert("movement".into(), mv.as_str().into());
        }
        m.insert("split".into(), self.split.as_str().into());
        Value::Object(m)
    }

    fn from_json(obj: Map<String, Value>, line: usize) -> Result<Self> {
        let err = |message: String| Error::Parse { line, message };
        let str_field = |key: &str| -> Result<String> {
            match obj.get(key) {
                Some(Value::String(s)) => Ok(s.clone()),
                Some(other) => Err(err(format!("`{key}` must be a string, got {other}"))),
                None => Err(err(format!("missing `{key}`"))),
            }
        };
        let u64_field = |key: &str| -> Result<u64> {
            obj.get(key)
                .and_then(Value::as_u64)
                .ok_or_else(|| err(format!("`{key}` must be a non-negative integer")))
        };
        let label = |key: &str| -> Result<Option<String>> {
            match obj.get(key) {
                None | Some(Value::Null) => Ok(None),
                Some(Value::String(s)) => Ok(Some(s.clone())),
                Some(other) => Err(err(format!("`{key}` must be a string, got {other}"))),
            }
        };
        let scale = label("scale")?
            .map(|s| s.parse::<ScaleType>())
            .transpose()
            .map_err(|e| err(format!("scale: {e}")))?;
        let movement = label("movement")?
            .map(|s| s.parse::<MovementType>())
            .transpose()
            .map_err(|e| err(format!("movement: {e}")))?;
        let split = str_field("split")?.parse::<Split>().map_err(|e| err(format!("split: {e}")))?;
        let fps = obj.get("fps").and_then(Value::as_f64).ok_or_else(|| err("`fps` must be a number".into()))?;
        let record = ShotRecord {
            shot_id: str_field("shot_id")?,
            media_uri: str_field("media_uri")?,
            frame_start: u64_field("frame_start")?,
            frame_end: u64_field("frame_end")?,
            fps,
            scale,
            movement,
            split,
            extra: obj.into_iter().filter(|(k, _)| !KNOWN_KEYS.contains(&k.as_str())).collect(),
        };
        record.validate(line)?;
        Ok(record)
    }
}

/// A validated, immutable collection of shots.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    records: Vec<ShotRecord>,
    /// Directory that relative `media_uri` values resolve against.
    base_dir: Option<PathBuf>,
}

impl Manifest {
    /// Validates uniqueness and per-record invariants.
    pub fn new(records: Vec<ShotRecord>) -> Result<Self> {
        let mut seen: HashMap<&str, usize> = HashMap::new();
        for (i, r) in records.iter().enumerate() {
            r.validate(i + 1)?;
            if let Some(&first) = seen.get(r.shot_id.as_str()) {
                return Err(Error::DuplicateShotId { line: i + 1, first_line: first, shot_id: r.shot_id.clone() });
            }
            seen.insert(&r.shot_id, i + 1);
        }
        Ok(Self { records, base_dir: None })
    }

    pub fn with_base_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.base_dir = Some(dir.into());
        self
    }

    pub fn base_dir(&self) -> Option<&Path> {
        self.base_dir.as_deref()
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        let mut records = Vec::new();
        let mut seen: HashMap<String, usize> = HashMap::new();
        let mut header: Option<(usize, BTreeMap<String, u64>)> = None;
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() {
                continue;
            }
            let value: Value =
                serde_json::from_str(trimmed).map_err(|e| Error::Parse { line, message: e.to_string() })?;
            let Value::Object(mut obj) = value else {
                return Err(Error::Parse { line, message: "expected a JSON object".into() });
            };
            if let Some(h) = obj.remove(HEADER_KEY) {
                if !records.is_empty() || header.is_some() {
                    return Err(Error::Parse { line, message: "header must be the first record".into() });
                }
                let counts: BTreeMap<String, u64> = serde_json::from_value(h)
                    .map_err(|e| Error::Parse { line, message: format!("bad header: {e}") })?;
                header = Some((line, counts));
                continue;
            }
            let record = ShotRecord::from_json(obj, line)?;
            if let Some(&first_line) = seen.get(&record.shot_id) {
                return Err(Error::DuplicateShotId { line, first_line, shot_id: record.shot_id });
            }
            seen.insert(record.shot_id.clone(), line);
            records.push(record);
        }
        let manifest = Self { records, base_dir: None };
        if let Some((line, counts)) = header {
            for (name, &expected) in &counts {
                let split: Split =
                    name.parse().map_err(|e| Error::Parse { line, message: format!("header: {e}") })?;
                let actual = manifest.count(split) as u64;
                if actual != expected {
                    return Err(Error::Parse {
                        line,
                        message: format!("header declares {expected} {split} shots, found {actual}"),
                    });
                }
            }
        }
        Ok(manifest)
    }

    /// Reads a manifest; relative media paths resolve against its directory.
    pub fn parse_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self::parse_str(&text)?.with_base_dir(base))
    }

    /// One JSON object per line, optionally preceded by a count header.
    pub fn serialize(&self, with_header: bool) -> String {
        let mut out = String::new();
        if with_header {
            let counts: BTreeMap<&str, usize> = [Split::Train, Split::Val, Split::Test]
                .iter()
                .map(|&s| (s.as_str(), self.count(s)))
                .collect();
            out.push_str(&serde_json::json!({ HEADER_KEY: counts }).to_string());
            out.push('\n');
        }
        for r in &self.records {
            out.push_str(&r.to_json().to_string());
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: impl AsRef<Path>, with_header: bool) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.serialize(with_header)).map_err(|e| Error::io(path, e))
    }

    pub fn records(&self) -> &[ShotRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn count(&self, split: Split) -> usize {
        self.records.iter().filter(|r| r.split == split).count()
    }

    pub fn get(&self, shot_id: &str) -> Option<&ShotRecord> {
        self.records.iter().find(|r| r.shot_id == shot_id)
    }

    /// Records of one split, in file order.
    pub fn split_view(&self, split: Split) -> Vec<&ShotRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    /// Resolves a record's media path against the manifest directory.
    pub fn media_path(&self, record: &ShotRecord) -> PathBuf {
        let p = PathBuf::from(&record.media_uri);
        match (&self.base_dir, p.is_absolute()) {
            (Some(base), false) => base.join(p),
            _ => p,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(id: &str, split: &str) -> String {
        format!(
            r#"{{"shot_id":"{id}","media_uri":"m/{id}.srv","frame_start":0,"frame_end":10,"fps":24,"scale":"ms","movement":"Static","split":"{split}"}}"#
        )
    }

    #[test]
    fn empty_text_is_empty_manifest() {
        let m = Manifest::parse_str("").unwrap();
        assert_eq!(m.len(), 0);
        assert!(m.split_view(Split::Val).is_empty());
    }

    #[test]
    fn duplicate_id_reports_the_later_line() {
        let lines: Vec<String> =
            ["a", "b", "c", "d", "e", "f", "c"].iter().map(|id| line(id, "train")).collect();
        match Manifest::parse_str(&lines.join("\n")) {
            Err(Error::DuplicateShotId { line, first_line, shot_id }) => {
                assert_eq!((line, first_line, shot_id.as_str()), (7, 3, "c"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn split_view_keeps_file_order() {
        let text = [line("A", "train"), line("B", "test"), line("C", "train")].join("\n");
        let m = Manifest::parse_str(&text).unwrap();
        let ids: Vec<_> = m.split_view(Split::Train).iter().map(|r| r.shot_id.as_str()).collect();
        assert_eq!(ids, ["A", "C"]);
        assert_eq!(m.split_view(Split::Test)[0].shot_id, "B");
    }

    #[test]
    fn rejects_bad_spans_labels_and_missing_labels() {
        let bad_span = line("x", "train").replace(r#""frame_end":10"#, r#""frame_end":0"#);
        assert!(matches!(Manifest::parse_str(&bad_span), Err(Error::InvalidFrameSpan { line: 1, .. })));
        let bad_label = line("x", "train").replace(r#""ms""#, r#""XL""#);
        assert!(matches!(Manifest::parse_str(&bad_label), Err(Error::Parse { line: 1, .. })));
        let unlabeled = r#"{"shot_id":"u","media_uri":"u","frame_start":0,"frame_end":3,"fps":25,"split":"train"}"#;
        assert!(Manifest::parse_str(unlabeled).is_err());
        let predict = unlabeled.replace("train", "predict");
        assert_eq!(Manifest::parse_str(&predict).unwrap().count(Split::Predict), 1);
    }

    #[test]
    fn labels_are_written_canonically_and_extras_survive() {
        let text = line("k", "val").replace(r#""split""#, r#""director":"x","split""#);
        let m = Manifest::parse_str(&text).unwrap();
        let out = m.serialize(false);
        assert!(out.contains(r#""scale":"MS""#));
        assert!(out.contains(r#""movement":"static""#));
        assert!(out.contains(r#""director":"x""#));
        assert_eq!(Manifest::parse_str(&out).unwrap(), m);
    }

    #[test]
    fn header_counts_are_checked() {
        let body = [line("a", "train"), line("b", "test")].join("\n");
        let ok = format!("{{\"manifest_header\":{{\"train\":1,\"test\":1}}}}\n{body}");
        assert_eq!(Manifest::parse_str(&ok).unwrap().len(), 2);
        let bad = format!("{{\"manifest_header\":{{\"train\":2}}}}\n{body}");
        assert!(Manifest::parse_str(&bad).is_err());
    }
}
