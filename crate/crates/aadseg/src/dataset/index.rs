//! Manifest loading and dataset-contract validation.
//!
//! `manifest.json` is an array of records with keys exactly
//! `image, mask, class, role, tags, split`. Loading reads every referenced
//! raster into memory and enforces the dataset invariants as hard errors:
//! disjoint train/test class sets, clean supports, tagged queries, nonempty
//! masks, uniform raster sizes, and the test-split sample minimums.

use super::pnm::{read_image_pgm, read_mask_pgm};
use super::raster::{Mask, Raster};
use super::transforms::HardTag;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const MIN_TEST_SUPPORTS: usize = 20;
pub const MIN_TEST_QUERIES: usize = 10;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub image: String,
    pub mask: String,
    pub class: String,
    pub role: String,
    pub tags: Vec<String>,
    pub split: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// One loaded sample: file provenance plus its in-memory rasters.
#[derive(Clone, Debug)]
pub struct SampleRef {
    pub image_path: PathBuf,
    pub mask_path: PathBuf,
    pub tags: Vec<HardTag>,
    pub image: Raster,
    pub mask: Mask,
}

#[derive(Clone, Debug)]
pub struct ClassEntry {
    pub name: String,
    pub supports: Vec<SampleRef>,
    pub queries: Vec<SampleRef>,
}

/// Validated, fully loaded dataset.
#[derive(Clone, Debug)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub image_size: usize,
    pub train: Vec<ClassEntry>,
    pub test: Vec<ClassEntry>,
}

impl DatasetIndex {
    pub fn split(&self, split: Split) -> &[ClassEntry] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }
}

pub fn load_manifest(root: &Path) -> Result<DatasetIndex> {
    let manifest_path = root.join("manifest.json");
    let text = std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let records: Vec<ManifestRecord> = serde_json::from_str(&text)
        .map_err(|e| Error::format(&manifest_path, format!("manifest parse: {e}")))?;

    let mut train: Vec<ClassEntry> = Vec::new();
    let mut test: Vec<ClassEntry> = Vec::new();
    let mut size: Option<usize> = None;

    for rec in &records {
        let is_support = match rec.role.as_str() {
            "support" => true,
            "query" => false,
            other => {
                return Err(Error::Contract(format!("unknown role {other:?} in manifest")));
            }
        };
        let classes = match rec.split.as_str() {
            "train" => &mut train,
            "test" => &mut test,
            other => {
                return Err(Error::Contract(format!("unknown split {other:?} in manifest")));
            }
        };
        let tags: Vec<HardTag> = rec.tags.iter().map(|t| HardTag::parse(t)).collect::<Result<_>>()?;
        if is_support && !tags.is_empty() {
            return Err(Error::Contract(format!(
                "support sample {} carries tags; supports must be clean",
                rec.image
            )));
        }
        if !is_support && tags.is_empty() {
            return Err(Error::Contract(format!(
                "query sample {} has no hardness tag",
                rec.image
            )));
        }

        let image_path = root.join(&rec.image);
        let mask_path = root.join(&rec.mask);
        let image = read_image_pgm(&image_path)?;
        let mask = read_mask_pgm(&mask_path)?;
        if image.width != mask.width || image.height != mask.height {
            return Err(Error::Contract(format!(
                "{}: image {}x{} and mask {}x{} disagree",
                rec.image, image.width, image.height, mask.width, mask.height
            )));
        }
        if image.width != image.height {
            return Err(Error::Contract(format!("{}: rasters must be square", rec.image)));
        }
        match size {
            None => size = Some(image.width),
            Some(s) if s != image.width => {
                return Err(Error::Contract(format!(
                    "{}: raster size {} differs from {}; resize to a uniform size",
                    rec.image, image.width, s
                )));
            }
            _ => {}
        }
        if mask.fg_count() == 0 {
            return Err(Error::Contract(format!("{}: mask has no foreground", rec.mask)));
        }

        let entry = match classes.iter_mut().find(|c| c.name == rec.class) {
            Some(e) => e,
            None => {
                classes.push(ClassEntry {
                    name: rec.class.clone(),
                    supports: Vec::new(),
                    queries: Vec::new(),
                });
                classes.last_mut().unwrap()
            }
        };
        let sample = SampleRef { image_path, mask_path, tags, image, mask };
        if is_support {
            entry.supports.push(sample);
        } else {
            entry.queries.push(sample);
        }
    }

    for t in &train {
        if test.iter().any(|n| n.name == t.name) {
            return Err(Error::Contract(format!(
                "class {:?} appears in both splits; label spaces must be disjoint",
                t.name
            )));
        }
    }
    for c in &test {
        if c.supports.len() < MIN_TEST_SUPPORTS || c.queries.len() < MIN_TEST_QUERIES {
            return Err(Error::Contract(format!(
                "test class {:?} has {} supports / {} queries; minimum is {MIN_TEST_SUPPORTS}/{MIN_TEST_QUERIES}",
                c.name,
                c.supports.len(),
                c.queries.len()
            )));
        }
    }
    let image_size = size.ok_or_else(|| Error::Contract("manifest lists no samples".into()))?;
    Ok(DatasetIndex { root: root.to_path_buf(), image_size, train, test })
}

#[cfg(test)]
mod tests {
    use super::super::generate::{generate_dataset, GenConfig};
    use super::*;

    fn small_config() -> GenConfig {
        GenConfig {
            base_classes: vec!["disk".into(), "bar".into()],
            novel_classes: vec!["ellipse".into()],
            train_supports: 2,
            train_queries: 5,
            test_supports: 20,
            test_queries: 10,
            ..GenConfig::default()
        }
    }

    #[test]
    fn generated_dataset_loads_and_validates() {
        let dir = tempfile::tempdir().unwrap();
        let idx = generate_dataset(dir.path(), &small_config(), 5).unwrap();
        assert_eq!(idx.train.len(), 2);
        assert_eq!(idx.test.len(), 1);
        assert_eq!(idx.image_size, 64);
        for c in &idx.train {
            assert_eq!(c.supports.len(), 2);
            assert_eq!(c.queries.len(), 5);
            for s in &c.supports {
                assert!(s.tags.is_empty());
            }
            for q in &c.queries {
                assert!(!q.tags.is_empty());
            }
        }
    }

    fn patch_manifest(root: &Path, from: &str, to: &str) {
        let p = root.join("manifest.json");
        let text = std::fs::read_to_string(&p).unwrap().replace(from, to);
        std::fs::write(&p, text).unwrap();
    }

    #[test]
    fn class_in_both_splits_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        generate_dataset(dir.path(), &small_config(), 5).unwrap();
        // relabel the novel class to collide with a base class name
        patch_manifest(dir.path(), "\"class\": \"ellipse\"", "\"class\": \"disk\"");
        let err = load_manifest(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Contract(_)), "got {err:?}");
    }

    #[test]
    fn tagged_support_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        generate_dataset(dir.path(), &small_config(), 5).unwrap();
        let p = dir.path().join("manifest.json");
        let text = std::fs::read_to_string(&p).unwrap();
        // first support record: give it a blur tag
        let patched = text.replacen(
            "\"role\": \"support\",\n    \"tags\": []",
            "\"role\": \"support\",\n    \"tags\": [\"blur\"]",
            1,
        );
        assert_ne!(text, patched, "fixture should contain a support record");
        std::fs::write(&p, patched).unwrap();
        assert!(matches!(load_manifest(dir.path()), Err(Error::Contract(_))));
    }

    #[test]
    fn missing_file_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        generate_dataset(dir.path(), &small_config(), 5).unwrap();
        std::fs::remove_file(dir.path().join("train/disk/support/0000.img.pgm")).unwrap();
        assert!(matches!(load_manifest(dir.path()), Err(Error::Io { .. })));
    }

    #[test]
    fn unknown_manifest_key_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        generate_dataset(dir.path(), &small_config(), 5).unwrap();
        patch_manifest(dir.path(), "\"split\": \"train\"", "\"split\": \"train\", \"extra\": 1");
        assert!(matches!(load_manifest(dir.path()), Err(Error::Format { .. })));
    }

    #[test]
    fn undersized_test_class_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        generate_dataset(dir.path(), &small_config(), 5).unwrap();
        // drop one test support file from the manifest (not from disk)
        let p = dir.path().join("manifest.json");
        let text = std::fs::read_to_string(&p).unwrap();
        let needle = "test/ellipse/support/0019.img.pgm";
        let start = text.find("{\n    \"image\": \"").unwrap();
        let _ = start;
        let records: Vec<ManifestRecord> = serde_json::from_str(&text).unwrap();
        let filtered: Vec<_> = records.into_iter().filter(|r| r.image != needle).collect();
        std::fs::write(&p, serde_json::to_string_pretty(&filtered).unwrap()).unwrap();
        assert!(matches!(load_manifest(dir.path()), Err(Error::Contract(_))));
    }
}
