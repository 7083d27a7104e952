//! Image directories with an optional COCO-style annotation file.
//!
//! Layout: a directory of images plus `annotations.json` holding
//! `{images: [{id, file_name, width, height}], annotations: [{image_id, bbox:
//! [x, y, w, h], category_id}], categories: [{id, name}]}`. Without the file
//! every PNG or JPEG in the directory is listed in name order and ground truth
//! is absent. A path to the JSON file itself is accepted too, with images
//! resolved against its directory.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BoxGeometry;
use crate::image::ImageTensor;
use crate::scene::{Annotation, LabeledImage, SceneSource};

pub const ANNOTATION_FILE: &str = "annotations.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    pub file_name: String,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoAnnotation {
    pub image_id: u64,
    pub bbox: [f64; 4],
    pub category_id: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoCategory {
    pub id: u64,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoFile {
    pub images: Vec<CocoImage>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotations: Option<Vec<CocoAnnotation>>,
    #[serde(default)]
    pub categories: Vec<CocoCategory>,
}

pub type ImageEntry = CocoImage;

/// A validated dataset. Images are read on demand.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub images: Vec<ImageEntry>,
    /// Per image id, in the detector's category indices. `None` when the
    /// dataset carries no annotations.
    pub ground_truth: Option<BTreeMap<u64, Vec<Annotation>>>,
    /// The detector's category table the annotations were mapped onto.
    pub category_names: Vec<String>,
    /// Annotation category names with no counterpart in the table. Their
    /// boxes are dropped.
    pub unmapped_categories: Vec<String>,
}

fn dataset_err(msg: impl Into<String>) -> Error {
    Error::Dataset(msg.into())
}

fn is_image_file(p: &Path) -> bool {
    matches!(
        p.extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
            .as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

/// Loads a dataset and maps annotation categories onto `category_names` by
/// name. The background name never receives boxes.
pub fn load_dataset(path: impl AsRef<Path>, category_names: &[String]) -> Result<DatasetManifest> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(dataset_err(format!("{} does not exist", path.display())));
    }
    let (root, file) = if path.is_dir() {
        let f = path.join(ANNOTATION_FILE);
        (path.to_path_buf(), f.exists().then_some(f))
    } else {
        let root = path
            .parent()
            .map_or_else(|| PathBuf::from("."), Path::to_path_buf);
        (root, Some(path.to_path_buf()))
    };
    let manifest = match file {
        Some(f) => {
            let text = std::fs::read_to_string(&f).map_err(|e| Error::io(&f, e))?;
            let coco: CocoFile = serde_json::from_str(&text).map_err(|e| {
                dataset_err(format!("{}: malformed annotation JSON: {e}", f.display()))
            })?;
            from_coco(root, coco, category_names)?
        }
        None => scan_directory(root, category_names)?,
    };
    for entry in &manifest.images {
        let p = manifest.root.join(&entry.file_name);
        if !p.is_file() {
            return Err(dataset_err(format!(
                "image {} ({}) is missing",
                entry.id,
                p.display()
            )));
        }
    }
    Ok(manifest)
}

fn scan_directory(root: PathBuf, category_names: &[String]) -> Result<DatasetManifest> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(&root)
        .map_err(|e| Error::io(&root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image_file(p))
        .collect();
    files.sort();
    let mut images = Vec::with_capacity(files.len());
    for (i, f) in files.iter().enumerate() {
        let (w, h) = image::image_dimensions(f).map_err(|e| Error::Codec {
            path: f.clone(),
            source: e,
        })?;
        images.push(CocoImage {
            id: i as u64 + 1,
            file_name: f
                .file_name()
                .and_then(|n| n.to_str())
                .ok_or_else(|| dataset_err(format!("non-UTF-8 file name {}", f.display())))?
                .to_string(),
            width: w as usize,
            height: h as usize,
        });
    }
    Ok(DatasetManifest {
        root,
        images,
        ground_truth: None,
        category_names: category_names.to_vec(),
        unmapped_categories: Vec::new(),
    })
}

fn from_coco(root: PathBuf, coco: CocoFile, category_names: &[String]) -> Result<DatasetManifest> {
    let mut ids = BTreeSet::new();
    for img in &coco.images {
        if !ids.insert(img.id) {
            return Err(dataset_err(format!("duplicate image id {}", img.id)));
        }
        if img.width == 0 || img.height == 0 {
            return Err(dataset_err(format!("image {} has zero size", img.id)));
        }
    }
    let mut cat_map: BTreeMap<u64, Option<usize>> = BTreeMap::new();
    let mut unmapped = Vec::new();
    for c in &coco.categories {
        let idx = category_names
            .iter()
            .position(|n| n == &c.name)
            .filter(|&i| category_names[i] != "background");
        if idx.is_none() {
            unmapped.push(c.name.clone());
        }
        if cat_map.insert(c.id, idx).is_some() {
            return Err(dataset_err(format!("duplicate category id {}", c.id)));
        }
    }
    if !unmapped.is_empty() {
        log::warn!("categories without a detector counterpart: {unmapped:?}");
    }

    let ground_truth = match coco.annotations {
        None => None,
        Some(anns) => {
            let mut gt: BTreeMap<u64, Vec<Annotation>> =
                coco.images.iter().map(|i| (i.id, Vec::new())).collect();
            for (n, a) in anns.iter().enumerate() {
                let Some(list) = gt.get_mut(&a.image_id) else {
                    return Err(dataset_err(format!(
                        "annotation {n} references missing image id {}",
                        a.image_id
                    )));
                };
                let Some(mapped) = cat_map.get(&a.category_id) else {
                    return Err(dataset_err(format!(
                        "annotation {n} references missing category id {}",
                        a.category_id
                    )));
                };
                let [x, y, w, h] = a.bbox;
                let geometry = BoxGeometry::from_xywh(x, y, w, h)
                    .map_err(|e| dataset_err(format!("annotation {n}: {e}")))?;
                if let Some(category_index) = *mapped {
                    list.push(Annotation {
                        geometry,
                        category_index,
                    });
                }
            }
            Some(gt)
        }
    };
    Ok(DatasetManifest {
        root,
        images: coco.images,
        ground_truth,
        category_names: category_names.to_vec(),
        unmapped_categories: unmapped,
    })
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn ground_truth_for(&self, id: u64) -> Option<&[Annotation]> {
        self.ground_truth
            .as_ref()
            .map(|g| g.get(&id).map_or(&[][..], Vec::as_slice))
    }

    /// Reads image `index`, checking its size against the manifest.
    pub fn load_image(&self, index: usize) -> Result<ImageTensor> {
        let entry = self
            .images
            .get(index)
            .ok_or_else(|| dataset_err(format!("image index {index} out of range")))?;
        let img = ImageTensor::read(self.root.join(&entry.file_name))?;
        if (img.width(), img.height()) != (entry.width, entry.height) {
            return Err(dataset_err(format!(
                "image {} is {}x{}, manifest says {}x{}",
                entry.id,
                img.width(),
                img.height(),
                entry.width,
                entry.height
            )));
        }
        Ok(img)
    }
}

impl SceneSource for DatasetManifest {
    fn len(&self) -> usize {
        self.images.len()
    }

    /// Images without ground truth come back with no annotations.
    fn scene(&self, index: usize) -> Result<LabeledImage> {
        let image = self.load_image(index)?;
        let id = self.images[index].id;
        Ok(LabeledImage {
            id,
            image,
            annotations: self.ground_truth_for(id).unwrap_or(&[]).to_vec(),
        })
    }
}

/// Writes every scene of `source` as `<id>.png` plus `annotations.json`.
pub fn write_corpus(
    source: &dyn SceneSource,
    category_names: &[String],
    dir: impl AsRef<Path>,
) -> Result<DatasetManifest> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut coco = CocoFile {
        images: Vec::with_capacity(source.len()),
        annotations: Some(Vec::new()),
        categories: category_names
            .iter()
            .enumerate()
            .skip(1)
            .map(|(i, n)| CocoCategory {
                id: i as u64,
                name: n.clone(),
            })
            .collect(),
    };
    for i in 0..source.len() {
        let scene = source.scene(i)?;
        let file_name = format!("{}.png", scene.id);
        scene.image.write_png8(dir.join(&file_name))?;
        coco.images.push(CocoImage {
            id: scene.id,
            file_name,
            width: scene.image.width(),
            height: scene.image.height(),
        });
        let anns = coco.annotations.as_mut().expect("set above");
        for a in &scene.annotations {
            let [x, y, w, h] = a.geometry.to_xywh();
            anns.push(CocoAnnotation {
                image_id: scene.id,
                bbox: [x, y, w, h],
                category_id: a.category_index as u64,
            });
        }
    }
    let path = dir.join(ANNOTATION_FILE);
    std::fs::write(&path, serde_json::to_string_pretty(&coco)?).map_err(|e| Error::io(&path, e))?;
    load_dataset(dir, category_names)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{SyntheticCorpus, SHAPE_CATEGORIES};

    fn names() -> Vec<String> {
        SHAPE_CATEGORIES.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn corpus_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = SyntheticCorpus::new(3, 4);
        let m = write_corpus(&corpus, &names(), dir.path()).unwrap();
        assert_eq!(m.len(), 4);
        for i in 0..4 {
            let a = corpus.scene(i).unwrap();
            let b = m.scene(i).unwrap();
            assert_eq!(a.image, b.image);
            assert_eq!(a.id, b.id);
            assert_eq!(a.annotations.len(), b.annotations.len());
            for (x, y) in a.annotations.iter().zip(&b.annotations) {
                assert_eq!(x.category_index, y.category_index);
                assert!(x.geometry.iou(&y.geometry) > 0.999);
            }
        }
    }

    #[test]
    fn dangling_image_reference_is_named() {
        let dir = tempfile::tempdir().unwrap();
        ImageTensor::filled(16, 16, 0.5)
            .unwrap()
            .write_png8(dir.path().join("a.png"))
            .unwrap();
        let coco = serde_json::json!({
            "images": [{"id": 1, "file_name": "a.png", "width": 16, "height": 16}],
            "annotations": [{"image_id": 42, "bbox": [0, 0, 2, 2], "category_id": 1}],
            "categories": [{"id": 1, "name": "circle"}]
        });
        std::fs::write(dir.path().join(ANNOTATION_FILE), coco.to_string()).unwrap();
        let err = load_dataset(dir.path(), &names()).unwrap_err().to_string();
        assert!(err.contains("42"), "{err}");
    }

    #[test]
    fn plain_directory_has_no_ground_truth() {
        let dir = tempfile::tempdir().unwrap();
        for n in ["b.png", "a.png"] {
            ImageTensor::filled(16, 17, 0.5)
                .unwrap()
                .write_png8(dir.path().join(n))
                .unwrap();
        }
        std::fs::write(dir.path().join("notes.txt"), "x").unwrap();
        let m = load_dataset(dir.path(), &names()).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m.images[0].file_name, "a.png");
        assert_eq!((m.images[0].width, m.images[0].height), (17, 16));
        assert!(m.ground_truth.is_none());
        assert!(m.ground_truth_for(1).is_none());
    }

    #[test]
    fn unknown_names_are_reported_and_dropped() {
        let dir = tempfile::tempdir().unwrap();
        ImageTensor::filled(16, 16, 0.5)
            .unwrap()
            .write_png8(dir.path().join("a.png"))
            .unwrap();
        let coco = serde_json::json!({
            "images": [{"id": 5, "file_name": "a.png", "width": 16, "height": 16}],
            "annotations": [
                {"image_id": 5, "bbox": [0, 0, 2, 2], "category_id": 1},
                {"image_id": 5, "bbox": [1, 1, 2, 2], "category_id": 9}
            ],
            "categories": [{"id": 1, "name": "person"}, {"id": 9, "name": "square"}]
        });
        let file = dir.path().join("subset.json");
        std::fs::write(&file, coco.to_string()).unwrap();
        let m = load_dataset(&file, &names()).unwrap();
        assert_eq!(m.unmapped_categories, vec!["person".to_string()]);
        let gt = m.ground_truth_for(5).unwrap();
        assert_eq!(gt.len(), 1);
        assert_eq!(gt[0].category_index, 2);
    }

    #[test]
    fn missing_path_and_malformed_json() {
        assert!(load_dataset("/definitely/not/here", &names()).is_err());
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join(ANNOTATION_FILE), "{not json").unwrap();
        assert!(matches!(
            load_dataset(dir.path(), &names()),
            Err(Error::Dataset(_))
        ));
    }
}
