//! LIP-style dataset directory: `images/<stem>.ppm`, `labels/<stem>.pgm`,
//! `splits/{train,val}.txt`.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use super::pnm::{read_image, read_labels};
use super::{DataError, SegSample, IGNORE};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampleRef {
    pub stem: String,
    pub image: PathBuf,
    pub labels: PathBuf,
}

/// Matched image/label pairs per split. Samples are read on demand.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LipIndex {
    pub root: PathBuf,
    pub train: Vec<SampleRef>,
    pub val: Vec<SampleRef>,
}

impl LipIndex {
    pub fn split(&self, name: &str) -> Option<&[SampleRef]> {
        match name {
            "train" => Some(&self.train),
            "val" => Some(&self.val),
            _ => None,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.train.is_empty() && self.val.is_empty()
    }
}

fn stems(dir: &Path, ext: &[&str]) -> Result<BTreeSet<String>, DataError> {
    let mut out = BTreeSet::new();
    if !dir.exists() {
        return Ok(out);
    }
    for entry in fs::read_dir(dir).map_err(|e| DataError::io(dir, e))? {
        let path = entry.map_err(|e| DataError::io(dir, e))?.path();
        let matches = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| ext.contains(&e));
        if matches {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string());
            }
        }
    }
    Ok(out)
}

fn find(dir: &Path, stem: &str, ext: &[&str]) -> PathBuf {
    ext.iter()
        .map(|e| dir.join(format!("{stem}.{e}")))
        .find(|p| p.exists())
        .unwrap_or_else(|| dir.join(format!("{stem}.{}", ext[0])))
}

const IMAGE_EXT: [&str; 2] = ["ppm", "pnm"];
const LABEL_EXT: [&str; 2] = ["pgm", "pnm"];

/// Indexes `root`. Every image needs a label map with the same stem and vice
/// versa; split files list stems one per line (blank lines and `#` comments
/// are skipped).
pub fn load_lip_dir(root: &Path) -> Result<LipIndex, DataError> {
    if !root.is_dir() {
        return Err(DataError::MissingPath(root.to_path_buf()));
    }
    let images_dir = root.join("images");
    let labels_dir = root.join("labels");
    let images = stems(&images_dir, &IMAGE_EXT)?;
    let labels = stems(&labels_dir, &LABEL_EXT)?;
    let mut orphans: Vec<String> = images
        .difference(&labels)
        .map(|s| format!("images/{s} (no label map)"))
        .collect();
    orphans.extend(labels.difference(&images).map(|s| format!("labels/{s} (no image)")));
    if !orphans.is_empty() {
        return Err(DataError::Orphans(orphans));
    }
    let mut index = LipIndex {
        root: root.to_path_buf(),
        ..LipIndex::default()
    };
    if images.is_empty() {
        log::warn!("dataset directory {} contains no samples", root.display());
        return Ok(index);
    }
    for (name, target) in [("train", &mut index.train), ("val", &mut index.val)] {
        let list = root.join("splits").join(format!("{name}.txt"));
        if !list.exists() {
            log::warn!("split list {} is missing; split is empty", list.display());
            continue;
        }
        let text = fs::read_to_string(&list).map_err(|e| DataError::io(&list, e))?;
        for line in text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
        {
            if !images.contains(line) {
                return Err(DataError::UnknownStem {
                    split: list.clone(),
                    stem: line.to_string(),
                });
            }
            target.push(SampleRef {
                stem: line.to_string(),
                image: find(&images_dir, line, &IMAGE_EXT),
                labels: find(&labels_dir, line, &LABEL_EXT),
            });
        }
    }
    Ok(index)
}

/// Reads one indexed pair and checks sizes and label values.
pub fn load_sample(r: &SampleRef, num_classes: usize) -> Result<SegSample, DataError> {
    let image = read_image(&r.image)?;
    let labels = read_labels(&r.labels)?;
    let s = image.shape();
    if (s.h, s.w) != (labels.h, labels.w) {
        return Err(DataError::SizeMismatch {
            stem: r.stem.clone(),
            image: (s.h, s.w),
            labels: (labels.h, labels.w),
        });
    }
    if let Some(&bad) = labels.data.iter().find(|&&v| v != IGNORE && v as usize >= num_classes) {
        return Err(DataError::LabelRange {
            path: r.labels.clone(),
            value: bad,
            classes: num_classes,
        });
    }
    Ok(SegSample {
        image,
        labels,
        ignore: IGNORE,
    })
}
