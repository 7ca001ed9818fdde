//! Directory layout: `root/<split>/class_<k>/img_###.pgm`, with optional
//! `img_###.mask.pgm` (relevance) and `img_###.conf.pgm` (confounder)
//! siblings, plus `root/manifest.csv`.

use std::fs;
use std::path::{Path, PathBuf};

use super::pgm::{read_mask, read_pgm, write_mask, write_pgm};
use super::{DatasetSplit, LabeledImage, Mask, SplitName};
use crate::error::{Result, XblError};
use crate::io::write_atomic;

fn image_stem(i: usize) -> String {
    format!("img_{i:03}")
}

fn class_dir(k: usize) -> String {
    format!("class_{k}")
}

/// Rows of `path,split,class` for every image, paths relative to the root.
pub fn manifest_csv(data: &DatasetSplit) -> String {
    let mut out = String::from("path,split,class\n");
    for split in SplitName::ALL {
        let mut per_class: Vec<usize> = Vec::new();
        for im in data.split(split) {
            if per_class.len() <= im.label {
                per_class.resize(im.label + 1, 0);
            }
            let i = per_class[im.label];
            per_class[im.label] += 1;
            out.push_str(&format!(
                "{split}/{}/{}.pgm,{split},{}\n",
                class_dir(im.label),
                image_stem(i),
                im.label
            ));
        }
    }
    out
}

/// Writes every split under `root`. Images of one class are numbered in
/// split order.
pub fn write_dataset(root: impl AsRef<Path>, data: &DatasetSplit) -> Result<()> {
    let root = root.as_ref();
    for split in SplitName::ALL {
        let mut per_class: Vec<usize> = Vec::new();
        for im in data.split(split) {
            if per_class.len() <= im.label {
                per_class.resize(im.label + 1, 0);
            }
            let i = per_class[im.label];
            per_class[im.label] += 1;
            let dir = root.join(split.as_str()).join(class_dir(im.label));
            let stem = image_stem(i);
            write_pgm(&im.pixels, dir.join(format!("{stem}.pgm")))?;
            if let Some(m) = &im.relevance_mask {
                write_mask(m, dir.join(format!("{stem}.mask.pgm")))?;
            }
            if let Some(m) = &im.confounder_mask {
                write_mask(m, dir.join(format!("{stem}.conf.pgm")))?;
            }
        }
    }
    write_atomic(root.join("manifest.csv"), manifest_csv(data).as_bytes())
}

fn parse_class(name: &str) -> Option<usize> {
    name.strip_prefix("class_").unwrap_or(name).parse().ok()
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| XblError::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| XblError::io(dir, err)))
        .collect::<Result<_>>()?;
    v.sort();
    Ok(v)
}

fn load_optional_mask(path: PathBuf, image: &LabeledImage) -> Result<Option<Mask>> {
    if !path.exists() {
        return Ok(None);
    }
    let m = read_mask(&path)?;
    if m.dims() != image.pixels.dims() {
        return Err(XblError::Dataset(format!(
            "{}: mask is {}x{} but image is {}x{}",
            path.display(),
            m.height(),
            m.width(),
            image.pixels.height(),
            image.pixels.width()
        )));
    }
    Ok(Some(m))
}

fn load_split(dir: &Path) -> Result<Vec<LabeledImage>> {
    let mut classes: Vec<(usize, PathBuf)> = Vec::new();
    for entry in sorted_entries(dir)? {
        if !entry.is_dir() {
            continue;
        }
        let name = entry.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        let k = parse_class(name).ok_or_else(|| {
            XblError::Dataset(format!("{}: class directory must be class_<k>", entry.display()))
        })?;
        classes.push((k, entry));
    }
    classes.sort();
    let mut images = Vec::new();
    for (label, cdir) in classes {
        let files: Vec<PathBuf> = sorted_entries(&cdir)?
            .into_iter()
            .filter(|p| {
                let n = p.file_name().and_then(|n| n.to_str()).unwrap_or_default();
                n.ends_with(".pgm") && !n.ends_with(".mask.pgm") && !n.ends_with(".conf.pgm")
            })
            .collect();
        if files.is_empty() {
            return Err(XblError::Dataset(format!("{} holds no images", cdir.display())));
        }
        for f in files {
            let pixels = read_pgm(&f)?;
            let stem = f.with_extension("");
            let mut im = LabeledImage {
                pixels,
                label,
                relevance_mask: None,
                confounder_mask: None,
            };
            im.relevance_mask = load_optional_mask(stem.with_extension("mask.pgm"), &im)?;
            im.confounder_mask = load_optional_mask(stem.with_extension("conf.pgm"), &im)?;
            images.push(im);
        }
    }
    Ok(images)
}

/// Reads every split directory present under `root`; absent splits stay
/// empty. Images within a class are read in lexicographic file order.
pub fn load_image_dir(root: impl AsRef<Path>) -> Result<DatasetSplit> {
    let root = root.as_ref();
    if !root.is_dir() {
        return Err(XblError::Dataset(format!("{} is not a directory", root.display())));
    }
    let mut out = DatasetSplit::default();
    for split in SplitName::ALL {
        let dir = root.join(split.as_str());
        if dir.is_dir() {
            *out.split_mut(split) = load_split(&dir)?;
        }
    }
    if SplitName::ALL.iter().all(|&s| out.split(s).is_empty()) {
        return Err(XblError::Dataset(format!("{} holds no splits", root.display())));
    }
    Ok(out)
}
