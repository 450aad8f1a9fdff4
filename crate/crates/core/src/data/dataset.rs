//! On-disk dataset layout:
//!
//! ```text
//! root/manifest.json
//! root/{train,val,test}/images/case_0000.msua   f32 [1, H, W] in [0, 1]
//! root/{train,val,test}/labels/case_0000.msua   u8  [H, W]
//! root/{train,val,test}/edges/case_0000.msua    u8  [H, W] (optional)
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::arrayfile::{read_array, write_array, Array};
use crate::error::{Error, IoContext, Result};

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn code(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub num_classes: usize,
    pub image_size: usize,
    pub splits: BTreeMap<Split, usize>,
    /// Generator seed, when the data are synthetic.
    pub seed: Option<u64>,
    pub noise_sigma: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Case {
    pub id: String,
    /// `[H, W]` intensities.
    pub image: Vec<f32>,
    pub label: Vec<u8>,
    pub edges: Option<Vec<u8>>,
}

pub fn case_name(index: usize) -> String {
    format!("case_{index:04}")
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST);
        let text = fs::read_to_string(&path).at(&path)?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        Ok(Self { root: root.to_path_buf(), manifest })
    }

    pub fn dir(&self, split: Split, kind: &str) -> PathBuf {
        self.root.join(split.as_str()).join(kind)
    }

    /// Case ids of a split in canonical (lexicographic) order.
    pub fn case_ids(&self, split: Split) -> Result<Vec<String>> {
        list_cases(&self.dir(split, "images"))
    }

    pub fn load_case(&self, split: Split, id: &str) -> Result<Case> {
        let n = self.manifest.image_size;
        let img_path = self.dir(split, "images").join(format!("{id}.msua"));
        let img = read_array(&img_path)?;
        if img.dims != [1, n, n] {
            return Err(Error::Dimension(format!("{}: image dims {:?}, expected [1, {n}, {n}]", img_path.display(), img.dims)));
        }
        let label = read_label(&self.dir(split, "labels").join(format!("{id}.msua")), n, self.manifest.num_classes)?;
        let edge_path = self.dir(split, "edges").join(format!("{id}.msua"));
        let edges = if edge_path.exists() { Some(read_label(&edge_path, n, self.manifest.num_classes)?) } else { None };
        Ok(Case { id: id.to_string(), image: img.into_f32()?, label, edges })
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<Case>> {
        self.case_ids(split)?.iter().map(|id| self.load_case(split, id)).collect()
    }
}

fn read_label(path: &Path, n: usize, classes: usize) -> Result<Vec<u8>> {
    let a = read_array(path)?;
    if a.dims != [n, n] {
        return Err(Error::Dimension(format!("{}: label dims {:?}, expected [{n}, {n}]", path.display(), a.dims)));
    }
    let v = a.into_u8()?;
    if let Some(&bad) = v.iter().find(|&&x| x as usize >= classes) {
        return Err(Error::LabelOutOfRange { value: bad as usize, classes });
    }
    Ok(v)
}

/// `*.msua` stems in a directory, sorted. A missing directory is empty.
pub fn list_cases(dir: &Path) -> Result<Vec<String>> {
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut ids = Vec::new();
    for entry in fs::read_dir(dir).at(dir)? {
        let path = entry.at(dir)?.path();
        if path.extension().is_some_and(|e| e == "msua") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    Ok(ids)
}

pub fn write_case(root: &Path, split: Split, case: &Case, size: usize) -> Result<()> {
    let base = root.join(split.as_str());
    write_array(&base.join("images").join(format!("{}.msua", case.id)), &Array::f32(&[1, size, size], case.image.clone())?)?;
    write_array(&base.join("labels").join(format!("{}.msua", case.id)), &Array::u8(&[size, size], case.label.clone())?)?;
    if let Some(e) = &case.edges {
        write_array(&base.join("edges").join(format!("{}.msua", case.id)), &Array::u8(&[size, size], e.clone())?)?;
    }
    Ok(())
}

pub fn write_manifest(root: &Path, manifest: &Manifest) -> Result<()> {
    fs::create_dir_all(root).at(root)?;
    let path = root.join(MANIFEST);
    fs::write(&path, serde_json::to_string_pretty(manifest)? + "\n").at(&path)
}
