//! Paired `ir/` + `vi/` directories matched by file name.

use std::fs;
use std::path::{Path, PathBuf};

use log::warn;

use super::color::luma;
use super::netpbm::load_netpbm;
use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairEntry {
    pub name: String,
    pub ir: PathBuf,
    pub vi: PathBuf,
}

/// A loaded, registered gray pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePair {
    pub name: String,
    pub ir: Image,
    pub vi: Image,
}

#[derive(Debug, Clone)]
pub struct DatasetIndex {
    root: PathBuf,
    pairs: Vec<PairEntry>,
    /// Files present on only one side.
    unmatched: Vec<String>,
}

fn file_names(dir: &Path) -> Result<Vec<String>> {
    if !dir.is_dir() {
        return Err(Error::Dataset(format!(
            "missing directory {}",
            dir.display()
        )));
    }
    let mut names = Vec::new();
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        if entry.file_type()?.is_file() {
            if let Some(name) = entry.file_name().to_str() {
                if !name.starts_with('.') {
                    names.push(name.to_string());
                }
            }
        }
    }
    names.sort();
    Ok(names)
}

impl DatasetIndex {
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let ir_dir = root.join("ir");
        let vi_dir = root.join("vi");
        let ir = file_names(&ir_dir)?;
        let vi = file_names(&vi_dir)?;
        let mut pairs = Vec::new();
        let mut unmatched = Vec::new();
        for name in &ir {
            if vi.binary_search(name).is_ok() {
                pairs.push(PairEntry {
                    name: name.clone(),
                    ir: ir_dir.join(name),
                    vi: vi_dir.join(name),
                });
            } else {
                warn!("{name}: no visible counterpart, skipped");
                unmatched.push(name.clone());
            }
        }
        for name in vi.iter().filter(|n| ir.binary_search(n).is_err()) {
            warn!("{name}: no infrared counterpart, skipped");
            unmatched.push(name.clone());
        }
        if pairs.is_empty() {
            return Err(Error::EmptyDataset(root));
        }
        Ok(Self {
            root,
            pairs,
            unmatched,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn pairs(&self) -> &[PairEntry] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn unmatched(&self) -> &[String] {
        &self.unmatched
    }

    /// Loads every readable pair; failures are logged and counted.
    pub fn load_all(&self) -> Result<(Vec<ImagePair>, usize)> {
        let mut loaded = Vec::with_capacity(self.pairs.len());
        let mut skipped = self.unmatched.len();
        for entry in &self.pairs {
            match load_pair(entry) {
                Ok(p) => loaded.push(p),
                Err(e) => {
                    warn!("{}: {e}, skipped", entry.name);
                    skipped += 1;
                }
            }
        }
        if loaded.is_empty() {
            return Err(Error::EmptyDataset(self.root.clone()));
        }
        Ok((loaded, skipped))
    }
}

/// Loads one pair as gray images; a color visible image contributes its luma.
pub fn load_pair(entry: &PairEntry) -> Result<ImagePair> {
    let ir = luma(&load_netpbm(&entry.ir)?)?;
    let vi = luma(&load_netpbm(&entry.vi)?)?;
    ir.require_same_dims(&vi)?;
    Ok(ImagePair {
        name: entry.name.clone(),
        ir,
        vi,
    })
}
