//! On-disk dataset layout.
//!
//! ```text
//! <root>/RGB/<id>_c<cam>_<seq>.png
//! <root>/NI/<id>_c<cam>_<seq>.png
//! <root>/TI/<id>_c<cam>_<seq>.png
//! ```
//!
//! The same file name must exist in all three modality directories.
//! `<id>`, `<cam>` and `<seq>` are decimal integers (leading zeros allowed).

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use crate::data::batch::{ImageStack, ModalBatch};
use crate::error::{DemoError, Result};
use crate::modality::Modality;
use crate::parallel;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexEntry {
    /// Paths in canonical R, N, T order.
    pub paths: [PathBuf; 3],
    pub id: usize,
    pub cam: usize,
    pub seq: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub entries: Vec<IndexEntry>,
}

impl DatasetIndex {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn identities(&self) -> BTreeSet<usize> {
        self.entries.iter().map(|e| e.id).collect()
    }

    pub fn cameras(&self) -> BTreeSet<usize> {
        self.entries.iter().map(|e| e.cam).collect()
    }

    pub fn summary(&self) -> String {
        format!(
            "{} triples, {} identities, {} cameras",
            self.len(),
            self.identities().len(),
            self.cameras().len()
        )
    }
}

/// Parse `<id>_c<cam>_<seq>.<ext>` into `(id, cam, seq)`.
pub fn parse_filename(name: &str) -> Result<(usize, usize, usize)> {
    let bad = || DemoError::Ingestion(format!("unparsable file name {name:?}"));
    let stem = name.rsplit_once('.').map(|(s, _)| s).ok_or_else(bad)?;
    let mut parts = stem.split('_');
    let id = parts.next().ok_or_else(bad)?;
    let cam = parts.next().and_then(|c| c.strip_prefix('c')).ok_or_else(bad)?;
    let seq = parts.next().ok_or_else(bad)?;
    if parts.next().is_some() {
        return Err(bad());
    }
    let num = |s: &str| -> Result<usize> {
        if s.is_empty() || !s.bytes().all(|b| b.is_ascii_digit()) {
            return Err(bad());
        }
        s.parse().map_err(|_| bad())
    };
    Ok((num(id)?, num(cam)?, num(seq)?))
}

fn list_files(dir: &Path) -> Result<BTreeSet<String>> {
    let rd = fs::read_dir(dir).map_err(|e| {
        DemoError::Ingestion(format!("cannot read modality directory {}: {e}", dir.display()))
    })?;
    let mut names = BTreeSet::new();
    for entry in rd {
        let entry = entry.map_err(|e| DemoError::io(dir, e))?;
        if entry.file_type().map(|t| t.is_file()).unwrap_or(false) {
            names.insert(entry.file_name().to_string_lossy().into_owned());
        }
    }
    Ok(names)
}

/// Index every aligned triple under `root`.
pub fn load_dataset(root: &Path) -> Result<DatasetIndex> {
    let listings: Vec<BTreeSet<String>> = Modality::ALL
        .iter()
        .map(|m| list_files(&root.join(m.dir_name())))
        .collect::<Result<_>>()?;
    let all: BTreeSet<&String> = listings.iter().flatten().collect();
    let mut entries = Vec::with_capacity(all.len());
    for name in all {
        for m in Modality::ALL {
            if !listings[m.index()].contains(name) {
                let present = Modality::ALL
                    .iter()
                    .find(|o| listings[o.index()].contains(name))
                    .expect("name came from some listing");
                return Err(DemoError::Ingestion(format!(
                    "orphan file {}: no counterpart {}",
                    root.join(present.dir_name()).join(name).display(),
                    root.join(m.dir_name()).join(name).display()
                )));
            }
        }
        let (id, cam, seq) = parse_filename(name)?;
        entries.push(IndexEntry {
            paths: Modality::ALL.map(|m| root.join(m.dir_name()).join(name)),
            id,
            cam,
            seq,
        });
    }
    if entries.is_empty() {
        return Err(DemoError::Ingestion(format!(
            "no image triples under {}",
            root.display()
        )));
    }
    Ok(DatasetIndex {
        root: root.to_path_buf(),
        entries,
    })
}

/// Decoded dataset held in memory, pixels scaled to `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub index: DatasetIndex,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Per entry, one flat `channels x height x width` image per modality.
    pub images: Vec<[Vec<f64>; 3]>,
}

fn decode(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let img = image::open(path)
        .map_err(|e| DemoError::Ingestion(format!("cannot decode {}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = (px.0[c] as f64 / 255.0 - 0.5) / 0.5;
        }
    }
    Ok((h, w, data))
}

impl LoadedDataset {
    pub fn load(index: DatasetIndex) -> Result<Self> {
        let decoded: Vec<Result<[(usize, usize, Vec<f64>); 3]>> =
            parallel::map_slice(&index.entries, |e| {
                Ok([decode(&e.paths[0])?, decode(&e.paths[1])?, decode(&e.paths[2])?])
            });
        let mut images = Vec::with_capacity(decoded.len());
        let mut dims: Option<(usize, usize)> = None;
        for (entry, d) in index.entries.iter().zip(decoded) {
            let triple = d?;
            let mut imgs: [Vec<f64>; 3] = Default::default();
            for (slot, (h, w, data)) in triple.into_iter().enumerate() {
                match dims {
                    None => dims = Some((h, w)),
                    Some(prev) if prev != (h, w) => {
                        return Err(DemoError::Ingestion(format!(
                            "{} is {h}x{w}, expected {}x{}",
                            entry.paths[slot].display(),
                            prev.0,
                            prev.1
                        )))
                    }
                    _ => {}
                }
                imgs[slot] = data;
            }
            images.push(imgs);
        }
        let (height, width) = dims.unwrap_or((0, 0));
        Ok(LoadedDataset {
            index,
            channels: 3,
            height,
            width,
            images,
        })
    }

    pub fn open(root: &Path) -> Result<Self> {
        Self::load(load_dataset(root)?)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn ids(&self) -> Vec<usize> {
        self.index.entries.iter().map(|e| e.id).collect()
    }

    pub fn cams(&self) -> Vec<usize> {
        self.index.entries.iter().map(|e| e.cam).collect()
    }

    /// Entry indices grouped by identity, in entry order.
    pub fn by_identity(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut map: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, e) in self.index.entries.iter().enumerate() {
            map.entry(e.id).or_default().push(i);
        }
        map
    }

    /// A new dataset holding only the given entries.
    pub fn subset(&self, indices: &[usize]) -> LoadedDataset {
        LoadedDataset {
            index: DatasetIndex {
                root: self.index.root.clone(),
                entries: indices.iter().map(|&i| self.index.entries[i].clone()).collect(),
            },
            channels: self.channels,
            height: self.height,
            width: self.width,
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
        }
    }

    pub fn batch(&self, indices: &[usize]) -> ModalBatch {
        let stacks = Modality::ALL.map(|m| {
            let imgs: Vec<&[f64]> = indices
                .iter()
                .map(|&i| self.images[i][m.index()].as_slice())
                .collect();
            ImageStack::from_images(self.channels, self.height, self.width, &imgs)
        });
        let ids = indices.iter().map(|&i| self.index.entries[i].id).collect();
        let cams = indices.iter().map(|&i| self.index.entries[i].cam).collect();
        ModalBatch::new(stacks, ids, cams).expect("stacks built from one dataset agree")
    }
}
