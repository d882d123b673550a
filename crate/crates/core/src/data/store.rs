//! On-disk synthetic datasets: `<root>/<split>/<id>.npz` plus a
//! `manifest.csv` (`id,label,path`) per split and a top-level
//! `manifest.csv` (`id,label,split,path`).

use std::fs::{self, File};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::{Array3, Array4};
use ndarray_npy::{NpzReader, NpzWriter};
use serde::{Deserialize, Serialize};

use super::{DatasetSplit, SamplingPolicy, SplitName, Video, VideoEntry, VideoSource};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct DatasetSplits {
    pub train: DatasetSplit,
    pub val: DatasetSplit,
    pub test: DatasetSplit,
}

impl DatasetSplits {
    pub fn get(&self, name: SplitName) -> &DatasetSplit {
        match name {
            SplitName::Train => &self.train,
            SplitName::Val => &self.val,
            SplitName::Test => &self.test,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &DatasetSplit> {
        [&self.train, &self.val, &self.test].into_iter()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct SplitRow {
    id: String,
    label: f64,
    path: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct TopRow {
    id: String,
    label: f64,
    split: SplitName,
    path: String,
}

pub(crate) fn write_video_npz(path: &Path, video: &Video) -> Result<()> {
    let mut npz = NpzWriter::new_compressed(File::create(path)?);
    npz.add_array("frames", &video.frames)?;
    if let Some(mask) = &video.mask {
        npz.add_array("mask", mask)?;
    }
    npz.finish()?;
    Ok(())
}

pub(crate) fn read_video_npz(path: &Path, id: &str) -> Result<Video> {
    let mut npz = NpzReader::new(File::open(path)?)?;
    let names = npz.names()?;
    let frames: Array4<u8> = npz.by_name("frames")?;
    let mask: Option<Array3<u8>> =
        if names.iter().any(|n| n == "mask" || n == "mask.npy") { Some(npz.by_name("mask")?) } else { None };
    Ok(Video { id: id.to_string(), frames, label: f64::NAN, mask })
}

/// Writes all splits under `root`. Returns the top-level manifest path.
pub fn export_splits(splits: &DatasetSplits, root: &Path) -> Result<PathBuf> {
    fs::create_dir_all(root)?;
    let top_path = root.join("manifest.csv");
    let mut top = csv::Writer::from_path(&top_path)?;
    for split in splits.iter() {
        let dir = root.join(split.name.as_str());
        fs::create_dir_all(&dir)?;
        let mut manifest = csv::Writer::from_path(dir.join("manifest.csv"))?;
        for entry in &split.entries {
            let video = entry.load()?;
            let file = format!("{}.npz", entry.id);
            write_video_npz(&dir.join(&file), &video)?;
            manifest.serialize(SplitRow { id: entry.id.clone(), label: entry.label, path: file.clone() })?;
            top.serialize(TopRow {
                id: entry.id.clone(),
                label: entry.label,
                split: split.name,
                path: format!("{}/{}", split.name.as_str(), file),
            })?;
        }
        manifest.flush()?;
    }
    top.flush()?;
    Ok(top_path)
}

/// Loads one split directory. Videos are read eagerly into memory.
pub fn load_split_dir(dir: &Path, name: SplitName) -> Result<DatasetSplit> {
    let manifest = dir.join("manifest.csv");
    if !manifest.is_file() {
        return Err(Error::Ingest(format!("missing manifest {}", manifest.display())));
    }
    let mut reader = csv::Reader::from_path(&manifest)?;
    let mut entries = Vec::new();
    let mut clip_length = usize::MAX;
    for row in reader.deserialize() {
        let row: SplitRow = row?;
        let path = dir.join(&row.path);
        let mut video = read_video_npz(&path, &row.id)?;
        video.label = row.label;
        clip_length = clip_length.min(video.num_frames());
        entries.push(Arc::new(VideoEntry {
            id: row.id,
            label: row.label,
            source: VideoSource::Memory(Arc::new(video)),
        }));
    }
    if entries.is_empty() {
        clip_length = 1;
    }
    Ok(DatasetSplit::new(name, entries, SamplingPolicy::new(clip_length, 1, name.default_start_rule())))
}

/// Loads `<root>/{train,val,test}`.
pub fn load_splits_dir(root: &Path) -> Result<DatasetSplits> {
    Ok(DatasetSplits {
        train: load_split_dir(&root.join("train"), SplitName::Train)?,
        val: load_split_dir(&root.join("val"), SplitName::Val)?,
        test: load_split_dir(&root.join("test"), SplitName::Test)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_splits, SynthSpec};

    #[test]
    fn export_then_load_preserves_videos() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec { seed: 4, ..SynthSpec::default() };
        let splits = generate_synthetic_splits(&spec, [3, 1, 2]).unwrap();
        export_splits(&splits, dir.path()).unwrap();
        let loaded = load_splits_dir(dir.path()).unwrap();
        for (a, b) in splits.iter().zip(loaded.iter()) {
            assert_eq!(a.len(), b.len());
            for (x, y) in a.entries.iter().zip(&b.entries) {
                assert_eq!(*x.load().unwrap(), *y.load().unwrap());
            }
        }
        let top = fs::read_to_string(dir.path().join("manifest.csv")).unwrap();
        assert_eq!(top.lines().count(), 1 + 6);
    }
}
