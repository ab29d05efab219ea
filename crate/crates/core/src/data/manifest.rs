use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::io::{read_mask, read_volume, write_mask, write_volume};
use super::{Sample, Volume};
use crate::error::{Error, Result};
use crate::metrics::BinaryMask;

/// One manifest line: a volume path relative to the manifest directory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub labelled: bool,
}

/// Tab-separated `path<TAB>labelled|unlabelled` listing.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.tsv";

/// Mask file that accompanies a labelled volume: `x.dvol` -> `x_mask.dvol`.
pub fn mask_path_for(volume: &Path) -> PathBuf {
    let stem = volume.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    volume.with_file_name(format!("{stem}_mask.dvol"))
}

impl Manifest {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (no, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (path, tag) = line
                .split_once('\t')
                .ok_or_else(|| Error::Config(format!("manifest line {}: expected path<TAB>tag", no + 1)))?;
            let labelled = match tag.trim() {
                "labelled" => true,
                "unlabelled" => false,
                other => {
                    return Err(Error::Config(format!("manifest line {}: unknown tag `{other}`", no + 1)));
                }
            };
            entries.push(ManifestEntry { path: PathBuf::from(path), labelled });
        }
        Ok(Self { entries })
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            let tag = if e.labelled { "labelled" } else { "unlabelled" };
            writeln!(s, "{}\t{tag}", e.path.display()).unwrap();
        }
        s
    }

    /// Reads `dir/manifest.tsv`.
    pub fn load(dir: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(dir.join(MANIFEST_FILE))?)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::write(dir.join(MANIFEST_FILE), self.render())?;
        Ok(())
    }
}

/// Writes `vol_###.dvol` plus `vol_###_mask.dvol` per sample and a manifest
/// tagging every volume as labelled.
pub fn write_dataset(dir: &Path, samples: &[Sample]) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    let mut manifest = Manifest::default();
    for (i, s) in samples.iter().enumerate() {
        let rel = PathBuf::from(format!("vol_{i:03}.dvol"));
        write_volume(&dir.join(&rel), &s.volume)?;
        write_mask(&dir.join(mask_path_for(&rel)), &s.mask)?;
        manifest.entries.push(ManifestEntry { path: rel, labelled: true });
    }
    manifest.save(dir)?;
    Ok(manifest)
}

/// Loads every manifest entry; labelled entries come with their masks.
pub fn load_dataset(dir: &Path) -> Result<Vec<(Volume, Option<BinaryMask>)>> {
    let manifest = Manifest::load(dir)?;
    if manifest.entries.is_empty() {
        return Err(Error::Config(format!("{}: manifest lists no volumes", dir.display())));
    }
    manifest
        .entries
        .iter()
        .map(|e| {
            let path = dir.join(&e.path);
            let v = read_volume(&path)?;
            let m = if e.labelled {
                let m = read_mask(&mask_path_for(&path))?;
                if m.shape() != v.shape() {
                    return Err(Error::shape("load_dataset", format!("{}: mask shape differs", path.display())));
                }
                Some(m)
            } else {
                None
            };
            Ok((v, m))
        })
        .collect()
}
