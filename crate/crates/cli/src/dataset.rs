//! Dataset layout on disk: one AER file per sequence plus `manifest.csv`.

use std::path::Path;

use anyhow::{bail, Context, Result};
use predattn::events::{bin_events, parse_aer, render_aer};
use predattn::synth::{generate_sequence, DatasetConfig, Split};
use predattn::FrameSequence;
use serde::{Deserialize, Serialize};

use crate::output::Staging;

pub const MANIFEST: &str = "manifest.csv";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub sequence: usize,
    pub file: String,
    pub split: String,
    pub seed: u64,
    pub frames: usize,
    pub dt_us: u64,
}

/// Generates every sequence and writes the dataset directory atomically.
pub fn write_dataset(cfg: &DatasetConfig, dir: &Path) -> Result<Vec<ManifestRow>> {
    let staging = Staging::new(dir)?;
    let mut rows = Vec::with_capacity(cfg.sequences);
    for index in 0..cfg.sequences {
        let seq = generate_sequence(cfg, index)?;
        let file = format!("seq_{index:04}.aer");
        staging.write(&file, render_aer(cfg.geometry(), &seq.events).as_bytes())?;
        rows.push(ManifestRow {
            sequence: index,
            file,
            split: seq.split.as_str().into(),
            seed: seq.seed,
            frames: cfg.frames,
            dt_us: cfg.dt_us,
        });
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &rows {
        w.serialize(r)?;
    }
    staging.write(MANIFEST, &w.into_inner()?)?;
    staging.commit()?;
    Ok(rows)
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestRow>> {
    let path = dir.join(MANIFEST);
    let mut r = csv::Reader::from_path(&path)
        .with_context(|| format!("no dataset at {} (run gen-data first)", dir.display()))?;
    r.deserialize()
        .collect::<std::result::Result<Vec<ManifestRow>, _>>()
        .with_context(|| format!("reading {}", path.display()))
}

pub fn read_sequence(dir: &Path, row: &ManifestRow) -> Result<FrameSequence> {
    let path = dir.join(&row.file);
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let (geometry, events) = parse_aer(&text).with_context(|| format!("parsing {}", path.display()))?;
    Ok(bin_events(&events, 0, row.dt_us, geometry, Some(row.frames))?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedDataset {
    pub train: Vec<FrameSequence>,
    pub test: Vec<FrameSequence>,
}

pub fn load_dataset(dir: &Path) -> Result<LoadedDataset> {
    let mut out = LoadedDataset {
        train: vec![],
        test: vec![],
    };
    for row in read_manifest(dir)? {
        let seq = read_sequence(dir, &row)?;
        match row.split.as_str() {
            s if s == Split::Train.as_str() => out.train.push(seq),
            s if s == Split::Test.as_str() => out.test.push(seq),
            other => bail!("unknown split `{other}` for sequence {}", row.sequence),
        }
    }
    if out.train.is_empty() || out.test.is_empty() {
        bail!("dataset at {} needs both train and test sequences", dir.display());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use predattn::synth::generate_dataset;

    #[test]
    fn round_trip_matches_in_memory_generation() {
        let root = tempfile::tempdir().unwrap();
        let dir = root.path().join("data");
        let mut cfg = DatasetConfig::bouncing_ball_64(3);
        cfg.sequences = 4;
        cfg.frames = 6;
        let rows = write_dataset(&cfg, &dir).unwrap();
        assert_eq!(rows.len(), 4);
        assert_eq!(read_manifest(&dir).unwrap(), rows);
        let loaded = load_dataset(&dir).unwrap();
        let direct = generate_dataset(&cfg).unwrap();
        assert_eq!(loaded.train, direct.train);
        assert_eq!(loaded.test, direct.test);
    }

    #[test]
    fn missing_dataset_is_an_error() {
        let root = tempfile::tempdir().unwrap();
        let err = load_dataset(&root.path().join("nope")).unwrap_err();
        assert!(format!("{err:#}").contains("gen-data"));
    }
}
