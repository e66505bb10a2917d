//! Whole-dataset operations: conversion into the canonical store and
//! occupancy extraction from it.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::align::DatasetProfile;
use crate::par::{self, Execution};
use crate::percept::{
    make_grid, unproject_depth_with, voxelize_with, DepthMap, GridQuery, PerceptError, Voxelized,
};
use crate::store::{
    ingest_episode, list_native_episodes, read_episode, write_episode, Episode, ImageSize,
    Manifest, ManifestEntry, StoreError,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Percept(#[from] PerceptError),
    #[error("output directory {out} must not be inside input directory {input}")]
    OutputInsideInput { input: PathBuf, out: PathBuf },
    #[error("store at {root} uses image size {existing:?}, requested {requested:?}")]
    ImageSizeConflict {
        root: PathBuf,
        existing: ImageSize,
        requested: ImageSize,
    },
}

#[derive(Debug, Clone, Copy)]
pub struct ConvertOptions {
    /// Worker threads; 1 runs sequentially.
    pub jobs: usize,
    pub image_size: ImageSize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Skipped {
    pub source: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvertSummary {
    pub profile: String,
    pub episodes: usize,
    pub steps: usize,
    pub workspace_warnings: usize,
    pub skipped: Vec<Skipped>,
}

fn absolute(p: &Path) -> PathBuf {
    fs::canonicalize(p).unwrap_or_else(|_| {
        std::env::current_dir()
            .map(|d| d.join(p))
            .unwrap_or_else(|_| p.to_path_buf())
    })
}

fn open_manifest(root: &Path, image_size: ImageSize) -> Result<Manifest, PipelineError> {
    if !root.join(crate::store::MANIFEST_FILE).exists() {
        return Ok(Manifest::new(image_size));
    }
    let m = Manifest::read(root)?;
    if m.image_size != image_size {
        return Err(PipelineError::ImageSizeConflict {
            root: root.to_path_buf(),
            existing: m.image_size,
            requested: image_size,
        });
    }
    Ok(m)
}

/// Converts every episode under `native_dir` into the store at `out_root`.
///
/// Episodes that fail to ingest are skipped and reported. The manifest is
/// written once at the end; entries from an existing store are kept. Output
/// bytes do not depend on `jobs`.
pub fn convert_dataset(
    native_dir: &Path,
    out_root: &Path,
    profile: &DatasetProfile,
    opts: ConvertOptions,
) -> Result<ConvertSummary, PipelineError> {
    let dirs = list_native_episodes(native_dir)?;
    let input = absolute(native_dir);
    fs::create_dir_all(out_root).map_err(|e| StoreError::io(out_root, e))?;
    let out = absolute(out_root);
    if out.starts_with(&input) {
        return Err(PipelineError::OutputInsideInput { input, out });
    }
    let mut manifest = open_manifest(out_root, opts.image_size)?;

    let results = par::with_jobs(opts.jobs, |exec| {
        par::map(exec, &dirs, |dir| -> Result<(ManifestEntry, usize), StoreError> {
            let ing = ingest_episode(dir, profile, opts.image_size)?;
            write_episode(out_root, &ing.episode)?;
            Ok((ManifestEntry::of(&ing.episode), ing.workspace_warnings))
        })
    });

    let mut summary = ConvertSummary {
        profile: profile.name.clone(),
        episodes: 0,
        steps: 0,
        workspace_warnings: 0,
        skipped: Vec::new(),
    };
    for (dir, r) in dirs.iter().zip(results) {
        match r {
            Ok((entry, warnings)) => {
                if warnings > 0 {
                    log::warn!(
                        "{}: {warnings} step(s) outside the unified workspace",
                        entry.id
                    );
                }
                summary.episodes += 1;
                summary.steps += entry.steps;
                summary.workspace_warnings += warnings;
                manifest.upsert_entry(entry, &profile.name);
            }
            Err(e) => {
                log::warn!("skipping {}: {e}", dir.display());
                summary.skipped.push(Skipped {
                    source: dir.display().to_string(),
                    reason: e.to_string(),
                });
            }
        }
    }
    manifest.write(out_root)?;
    Ok(summary)
}

/// Reads every episode listed in the store's manifest, in manifest order.
pub fn read_store(root: &Path) -> Result<(Manifest, Vec<Result<Episode, StoreError>>), StoreError> {
    let manifest = Manifest::read(root)?;
    let eps = manifest
        .episodes
        .iter()
        .map(|e| read_episode(&root.join(&e.id)))
        .collect();
    Ok((manifest, eps))
}

/// Fuses every depth-carrying view of one step into a voxel grid.
/// Returns `None` when the step has no depth at all.
pub fn step_occupancy(
    ep: &Episode,
    step: usize,
    grid: &GridQuery,
    exec: Execution,
) -> Result<Option<Voxelized>, PerceptError> {
    let s = &ep.steps[step];
    let mut cloud = Vec::new();
    let mut any = false;
    for (name, frame) in &s.frames {
        let Some(depth) = &frame.depth else { continue };
        let view = ep
            .cameras
            .view(name)
            .ok_or_else(|| PerceptError::InvalidCamera {
                name: name.clone(),
                reason: "no calibration for view".into(),
            })?;
        any = true;
        let d = DepthMap::from_millimeters(depth);
        cloud.extend(unproject_depth_with(view, &d, &frame.rgb, exec)?);
    }
    Ok(any.then(|| voxelize_with(&cloud, grid, exec)))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OccupancyEpisode {
    pub id: String,
    /// Occupied cell count per step.
    pub occupied: Vec<usize>,
    pub dropped_points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OccupancySummary {
    /// Binary block layout of every `.occ` file.
    pub format: &'static str,
    pub version: u32,
    pub grid: [usize; 3],
    pub episodes: Vec<OccupancyEpisode>,
    pub skipped: Vec<Skipped>,
}

/// Writes `<out>/<id>/<step:05>.occ` for every step with depth and an
/// `occupancy.json` index. The input store is never modified.
pub fn build_occupancy(
    store_root: &Path,
    out_root: &Path,
    dims: [usize; 3],
    jobs: usize,
) -> Result<OccupancySummary, PipelineError> {
    let grid = make_grid(dims[0], dims[1], dims[2])?;
    let manifest = Manifest::read(store_root)?;
    let input = absolute(store_root);
    fs::create_dir_all(out_root).map_err(|e| StoreError::io(out_root, e))?;
    if absolute(out_root) == input {
        return Err(PipelineError::OutputInsideInput {
            input,
            out: absolute(out_root),
        });
    }

    let results = par::with_jobs(jobs, |exec| {
        par::map(exec, &manifest.episodes, |entry| -> Result<OccupancyEpisode, PipelineError> {
            let ep = read_episode(&store_root.join(&entry.id))?;
            let dir = out_root.join(&ep.id);
            let mut occupied = Vec::new();
            let mut dropped = 0;
            for i in 0..ep.steps.len() {
                let Some(vox) = step_occupancy(&ep, i, &grid, Execution::Sequential)? else {
                    continue;
                };
                fs::create_dir_all(&dir).map_err(|e| StoreError::io(&dir, e))?;
                let path = dir.join(format!("{i:05}.occ"));
                let mut buf = Vec::new();
                vox.grid.write_to(&mut buf).map_err(|e| StoreError::io(&path, e))?;
                fs::write(&path, buf).map_err(|e| StoreError::io(&path, e))?;
                occupied.push(vox.grid.occupied_count());
                dropped += vox.dropped;
            }
            Ok(OccupancyEpisode {
                id: ep.id,
                occupied,
                dropped_points: dropped,
            })
        })
    });

    let mut summary = OccupancySummary {
        format: "OCCG",
        version: 1,
        grid: dims,
        episodes: Vec::new(),
        skipped: Vec::new(),
    };
    for (entry, r) in manifest.episodes.iter().zip(results) {
        match r {
            Ok(e) if e.occupied.is_empty() => summary.skipped.push(Skipped {
                source: entry.id.clone(),
                reason: "no depth images".into(),
            }),
            Ok(e) => summary.episodes.push(e),
            Err(e) => {
                log::warn!("skipping {}: {e}", entry.id);
                summary.skipped.push(Skipped {
                    source: entry.id.clone(),
                    reason: e.to_string(),
                })
            }
        }
    }
    let index = out_root.join("occupancy.json");
    let mut text = serde_json::to_string_pretty(&summary).expect("summary serializes");
    text.push('\n');
    fs::write(&index, text).map_err(|e| StoreError::io(&index, e))?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::align::ProfileRegistry;
    use crate::percept::OccupancyGrid;
    use crate::store::fixtures::write_native;

    const SIZE: ImageSize = ImageSize {
        height: 8,
        width: 8,
    };

    fn native(root: &Path) {
        for k in 0..5 {
            let z = if k == 3 { 1.4 } else { 0.4 };
            let pos = [[0.0, 0.0, z], [0.01 * k as f64, 0.0, 0.41], [0.02, 0.0, 0.42]];
            write_native(root, &format!("ep{k}"), &pos, &[-1.0, -1.0, 1.0], (8, 8), true);
        }
        fs::create_dir_all(root.join("broken")).unwrap();
        fs::write(root.join("broken/episode.json"), "{not json").unwrap();
    }

    fn tree_bytes(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
        let mut out = Vec::new();
        let mut stack = vec![root.to_path_buf()];
        while let Some(d) = stack.pop() {
            for e in fs::read_dir(&d).unwrap() {
                let p = e.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
                }
            }
        }
        out.sort();
        out
    }

    #[test]
    fn convert_skips_bad_and_is_deterministic() {
        let src = tempfile::tempdir().unwrap();
        native(src.path());
        let reg = ProfileRegistry::builtin();
        let profile = reg.get("calvin").unwrap();
        let mut trees = Vec::new();
        for jobs in [1, 4] {
            let out = tempfile::tempdir().unwrap();
            let s = convert_dataset(
                src.path(),
                out.path(),
                profile,
                ConvertOptions {
                    jobs,
                    image_size: SIZE,
                },
            )
            .unwrap();
            assert_eq!(s.episodes, 5);
            assert_eq!(s.skipped.len(), 1);
            assert_eq!(s.workspace_warnings, 1);
            let m = Manifest::read(out.path()).unwrap();
            assert_eq!(m.episodes.len(), 5);
            assert!(m.check_contents(out.path()).unwrap().is_empty());
            trees.push(tree_bytes(out.path()));
        }
        assert_eq!(trees[0], trees[1]);
    }

    #[test]
    fn output_inside_input_refused() {
        let src = tempfile::tempdir().unwrap();
        native(src.path());
        let reg = ProfileRegistry::builtin();
        let err = convert_dataset(
            src.path(),
            &src.path().join("out"),
            reg.get("calvin").unwrap(),
            ConvertOptions {
                jobs: 1,
                image_size: SIZE,
            },
        )
        .unwrap_err();
        assert!(matches!(err, PipelineError::OutputInsideInput { .. }));
    }

    #[test]
    fn occupancy_files_round_trip() {
        let src = tempfile::tempdir().unwrap();
        native(src.path());
        let store = tempfile::tempdir().unwrap();
        let reg = ProfileRegistry::builtin();
        convert_dataset(
            src.path(),
            store.path(),
            reg.get("calvin").unwrap(),
            ConvertOptions {
                jobs: 2,
                image_size: SIZE,
            },
        )
        .unwrap();
        let out = tempfile::tempdir().unwrap();
        let s = build_occupancy(store.path(), out.path(), [10, 10, 10], 2).unwrap();
        assert_eq!(s.episodes.len(), 5);
        let e = &s.episodes[0];
        assert_eq!(e.occupied.len(), 3);
        assert!(e.occupied[0] > 0);
        let bytes = fs::read(out.path().join(&e.id).join("00000.occ")).unwrap();
        let g = OccupancyGrid::read_from(&bytes[..]).unwrap();
        assert_eq!(g.occupied_count(), e.occupied[0]);
    }
}
