//! Dataset directory generation and loading.
//!
//! Layout under the output root:
//!
//! ```text
//! out/
//!   train/manifest.json + vol*_intensity.stf, vol*_bone.stf,
//!         vol*_soft.stf, vol*_raters.json
//!   val/  manifest.json + vol*_intensity.stf, vol*_bone.stf, vol*_gt.stf
//!   test/ like val
//! ```
//!
//! Train volumes carry only the weak annotations (rater grids and the soft
//! labels derived from them); the held-out splits carry clean ground truth
//! and no rater data. Everything is a pure function of the generator spec,
//! so regenerating into a fresh directory reproduces every byte.

use std::fs;
use std::path::{Path, PathBuf};

use noisyseg_core::rng::derive_seed;
use noisyseg_core::softlabel::{build_soft_labels, RaterGrid, SoftLabelParams};
use noisyseg_core::synth::{full_image_template, generate_volume, simulate_raters, split_counts};
use noisyseg_core::tensor::{stack_25d, BinaryMask, SampleRecord, SoftMask, Tensor2D, Tensor3D};

use crate::manifest::{
    read_json, write_json, DatasetManifest, FilesJson, GenerateSpec, SliceRatersJson, SpecsJson,
    TemplateJson, VolumeEntryJson,
};
use crate::stf_io::{read_tensor3d, write_tensor3d};
use crate::{AppError, AppResult};

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

fn masks_to_volume(masks: &[BinaryMask]) -> AppResult<Tensor3D> {
    let planes: Vec<Tensor2D> = masks.iter().map(BinaryMask::to_tensor).collect();
    Tensor3D::from_slices(&planes).map_err(|e| AppError::data(e.to_string()))
}

fn volume_to_masks(t: &Tensor3D) -> AppResult<Vec<BinaryMask>> {
    (0..t.depth())
        .map(|i| {
            let plane = t.slice(i).map_err(|e| AppError::data(e.to_string()))?;
            BinaryMask::from_tensor(&plane)
                .map_err(|e| AppError::data(format!("mask plane {i}: {e}")))
        })
        .collect()
}

fn soft_to_volume(masks: &[SoftMask]) -> AppResult<Tensor3D> {
    let planes: Vec<Tensor2D> = masks.iter().map(|m| m.plane().clone()).collect();
    Tensor3D::from_slices(&planes).map_err(|e| AppError::data(e.to_string()))
}

fn volume_to_soft(t: &Tensor3D) -> AppResult<Vec<SoftMask>> {
    (0..t.depth())
        .map(|i| {
            let plane = t.slice(i).map_err(|e| AppError::data(e.to_string()))?;
            SoftMask::new(plane.height(), plane.width(), plane.data().to_vec())
                .map_err(|e| AppError::data(format!("soft plane {i}: {e}")))
        })
        .collect()
}

/// Generate the full dataset directory from a spec. Volume `i` uses the
/// derived seeds `derive_seed(base_seed, i)` / `derive_seed(noise_seed, i)`,
/// so any volume can be regenerated independently.
pub fn make_dataset(spec: &GenerateSpec, out: &Path) -> AppResult<()> {
    if spec.volumes == 0 {
        return Err(AppError::config("need at least one volume"));
    }
    let (n_train, n_val, n_test) =
        split_counts(spec.volumes, (spec.split[0], spec.split[1], spec.split[2]))
            .map_err(|e| AppError::config(e.to_string()))?;
    let template = full_image_template(spec.phantom.height, spec.phantom.width, spec.cell);
    let softlabel_params = spec.softlabel.to_core();
    softlabel_params
        .validate()
        .map_err(|e| AppError::config(e.to_string()))?;

    let mut manifests: Vec<DatasetManifest> = SPLITS
        .iter()
        .map(|split| DatasetManifest {
            split: (*split).to_string(),
            volumes: Vec::new(),
            specs: SpecsJson {
                phantom: spec.phantom.clone(),
                noise: spec.noise.clone(),
                softlabel: spec.softlabel,
                template: TemplateJson::from_core(&template),
                base_seed: spec.base_seed,
                noise_seed: spec.noise_seed,
            },
        })
        .collect();
    for split in SPLITS {
        fs::create_dir_all(out.join(split))?;
    }

    for index in 0..spec.volumes {
        let split_idx = if index < n_train {
            0
        } else if index < n_train + n_val {
            1
        } else {
            2
        };
        let _ = n_test;
        let split_dir = out.join(SPLITS[split_idx]);
        let id = format!("vol{index:03}");
        let vol_seed = derive_seed(spec.base_seed, index as u64);
        let phantom = spec.phantom.to_core(vol_seed);
        let volume = generate_volume(&phantom).map_err(|e| AppError::config(e.to_string()))?;

        let intensity_file = format!("{id}_intensity.stf");
        let bone_file = format!("{id}_bone.stf");
        write_tensor3d(&split_dir.join(&intensity_file), &volume.intensities)?;
        write_tensor3d(&split_dir.join(&bone_file), &masks_to_volume(&volume.bone)?)?;

        let files = if split_idx == 0 {
            let noise = spec
                .noise
                .to_core(derive_seed(spec.noise_seed, index as u64));
            let grids = simulate_raters(&volume, &template, &noise)
                .map_err(|e| AppError::config(e.to_string()))?;
            let soft = build_soft_labels(
                &grids,
                noise.n_raters as usize,
                &volume.bone,
                &volume.intensities,
                &softlabel_params,
            )
            .map_err(|e| AppError::data(e.to_string()))?;

            let raters_file = format!("{id}_raters.json");
            let slices: Vec<SliceRatersJson> = grids
                .iter()
                .map(|g| SliceRatersJson::from_core(g))
                .collect::<AppResult<_>>()?;
            write_json(&split_dir.join(&raters_file), &slices)?;

            let soft_file = format!("{id}_soft.stf");
            write_tensor3d(&split_dir.join(&soft_file), &soft_to_volume(&soft)?)?;

            FilesJson {
                intensity: intensity_file,
                gt: None,
                bone: bone_file,
                soft: Some(soft_file),
                raters: Some(raters_file),
            }
        } else {
            let gt_file = format!("{id}_gt.stf");
            write_tensor3d(&split_dir.join(&gt_file), &masks_to_volume(&volume.gt)?)?;
            FilesJson {
                intensity: intensity_file,
                gt: Some(gt_file),
                bone: bone_file,
                soft: None,
                raters: None,
            }
        };
        manifests[split_idx].volumes.push(VolumeEntryJson {
            id,
            seed: vol_seed,
            files,
        });
    }

    for (split, manifest) in SPLITS.iter().zip(manifests.iter()) {
        write_json(&out.join(split).join("manifest.json"), manifest)?;
    }
    Ok(())
}

/// One volume as loaded from a split directory.
#[derive(Clone, Debug)]
pub struct LoadedVolume {
    pub id: String,
    pub intensities: Tensor3D,
    pub bone: Vec<BinaryMask>,
    pub gt: Option<Vec<BinaryMask>>,
    pub soft: Option<Vec<SoftMask>>,
    pub raters: Option<Vec<Vec<RaterGrid>>>,
}

pub fn split_dir(data: &Path, split: &str) -> PathBuf {
    data.join(split)
}

pub fn load_manifest(data: &Path, split: &str) -> AppResult<DatasetManifest> {
    read_json(&split_dir(data, split).join("manifest.json"))
}

pub fn load_split(data: &Path, split: &str) -> AppResult<(DatasetManifest, Vec<LoadedVolume>)> {
    let dir = split_dir(data, split);
    let manifest = load_manifest(data, split)?;
    let mut volumes = Vec::with_capacity(manifest.volumes.len());
    for entry in &manifest.volumes {
        let intensities = read_tensor3d(&dir.join(&entry.files.intensity))?;
        let bone = volume_to_masks(&read_tensor3d(&dir.join(&entry.files.bone))?)?;
        let gt = match &entry.files.gt {
            Some(f) => Some(volume_to_masks(&read_tensor3d(&dir.join(f))?)?),
            None => None,
        };
        let soft = match &entry.files.soft {
            Some(f) => Some(volume_to_soft(&read_tensor3d(&dir.join(f))?)?),
            None => None,
        };
        let raters = match &entry.files.raters {
            Some(f) => {
                let slices: Vec<SliceRatersJson> = read_json(&dir.join(f))?;
                Some(
                    slices
                        .iter()
                        .map(SliceRatersJson::to_core)
                        .collect::<AppResult<_>>()?,
                )
            }
            None => None,
        };
        volumes.push(LoadedVolume {
            id: entry.id.clone(),
            intensities,
            bone,
            gt,
            soft,
            raters,
        });
    }
    Ok((manifest, volumes))
}

/// Per-slice training samples from the train split. `binarize_labels`
/// replaces each soft label with its 0.5-thresholded hard version (the
/// "bin" label mode of the ablation).
pub fn train_samples(volumes: &[LoadedVolume], binarize_labels: bool) -> AppResult<Vec<SampleRecord>> {
    let mut samples = Vec::new();
    for vol in volumes {
        let soft = vol
            .soft
            .as_ref()
            .ok_or_else(|| AppError::data(format!("{}: no soft labels in train split", vol.id)))?;
        for slice in 0..vol.intensities.depth() {
            let label = if binarize_labels {
                let hard = soft[slice].binarize(0.5);
                SoftMask::new(
                    hard.height(),
                    hard.width(),
                    hard.values().iter().map(|&v| f32::from(v)).collect(),
                )
                .map_err(|e| AppError::data(e.to_string()))?
            } else {
                soft[slice].clone()
            };
            samples.push(SampleRecord {
                volume_id: vol.id.clone(),
                slice_index: slice,
                input: stack_25d(&vol.intensities, slice)
                    .map_err(|e| AppError::data(e.to_string()))?,
                soft: label,
                gt: None,
                bone: vol.bone[slice].clone(),
            });
        }
    }
    if samples.is_empty() {
        return Err(AppError::data("train split has no samples"));
    }
    Ok(samples)
}

/// Recompute the train split's soft labels from the stored rater grids with
/// new parameters, overwriting the soft files and the recorded params.
pub fn rebuild_soft_labels(data: &Path, params: &SoftLabelParams) -> AppResult<()> {
    params
        .validate()
        .map_err(|e| AppError::config(e.to_string()))?;
    let dir = split_dir(data, "train");
    let (mut manifest, volumes) = load_split(data, "train")?;
    for (entry, vol) in manifest.volumes.iter().zip(volumes.iter()) {
        let raters = vol
            .raters
            .as_ref()
            .ok_or_else(|| AppError::data(format!("{}: no rater grids", vol.id)))?;
        let soft = build_soft_labels(
            raters,
            manifest.specs.noise.n_raters as usize,
            &vol.bone,
            &vol.intensities,
            params,
        )
        .map_err(|e| AppError::data(e.to_string()))?;
        let soft_file = entry
            .files
            .soft
            .as_ref()
            .ok_or_else(|| AppError::data(format!("{}: manifest lists no soft file", vol.id)))?;
        write_tensor3d(&dir.join(soft_file), &soft_to_volume(&soft)?)?;
    }
    manifest.specs.softlabel = crate::manifest::SoftLabelParamsJson::from_core(params);
    write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(())
}
