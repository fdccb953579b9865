//! JSON schemas for dataset manifests, rater grid files, and generator
//! specs, with conversions to the core types.
//!
//! Serialization is deterministic (fields in declaration order, shortest
//! round-trip floats), which the byte-identical regeneration contract
//! relies on.

use serde::{Deserialize, Serialize};

use noisyseg_core::softlabel::{GridTemplate, RaterGrid, SoftLabelParams};
use noisyseg_core::synth::{PhantomSpec, RaterNoiseSpec};

use crate::{AppError, AppResult};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct PhantomSpecJson {
    pub height: usize,
    pub width: usize,
    pub depth: usize,
    pub bone_semi_axes: [f64; 2],
    pub lesion_count: [u32; 2],
    pub lesion_radius: [f64; 2],
    pub lesion_boost: [f64; 2],
    pub background_intensity: f64,
    pub bone_intensity: f64,
    pub noise_std: f64,
}

impl Default for PhantomSpecJson {
    fn default() -> Self {
        Self::from_core(&PhantomSpec::default())
    }
}

impl PhantomSpecJson {
    pub fn from_core(spec: &PhantomSpec) -> Self {
        Self {
            height: spec.height,
            width: spec.width,
            depth: spec.depth,
            bone_semi_axes: [spec.bone_semi_axes.0, spec.bone_semi_axes.1],
            lesion_count: [spec.lesion_count.0, spec.lesion_count.1],
            lesion_radius: [spec.lesion_radius.0, spec.lesion_radius.1],
            lesion_boost: [spec.lesion_boost.0, spec.lesion_boost.1],
            background_intensity: spec.background_intensity,
            bone_intensity: spec.bone_intensity,
            noise_std: spec.noise_std,
        }
    }

    pub fn to_core(&self, seed: u64) -> PhantomSpec {
        PhantomSpec {
            height: self.height,
            width: self.width,
            depth: self.depth,
            bone_semi_axes: (self.bone_semi_axes[0], self.bone_semi_axes[1]),
            lesion_count: (self.lesion_count[0], self.lesion_count[1]),
            lesion_radius: (self.lesion_radius[0], self.lesion_radius[1]),
            lesion_boost: (self.lesion_boost[0], self.lesion_boost[1]),
            background_intensity: self.background_intensity,
            bone_intensity: self.bone_intensity,
            noise_std: self.noise_std,
            seed,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct NoiseSpecJson {
    pub n_raters: u32,
    pub miss_rate: f64,
    pub difficulty_penalty: f64,
    pub false_positive_rate: f64,
    pub jitter: f64,
}

impl Default for NoiseSpecJson {
    fn default() -> Self {
        Self::from_core(&RaterNoiseSpec::default())
    }
}

impl NoiseSpecJson {
    pub fn from_core(spec: &RaterNoiseSpec) -> Self {
        Self {
            n_raters: spec.n_raters,
            miss_rate: spec.miss_rate,
            difficulty_penalty: spec.difficulty_penalty,
            false_positive_rate: spec.false_positive_rate,
            jitter: spec.jitter,
        }
    }

    pub fn to_core(&self, seed: u64) -> RaterNoiseSpec {
        RaterNoiseSpec {
            n_raters: self.n_raters,
            miss_rate: self.miss_rate,
            difficulty_penalty: self.difficulty_penalty,
            false_positive_rate: self.false_positive_rate,
            jitter: self.jitter,
            seed,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct SoftLabelParamsJson {
    pub intensity_z_threshold: f64,
    pub propagation_weight: f32,
}

impl Default for SoftLabelParamsJson {
    fn default() -> Self {
        Self::from_core(&SoftLabelParams::default())
    }
}

impl SoftLabelParamsJson {
    pub fn from_core(params: &SoftLabelParams) -> Self {
        Self {
            intensity_z_threshold: params.intensity_z_threshold,
            propagation_weight: params.propagation_weight,
        }
    }

    pub fn to_core(&self) -> SoftLabelParams {
        SoftLabelParams {
            intensity_z_threshold: self.intensity_z_threshold,
            propagation_weight: self.propagation_weight,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct TemplateJson {
    /// (x, y) of the grid's top-left corner in pixels.
    pub origin: [i32; 2],
    pub cell: u32,
    pub rows: u32,
    pub cols: u32,
}

impl TemplateJson {
    pub fn from_core(t: &GridTemplate) -> Self {
        Self {
            origin: [t.origin_x, t.origin_y],
            cell: t.cell,
            rows: t.rows,
            cols: t.cols,
        }
    }

    pub fn to_core(&self) -> GridTemplate {
        GridTemplate {
            origin_x: self.origin[0],
            origin_y: self.origin[1],
            cell: self.cell,
            rows: self.rows,
            cols: self.cols,
        }
    }
}

/// One rater's selected cells on one slice, as (row, col) pairs.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct RaterEntryJson {
    pub id: u32,
    pub cells: Vec<[u32; 2]>,
}

/// All raters' grids for one slice.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct SliceRatersJson {
    pub template: TemplateJson,
    pub raters: Vec<RaterEntryJson>,
}

impl SliceRatersJson {
    pub fn from_core(grids: &[RaterGrid]) -> AppResult<Self> {
        let template = grids
            .first()
            .map(|g| TemplateJson::from_core(&g.template))
            .ok_or_else(|| AppError::data("slice without rater grids"))?;
        let raters = grids
            .iter()
            .map(|g| {
                let mut cells = Vec::new();
                for row in 0..g.template.rows {
                    for col in 0..g.template.cols {
                        if g.is_selected(row, col) {
                            cells.push([row, col]);
                        }
                    }
                }
                RaterEntryJson { id: g.rater_id, cells }
            })
            .collect();
        Ok(Self { template, raters })
    }

    pub fn to_core(&self) -> AppResult<Vec<RaterGrid>> {
        let template = self.template.to_core();
        self.raters
            .iter()
            .map(|entry| {
                let mut grid = RaterGrid::empty(entry.id, template);
                for &[row, col] in &entry.cells {
                    if row >= template.rows || col >= template.cols {
                        return Err(AppError::data(format!(
                            "cell ({row}, {col}) outside {}x{} grid",
                            template.rows, template.cols
                        )));
                    }
                    grid.select(row, col);
                }
                Ok(grid)
            })
            .collect()
    }
}

/// Tensor/JSON files belonging to one volume; which ones exist depends on
/// the split (weak labels in train, clean ground truth in val/test).
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct FilesJson {
    pub intensity: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub gt: Option<String>,
    pub bone: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub soft: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub raters: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct VolumeEntryJson {
    pub id: String,
    pub seed: u64,
    pub files: FilesJson,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SpecsJson {
    pub phantom: PhantomSpecJson,
    pub noise: NoiseSpecJson,
    pub softlabel: SoftLabelParamsJson,
    pub template: TemplateJson,
    pub base_seed: u64,
    pub noise_seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct DatasetManifest {
    pub split: String,
    pub volumes: Vec<VolumeEntryJson>,
    pub specs: SpecsJson,
}

/// Input for `synth`: how many volumes, how to split them, and the
/// generator parameters. All fields default to the standard corpus.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct GenerateSpec {
    pub volumes: usize,
    pub base_seed: u64,
    pub noise_seed: u64,
    pub split: [f64; 3],
    /// Cell size of the full-image annotation grid.
    pub cell: u32,
    pub phantom: PhantomSpecJson,
    pub noise: NoiseSpecJson,
    pub softlabel: SoftLabelParamsJson,
}

impl Default for GenerateSpec {
    fn default() -> Self {
        Self {
            volumes: 20,
            base_seed: 7_001,
            noise_seed: 9_001,
            split: [0.8, 0.05, 0.15],
            cell: 8,
            phantom: PhantomSpecJson::default(),
            noise: NoiseSpecJson::default(),
            softlabel: SoftLabelParamsJson::default(),
        }
    }
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &std::path::Path) -> AppResult<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| AppError::data(format!("reading {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| AppError::config(format!("parsing {}: {e}", path.display())))
}

pub fn write_json<T: Serialize>(path: &std::path::Path, value: &T) -> AppResult<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| AppError::config(format!("serializing {}: {e}", path.display())))?;
    text.push('\n');
    std::fs::write(path, text)
        .map_err(|e| AppError::data(format!("writing {}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rater_grids_roundtrip_through_json() {
        let template = GridTemplate {
            origin_x: 0,
            origin_y: 0,
            cell: 8,
            rows: 3,
            cols: 3,
        };
        let mut a = RaterGrid::empty(0, template);
        a.select(0, 1);
        a.select(2, 2);
        let b = RaterGrid::empty(4, template);
        let json = SliceRatersJson::from_core(&[a.clone(), b.clone()]).unwrap();
        let back = json.to_core().unwrap();
        assert_eq!(back, vec![a, b]);
    }

    #[test]
    fn rater_json_rejects_out_of_grid_cells() {
        let json = SliceRatersJson {
            template: TemplateJson { origin: [0, 0], cell: 8, rows: 2, cols: 2 },
            raters: vec![RaterEntryJson { id: 0, cells: vec![[5, 0]] }],
        };
        assert!(json.to_core().is_err());
    }

    #[test]
    fn generate_spec_defaults_from_empty_object() {
        let spec: GenerateSpec = serde_json::from_str("{}").unwrap();
        assert_eq!(spec, GenerateSpec::default());
        assert_eq!(spec.volumes, 20);
        assert_eq!(spec.split, [0.8, 0.05, 0.15]);
    }

    #[test]
    fn manifest_serialization_is_deterministic() {
        let spec = GenerateSpec::default();
        let manifest = DatasetManifest {
            split: "train".into(),
            volumes: vec![],
            specs: SpecsJson {
                phantom: spec.phantom.clone(),
                noise: spec.noise.clone(),
                softlabel: spec.softlabel,
                template: TemplateJson { origin: [0, 0], cell: 8, rows: 8, cols: 8 },
                base_seed: 1,
                noise_seed: 2,
            },
        };
        let a = serde_json::to_string_pretty(&manifest).unwrap();
        let b = serde_json::to_string_pretty(&manifest).unwrap();
        assert_eq!(a, b);
        let back: DatasetManifest = serde_json::from_str(&a).unwrap();
        assert_eq!(back, manifest);
    }
}
