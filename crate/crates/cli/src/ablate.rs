//! Ablation harness: train every (row, seed) combination of a plan, report
//! medians per row, and compare rows against the baseline.
//!
//! Rows run in parallel worker threads (capped by `NOISYSEG_THREADS`);
//! every run is internally deterministic and the outputs are assembled in
//! plan order, so the results.csv is byte-identical across re-runs.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use noisyseg_core::metrics::evaluate_run;
use noisyseg_core::model::{predict_volume, train, TrainConfig};
use noisyseg_core::rng::derive_seed;
use noisyseg_core::tensor::{BinaryMask, SampleRecord};

use crate::dataset::{load_split, train_samples, LoadedVolume, SPLITS};
use crate::manifest::write_json;
use crate::report::{AggregateJson, LossConfigJson, ReportJson, RunConfigJson};
use crate::{AppError, AppResult};

pub const LABEL_BIN: &str = "bin";
pub const LABEL_SOFT: &str = "soft";

/// One ablation row: a loss-weight triple, label mode, and normalization.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RowJson {
    pub name: String,
    pub bce: f64,
    pub sce: f64,
    pub rce: f64,
    /// "bin" binarizes the soft labels at 0.5 before training.
    pub label: String,
    pub normalize: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub normalize_active: Option<bool>,
}

impl RowJson {
    pub fn loss_json(&self) -> LossConfigJson {
        LossConfigJson {
            bce: self.bce,
            sce: self.sce,
            rce: self.rce,
            normalize: self.normalize,
            normalize_active: self.normalize_active,
        }
    }
}

/// The eight standard rows: the plain binary baseline, binary
/// active-passive combinations, the soft baseline, and the soft
/// active-passive combinations.
///
/// Baselines stay unnormalized. Rows with a passive term normalize it
/// (raw reverse cross-entropy is two orders of magnitude larger than the
/// active terms) but keep the active cross-entropies unnormalized, since
/// the normalized form cannot escape the background-saturated start on
/// this corpus (see `LossConfig::normalize_active`).
pub fn default_rows() -> Vec<RowJson> {
    let row = |name: &str, bce: f64, sce: f64, rce: f64, label: &str, apl: bool| RowJson {
        name: name.into(),
        bce,
        sce,
        rce,
        label: label.into(),
        normalize: apl,
        normalize_active: if apl { Some(false) } else { None },
    };
    vec![
        row("baseline", 1.0, 0.0, 0.0, LABEL_BIN, false),
        row("apl-bin-101", 1.0, 0.0, 1.0, LABEL_BIN, true),
        row("apl-bin-201", 2.0, 0.0, 1.0, LABEL_BIN, true),
        row("soft-baseline", 0.0, 1.0, 0.0, LABEL_SOFT, false),
        row("apl-soft-011", 0.0, 1.0, 1.0, LABEL_SOFT, true),
        row("apl-soft-021", 0.0, 2.0, 1.0, LABEL_SOFT, true),
        row("apl-soft-111", 1.0, 1.0, 1.0, LABEL_SOFT, true),
        row("apl-soft-221", 2.0, 2.0, 1.0, LABEL_SOFT, true),
    ]
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct PlanJson {
    pub rows: Vec<RowJson>,
    /// Number of seeds per row; metrics are medians over them.
    pub seeds: u32,
    pub base_seed: u64,
    pub epochs: u32,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub mirror_augment: bool,
    /// Dataset directory; may be overridden on the command line.
    pub dataset: Option<String>,
}

impl Default for PlanJson {
    fn default() -> Self {
        Self {
            rows: default_rows(),
            seeds: 5,
            base_seed: 1,
            epochs: 30,
            learning_rate: 0.001,
            batch_size: 2,
            mirror_augment: true,
            dataset: None,
        }
    }
}

impl PlanJson {
    pub fn validate(&self) -> AppResult<()> {
        if self.rows.is_empty() {
            return Err(AppError::config("plan has no rows"));
        }
        let mut names: Vec<&str> = self.rows.iter().map(|r| r.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != self.rows.len() {
            return Err(AppError::config("row names must be unique"));
        }
        for row in &self.rows {
            if row.label != LABEL_BIN && row.label != LABEL_SOFT {
                return Err(AppError::config(format!(
                    "row {}: label must be \"bin\" or \"soft\"",
                    row.name
                )));
            }
            row.loss_json()
                .to_core()
                .validate()
                .map_err(|e| AppError::config(format!("row {}: {e}", row.name)))?;
        }
        if self.seeds == 0 {
            return Err(AppError::config("need at least one seed"));
        }
        if self.epochs == 0 {
            return Err(AppError::config("need at least one epoch"));
        }
        Ok(())
    }

    fn train_config(&self, row: &RowJson, run_seed: u64) -> TrainConfig {
        TrainConfig {
            loss: row.loss_json().to_core(),
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: run_seed,
            mirror_augment: self.mirror_augment,
            ..TrainConfig::default()
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RowResultJson {
    pub row: RowJson,
    pub per_seed: Vec<ReportJson>,
    pub median: AggregateJson,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RunManifestJson {
    pub timestamp_unix: u64,
    pub config_hash: String,
    pub dataset_manifest_hash: String,
    pub plan: PlanJson,
    pub rows: Vec<RowResultJson>,
}

fn median(values: &mut Vec<f64>) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite metric"));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn median_aggregate(reports: &[ReportJson]) -> AggregateJson {
    let pick = |sel: fn(&AggregateJson) -> f64| {
        let mut values: Vec<f64> = reports.iter().map(|r| sel(&r.aggregate)).collect();
        median(&mut values)
    };
    AggregateJson {
        ap50: pick(|a| a.ap50),
        ap75: pick(|a| a.ap75),
        iou: pick(|a| a.iou),
        recall: pick(|a| a.recall),
        precision: pick(|a| a.precision),
        dice: pick(|a| a.dice),
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

fn dataset_hash(data: &Path) -> AppResult<String> {
    let mut hasher = Sha256::new();
    for split in SPLITS {
        let path = data.join(split).join("manifest.json");
        let bytes = std::fs::read(&path)
            .map_err(|e| AppError::data(format!("reading {}: {e}", path.display())))?;
        hasher.update(&bytes);
    }
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    Ok(out)
}

/// Worker cap: explicit request, else `NOISYSEG_THREADS`, else the host
/// parallelism, never more than the number of jobs.
pub fn effective_threads(requested: Option<usize>, jobs: usize) -> usize {
    let host = std::thread::available_parallelism().map_or(1, |n| n.get());
    let capped = match std::env::var("NOISYSEG_THREADS") {
        Ok(v) => v.parse::<usize>().ok().filter(|&n| n > 0).unwrap_or(host),
        Err(_) => host,
    };
    requested.unwrap_or(capped).min(capped).max(1).min(jobs.max(1))
}

/// Everything an eval needs from the test split.
fn eval_views(volumes: &[LoadedVolume]) -> AppResult<Vec<(String, Vec<BinaryMask>)>> {
    volumes
        .iter()
        .map(|v| {
            let gt = v
                .gt
                .clone()
                .ok_or_else(|| AppError::data(format!("{}: test volume without GT", v.id)))?;
            Ok((v.id.clone(), gt))
        })
        .collect()
}

/// Train and evaluate one (row, seed-index) combination.
fn run_one(
    plan: &PlanJson,
    row_idx: usize,
    seed_idx: u32,
    soft_samples: &[SampleRecord],
    bin_samples: &[SampleRecord],
    test_volumes: &[LoadedVolume],
    gts: &[(String, Vec<BinaryMask>)],
    dataset_name: &str,
) -> AppResult<ReportJson> {
    let row = &plan.rows[row_idx];
    let run_seed = derive_seed(derive_seed(plan.base_seed, row_idx as u64), u64::from(seed_idx));
    let config = plan.train_config(row, run_seed);
    let samples = if row.label == LABEL_BIN {
        bin_samples
    } else {
        soft_samples
    };
    let trained = train(samples, &config)?;
    let mut preds = Vec::with_capacity(test_volumes.len());
    for vol in test_volumes {
        preds.push((vol.id.clone(), predict_volume(&trained.params, &vol.intensities)?));
    }
    let report = evaluate_run(&preds, gts).map_err(|e| AppError::data(e.to_string()))?;
    Ok(ReportJson::from_core(
        RunConfigJson {
            row: row.name.clone(),
            loss: row.loss_json(),
            label_mode: row.label.clone(),
            seed: run_seed,
            epochs: plan.epochs,
            dataset: dataset_name.to_string(),
        },
        &report,
    ))
}

/// Run the whole plan against a dataset directory. Writes `results.csv`,
/// `run_manifest.json`, and `comparison.json` into `out`.
pub fn run_ablation(
    plan: &PlanJson,
    data: &Path,
    out: &Path,
    threads: Option<usize>,
) -> AppResult<RunManifestJson> {
    plan.validate()?;
    std::fs::create_dir_all(out)?;
    let (_, train_volumes) = load_split(data, "train")?;
    let soft_samples = train_samples(&train_volumes, false)?;
    let bin_samples = train_samples(&train_volumes, true)?;
    drop(train_volumes);
    let (_, test_volumes) = load_split(data, "test")?;
    let gts = eval_views(&test_volumes)?;
    let dataset_name = data.display().to_string();

    let jobs: Vec<(usize, u32)> = (0..plan.rows.len())
        .flat_map(|r| (0..plan.seeds).map(move |s| (r, s)))
        .collect();
    let n_threads = effective_threads(threads, jobs.len());
    let next_job = AtomicUsize::new(0);
    let results: Vec<Mutex<Option<AppResult<ReportJson>>>> =
        jobs.iter().map(|_| Mutex::new(None)).collect();

    std::thread::scope(|scope| {
        for _ in 0..n_threads {
            scope.spawn(|| loop {
                let job = next_job.fetch_add(1, Ordering::Relaxed);
                if job >= jobs.len() {
                    break;
                }
                let (row_idx, seed_idx) = jobs[job];
                let outcome = run_one(
                    plan,
                    row_idx,
                    seed_idx,
                    &soft_samples,
                    &bin_samples,
                    &test_volumes,
                    &gts,
                    &dataset_name,
                );
                *results[job].lock().expect("result slot") = Some(outcome);
            });
        }
    });

    let mut per_row: Vec<Vec<ReportJson>> = plan.rows.iter().map(|_| Vec::new()).collect();
    for (slot, &(row_idx, _)) in results.into_iter().zip(jobs.iter()) {
        let outcome = slot
            .into_inner()
            .expect("result slot")
            .expect("every job ran");
        per_row[row_idx].push(outcome?);
    }

    let rows: Vec<RowResultJson> = plan
        .rows
        .iter()
        .zip(per_row)
        .map(|(row, per_seed)| {
            let median = median_aggregate(&per_seed);
            RowResultJson {
                row: row.clone(),
                per_seed,
                median,
            }
        })
        .collect();

    let manifest = RunManifestJson {
        timestamp_unix: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_secs()),
        config_hash: sha256_hex(
            serde_json::to_string(plan)
                .map_err(|e| AppError::config(e.to_string()))?
                .as_bytes(),
        ),
        dataset_manifest_hash: dataset_hash(data)?,
        plan: plan.clone(),
        rows,
    };

    std::fs::write(out.join("results.csv"), results_csv(&manifest))?;
    write_json(&out.join("run_manifest.json"), &manifest)?;
    write_json(&out.join("comparison.json"), &compare_rows(&manifest)?)?;
    Ok(manifest)
}

/// CSV mirroring the ablation table: one row of medians per plan row.
/// AP and IoU columns are percentages.
pub fn results_csv(manifest: &RunManifestJson) -> String {
    let mut csv = String::from("Method,BCE,SCE,RCE,label,AP50,AP75,IoU%,Rec.,Prec.,Dice\n");
    for row in &manifest.rows {
        let m = &row.median;
        csv.push_str(&format!(
            "{},{},{},{},{},{:.2},{:.2},{:.2},{:.4},{:.4},{:.4}\n",
            row.row.name,
            row.row.bce,
            row.row.sce,
            row.row.rce,
            row.row.label,
            m.ap50 * 100.0,
            m.ap75 * 100.0,
            m.iou * 100.0,
            m.recall,
            m.precision,
            m.dice
        ));
    }
    csv
}

/// Per-metric differences of one row against the baseline medians.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct DeltaJson {
    pub ap50: f64,
    pub ap75: f64,
    pub iou: f64,
    pub recall: f64,
    pub precision: f64,
    pub dice: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RowDeltaJson {
    pub row: String,
    pub delta: DeltaJson,
}

/// Whether the published ordering shows up in this run.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct OrderingJson {
    /// Soft baseline beats the binary baseline on recall, precision, and
    /// Dice.
    pub soft_baseline_improves: bool,
    /// The (1,1,1) soft row has the best recall of all rows.
    pub apl_soft_111_best_recall: bool,
    /// The (1,1,1) soft row has the best precision of all rows.
    pub apl_soft_111_best_precision: bool,
    /// 1-based rank of the (1,1,1) soft row when sorting rows by Dice.
    pub apl_soft_111_dice_rank: usize,
    pub paper_ordering_holds: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ComparisonJson {
    pub baseline: String,
    pub deltas: Vec<RowDeltaJson>,
    pub ordering: OrderingJson,
}

pub const BASELINE_ROW: &str = "baseline";
pub const SOFT_BASELINE_ROW: &str = "soft-baseline";
pub const APL_SOFT_111_ROW: &str = "apl-soft-111";

fn find_row<'m>(manifest: &'m RunManifestJson, name: &str) -> AppResult<&'m RowResultJson> {
    manifest
        .rows
        .iter()
        .find(|r| r.row.name == name)
        .ok_or_else(|| AppError::config(format!("manifest is missing required row {name:?}")))
}

/// Pairwise medians against the baseline plus the ordering flags. Requires
/// the baseline, soft-baseline, and (1,1,1) rows; errors out rather than
/// emitting a partial report.
pub fn compare_rows(manifest: &RunManifestJson) -> AppResult<ComparisonJson> {
    for row in &manifest.rows {
        if row.per_seed.is_empty() {
            return Err(AppError::config(format!(
                "row {} has no completed seeds",
                row.row.name
            )));
        }
    }
    let baseline = find_row(manifest, BASELINE_ROW)?;
    let soft_baseline = find_row(manifest, SOFT_BASELINE_ROW)?;
    let apl111 = find_row(manifest, APL_SOFT_111_ROW)?;

    let delta_of = |row: &RowResultJson| DeltaJson {
        ap50: row.median.ap50 - baseline.median.ap50,
        ap75: row.median.ap75 - baseline.median.ap75,
        iou: row.median.iou - baseline.median.iou,
        recall: row.median.recall - baseline.median.recall,
        precision: row.median.precision - baseline.median.precision,
        dice: row.median.dice - baseline.median.dice,
    };
    let deltas: Vec<RowDeltaJson> = manifest
        .rows
        .iter()
        .map(|row| RowDeltaJson {
            row: row.row.name.clone(),
            delta: delta_of(row),
        })
        .collect();

    let soft_delta = delta_of(soft_baseline);
    let best = |sel: fn(&AggregateJson) -> f64, candidate: &RowResultJson| {
        manifest.rows.iter().all(|r| sel(&r.median) <= sel(&candidate.median))
    };
    let dice_rank = 1 + manifest
        .rows
        .iter()
        .filter(|r| r.median.dice > apl111.median.dice)
        .count();
    let ordering = OrderingJson {
        soft_baseline_improves: soft_delta.recall > 0.0
            && soft_delta.precision > 0.0
            && soft_delta.dice > 0.0,
        apl_soft_111_best_recall: best(|a| a.recall, apl111),
        apl_soft_111_best_precision: best(|a| a.precision, apl111),
        apl_soft_111_dice_rank: dice_rank,
        paper_ordering_holds: soft_delta.recall > 0.0
            && soft_delta.precision > 0.0
            && soft_delta.dice > 0.0
            && best(|a| a.recall, apl111)
            && best(|a| a.precision, apl111),
    };
    Ok(ComparisonJson {
        baseline: BASELINE_ROW.to_string(),
        deltas,
        ordering,
    })
}
