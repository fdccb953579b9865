use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use noisyseg::ablate::{default_rows, run_ablation, PlanJson, RowJson};
use noisyseg::checkpoint::{load_model, save_model};
use noisyseg::dataset::{load_split, make_dataset, rebuild_soft_labels, train_samples};
use noisyseg::manifest::{read_json, write_json, GenerateSpec, SoftLabelParamsJson};
use noisyseg::report::{ReportJson, RunConfigJson};
use noisyseg::{AppError, AppResult};
use noisyseg_core::losses::LossConfig;
use noisyseg_core::metrics::evaluate_run;
use noisyseg_core::model::{
    loss_gradient_max_rel_err, network_gradient_max_rel_err, predict_volume, relu_kink_margin,
    train, ModelParams, TrainConfig,
};
use noisyseg_core::rng::SplitMix64;
use noisyseg_core::tensor::{SoftMask, Tensor3D};

/// Weak-label segmentation laboratory: synthetic phantoms, soft labels,
/// noise-robust losses, and the ablation harness around them.
#[derive(Parser)]
#[command(name = "noisyseg", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory from a generator spec.
    Synth {
        /// Generator spec JSON ({} selects every default).
        #[arg(long)]
        spec: PathBuf,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Rebuild the train split's soft labels with different parameters.
    Softlabel {
        #[arg(long)]
        data: PathBuf,
        /// Soft-label params JSON.
        #[arg(long)]
        params: PathBuf,
    },
    /// Train one configuration and write a checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Row name from the default plan (e.g. "apl-soft-111") or a path
        /// to a row JSON file.
        #[arg(long)]
        loss: String,
        /// Checkpoint output directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 30)]
        epochs: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.001)]
        lr: f64,
        #[arg(long, default_value_t = 2)]
        batch: usize,
        #[arg(long, default_value_t = true)]
        mirror: bool,
    },
    /// Evaluate a checkpoint on the test split and write a report.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Report JSON output path.
        #[arg(long)]
        report: PathBuf,
    },
    /// Run an ablation plan end to end.
    Ablate {
        /// Plan JSON; defaults to the built-in eight-row plan.
        #[arg(long)]
        plan: Option<PathBuf>,
        /// Dataset directory (overrides the plan's dataset field).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory for results.csv, run_manifest.json,
        /// comparison.json.
        #[arg(long)]
        out: PathBuf,
        /// Worker threads (also capped by NOISYSEG_THREADS).
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Finite-difference checks of every loss and parameter gradient.
    Gradcheck,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}

fn run(command: Command) -> AppResult<()> {
    match command {
        Command::Synth { spec, out } => {
            let spec: GenerateSpec = read_json(&spec)?;
            make_dataset(&spec, &out)?;
            println!("dataset written to {}", out.display());
            Ok(())
        }
        Command::Softlabel { data, params } => {
            let params: SoftLabelParamsJson = read_json(&params)?;
            rebuild_soft_labels(&data, &params.to_core())?;
            println!("soft labels rebuilt under {}", data.join("train").display());
            Ok(())
        }
        Command::Train {
            data,
            loss,
            out,
            epochs,
            seed,
            lr,
            batch,
            mirror,
        } => {
            let row = resolve_row(&loss)?;
            let (_, volumes) = load_split(&data, "train")?;
            let samples = train_samples(&volumes, row.label == "bin")?;
            let config = TrainConfig {
                loss: row.loss_json().to_core(),
                learning_rate: lr,
                epochs,
                batch_size: batch,
                seed,
                mirror_augment: mirror,
                ..TrainConfig::default()
            };
            let trained = train(&samples, &config)?;
            save_model(&trained.params, &out)?;
            write_json(
                &out.join("train_config.json"),
                &serde_json::json!({
                    "row": row,
                    "epochs": epochs,
                    "seed": seed,
                    "learning_rate": lr,
                    "batch_size": batch,
                    "mirror_augment": mirror,
                    "loss_curve": trained.loss_curve,
                }),
            )?;
            println!(
                "trained {epochs} epochs, final loss {:.6}, checkpoint at {}",
                trained.loss_curve.last().copied().unwrap_or(f64::NAN),
                out.display()
            );
            Ok(())
        }
        Command::Eval { ckpt, data, report } => {
            let params = load_model(&ckpt)?;
            let (_, volumes) = load_split(&data, "test")?;
            let mut preds = Vec::new();
            let mut gts = Vec::new();
            for vol in &volumes {
                preds.push((vol.id.clone(), predict_volume(&params, &vol.intensities)?));
                let gt = vol
                    .gt
                    .clone()
                    .ok_or_else(|| AppError::data(format!("{}: test volume without GT", vol.id)))?;
                gts.push((vol.id.clone(), gt));
            }
            let metrics = evaluate_run(&preds, &gts).map_err(|e| AppError::data(e.to_string()))?;
            let json = ReportJson::from_core(
                RunConfigJson {
                    row: "eval".into(),
                    loss: noisyseg::report::LossConfigJson {
                        bce: 0.0,
                        sce: 0.0,
                        rce: 0.0,
                        normalize: false,
                        normalize_active: None,
                    },
                    label_mode: "n/a".into(),
                    seed: 0,
                    epochs: 0,
                    dataset: data.display().to_string(),
                },
                &metrics,
            );
            write_json(&report, &json)?;
            let a = &json.aggregate;
            println!(
                "ap50 {:.4}  ap75 {:.4}  iou {:.4}  recall {:.4}  precision {:.4}  dice {:.4}",
                a.ap50, a.ap75, a.iou, a.recall, a.precision, a.dice
            );
            Ok(())
        }
        Command::Ablate {
            plan,
            data,
            out,
            threads,
        } => {
            let plan: PlanJson = match plan {
                Some(path) => read_json(&path)?,
                None => PlanJson::default(),
            };
            let data_dir = match (&data, &plan.dataset) {
                (Some(d), _) => d.clone(),
                (None, Some(d)) => PathBuf::from(d),
                (None, None) => {
                    return Err(AppError::config(
                        "no dataset: pass --data or set \"dataset\" in the plan",
                    ))
                }
            };
            let manifest = run_ablation(&plan, &data_dir, &out, threads)?;
            println!("{}", noisyseg::ablate::results_csv(&manifest));
            println!("results under {}", out.display());
            Ok(())
        }
        Command::Gradcheck => gradcheck(),
    }
}

fn resolve_row(arg: &str) -> AppResult<RowJson> {
    let path = Path::new(arg);
    if path.exists() {
        return read_json(path);
    }
    default_rows()
        .into_iter()
        .find(|r| r.name == arg)
        .ok_or_else(|| {
            AppError::config(format!(
                "--loss {arg:?} is neither a file nor a known row (known: {})",
                default_rows()
                    .iter()
                    .map(|r| r.name.clone())
                    .collect::<Vec<_>>()
                    .join(", ")
            ))
        })
}

/// Gradient tolerance gate used by `gradcheck`.
const GRADCHECK_TOLERANCE: f64 = 1e-4;

fn gradcheck() -> AppResult<()> {
    // random prediction/target grid, strictly inside (0,1)
    let mut rng = SplitMix64::new(2024);
    let preds: Vec<f64> = (0..256).map(|_| rng.next_range_f64(0.01, 0.99)).collect();
    let targets: Vec<f64> = (0..256).map(|_| rng.next_f64()).collect();

    // near-boundary grid: a clip floor coarse enough that the h=1e-6 probes
    // stay inside the smooth region around 10*p_min
    let boundary_p_min = 1e-4;
    let boundary_preds = vec![
        10.0 * boundary_p_min,
        1.0 - 10.0 * boundary_p_min,
        0.5,
        10.0 * boundary_p_min,
    ];
    let boundary_targets = vec![1.0, 0.0, 0.25, 0.0];

    // fixture screened so a +/-1e-4 parameter sweep cannot cross a ReLU kink
    let (params, input) = kink_safe_fixture()?;
    let label = {
        let mut rng = SplitMix64::new(5150);
        let probs: Vec<f32> = (0..256).map(|_| rng.next_f64() as f32).collect();
        SoftMask::new(16, 16, probs).map_err(|e| AppError::config(e.to_string()))?
    };

    let mut worst: f64 = 0.0;
    println!("row              loss-grad     network-grad");
    for row in default_rows() {
        let loss: LossConfig = row.loss_json().to_core();
        let loss_err = loss_gradient_max_rel_err(&loss, &preds, &targets, 1e-6)?;
        let mut boundary_cfg = loss.clone();
        boundary_cfg.p_min = boundary_p_min;
        let boundary_err =
            loss_gradient_max_rel_err(&boundary_cfg, &boundary_preds, &boundary_targets, 1e-6)?;
        let net_err = network_gradient_max_rel_err(&params, &input, &label, &loss, 1e-4)?;
        let loss_worst = loss_err.max(boundary_err);
        println!("{:<16} {loss_worst:.3e}     {net_err:.3e}", row.name);
        worst = worst.max(loss_worst).max(net_err);
    }
    println!("max relative error {worst:.3e} (tolerance {GRADCHECK_TOLERANCE:.0e})");
    if worst > GRADCHECK_TOLERANCE {
        return Err(AppError::Other(anyhow::anyhow!(
            "gradient check failed: {worst:.3e} > {GRADCHECK_TOLERANCE:.0e}"
        )));
    }
    Ok(())
}

/// Deterministic scan for a seed whose ReLU pre-activations all clear the
/// finite-difference step with margin.
fn kink_safe_fixture() -> AppResult<(ModelParams, Tensor3D)> {
    for seed in 0..2000u64 {
        let params = ModelParams::init_he(seed);
        let mut rng = SplitMix64::new(seed + 10_000);
        let data: Vec<f32> = (0..3 * 256).map(|_| rng.next_f64() as f32).collect();
        let input = Tensor3D::new(3, 16, 16, data).map_err(|e| AppError::config(e.to_string()))?;
        let margin = relu_kink_margin(&params, &input)?;
        if margin > 2e-3 {
            return Ok((params, input));
        }
    }
    Err(AppError::Other(anyhow::anyhow!(
        "no kink-safe gradcheck fixture found"
    )))
}
