//! `hsdr` -- batch driver for the hyperspectral dimensionality-reduction
//! toolkit.
//!
//! Exit codes: 0 on success, 1 on config or I/O errors, 2 when some pipeline
//! methods failed while others succeeded.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use hsdr_core::classifier::{self, Activation, MlpConfig};
use hsdr_core::hsio::{
    self, cube_to_samples, load_cube, load_labels, load_split, read_cube_csv, read_labels_csv,
    save_cube, save_labels, save_split, stratified_split, SampleSubset,
};
use hsdr_core::metrics::{evaluate, weak_classes, EvalReport};
use hsdr_core::pipeline::{
    self, fit_method, report_weak_classes, MethodSpec, PipelineConfig, WEAK_CLASS_THRESHOLD,
};
use hsdr_core::synth::{generate, SceneSpec};
use hsdr_core::transforms::{apply, load_transform, save_transform};
use hsdr_core::{HsdrError, Result};

#[derive(Parser)]
#[command(name = "hsdr", version, about = "Hyperspectral dimensionality-reduction toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convert CSV exports of a cube and its labels into HSDR containers.
    Convert {
        /// Cube CSV: first line `width,height,bands`, then one line per
        /// pixel in raster scan order.
        #[arg(long)]
        input: PathBuf,
        /// Labels CSV: first line `width,height`, then `height` rows of
        /// `width` integer labels (0 = unlabeled).
        #[arg(long)]
        labels: PathBuf,
        /// Directory receiving cube.hsdr and labels.hsdr.
        #[arg(long)]
        output: PathBuf,
    },
    /// Generate a synthetic scene from a TOML scene spec.
    Generate {
        #[arg(long)]
        config: PathBuf,
        /// Directory receiving cube.hsdr and labels.hsdr.
        #[arg(long)]
        output: PathBuf,
    },
    /// Compute a stratified train/test split of the labeled pixels.
    Split {
        #[arg(long)]
        labels: PathBuf,
        #[arg(long, default_value_t = 0.7)]
        train_fraction: f64,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        output: PathBuf,
    },
    /// Fit a feature-extraction transform on the training partition.
    Fit {
        /// Method token: pca:K, ica:K, lda:K, cwpca:M or cwpca:M:MODE.
        #[arg(long)]
        method: String,
        #[arg(long)]
        cube: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        split: PathBuf,
        /// Seed for the ICA initialization (other methods ignore it).
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        output: PathBuf,
    },
    /// Apply a fitted transform to a cube, producing the reduced cube.
    Transform {
        #[arg(long)]
        transform: PathBuf,
        #[arg(long)]
        cube: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Train the reference classifier on the training partition of a
    /// (reduced) cube.
    Train {
        /// Feature cube, typically the output of `transform`.
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        split: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Where to write the per-epoch history CSV.
        #[arg(long)]
        history: Option<PathBuf>,
        #[command(flatten)]
        classifier: ClassifierArgs,
    },
    /// Evaluate a trained model on the test partition.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        split: PathBuf,
        /// Report JSON output path.
        #[arg(long)]
        json: PathBuf,
        /// Optional per-class CSV output path.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Run the full pipeline for every configured method.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Override the configured output directory.
        #[arg(long)]
        output_dir: Option<PathBuf>,
        /// Override the configured split seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the configured train fraction.
        #[arg(long)]
        train_fraction: Option<f64>,
    },
    /// Build the weak-class accuracy table from report JSON files.
    Report {
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Report JSON files, one per method column.
        reports: Vec<PathBuf>,
    },
}

#[derive(Args)]
struct ClassifierArgs {
    /// Hidden layer sizes.
    #[arg(long, value_delimiter = ',', default_value = "64,32")]
    hidden: Vec<usize>,
    #[arg(long, default_value = "relu")]
    activation: String,
    #[arg(long, default_value_t = 0.01)]
    learning_rate: f64,
    #[arg(long, default_value_t = 90)]
    epochs: usize,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 0.1)]
    validation_fraction: f64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Convert {
            input,
            labels,
            output,
        } => {
            let cube = read_cube_csv(&input)?;
            let raster = read_labels_csv(&labels)?;
            if cube.width() != raster.width() || cube.height() != raster.height() {
                return Err(HsdrError::DimensionMismatch {
                    expected: format!("labels of {}x{}", cube.width(), cube.height()),
                    actual: format!("{}x{}", raster.width(), raster.height()),
                });
            }
            std::fs::create_dir_all(&output)?;
            save_cube(&cube, output.join("cube.hsdr"))?;
            save_labels(&raster, output.join("labels.hsdr"))?;
            println!(
                "converted {}x{}x{} cube, {} labeled pixels, {} classes",
                cube.width(),
                cube.height(),
                cube.bands(),
                raster.labeled_pixels(),
                raster.n_classes()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Generate { config, output } => {
            let spec = SceneSpec::from_toml_file(&config)?;
            let (cube, raster) = generate(&spec)?;
            std::fs::create_dir_all(&output)?;
            save_cube(&cube, output.join("cube.hsdr"))?;
            save_labels(&raster, output.join("labels.hsdr"))?;
            println!(
                "generated {}x{}x{} scene with {} classes",
                cube.width(),
                cube.height(),
                cube.bands(),
                raster.n_classes()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Split {
            labels,
            train_fraction,
            seed,
            output,
        } => {
            let raster = load_labels(&labels)?;
            let split = stratified_split(&raster, train_fraction, seed)?;
            save_split(&split, &output)?;
            println!(
                "split {} labeled pixels: {} train, {} test",
                raster.labeled_pixels(),
                split.count(hsio::Partition::Train),
                split.count(hsio::Partition::Test)
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Fit {
            method,
            cube,
            labels,
            split,
            seed,
            output,
        } => {
            let spec = MethodSpec::parse(&method)?;
            let cube = load_cube(&cube)?;
            let raster = load_labels(&labels)?;
            let split = load_split(&split)?;
            let transform = fit_method(spec, &cube, &raster, &split, seed)?;
            save_transform(&transform, &output)?;
            println!(
                "fitted {}: {} -> {} bands",
                spec, transform.input_bands, transform.output_bands
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Transform {
            transform,
            cube,
            output,
        } => {
            let transform = load_transform::<f64>(&transform)?;
            let cube = load_cube(&cube)?;
            let reduced = apply(&transform, &cube)?;
            save_cube(&reduced, &output)?;
            println!("reduced cube to {} bands", reduced.bands());
            Ok(ExitCode::SUCCESS)
        }
        Command::Train {
            features,
            labels,
            split,
            output,
            history,
            classifier: args,
        } => {
            let cube = load_cube(&features)?;
            let raster = load_labels(&labels)?;
            let split = load_split(&split)?;
            let n_classes = raster.n_classes();
            let (train_features, train_labels, _) =
                cube_to_samples::<f64>(&cube, &raster, SampleSubset::Train(&split))?;
            let mut layer_sizes = vec![cube.bands()];
            layer_sizes.extend_from_slice(&args.hidden);
            layer_sizes.push(n_classes);
            let cfg = MlpConfig {
                layer_sizes,
                activation: Activation::parse(&args.activation)?,
                learning_rate: args.learning_rate,
                epochs: args.epochs,
                batch_size: args.batch_size,
                seed: args.seed,
                validation_fraction: args.validation_fraction,
            };
            let model = classifier::train(&train_features, &train_labels, n_classes, &cfg)?;
            classifier::save_model(&model, &output)?;
            if let Some(history_path) = history {
                std::fs::write(history_path, classifier::history_csv(&model))?;
            }
            let last = model.history.last().unwrap();
            println!(
                "trained {} epochs, final train accuracy {:.4}",
                model.history.len(),
                last.train_acc
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Evaluate {
            model,
            features,
            labels,
            split,
            json,
            csv,
        } => {
            let model = classifier::load_model::<f64>(&model)?;
            let cube = load_cube(&features)?;
            let raster = load_labels(&labels)?;
            let split = load_split(&split)?;
            let n_classes = raster.n_classes();
            let (test_features, test_labels, _) =
                cube_to_samples::<f64>(&cube, &raster, SampleSubset::Test(&split))?;
            let (predicted, _) = classifier::predict(&model, &test_features)?;
            let mut report = evaluate(&test_labels, &predicted, n_classes)?;
            report.weak_class_ids = weak_classes(&raster, WEAK_CLASS_THRESHOLD)?;
            report.run.split_seed = split.seed;
            report.run.train_fraction = split.train_fraction;
            report.run.classifier_seed = model.config.seed;
            std::fs::write(&json, report.to_json())?;
            if let Some(csv_path) = csv {
                std::fs::write(csv_path, report.per_class_csv(Some(&raster)))?;
            }
            println!(
                "OA {:.4}, AA {:.4} on {} test pixels",
                report.overall_accuracy, report.average_accuracy, report.n_test_samples
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Run {
            config,
            output_dir,
            seed,
            train_fraction,
        } => {
            let mut config = PipelineConfig::from_toml_file(&config)?;
            if let Some(dir) = output_dir {
                config.output_dir = dir;
            }
            if let Some(seed) = seed {
                config.split.seed = seed;
            }
            if let Some(fraction) = train_fraction {
                config.split.train_fraction = fraction;
            }
            let summary = pipeline::run_pipeline(&config)?;
            for (spec, outcome) in &summary.methods {
                match outcome {
                    pipeline::MethodOutcome::Succeeded(report) => println!(
                        "{spec}: OA {:.4}, AA {:.4}",
                        report.overall_accuracy, report.average_accuracy
                    ),
                    pipeline::MethodOutcome::Failed(error) => {
                        println!("{spec}: FAILED ({error})")
                    }
                }
            }
            println!("comparison table: {}", summary.comparison_path.display());
            if summary.any_failed() {
                Ok(ExitCode::from(2))
            } else {
                Ok(ExitCode::SUCCESS)
            }
        }
        Command::Report {
            labels,
            output,
            reports,
        } => {
            if reports.is_empty() {
                return Err(HsdrError::InvalidConfig(
                    "at least one report file required".into(),
                ));
            }
            let raster = load_labels(&labels)?;
            let loaded: Result<Vec<EvalReport>> = reports
                .iter()
                .map(|p| EvalReport::from_json(&std::fs::read_to_string(p)?))
                .collect();
            let table = report_weak_classes(&loaded?, &raster)?;
            std::fs::write(&output, table)?;
            println!("weak-class table: {}", output.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}
