//! Batch pipeline: load -> split -> fit -> transform -> train -> evaluate ->
//! report, for every configured method from one config file.
//!
//! The whole run is a pure function of the input files and the config: all
//! randomness flows from the config seeds, so rerunning with the same inputs
//! reproduces every artifact byte for byte.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classifier::{self, Activation, MlpConfig};
use crate::error::{HsdrError, Result};
use crate::hsio::{
    cube_to_samples, load_cube, load_labels, stratified_split, HyperCube, LabelRaster,
    SampleSubset, SplitAssignment,
};
use crate::metrics::{evaluate, weak_classes, EvalReport, RunMetadata};
use crate::transforms::{
    apply, fit_cwpca, fit_ica, fit_lda, fit_pca, save_transform, CwpcaMode, LinearTransform,
};

/// Share of labeled pixels under which a class counts as weak.
pub const WEAK_CLASS_THRESHOLD: f64 = 0.01;

/// One feature-extraction method to run, parsed from compact `name:arg`
/// tokens: `pca:15`, `ica:15`, `lda:15`, `cwpca:1`, `cwpca:2:literal`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MethodSpec {
    Pca { k: usize },
    Ica { k: usize },
    Lda { k: usize },
    Cwpca { m: usize, mode: CwpcaMode },
}

impl MethodSpec {
    pub fn parse(token: &str) -> Result<MethodSpec> {
        let bad = || HsdrError::InvalidConfig(format!("unrecognized method {token:?}"));
        let parts: Vec<&str> = token.split(':').collect();
        let arg = |i: usize| -> Result<usize> {
            parts
                .get(i)
                .and_then(|v| v.parse::<usize>().ok())
                .ok_or_else(bad)
        };
        match parts.first().copied() {
            Some("pca") if parts.len() == 2 => Ok(MethodSpec::Pca { k: arg(1)? }),
            Some("ica") if parts.len() == 2 => Ok(MethodSpec::Ica { k: arg(1)? }),
            Some("lda") if parts.len() == 2 => Ok(MethodSpec::Lda { k: arg(1)? }),
            Some("cwpca") if parts.len() == 2 || parts.len() == 3 => {
                let mode = match parts.get(2).copied() {
                    None | Some("masked") => CwpcaMode::Masked,
                    Some("literal") => CwpcaMode::Literal,
                    Some(_) => return Err(bad()),
                };
                Ok(MethodSpec::Cwpca { m: arg(1)?, mode })
            }
            _ => Err(bad()),
        }
    }

    /// Directory name for a method's artifacts.
    pub fn dir_name(&self) -> String {
        self.to_string().replace(':', "_")
    }
}

impl fmt::Display for MethodSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MethodSpec::Pca { k } => write!(f, "pca:{k}"),
            MethodSpec::Ica { k } => write!(f, "ica:{k}"),
            MethodSpec::Lda { k } => write!(f, "lda:{k}"),
            MethodSpec::Cwpca { m, mode } => write!(f, "cwpca:{m}:{}", mode.as_str()),
        }
    }
}

/// Fit one method's transform from the training partition. `seed` feeds the
/// ICA initialization; the other methods are deterministic without it.
pub fn fit_method(
    spec: MethodSpec,
    cube: &HyperCube,
    raster: &LabelRaster,
    split: &SplitAssignment,
    seed: u64,
) -> Result<LinearTransform<f64>> {
    match spec {
        MethodSpec::Pca { k } => {
            let (samples, _, _) = cube_to_samples(cube, raster, SampleSubset::Train(split))?;
            fit_pca(&samples, k)
        }
        MethodSpec::Ica { k } => {
            let (samples, _, _) = cube_to_samples(cube, raster, SampleSubset::Train(split))?;
            fit_ica(&samples, k, seed)
        }
        MethodSpec::Lda { k } => {
            let (samples, labels, _) =
                cube_to_samples(cube, raster, SampleSubset::Train(split))?;
            fit_lda(&samples, &labels, k)
        }
        MethodSpec::Cwpca { m, mode } => fit_cwpca(cube, raster, split, m, mode),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub cube: PathBuf,
    pub labels: PathBuf,
    #[serde(default)]
    pub class_names: Option<Vec<String>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitConfig {
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    #[serde(default = "default_split_seed")]
    pub seed: u64,
}

fn default_train_fraction() -> f64 {
    0.7
}

fn default_split_seed() -> u64 {
    42
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            train_fraction: default_train_fraction(),
            seed: default_split_seed(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassifierConfig {
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: String,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_classifier_seed")]
    pub seed: u64,
    #[serde(default = "default_validation_fraction")]
    pub validation_fraction: f64,
}

fn default_hidden() -> Vec<usize> {
    vec![64, 32]
}

fn default_activation() -> String {
    "relu".into()
}

fn default_learning_rate() -> f64 {
    0.01
}

fn default_epochs() -> usize {
    90
}

fn default_batch_size() -> usize {
    64
}

fn default_classifier_seed() -> u64 {
    7
}

fn default_validation_fraction() -> f64 {
    0.1
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            hidden: default_hidden(),
            activation: default_activation(),
            learning_rate: default_learning_rate(),
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            seed: default_classifier_seed(),
            validation_fraction: default_validation_fraction(),
        }
    }
}

impl ClassifierConfig {
    pub fn to_mlp_config(&self, input: usize, classes: usize) -> Result<MlpConfig<f64>> {
        let mut layer_sizes = Vec::with_capacity(self.hidden.len() + 2);
        layer_sizes.push(input);
        layer_sizes.extend_from_slice(&self.hidden);
        layer_sizes.push(classes);
        Ok(MlpConfig {
            layer_sizes,
            activation: Activation::parse(&self.activation)?,
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            validation_fraction: self.validation_fraction,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub split: SplitConfig,
    pub methods: Vec<String>,
    #[serde(default)]
    pub classifier: ClassifierConfig,
    pub output_dir: PathBuf,
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<PipelineConfig> {
        toml::from_str(text).map_err(|e| HsdrError::InvalidConfig(format!("pipeline config: {e}")))
    }

    pub fn from_toml_file(path: impl AsRef<Path>) -> Result<PipelineConfig> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn parsed_methods(&self) -> Result<Vec<MethodSpec>> {
        if self.methods.is_empty() {
            return Err(HsdrError::InvalidConfig(
                "at least one method must be configured".into(),
            ));
        }
        self.methods.iter().map(|m| MethodSpec::parse(m)).collect()
    }

    /// Hex SHA-256 of the canonical JSON form, echoed into every report.
    pub fn digest(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(canonical.as_bytes());
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone)]
pub enum MethodOutcome {
    Succeeded(EvalReport),
    Failed(String),
}

#[derive(Debug, Clone)]
pub struct PipelineSummary {
    pub methods: Vec<(MethodSpec, MethodOutcome)>,
    pub comparison_path: PathBuf,
    pub weak_class_path: PathBuf,
}

impl PipelineSummary {
    pub fn any_failed(&self) -> bool {
        self.methods
            .iter()
            .any(|(_, o)| matches!(o, MethodOutcome::Failed(_)))
    }

    pub fn reports(&self) -> Vec<&EvalReport> {
        self.methods
            .iter()
            .filter_map(|(_, o)| match o {
                MethodOutcome::Succeeded(r) => Some(r),
                MethodOutcome::Failed(_) => None,
            })
            .collect()
    }
}

/// Run every configured method and write its artifacts under
/// `<output_dir>/<method>/`, plus the combined comparison and weak-class
/// tables at the top level.
pub fn run_pipeline(config: &PipelineConfig) -> Result<PipelineSummary> {
    let methods = config.parsed_methods()?;
    let digest = config.digest();

    let cube = load_cube(&config.dataset.cube)?;
    let mut raster = load_labels(&config.dataset.labels)?;
    let n_classes = raster.n_classes();
    if n_classes == 0 {
        return Err(HsdrError::EmptyInput("label raster has no labeled pixels"));
    }
    if let Some(names) = &config.dataset.class_names {
        if names.len() != n_classes {
            return Err(HsdrError::InvalidConfig(format!(
                "{} class names for {} classes",
                names.len(),
                n_classes
            )));
        }
        raster = raster.with_class_names(names.clone());
    }

    let split = stratified_split(&raster, config.split.train_fraction, config.split.seed)?;
    let weak_ids = weak_classes(&raster, WEAK_CLASS_THRESHOLD)?;
    std::fs::create_dir_all(&config.output_dir)?;

    let mut outcomes: Vec<(MethodSpec, MethodOutcome)> = Vec::new();
    for spec in methods {
        match run_method(spec, config, &cube, &raster, &split, &weak_ids, &digest) {
            Ok(report) => outcomes.push((spec, MethodOutcome::Succeeded(report))),
            Err(e) => {
                let err = e.in_method(&spec.to_string());
                outcomes.push((spec, MethodOutcome::Failed(err.to_string())));
            }
        }
    }

    let comparison_path = config.output_dir.join("comparison.csv");
    std::fs::write(&comparison_path, comparison_csv(&outcomes, n_classes))?;

    let reports: Vec<EvalReport> = outcomes
        .iter()
        .filter_map(|(_, o)| match o {
            MethodOutcome::Succeeded(r) => Some(r.clone()),
            MethodOutcome::Failed(_) => None,
        })
        .collect();
    let weak_class_path = config.output_dir.join("weak_classes.csv");
    std::fs::write(&weak_class_path, report_weak_classes(&reports, &raster)?)?;

    Ok(PipelineSummary {
        methods: outcomes,
        comparison_path,
        weak_class_path,
    })
}

fn run_method(
    spec: MethodSpec,
    config: &PipelineConfig,
    cube: &HyperCube,
    raster: &LabelRaster,
    split: &SplitAssignment,
    weak_ids: &[u16],
    digest: &str,
) -> Result<EvalReport> {
    let method_dir = config.output_dir.join(spec.dir_name());
    std::fs::create_dir_all(&method_dir)?;

    let transform = fit_method(spec, cube, raster, split, config.split.seed)?;
    save_transform(&transform, method_dir.join("transform.hst"))?;

    let reduced = apply(&transform, cube)?;
    crate::hsio::save_cube(&reduced, method_dir.join("reduced.hsdr"))?;

    let n_classes = raster.n_classes();
    let (train_features, train_labels, _) =
        cube_to_samples::<f64>(&reduced, raster, SampleSubset::Train(split))?;
    let mlp_config = config
        .classifier
        .to_mlp_config(transform.output_bands, n_classes)?;
    let model = classifier::train(&train_features, &train_labels, n_classes, &mlp_config)?;
    classifier::save_model(&model, method_dir.join("model.hsm"))?;
    std::fs::write(method_dir.join("history.csv"), classifier::history_csv(&model))?;

    let (test_features, test_labels, _) =
        cube_to_samples::<f64>(&reduced, raster, SampleSubset::Test(split))?;
    let (predicted, _) = classifier::predict(&model, &test_features)?;
    let mut report = evaluate(&test_labels, &predicted, n_classes)?;
    report.method = spec.to_string();
    report.weak_class_ids = weak_ids.to_vec();
    report.run = RunMetadata {
        split_seed: config.split.seed,
        train_fraction: config.split.train_fraction,
        classifier_seed: config.classifier.seed,
        config_digest: digest.to_string(),
    };

    std::fs::write(method_dir.join("report.json"), report.to_json())?;
    std::fs::write(
        method_dir.join("report.csv"),
        report.per_class_csv(Some(raster)),
    )?;
    Ok(report)
}

fn csv_quote(text: &str) -> String {
    format!("\"{}\"", text.replace('"', "\"\""))
}

/// Combined comparison table: one row per configured method, per-class
/// accuracy columns after the OA/AA summary.
pub fn comparison_csv(outcomes: &[(MethodSpec, MethodOutcome)], n_classes: usize) -> String {
    let mut out = String::from("method,status,overall_accuracy,average_accuracy");
    for c in 1..=n_classes {
        out.push_str(&format!(",class_{c}"));
    }
    out.push_str(",error\n");
    for (spec, outcome) in outcomes {
        match outcome {
            MethodOutcome::Succeeded(report) => {
                out.push_str(&format!(
                    "{spec},ok,{},{}",
                    report.overall_accuracy, report.average_accuracy
                ));
                for acc in &report.per_class_accuracy {
                    match acc {
                        Some(a) => out.push_str(&format!(",{a}")),
                        None => out.push(','),
                    }
                }
                out.push_str(",\n");
            }
            MethodOutcome::Failed(error) => {
                out.push_str(&format!("{spec},failed,,"));
                for _ in 0..n_classes {
                    out.push(',');
                }
                out.push_str(&format!(",{}\n", csv_quote(error)));
            }
        }
    }
    out
}

/// Weak-class accuracy table: one row per weak class, one column per method.
pub fn report_weak_classes(reports: &[EvalReport], raster: &LabelRaster) -> Result<String> {
    if reports.is_empty() {
        return Err(HsdrError::EmptyInput("no reports for weak-class table"));
    }
    let weak = weak_classes(raster, WEAK_CLASS_THRESHOLD)?;
    let mut out = String::from("class_id,name");
    for report in reports {
        out.push_str(&format!(",{}", report.method));
    }
    out.push('\n');
    if weak.is_empty() {
        out.push_str("none,no classes below the 1% weak-class threshold");
        for _ in reports {
            out.push(',');
        }
        out.push('\n');
        return Ok(out);
    }
    for class in weak {
        out.push_str(&format!("{class},{}", raster.class_name(class)));
        for report in reports {
            match report
                .per_class_accuracy
                .get(class as usize - 1)
                .copied()
                .flatten()
            {
                Some(acc) => out.push_str(&format!(",{acc}")),
                None => out.push(','),
            }
        }
        out.push('\n');
    }
    Ok(out)
}
