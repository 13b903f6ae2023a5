//! Experiment orchestration: baseline reflectance LDA, per-seed pretraining
//! runs with checkpoint evaluation, the strategy × augmentation matrix, and
//! report emission (CSV summary, JSON dump, SVG chart).

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{AugmentError, AugmentationPipeline, AugmentationSpec};
use crate::classify::{
    lda_fit, lda_predict, mean_class_accuracy, overall_accuracy, ClassifyError, LdaModel,
};
use crate::pairing::{BranchPipelines, CubePair, PairError, PairStrategy};
use crate::speccube::{
    extract_labeled_spectra, load_cube, read_crowns, CrownMap, CubeError, HyperCube, LabeledSpectra,
    Standardizer,
};
use crate::ssl::{embed_with, Checkpoint, Pretrainer, SslConfig, SslError, EMBED_CHUNK};
use crate::synthgen::{generate_paired_scene, AbioticModel, SynthError, SyntheticSceneConfig};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Cube(#[from] CubeError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Ssl(#[from] SslError),
    #[error(transparent)]
    Classify(#[from] ClassifyError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Pair(#[from] PairError),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

pub type Result<T> = std::result::Result<T, HarnessError>;

fn io_err(path: &Path, e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

/// Where the two acquisitions and crowns come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SceneSource {
    Synthetic {
        #[serde(default)]
        synthetic: SyntheticSceneConfig,
        #[serde(default)]
        abiotic_t1: AbioticModel,
        #[serde(default)]
        abiotic_t2: AbioticModel,
    },
    Files {
        t1: PathBuf,
        t2: PathBuf,
        crowns: PathBuf,
    },
}

impl Default for SceneSource {
    fn default() -> Self {
        SceneSource::Synthetic {
            synthetic: SyntheticSceneConfig::default(),
            abiotic_t1: AbioticModel::default(),
            abiotic_t2: AbioticModel::default(),
        }
    }
}

/// Augmentations of both branches. `second` defaults to `first`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationSet {
    pub name: String,
    #[serde(default)]
    pub first: Vec<AugmentationSpec>,
    #[serde(default)]
    pub second: Option<Vec<AugmentationSpec>>,
}

impl AugmentationSet {
    pub fn none() -> Self {
        Self {
            name: "none".into(),
            first: Vec::new(),
            second: None,
        }
    }

    pub fn symmetric(name: &str, specs: Vec<AugmentationSpec>) -> Self {
        Self {
            name: name.into(),
            first: specs,
            second: None,
        }
    }

    pub fn pipelines(&self, layout: &crate::speccube::BandLayout) -> Result<BranchPipelines> {
        let second = self.second.clone().unwrap_or_else(|| self.first.clone());
        Ok(BranchPipelines {
            first: AugmentationPipeline::new(self.first.clone(), layout.clone())?,
            second: AugmentationPipeline::new(second, layout.clone())?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub scene: SceneSource,
    pub strategies: Vec<PairStrategy>,
    pub augmentation_sets: Vec<AugmentationSet>,
    pub ssl: SslConfig,
    /// Evaluate every `eval_every` epochs.
    pub eval_every: usize,
    pub seeds: Vec<u64>,
    pub lda_shrinkage: f64,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            scene: SceneSource::default(),
            strategies: vec![PairStrategy::InterDate, PairStrategy::SameView],
            augmentation_sets: vec![
                AugmentationSet::none(),
                AugmentationSet::symmetric("swap", vec![AugmentationSpec::band_swap()]),
                AugmentationSet::symmetric("noise", vec![AugmentationSpec::gaussian_noise()]),
                AugmentationSet::symmetric("scale", vec![AugmentationSpec::domain_scaling()]),
                AugmentationSet::symmetric(
                    "swap+noise+scale",
                    vec![
                        AugmentationSpec::band_swap(),
                        AugmentationSpec::gaussian_noise(),
                        AugmentationSpec::domain_scaling(),
                    ],
                ),
            ],
            ssl: SslConfig::default(),
            eval_every: 1,
            seeds: vec![0, 1, 2, 3],
            lda_shrinkage: 1e-3,
            output_dir: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        // relative paths in the config resolve against the config's directory
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        if let SceneSource::Files { t1, t2, crowns } = &mut cfg.scene {
            for p in [t1, t2, crowns] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(HarnessError::Config(format!(
                "schema_version {} unsupported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.seeds.is_empty() {
            return Err(HarnessError::Config("seeds must not be empty".into()));
        }
        if self.eval_every == 0 {
            return Err(HarnessError::Config("eval_every must be at least 1".into()));
        }
        if self.ssl.train.n_epochs == 0 {
            return Err(HarnessError::Config("n_epochs must be at least 1".into()));
        }
        let mut names: Vec<&str> = self.augmentation_sets.iter().map(|a| a.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(HarnessError::Config("augmentation set names must be unique".into()));
        }
        Ok(())
    }

    pub fn augmentation_set(&self, name: &str) -> Result<&AugmentationSet> {
        self.augmentation_sets
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| HarnessError::Config(format!("no augmentation set named `{name}`")))
    }
}

/// Both acquisitions, their crowns, and the labeled spectra of each date.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub t1: HyperCube,
    pub t2: HyperCube,
    pub crowns: CrownMap,
    pub train: LabeledSpectra,
    pub test: LabeledSpectra,
    /// Fitted on date-1 labeled spectra only.
    pub standardizer: Standardizer,
}

impl Dataset {
    pub fn from_cubes(t1: HyperCube, t2: HyperCube, crowns: CrownMap) -> Result<Self> {
        if !t1.same_geometry(&t2) {
            return Err(HarnessError::Config("acquisitions differ in geometry or layout".into()));
        }
        let train = extract_labeled_spectra(&t1, &crowns)?;
        let test = extract_labeled_spectra(&t2, &crowns)?;
        let standardizer = Standardizer::fit(train.matrix.view())?;
        Ok(Self {
            t1,
            t2,
            crowns,
            train,
            test,
            standardizer,
        })
    }

    pub fn load(source: &SceneSource) -> Result<Self> {
        match source {
            SceneSource::Synthetic {
                synthetic,
                abiotic_t1,
                abiotic_t2,
            } => {
                let scene = generate_paired_scene(synthetic, abiotic_t1, abiotic_t2, synthetic.seed)?;
                Self::from_cubes(scene.t1, scene.t2, scene.crowns)
            }
            SceneSource::Files { t1, t2, crowns } => {
                Self::from_cubes(load_cube(t1)?, load_cube(t2)?, read_crowns(crowns)?)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyPair {
    /// Macro accuracy on date 1 (fitting set).
    pub train: f64,
    /// Macro accuracy on date 2.
    pub test: f64,
    pub train_overall: f64,
    pub test_overall: f64,
}

fn evaluate_features(
    train_x: &Array2<f64>,
    train_y: &[usize],
    test_x: &Array2<f64>,
    test_y: &[usize],
    shrinkage: f64,
) -> Result<(AccuracyPair, LdaModel)> {
    let model = lda_fit(train_x.view(), train_y, shrinkage)?;
    let p_train = lda_predict(&model, train_x.view())?;
    let p_test = lda_predict(&model, test_x.view())?;
    Ok((
        AccuracyPair {
            train: mean_class_accuracy(train_y, &p_train)?,
            test: mean_class_accuracy(test_y, &p_test)?,
            train_overall: overall_accuracy(train_y, &p_train)?,
            test_overall: overall_accuracy(test_y, &p_test)?,
        },
        model,
    ))
}

/// LDA on standardized reflectance: fit on date 1, evaluate on both dates.
pub fn run_baseline(data: &Dataset, shrinkage: f64) -> Result<AccuracyPair> {
    Ok(baseline_model(data, shrinkage)?.0)
}

pub fn baseline_model(data: &Dataset, shrinkage: f64) -> Result<(AccuracyPair, LdaModel)> {
    let train = data.standardizer.apply(data.train.matrix.view())?;
    let test = data.standardizer.apply(data.test.matrix.view())?;
    evaluate_features(&train, &data.train.labels, &test, &data.test.labels, shrinkage)
}

/// Embeds both dates' labeled spectra with a frozen checkpoint and scores LDA.
pub fn evaluate_checkpoint(data: &Dataset, ckpt: &Checkpoint, shrinkage: f64) -> Result<AccuracyPair> {
    Ok(checkpoint_model(data, ckpt, shrinkage)?.0)
}

pub fn checkpoint_model(data: &Dataset, ckpt: &Checkpoint, shrinkage: f64) -> Result<(AccuracyPair, LdaModel)> {
    let h_train = embed_with(&ckpt.model, data.train.matrix.view(), EMBED_CHUNK)?;
    let h_test = embed_with(&ckpt.model, data.test.matrix.view(), EMBED_CHUNK)?;
    evaluate_features(&h_train, &data.train.labels, &h_test, &data.test.labels, shrinkage)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub epoch: usize,
    pub train_loss: f64,
    pub accuracy: AccuracyPair,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    pub best_test: f64,
    pub best_epoch: usize,
    pub train_at_best: f64,
    pub curve: Vec<CurvePoint>,
}

impl SeedReport {
    /// Best test accuracy over the curve; the earliest epoch wins ties.
    pub fn from_curve(seed: u64, curve: Vec<CurvePoint>) -> Result<Self> {
        let best = curve
            .iter()
            .enumerate()
            .fold(None::<usize>, |acc, (i, p)| match acc {
                Some(b) if curve[b].accuracy.test >= p.accuracy.test => Some(b),
                _ => Some(i),
            })
            .ok_or_else(|| HarnessError::Config("no checkpoint was evaluated".into()))?;
        Ok(Self {
            seed,
            best_test: curve[best].accuracy.test,
            best_epoch: curve[best].epoch,
            train_at_best: curve[best].accuracy.train,
            curve,
        })
    }
}

/// One strategy × augmentation cell of the matrix.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellSpec {
    pub strategy: PairStrategy,
    pub augmentation: String,
}

/// Pretrains with `seed`, evaluating every `eval_every` epochs, and keeps the
/// best test accuracy over checkpoints.
pub fn run_single(data: &Dataset, config: &ExperimentConfig, cell: &CellSpec, seed: u64) -> Result<SeedReport> {
    let aug = config.augmentation_set(&cell.augmentation)?;
    let pipelines = aug.pipelines(data.t1.layout())?;
    let mut trainer = Pretrainer::new(
        CubePair::new(&data.t1, &data.t2)?,
        cell.strategy,
        pipelines,
        Some(data.standardizer.clone()),
        config.ssl.clone(),
        seed,
    )?;
    let mut curve = Vec::new();
    for _ in 0..config.ssl.train.n_epochs {
        let ckpt = trainer.next_checkpoint()?;
        if ckpt.epoch % config.eval_every == 0 {
            curve.push(CurvePoint {
                epoch: ckpt.epoch,
                train_loss: ckpt.train_loss,
                accuracy: evaluate_checkpoint(data, &ckpt, config.lda_shrinkage)?,
            });
        }
    }
    SeedReport::from_curve(seed, curve)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub per_seed: Vec<SeedReport>,
    pub mean: f64,
    /// Population standard deviation over seeds.
    pub std: f64,
    pub train_mean: f64,
}

impl RunReport {
    pub fn aggregate(per_seed: Vec<SeedReport>) -> Self {
        let n = per_seed.len() as f64;
        let mean = per_seed.iter().map(|s| s.best_test).sum::<f64>() / n;
        let var = per_seed.iter().map(|s| (s.best_test - mean).powi(2)).sum::<f64>() / n;
        let train_mean = per_seed.iter().map(|s| s.train_at_best).sum::<f64>() / n;
        Self {
            per_seed,
            mean,
            std: var.sqrt(),
            train_mean,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum CellOutcome {
    Completed { report: RunReport },
    Failed { error: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub cell: CellSpec,
    /// Labels of the branch augmentations, for display.
    pub augmentations: String,
    pub outcome: CellOutcome,
}

impl CellReport {
    pub fn report(&self) -> Option<&RunReport> {
        match &self.outcome {
            CellOutcome::Completed { report } => Some(report),
            CellOutcome::Failed { .. } => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixReport {
    pub schema_version: u32,
    pub baseline: AccuracyPair,
    pub cells: Vec<CellReport>,
}

impl MatrixReport {
    pub fn cell(&self, strategy: PairStrategy, augmentation: &str) -> Option<&CellReport> {
        self.cells
            .iter()
            .find(|c| c.cell.strategy == strategy && c.cell.augmentation == augmentation)
    }
}

fn aug_labels(set: &AugmentationSet) -> String {
    let join = |specs: &[AugmentationSpec]| {
        if specs.is_empty() {
            "identity".to_string()
        } else {
            specs.iter().map(AugmentationSpec::label).collect::<Vec<_>>().join("+")
        }
    };
    match &set.second {
        None => join(&set.first),
        Some(second) => format!("{} | {}", join(&set.first), join(second)),
    }
}

/// Every strategy × augmentation set × seed. Failed cells are recorded and
/// the matrix carries on.
pub fn run_matrix(data: &Dataset, config: &ExperimentConfig) -> Result<MatrixReport> {
    run_matrix_with(data, config, |_, _| {})
}

/// As [`run_matrix`], calling `progress` after each completed seed run.
pub fn run_matrix_with(
    data: &Dataset,
    config: &ExperimentConfig,
    mut progress: impl FnMut(&CellSpec, &SeedReport),
) -> Result<MatrixReport> {
    config.validate()?;
    if config.strategies.is_empty() || config.augmentation_sets.is_empty() {
        return Err(HarnessError::Config("experiment grid is empty".into()));
    }
    let baseline = run_baseline(data, config.lda_shrinkage)?;
    let mut cells = Vec::new();
    for set in &config.augmentation_sets {
        for &strategy in &config.strategies {
            let cell = CellSpec {
                strategy,
                augmentation: set.name.clone(),
            };
            let outcome = config
                .seeds
                .iter()
                .map(|&seed| {
                    let r = run_single(data, config, &cell, seed)?;
                    progress(&cell, &r);
                    Ok(r)
                })
                .collect::<Result<Vec<_>>>()
                .map_or_else(
                    |e| CellOutcome::Failed { error: e.to_string() },
                    |runs| CellOutcome::Completed {
                        report: RunReport::aggregate(runs),
                    },
                );
            cells.push(CellReport {
                cell,
                augmentations: aug_labels(set),
                outcome,
            });
        }
    }
    Ok(MatrixReport {
        schema_version: SCHEMA_VERSION,
        baseline,
        cells,
    })
}

pub const SUMMARY_FILE: &str = "summary.csv";
pub const DUMP_FILE: &str = "report.json";
pub const CHART_FILE: &str = "chart.svg";
pub const SUMMARY_HEADER: &str =
    "strategy,augmentation,augmentations,status,mean,std,train_mean,seed_bests,best_epochs,baseline_test,baseline_train";

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn summary_csv(report: &MatrixReport) -> String {
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    for c in &report.cells {
        let (status, mean, std, train, bests, epochs) = match &c.outcome {
            CellOutcome::Completed { report: r } => (
                "ok".to_string(),
                r.mean.to_string(),
                r.std.to_string(),
                r.train_mean.to_string(),
                r.per_seed.iter().map(|s| s.best_test.to_string()).collect::<Vec<_>>().join(";"),
                r.per_seed.iter().map(|s| s.best_epoch.to_string()).collect::<Vec<_>>().join(";"),
            ),
            CellOutcome::Failed { error } => (
                format!("failed: {error}"),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
            ),
        };
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            c.cell.strategy.label(),
            csv_field(&c.cell.augmentation),
            csv_field(&c.augmentations),
            csv_field(&status),
            mean,
            std,
            train,
            bests,
            epochs,
            report.baseline.test,
            report.baseline.train
        );
    }
    out
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Grouped bar chart: one group per augmentation set, one bar per strategy
/// (inter-date red, same-view blue) with ±std error bars, a reflectance
/// baseline bar, and horizontal lines at the baseline train and test accuracy.
pub fn chart_svg(report: &MatrixReport) -> String {
    const W: f64 = 760.0;
    const H: f64 = 420.0;
    const LEFT: f64 = 60.0;
    const BOTTOM: f64 = 70.0;
    const TOP: f64 = 30.0;
    let plot_h = H - BOTTOM - TOP;
    let y_of = |acc: f64| TOP + plot_h * (1.0 - acc.clamp(0.0, 1.0));

    let mut groups: Vec<&str> = Vec::new();
    for c in &report.cells {
        if !groups.contains(&c.cell.augmentation.as_str()) {
            groups.push(&c.cell.augmentation);
        }
    }
    let slots = groups.len() + 1;
    let group_w = (W - LEFT - 20.0) / slots as f64;
    let bar_w = group_w * 0.35;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>"#);
    for tick in 0..=5 {
        let acc = tick as f64 / 5.0;
        let y = y_of(acc);
        let _ = writeln!(
            s,
            r##"<line x1="{LEFT}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#dddddd"/><text x="{:.2}" y="{:.2}" text-anchor="end">{acc:.1}</text>"##,
            W - 20.0,
            LEFT - 6.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="14" y="{:.2}" transform="rotate(-90 14 {:.2})" text-anchor="middle">mean test accuracy</text>"#,
        TOP + plot_h / 2.0,
        TOP + plot_h / 2.0
    );

    // reflectance baseline as the first slot
    let bx = LEFT + group_w * 0.5 - bar_w / 2.0;
    let by = y_of(report.baseline.test);
    let _ = writeln!(
        s,
        r##"<rect class="bar baseline" x="{bx:.2}" y="{by:.2}" width="{bar_w:.2}" height="{:.2}" fill="#888888"><title>reflectance {}</title></rect>"##,
        TOP + plot_h - by,
        report.baseline.test
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">reflectance</text>"#,
        LEFT + group_w * 0.5,
        H - BOTTOM + 16.0
    );

    for (g, name) in groups.iter().enumerate() {
        let center = LEFT + group_w * (g as f64 + 1.5);
        let _ = writeln!(
            s,
            r#"<text x="{center:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            H - BOTTOM + 16.0,
            xml_escape(name)
        );
        for c in report.cells.iter().filter(|c| c.cell.augmentation == *name) {
            let (offset, color) = match c.cell.strategy {
                PairStrategy::InterDate => (-bar_w, "#d62728"),
                PairStrategy::SameView => (0.0, "#1f77b4"),
            };
            let x = center + offset;
            let (mean, std) = c.report().map_or((0.0, 0.0), |r| (r.mean, r.std));
            let y = y_of(mean);
            let _ = writeln!(
                s,
                r#"<rect class="bar cell" x="{x:.2}" y="{y:.2}" width="{bar_w:.2}" height="{:.2}" fill="{color}"><title>{} {} {mean}</title></rect>"#,
                TOP + plot_h - y,
                c.cell.strategy.label(),
                xml_escape(name)
            );
            if std > 0.0 {
                let xm = x + bar_w / 2.0;
                let (y0, y1) = (y_of(mean - std), y_of(mean + std));
                let _ = writeln!(
                    s,
                    r#"<path class="errorbar" d="M{xm:.2} {y0:.2} V{y1:.2} M{:.2} {y0:.2} H{:.2} M{:.2} {y1:.2} H{:.2}" stroke="black" fill="none"/>"#,
                    xm - 4.0,
                    xm + 4.0,
                    xm - 4.0,
                    xm + 4.0
                );
            }
        }
    }
    for (acc, color, dash, label) in [
        (report.baseline.train, "#999999", "2,3", "reflectance train"),
        (report.baseline.test, "#000000", "2,3", "reflectance test"),
    ] {
        let y = y_of(acc);
        let _ = writeln!(
            s,
            r#"<line class="ref-line" x1="{LEFT}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="{color}" stroke-dasharray="{dash}"><title>{label} {acc}</title></line>"#,
            W - 20.0
        );
    }
    let ly = H - 22.0;
    let _ = writeln!(
        s,
        r##"<rect x="{LEFT}" y="{:.2}" width="10" height="10" fill="#d62728"/><text x="{:.2}" y="{ly:.2}">inter-date pairs</text><rect x="{:.2}" y="{:.2}" width="10" height="10" fill="#1f77b4"/><text x="{:.2}" y="{ly:.2}">same-view pairs</text>"##,
        ly - 9.0,
        LEFT + 14.0,
        LEFT + 130.0,
        ly - 9.0,
        LEFT + 144.0
    );
    s.push_str("</svg>\n");
    s
}

/// Writes the summary CSV, the full JSON dump and the SVG chart into `out_dir`.
pub fn emit_report(report: &MatrixReport, out_dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let files = [
        (out_dir.join(SUMMARY_FILE), summary_csv(report)),
        (
            out_dir.join(DUMP_FILE),
            serde_json::to_string_pretty(report).expect("report serializes") + "\n",
        ),
        (out_dir.join(CHART_FILE), chart_svg(report)),
    ];
    let mut written = Vec::new();
    for (path, body) in files {
        fs::write(&path, body).map_err(|e| io_err(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

pub fn load_report(path: &Path) -> Result<MatrixReport> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| io_err(path, e))
}

/// One parsed data row of the summary CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub strategy: String,
    pub augmentation: String,
    pub status: String,
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub seed_bests: Vec<f64>,
    pub baseline_test: f64,
}

fn split_csv_line(line: &str) -> Vec<String> {
    let mut fields = Vec::new();
    let mut cur = String::new();
    let mut quoted = false;
    let mut chars = line.chars().peekable();
    while let Some(ch) = chars.next() {
        match (ch, quoted) {
            ('"', true) if chars.peek() == Some(&'"') => {
                cur.push('"');
                chars.next();
            }
            ('"', _) => quoted = !quoted,
            (',', false) => fields.push(std::mem::take(&mut cur)),
            _ => cur.push(ch),
        }
    }
    fields.push(cur);
    fields
}

pub fn parse_summary_csv(text: &str) -> Result<Vec<SummaryRow>> {
    let bad = |m: String| HarnessError::Config(format!("summary csv: {m}"));
    let mut lines = text.lines();
    if lines.next() != Some(SUMMARY_HEADER) {
        return Err(bad("missing header".into()));
    }
    let num = |s: &str| -> Result<Option<f64>> {
        if s.is_empty() {
            Ok(None)
        } else {
            s.parse().map(Some).map_err(|_| bad(format!("bad number `{s}`")))
        }
    };
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f = split_csv_line(l);
            if f.len() != 11 {
                return Err(bad(format!("expected 11 fields, got {}", f.len())));
            }
            Ok(SummaryRow {
                strategy: f[0].clone(),
                augmentation: f[1].clone(),
                status: f[3].clone(),
                mean: num(&f[4])?,
                std: num(&f[5])?,
                seed_bests: f[7]
                    .split(';')
                    .filter(|s| !s.is_empty())
                    .map(|s| s.parse().map_err(|_| bad(format!("bad number `{s}`"))))
                    .collect::<Result<_>>()?,
                baseline_test: num(&f[9])?.unwrap_or(f64::NAN),
            })
        })
        .collect()
}
