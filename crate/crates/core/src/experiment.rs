//! Experiment runner: the synthetic sparse-approximation study, the
//! image compressed-sensing study, parameter grids, and inspection helpers.
//!
//! Every run writes into its own directory: the echoed config, checkpoints,
//! training histories and a CSV report with the columns of [`ReportRow`].

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{s, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, SavedModel};
use crate::datagen::{
    assemble_patches, center_crop, extract_patches, gen_coupled_codes, gen_dictionary,
    sample_patch_pairs, support_stats, synthetic_image_pair, CoupledCodes, PatchSpec,
    SyntheticSpec,
};
use crate::dataset::{DatasetDir, ImagePairEntry, Manifest, Split, SyntheticSection, MANIFEST_VERSION};
use crate::error::{Error, Result};
use crate::metrics::{nmse_db_columns, psnr_db};
use crate::pipelines::{
    gaussian_measurement, reconstructor_from_autoencoder, AutoencoderInit, LeSITAAutoencoder,
    LeSITAReconstructor, MainInit, PairDataset,
};
use crate::solvers::{solve, SolverConfig, SparseProblem};
use crate::training::{train, CodeDataset, CodeRegression, L2Variant, TrainConfig, TrainingHistory};
use crate::unfolded::{init_from_operator, NetKind};

/// Environment variable naming the directory that run outputs go under.
pub const OUTPUT_ROOT_ENV: &str = "LESITA_OUTPUT_ROOT";
pub const DEFAULT_OUTPUT_ROOT: &str = "runs";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    SyntheticSparse,
    ImageCs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Ista,
    Sita,
    Lista,
    Lesita,
    LesitaAe,
    LesitaRec,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Ista => "ista",
            ModelKind::Sita => "sita",
            ModelKind::Lista => "lista",
            ModelKind::Lesita => "lesita",
            ModelKind::LesitaAe => "lesita_ae",
            ModelKind::LesitaRec => "lesita_rec",
        }
    }

    fn net_kind(self) -> Option<NetKind> {
        match self {
            ModelKind::Lista => Some(NetKind::Lista),
            ModelKind::Lesita => Some(NetKind::Lesita),
            _ => None,
        }
    }

    fn uses_side_info(self) -> bool {
        !matches!(self, ModelKind::Ista | ModelKind::Lista)
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "ista" => ModelKind::Ista,
            "sita" => ModelKind::Sita,
            "lista" => ModelKind::Lista,
            "lesita" => ModelKind::Lesita,
            "lesita_ae" => ModelKind::LesitaAe,
            "lesita_rec" => ModelKind::LesitaRec,
            _ => return Err(Error::Config(format!("unknown model {s:?}"))),
        })
    }
}

/// Synthetic sparse-approximation data: codes of length `k`, signals
/// `x = D alpha` of length `n` observed directly (`Phi = I`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub k: usize,
    pub s: usize,
    pub rho: usize,
    pub count: usize,
    pub n: usize,
    /// Load this dataset directory instead of generating data.
    pub dataset: Option<String>,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            k: 256,
            s: 25,
            rho: 25,
            count: 50_000,
            n: 128,
            dataset: None,
        }
    }
}

impl SyntheticConfig {
    /// The full-size protocol (500K samples).
    pub fn full_scale() -> Self {
        Self {
            count: 500_000,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSection {
    pub t_max: usize,
    pub rel_tol: f64,
    /// Stop each solve once its NMSE against the true code reaches this level.
    pub target_nmse_db: Option<f64>,
}

impl Default for SolverSection {
    fn default() -> Self {
        let d = SolverConfig::default();
        Self {
            t_max: d.t_max,
            rel_tol: d.rel_tol,
            target_nmse_db: d.target_nmse_db,
        }
    }
}

impl SolverSection {
    fn to_solver(&self) -> SolverConfig {
        SolverConfig {
            t_max: self.t_max,
            rel_tol: self.rel_tol,
            target_nmse_db: self.target_nmse_db,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImageConfig {
    /// Directory with a manifest listing image pairs; when absent,
    /// synthetic correlated pairs are generated.
    pub dataset: Option<String>,
    pub synthetic_images: usize,
    pub test_images: usize,
    pub image_size: usize,
    pub patch_size: usize,
    pub test_stride: usize,
    /// Side of the central test region.
    pub crop: usize,
    pub code_len: usize,
    pub si_depth: usize,
    pub ratios: Vec<f64>,
    pub l2_variant: L2Variant,
    pub train_patches: usize,
    /// Epochs for the reconstructor stage (the autoencoder uses `train.epochs`).
    pub rec_epochs: Option<usize>,
    /// Keep the random measurement matrix fixed instead of learning it.
    pub fixed_phi: bool,
    /// Copy the autoencoder's encoder into the reconstructor (square `Phi` only)
    /// instead of re-initializing it from `Phi D`.
    pub transfer_encoder: bool,
}

impl Default for ImageConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            synthetic_images: 8,
            test_images: 3,
            image_size: 96,
            patch_size: 8,
            test_stride: 4,
            crop: 64,
            code_len: 128,
            si_depth: 7,
            ratios: vec![0.5, 0.25],
            l2_variant: L2Variant::A,
            train_patches: 20_000,
            rec_epochs: None,
            fixed_phi: false,
            transfer_encoder: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub experiment: ExperimentKind,
    pub model: ModelKind,
    /// Layers of the unfolded network (iterations for a fixed-length solver run).
    pub depth: usize,
    pub tied: bool,
    /// Sparsity weight of the underlying problem; sets initial thresholds.
    pub lambda: f64,
    /// Root seed; every random component derives its own seed from it.
    pub seed: u64,
    /// Relative to the output root unless absolute.
    pub output_dir: Option<String>,
    pub synthetic: SyntheticConfig,
    pub solver: SolverSection,
    pub image: ImageConfig,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "run".into(),
            experiment: ExperimentKind::SyntheticSparse,
            model: ModelKind::Lesita,
            depth: 7,
            tied: false,
            lambda: 0.1,
            seed: 0,
            output_dir: None,
            synthetic: SyntheticConfig::default(),
            solver: SolverSection::default(),
            image: ImageConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

fn cfg_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let c: ExperimentConfig =
            toml::from_str(text).map_err(|e| cfg_err(format!("experiment config: {e}")))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let p = path.as_ref();
        let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| cfg_err(format!("experiment config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(cfg_err(format!("run name {:?} must be a plain file name", self.name)));
        }
        if self.depth == 0 {
            return Err(cfg_err("depth must be >= 1"));
        }
        if !(self.lambda > 0.0) || !self.lambda.is_finite() {
            return Err(cfg_err(format!("lambda must be positive, got {}", self.lambda)));
        }
        self.train.validate().map_err(|e| cfg_err(e.to_string()))?;
        self.solver.to_solver().validate().map_err(|e| cfg_err(e.to_string()))?;
        match self.experiment {
            ExperimentKind::SyntheticSparse => {
                if !matches!(
                    self.model,
                    ModelKind::Ista | ModelKind::Sita | ModelKind::Lista | ModelKind::Lesita
                ) {
                    return Err(cfg_err(format!(
                        "model {} does not apply to the synthetic experiment",
                        self.model.as_str()
                    )));
                }
                let sc = &self.synthetic;
                if sc.dataset.is_none() {
                    self.synthetic_spec().validate().map_err(|e| cfg_err(e.to_string()))?;
                    if sc.n == 0 || sc.n > sc.k {
                        return Err(cfg_err(format!("signal length n = {} must be in 1..=k", sc.n)));
                    }
                    if sc.count < 20 {
                        return Err(cfg_err("synthetic count must be >= 20 to form all splits"));
                    }
                }
            }
            ExperimentKind::ImageCs => {
                if !matches!(self.model, ModelKind::LesitaAe | ModelKind::LesitaRec) {
                    return Err(cfg_err(format!(
                        "model {} does not apply to the image experiment",
                        self.model.as_str()
                    )));
                }
                let ic = &self.image;
                PatchSpec {
                    patch_size: ic.patch_size,
                    stride: ic.test_stride,
                }
                .validate()
                .map_err(|e| cfg_err(e.to_string()))?;
                if ic.crop < ic.patch_size || (ic.dataset.is_none() && ic.crop > ic.image_size) {
                    return Err(cfg_err("crop must lie between the patch size and the image size"));
                }
                if ic.code_len == 0 || ic.si_depth == 0 || ic.train_patches < 20 {
                    return Err(cfg_err("code_len and si_depth must be >= 1, train_patches >= 20"));
                }
                if ic.dataset.is_none() && (ic.test_images == 0 || ic.test_images >= ic.synthetic_images) {
                    return Err(cfg_err("need 1 <= test_images < synthetic_images"));
                }
                if self.model == ModelKind::LesitaRec && ic.ratios.is_empty() {
                    return Err(cfg_err("at least one CS ratio is required"));
                }
                for &r in &ic.ratios {
                    if !(r > 0.0 && r <= 1.0) {
                        return Err(cfg_err(format!("CS ratio {r} outside (0, 1]")));
                    }
                }
                if ic.rec_epochs == Some(0) && self.model == ModelKind::LesitaRec {
                    return Err(cfg_err("rec_epochs must be >= 1 when given"));
                }
            }
        }
        Ok(())
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            k: self.synthetic.k,
            s: self.synthetic.s,
            rho: self.synthetic.rho,
            count: self.synthetic.count,
            seed: sub_seed(self.seed, "codes"),
        }
    }

    /// Output directory: `output_dir` (absolute, or under `root`), else
    /// `root/name`.
    pub fn output_path(&self, root: &Path) -> PathBuf {
        match &self.output_dir {
            Some(d) if Path::new(d).is_absolute() => PathBuf::from(d),
            Some(d) => root.join(d),
            None => root.join(&self.name),
        }
    }
}

/// Output root from the environment, or `runs`.
pub fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_ROOT))
}

/// Derives a component seed from the root seed and a label.
pub fn sub_seed(root: u64, label: &str) -> u64 {
    // FNV-1a over the label, folded into the root and finished with a
    // splitmix64 round.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = root ^ h;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// One line of the CSV report. Column order is the field order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub run: String,
    pub experiment: String,
    pub model: String,
    pub depth: usize,
    pub rho: Option<usize>,
    pub cs_ratio: Option<f64>,
    pub l2_variant: Option<String>,
    pub seed: u64,
    /// Test unit: `test_set` for synthetic data, an image name, or `average`.
    pub unit: String,
    /// `nmse_db` or `psnr_db`.
    pub metric: String,
    pub value: f64,
    /// NMSE of summed error over summed energy (synthetic only).
    pub nmse_ratio_of_sums_db: Option<f64>,
    /// Mean solver iterations (solver runs only).
    pub mean_iterations: Option<f64>,
    pub train_seconds: f64,
    pub infer_us_per_sample: f64,
}

pub const REPORT_COLUMNS: &[&str] = &[
    "run",
    "experiment",
    "model",
    "depth",
    "rho",
    "cs_ratio",
    "l2_variant",
    "seed",
    "unit",
    "metric",
    "value",
    "nmse_ratio_of_sums_db",
    "mean_iterations",
    "train_seconds",
    "infer_us_per_sample",
];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExperimentReport {
    pub rows: Vec<ReportRow>,
}

impl ExperimentReport {
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
        w.write_record(REPORT_COLUMNS)
            .map_err(|e| Error::Data(format!("csv: {e}")))?;
        for r in &self.rows {
            w.serialize(r).map_err(|e| Error::Data(format!("csv: {e}")))?;
        }
        w.flush().map_err(|e| Error::Data(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let p = path.as_ref();
        let f = std::fs::File::create(p).map_err(|e| Error::io(p, e))?;
        self.write_csv(std::io::BufWriter::new(f))
    }

    /// First row matching `unit` (and `cs_ratio`, when given).
    pub fn value(&self, unit: &str, ratio: Option<f64>) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.unit == unit && (ratio.is_none() || r.cs_ratio == ratio))
            .map(|r| r.value)
    }
}

fn ensure_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write_text(p: &Path, text: &str) -> Result<()> {
    std::fs::write(p, text).map_err(|e| Error::io(p, e))
}

fn save_history(dir: &Path, file: &str, h: &TrainingHistory) -> Result<()> {
    let p = dir.join(file);
    let f = std::fs::File::create(&p).map_err(|e| Error::io(&p, e))?;
    h.write_csv(std::io::BufWriter::new(f))
}

fn run_metadata(cfg: &ExperimentConfig) -> BTreeMap<String, String> {
    let mut m = BTreeMap::new();
    m.insert("seed".into(), cfg.seed.to_string());
    m.insert("lambda".into(), format!("{:e}", cfg.lambda));
    m.insert("run".into(), cfg.name.clone());
    m
}

// ---------------------------------------------------------------------------
// Synthetic sparse approximation

/// Generated or loaded synthetic data with an 85 / 5 / 10 split.
#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub dictionary: Array2<f64>,
    pub train: CodeDataset,
    pub val: CodeDataset,
    pub test: CodeDataset,
    pub rho: Option<usize>,
}

fn split_counts(count: usize) -> (usize, usize) {
    let test = count / 10;
    let val = count / 20;
    (count - val - test, val)
}

/// Builds the synthetic dataset for `cfg` (generating it unless a dataset
/// directory is configured).
pub fn synthetic_data(cfg: &ExperimentConfig) -> Result<SyntheticData> {
    let (codes, dictionary, rho) = match &cfg.synthetic.dataset {
        Some(dir) => {
            let d = DatasetDir::open(dir)?;
            let codes = CoupledCodes {
                alpha: d.load_matrix("alpha")?,
                w: d.load_matrix("w")?,
            };
            let dict = d.load_matrix("dictionary")?;
            if dict.ncols() != codes.alpha.nrows() || codes.alpha.dim() != codes.w.dim() {
                return Err(Error::Data("dataset arrays have inconsistent shapes".into()));
            }
            let rho = d.manifest.synthetic.as_ref().map(|s| s.spec.rho);
            (codes, dict, rho)
        }
        None => {
            let codes = gen_coupled_codes(&cfg.synthetic_spec())?;
            let dict = gen_dictionary(cfg.synthetic.n, cfg.synthetic.k, sub_seed(cfg.seed, "dictionary"))?;
            (codes, dict, Some(cfg.synthetic.rho))
        }
    };
    let count = codes.alpha.ncols();
    if count < 20 {
        return Err(Error::Data(format!("{count} samples are too few to split")));
    }
    let x = dictionary.dot(&codes.alpha);
    let (ntr, nva) = split_counts(count);
    let part = |a: usize, b: usize| {
        CodeDataset::new(
            x.slice(s![.., a..b]).to_owned(),
            Some(codes.w.slice(s![.., a..b]).to_owned()),
            codes.alpha.slice(s![.., a..b]).to_owned(),
        )
    };
    Ok(SyntheticData {
        train: part(0, ntr)?,
        val: part(ntr, ntr + nva)?,
        test: part(ntr + nva, count)?,
        dictionary,
        rho,
    })
}

fn without_side_info(d: &CodeDataset) -> CodeDataset {
    CodeDataset {
        inputs: d.inputs.clone(),
        side_info: None,
        codes: d.codes.clone(),
    }
}

/// Outcome of a synthetic run, for callers that need more than the report.
#[derive(Debug, Clone)]
pub struct SyntheticOutcome {
    pub report: ExperimentReport,
    pub model: Option<CodeRegression>,
    pub history: Option<TrainingHistory>,
    /// Per-sample NMSE of the test set, in test order.
    pub per_sample_db: Vec<f64>,
}

/// Trains (for LISTA / LeSITA) and evaluates one synthetic configuration.
pub fn run_synthetic(cfg: &ExperimentConfig, data: &SyntheticData, out_dir: Option<&Path>) -> Result<SyntheticOutcome> {
    cfg.validate()?;
    if cfg.experiment != ExperimentKind::SyntheticSparse {
        return Err(cfg_err("run_synthetic needs a synthetic_sparse config"));
    }
    if let Some(dir) = out_dir {
        ensure_dir(dir)?;
        write_text(&dir.join("config.toml"), &cfg.to_toml()?)?;
    }
    match cfg.model.net_kind() {
        Some(kind) => {
            let side = kind == NetKind::Lesita;
            let prep = |d: &CodeDataset| if side { d.clone() } else { without_side_info(d) };
            let (tr, va) = (prep(&data.train), prep(&data.val));
            let net = init_from_operator(kind, data.dictionary.view(), cfg.lambda, cfg.depth, cfg.tied)?;
            let t0 = Instant::now();
            let outcome = train(&CodeRegression { net }, &tr, &va, &cfg.train)?;
            let train_seconds = t0.elapsed().as_secs_f64();
            let model = outcome.model;
            let mut out = evaluate_network(cfg, &model, data)?;
            for r in &mut out.report.rows {
                r.train_seconds = train_seconds;
            }
            if let Some(dir) = out_dir {
                SavedModel::Network(model.clone())
                    .to_checkpoint(&run_metadata(cfg))
                    .save(dir.join("model.ckpt"))?;
                save_history(dir, "history.csv", &outcome.history)?;
                out.report.save(dir.join("report.csv"))?;
            }
            out.model = Some(model);
            out.history = Some(outcome.history);
            Ok(out)
        }
        None => {
            let out = evaluate_solver(cfg, data)?;
            if let Some(dir) = out_dir {
                out.report.save(dir.join("report.csv"))?;
            }
            Ok(out)
        }
    }
}

fn synthetic_row(cfg: &ExperimentConfig, data: &SyntheticData, value: f64) -> ReportRow {
    ReportRow {
        run: cfg.name.clone(),
        experiment: "synthetic_sparse".into(),
        model: cfg.model.as_str().into(),
        depth: cfg.depth,
        rho: data.rho,
        cs_ratio: None,
        l2_variant: None,
        seed: cfg.seed,
        unit: "test_set".into(),
        metric: "nmse_db".into(),
        value,
        nmse_ratio_of_sums_db: None,
        mean_iterations: None,
        train_seconds: 0.0,
        infer_us_per_sample: 0.0,
    }
}

/// Test-set NMSE of a trained code regressor.
pub fn evaluate_network(cfg: &ExperimentConfig, model: &CodeRegression, data: &SyntheticData) -> Result<SyntheticOutcome> {
    let test = if model.net.kind() == NetKind::Lesita {
        data.test.clone()
    } else {
        without_side_info(&data.test)
    };
    let t0 = Instant::now();
    let pred = model.predict(&test)?;
    let infer = t0.elapsed().as_secs_f64();
    let summary = nmse_db_columns(pred.view(), test.codes.view())?;
    let per_sample_db = per_sample_nmse(&pred, &test.codes)?;
    let mut row = synthetic_row(cfg, data, summary.mean_db);
    row.model = model.net.kind().as_str().into();
    row.depth = model.net.depth();
    row.nmse_ratio_of_sums_db = Some(summary.ratio_of_sums_db);
    row.infer_us_per_sample = 1e6 * infer / test.codes.ncols() as f64;
    Ok(SyntheticOutcome {
        report: ExperimentReport { rows: vec![row] },
        model: None,
        history: None,
        per_sample_db,
    })
}

fn per_sample_nmse(est: &Array2<f64>, reference: &Array2<f64>) -> Result<Vec<f64>> {
    est.axis_iter(Axis(1))
        .zip(reference.axis_iter(Axis(1)))
        .map(|(e, r)| crate::metrics::nmse_db(&e, &r))
        .collect()
}

/// ISTA / SITA on every test sample.
pub fn evaluate_solver(cfg: &ExperimentConfig, data: &SyntheticData) -> Result<SyntheticOutcome> {
    let solver = SolverConfig {
        t_max: if cfg.solver.target_nmse_db.is_some() { cfg.solver.t_max } else { cfg.depth },
        ..cfg.solver.to_solver()
    };
    let test = &data.test;
    let mut est = Array2::zeros(test.codes.dim());
    let mut iterations = 0usize;
    let lipschitz = crate::solvers::lipschitz_upper_bound(data.dictionary.view())?;
    let t0 = Instant::now();
    for j in 0..test.codes.ncols() {
        let w = cfg
            .model
            .uses_side_info()
            .then(|| test.side_info.as_ref().map(|w| w.column(j).to_owned()))
            .flatten();
        let p = SparseProblem::new(data.dictionary.clone(), test.inputs.column(j).to_owned(), cfg.lambda, w)?;
        let r = solve(&p, &solver, Some(test.codes.column(j)), Some(lipschitz))?;
        iterations += r.iterations;
        est.column_mut(j).assign(&r.alpha);
    }
    let elapsed = t0.elapsed().as_secs_f64();
    let count = test.codes.ncols();
    let summary = nmse_db_columns(est.view(), test.codes.view())?;
    let mut row = synthetic_row(cfg, data, summary.mean_db);
    row.nmse_ratio_of_sums_db = Some(summary.ratio_of_sums_db);
    row.mean_iterations = Some(iterations as f64 / count as f64);
    row.infer_us_per_sample = 1e6 * elapsed / count as f64;
    Ok(SyntheticOutcome {
        report: ExperimentReport { rows: vec![row] },
        model: None,
        history: None,
        per_sample_db: per_sample_nmse(&est, &test.codes)?,
    })
}

/// Writes the synthetic dataset for `cfg` to `dir`.
pub fn write_synthetic_dataset(cfg: &ExperimentConfig, dir: &Path) -> Result<DatasetDir> {
    let spec = cfg.synthetic_spec();
    let codes = gen_coupled_codes(&spec)?;
    let dict_seed = sub_seed(cfg.seed, "dictionary");
    let dict = gen_dictionary(cfg.synthetic.n, cfg.synthetic.k, dict_seed)?;
    let x = dict.dot(&codes.alpha);
    let manifest = Manifest {
        format_version: MANIFEST_VERSION,
        synthetic: Some(SyntheticSection {
            spec,
            n: cfg.synthetic.n,
            dictionary_seed: dict_seed,
        }),
        arrays: vec![],
        pairs: vec![],
    };
    DatasetDir::create(
        dir,
        manifest,
        &[
            ("alpha", codes.alpha.view().into_dyn()),
            ("w", codes.w.view().into_dyn()),
            ("x", x.view().into_dyn()),
            ("dictionary", dict.view().into_dyn()),
        ],
    )
}

// ---------------------------------------------------------------------------
// Image compressed sensing

/// Aligned image pairs `(name, target, side)`.
#[derive(Debug, Clone)]
pub struct ImageSet {
    pub train: Vec<(String, Array2<f64>, Array2<f64>)>,
    pub test: Vec<(String, Array2<f64>, Array2<f64>)>,
}

pub fn image_set(cfg: &ExperimentConfig) -> Result<ImageSet> {
    let ic = &cfg.image;
    let mut set = ImageSet {
        train: vec![],
        test: vec![],
    };
    match &ic.dataset {
        Some(dir) => {
            let d = DatasetDir::open(dir)?;
            for p in &d.manifest.pairs {
                let (t, s) = d.load_pair(p)?;
                match p.split {
                    Split::Train => set.train.push((p.name.clone(), t, s)),
                    Split::Test => set.test.push((p.name.clone(), t, s)),
                }
            }
        }
        None => {
            let base = sub_seed(cfg.seed, "images");
            for i in 0..ic.synthetic_images {
                let (t, s) = synthetic_image_pair(ic.image_size, base.wrapping_add(i as u64))?;
                let entry = (format!("synthetic{i:02}"), t, s);
                if i + ic.test_images >= ic.synthetic_images {
                    set.test.push(entry);
                } else {
                    set.train.push(entry);
                }
            }
        }
    }
    if set.train.is_empty() || set.test.is_empty() {
        return Err(Error::Data("image experiment needs both training and test pairs".into()));
    }
    Ok(set)
}

/// Writes synthetic image pairs as array blobs plus a manifest.
pub fn write_image_dataset(cfg: &ExperimentConfig, dir: &Path) -> Result<DatasetDir> {
    let ic = &cfg.image;
    let set = image_set(&ExperimentConfig {
        image: ImageConfig {
            dataset: None,
            ..ic.clone()
        },
        ..cfg.clone()
    })?;
    let mut pairs = Vec::new();
    let mut arrays: Vec<(String, Array2<f64>)> = Vec::new();
    for (split, list) in [(Split::Train, &set.train), (Split::Test, &set.test)] {
        for (name, t, s) in list {
            pairs.push(ImagePairEntry {
                name: name.clone(),
                target: format!("{name}_target.bin"),
                side: format!("{name}_side.bin"),
                split,
            });
            arrays.push((format!("{name}_target"), t.clone()));
            arrays.push((format!("{name}_side"), s.clone()));
        }
    }
    let manifest = Manifest {
        format_version: MANIFEST_VERSION,
        synthetic: None,
        arrays: vec![],
        pairs,
    };
    let views: Vec<(&str, ndarray::ArrayViewD<f64>)> =
        arrays.iter().map(|(n, a)| (n.as_str(), a.view().into_dyn())).collect();
    DatasetDir::create(dir, manifest, &views)
}

/// Random training patch pairs, split 95 / 5 into train and validation.
pub fn training_patches(cfg: &ExperimentConfig, set: &ImageSet) -> Result<(PairDataset, PairDataset)> {
    let ic = &cfg.image;
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, "patches"));
    let per = ic.train_patches.div_ceil(set.train.len());
    let n = ic.patch_size * ic.patch_size;
    let mut xs = Array2::zeros((n, 0));
    let mut zs = Array2::zeros((n, 0));
    for (_, t, s) in &set.train {
        let (x, z) = sample_patch_pairs(t.view(), s.view(), ic.patch_size, per, &mut rng)?;
        xs.append(Axis(1), x.view()).map_err(|e| Error::Data(e.to_string()))?;
        zs.append(Axis(1), z.view()).map_err(|e| Error::Data(e.to_string()))?;
    }
    // Interleave images before splitting so both parts see every image.
    let total = xs.ncols();
    let order: Vec<usize> = {
        use rand::seq::SliceRandom;
        let mut o: Vec<usize> = (0..total).collect();
        o.shuffle(&mut rng);
        o
    };
    let nval = (total / 20).max(1);
    let val = PairDataset::new(xs.select(Axis(1), &order[..nval]), zs.select(Axis(1), &order[..nval]))?;
    let tr = PairDataset::new(xs.select(Axis(1), &order[nval..]), zs.select(Axis(1), &order[nval..]))?;
    Ok((tr, val))
}

/// Models produced by the two-stage image pipeline.
#[derive(Debug, Clone)]
pub struct ImageOutcome {
    pub report: ExperimentReport,
    pub autoencoder: LeSITAAutoencoder,
    pub reconstructors: Vec<(f64, LeSITAReconstructor)>,
}

fn measurement_len(ratio: f64, n: usize) -> usize {
    ((ratio * n as f64).round() as usize).clamp(1, n)
}

/// Trains the autoencoder, then one reconstructor per CS ratio, and
/// reports per-image PSNR on the test pairs.
pub fn run_image_cs(cfg: &ExperimentConfig, out_dir: Option<&Path>) -> Result<ImageOutcome> {
    cfg.validate()?;
    if cfg.experiment != ExperimentKind::ImageCs {
        return Err(cfg_err("run_image_cs needs an image_cs config"));
    }
    let ic = &cfg.image;
    if let Some(dir) = out_dir {
        ensure_dir(dir)?;
        write_text(&dir.join("config.toml"), &cfg.to_toml()?)?;
    }
    let set = image_set(cfg)?;
    let (tr, va) = training_patches(cfg, &set)?;
    let n = ic.patch_size * ic.patch_size;

    let ae0 = LeSITAAutoencoder::init(&AutoencoderInit {
        n,
        d: n,
        k: ic.code_len,
        depth: cfg.depth,
        si_depth: ic.si_depth,
        lambda: cfg.lambda,
        l2_variant: ic.l2_variant,
        seed: sub_seed(cfg.seed, "autoencoder"),
    })?;
    let t0 = Instant::now();
    let ae_out = train(&ae0, &tr, &va, &cfg.train)?;
    let ae_seconds = t0.elapsed().as_secs_f64();
    let ae = ae_out.model;
    if let Some(dir) = out_dir {
        SavedModel::Autoencoder(ae.clone())
            .to_checkpoint(&run_metadata(cfg))
            .save(dir.join("autoencoder.ckpt"))?;
        save_history(dir, "autoencoder_history.csv", &ae_out.history)?;
    }

    let mut report = ExperimentReport::default();
    let mut recs = Vec::new();
    if cfg.model == ModelKind::LesitaAe {
        let rows = evaluate_images(cfg, &set, None, |x, z| Ok(ae.forward(x, z)?.x_hat), ae_seconds)?;
        report.rows.extend(rows);
    } else {
        let rec_cfg = TrainConfig {
            epochs: ic.rec_epochs.unwrap_or(cfg.train.epochs),
            ..cfg.train.clone()
        };
        for &ratio in &ic.ratios {
            let m = measurement_len(ratio, n);
            let phi = gaussian_measurement(m, n, sub_seed(cfg.seed, &format!("phi{m}")))?;
            let init = if ic.transfer_encoder { MainInit::Transfer } else { MainInit::Reinit };
            let mut rec0 = reconstructor_from_autoencoder(&ae, phi, cfg.depth, cfg.lambda, init)?;
            rec0.set_phi_trainable(!ic.fixed_phi);
            let t1 = Instant::now();
            let rec_out = train(&rec0, &tr, &va, &rec_cfg)?;
            let seconds = ae_seconds + t1.elapsed().as_secs_f64();
            let rec = rec_out.model;
            let rows = evaluate_images(
                cfg,
                &set,
                Some(ratio),
                |x, z| Ok(rec.forward(rec.measure(x)?.view(), z)?.x_hat),
                seconds,
            )?;
            report.rows.extend(rows);
            if let Some(dir) = out_dir {
                SavedModel::Reconstructor(rec.clone())
                    .to_checkpoint(&run_metadata(cfg))
                    .save(dir.join(format!("reconstructor_m{m}.ckpt")))?;
                save_history(dir, &format!("reconstructor_m{m}_history.csv"), &rec_out.history)?;
            }
            recs.push((ratio, rec));
        }
    }
    if let Some(dir) = out_dir {
        report.save(dir.join("report.csv"))?;
    }
    Ok(ImageOutcome {
        report,
        autoencoder: ae,
        reconstructors: recs,
    })
}

/// Patch-wise reconstruction of every test image's central crop at the test
/// stride, reassembled and scored by PSNR (peak 1). Reconstructions are
/// clipped to the valid intensity range before scoring.
pub fn evaluate_images<F>(
    cfg: &ExperimentConfig,
    set: &ImageSet,
    ratio: Option<f64>,
    reconstruct: F,
    train_seconds: f64,
) -> Result<Vec<ReportRow>>
where
    F: Fn(ndarray::ArrayView2<f64>, ndarray::ArrayView2<f64>) -> Result<Array2<f64>>,
{
    let ic = &cfg.image;
    let spec = PatchSpec {
        patch_size: ic.patch_size,
        stride: ic.test_stride,
    };
    let mut rows = Vec::new();
    let mut sum = 0.0;
    let mut us = 0.0;
    for (name, t, s) in &set.test {
        let t = center_crop(t.view(), ic.crop)?;
        let s = center_crop(s.view(), ic.crop)?;
        let geom = spec.geometry(ic.crop, ic.crop)?;
        let xp = extract_patches(t.view(), &geom)?;
        let zp = extract_patches(s.view(), &geom)?;
        let t0 = Instant::now();
        let rec = reconstruct(xp.view(), zp.view())?;
        let per = 1e6 * t0.elapsed().as_secs_f64() / xp.ncols() as f64;
        let mut img = assemble_patches(rec.view(), &geom)?;
        img.mapv_inplace(|v| v.clamp(0.0, 1.0));
        let psnr = psnr_db(&img, &t, 1.0)?;
        sum += psnr;
        us += per;
        rows.push(image_row(cfg, ratio, name, psnr, train_seconds, per));
    }
    let count = set.test.len() as f64;
    rows.push(image_row(cfg, ratio, "average", sum / count, train_seconds, us / count));
    Ok(rows)
}

fn image_row(cfg: &ExperimentConfig, ratio: Option<f64>, unit: &str, value: f64, secs: f64, us: f64) -> ReportRow {
    ReportRow {
        run: cfg.name.clone(),
        experiment: "image_cs".into(),
        model: cfg.model.as_str().into(),
        depth: cfg.depth,
        rho: None,
        cs_ratio: ratio,
        l2_variant: Some(cfg.image.l2_variant.as_str().into()),
        seed: cfg.seed,
        unit: unit.into(),
        metric: "psnr_db".into(),
        value,
        nmse_ratio_of_sums_db: None,
        mean_iterations: None,
        train_seconds: secs,
        infer_us_per_sample: us,
    }
}

/// Evaluates a saved model on the test data described by `cfg`.
pub fn evaluate_checkpoint(cfg: &ExperimentConfig, ck: &Checkpoint) -> Result<ExperimentReport> {
    cfg.validate()?;
    let model = SavedModel::from_checkpoint(ck)?;
    match (cfg.experiment, model) {
        (ExperimentKind::SyntheticSparse, SavedModel::Network(m)) => {
            let data = synthetic_data(cfg)?;
            if m.net.input_len() != data.dictionary.nrows() || m.net.code_len() != data.dictionary.ncols() {
                return Err(Error::Dimension("checkpoint does not fit the dataset dimensions".into()));
            }
            Ok(evaluate_network(cfg, &m, &data)?.report)
        }
        (ExperimentKind::ImageCs, SavedModel::Autoencoder(ae)) => {
            let set = image_set(cfg)?;
            let rows = evaluate_images(cfg, &set, None, |x, z| Ok(ae.forward(x, z)?.x_hat), 0.0)?;
            Ok(ExperimentReport { rows })
        }
        (ExperimentKind::ImageCs, SavedModel::Reconstructor(rec)) => {
            let set = image_set(cfg)?;
            let ratio = rec.measurement_len() as f64 / rec.signal_len() as f64;
            let rows = evaluate_images(
                cfg,
                &set,
                Some(ratio),
                |x, z| Ok(rec.forward(rec.measure(x)?.view(), z)?.x_hat),
                0.0,
            )?;
            Ok(ExperimentReport { rows })
        }
        (_, m) => Err(cfg_err(format!(
            "a {} checkpoint cannot be evaluated in this experiment",
            m.model_name()
        ))),
    }
}

/// Runs a config end to end, writing outputs under `root`.
pub fn run(cfg: &ExperimentConfig, root: &Path) -> Result<ExperimentReport> {
    let dir = cfg.output_path(root);
    match cfg.experiment {
        ExperimentKind::SyntheticSparse => {
            cfg.validate()?;
            let data = synthetic_data(cfg)?;
            Ok(run_synthetic(cfg, &data, Some(&dir))?.report)
        }
        ExperimentKind::ImageCs => Ok(run_image_cs(cfg, Some(&dir))?.report),
    }
}

// ---------------------------------------------------------------------------
// Grids

/// A base config and the values to sweep. Every combination of the listed
/// axes is one cell; empty axes keep the base value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub base: ExperimentConfig,
    #[serde(default)]
    pub axes: GridAxes,
    /// Cells run concurrently on this many worker threads.
    #[serde(default = "one")]
    pub jobs: usize,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridAxes {
    pub model: Vec<ModelKind>,
    pub depth: Vec<usize>,
    pub rho: Vec<usize>,
    pub l2_variant: Vec<L2Variant>,
    pub seed: Vec<u64>,
}

impl GridConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let g: GridConfig = toml::from_str(text).map_err(|e| cfg_err(format!("grid config: {e}")))?;
        if g.jobs == 0 {
            return Err(cfg_err("jobs must be >= 1"));
        }
        for c in g.cells() {
            c.validate()?;
        }
        Ok(g)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let p = path.as_ref();
        let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        Self::parse(&text)
    }

    /// Expanded cell configs, each with its own name and output directory.
    pub fn cells(&self) -> Vec<ExperimentConfig> {
        fn axis<T: Clone>(v: &[T], base: T) -> Vec<T> {
            if v.is_empty() {
                vec![base]
            } else {
                v.to_vec()
            }
        }
        let b = &self.base;
        let mut out = Vec::new();
        for model in axis(&self.axes.model, b.model) {
            for depth in axis(&self.axes.depth, b.depth) {
                for rho in axis(&self.axes.rho, b.synthetic.rho) {
                    for l2 in axis(&self.axes.l2_variant, b.image.l2_variant) {
                        for seed in axis(&self.axes.seed, b.seed) {
                            let mut c = b.clone();
                            c.model = model;
                            c.depth = depth;
                            c.synthetic.rho = rho;
                            c.image.l2_variant = l2;
                            c.seed = seed;
                            c.name = match c.experiment {
                                ExperimentKind::SyntheticSparse => format!(
                                    "{}_{}_T{depth}_rho{rho}_s{seed}",
                                    b.name,
                                    model.as_str()
                                ),
                                ExperimentKind::ImageCs => format!(
                                    "{}_{}_T{depth}_l2{}_s{seed}",
                                    b.name,
                                    model.as_str(),
                                    l2.as_str()
                                ),
                            };
                            let parent = b.output_dir.clone().unwrap_or_else(|| b.name.clone());
                            c.output_dir = Some(format!("{parent}/{}", c.name));
                            out.push(c);
                        }
                    }
                }
            }
        }
        out
    }
}

/// Runs every grid cell and writes a combined report next to the cells.
pub fn run_grid(grid: &GridConfig, root: &Path) -> Result<ExperimentReport> {
    let cells = grid.cells();
    let next = std::sync::atomic::AtomicUsize::new(0);
    let results: std::sync::Mutex<Vec<Option<Result<ExperimentReport>>>> =
        std::sync::Mutex::new((0..cells.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..grid.jobs.min(cells.len()).max(1) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                if i >= cells.len() {
                    break;
                }
                let r = run(&cells[i], root);
                results.lock().expect("grid result lock")[i] = Some(r);
            });
        }
    });
    let mut report = ExperimentReport::default();
    for r in results.into_inner().expect("grid result lock") {
        report.rows.extend(r.expect("every cell ran")?.rows);
    }
    let parent = root.join(grid.base.output_dir.clone().unwrap_or_else(|| grid.base.name.clone()));
    ensure_dir(&parent)?;
    report.save(parent.join("grid_report.csv"))?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// Inspection

/// Deterministic text summary of a dataset directory.
pub fn dataset_stats(dir: &Path) -> Result<String> {
    let d = DatasetDir::open(dir)?;
    let mut s = String::new();
    if let Some(syn) = &d.manifest.synthetic {
        s.push_str(&format!(
            "synthetic k={} s={} rho={} count={} n={} seed={} dictionary_seed={}\n",
            syn.spec.k, syn.spec.s, syn.spec.rho, syn.spec.count, syn.n, syn.spec.seed, syn.dictionary_seed
        ));
    }
    for a in &d.manifest.arrays {
        s.push_str(&format!("array {} {:?} {}\n", a.name, a.shape, a.file));
    }
    for p in &d.manifest.pairs {
        let (t, _) = d.load_pair(p)?;
        s.push_str(&format!(
            "pair {} {:?} {:?} mean={:.6}\n",
            p.name,
            p.split,
            t.dim(),
            t.mean().unwrap_or(0.0)
        ));
    }
    if d.manifest.array("alpha").is_some() && d.manifest.array("w").is_some() {
        let st = support_stats(&CoupledCodes {
            alpha: d.load_matrix("alpha")?,
            w: d.load_matrix("w")?,
        })?;
        s.push_str(&format!(
            "support nnz_alpha={}..{} nnz_w={}..{} shared={}..{} sign_agreement={:.6}\n",
            st.min_nnz_alpha,
            st.max_nnz_alpha,
            st.min_nnz_w,
            st.max_nnz_w,
            st.min_shared,
            st.max_shared,
            st.sign_agreement
        ));
    }
    Ok(s)
}
