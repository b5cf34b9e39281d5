//! Configuration-driven experiment harness: data generation, flow training,
//! library/model construction, grid evaluation, and method comparison.
//!
//! All commands are deterministic under (config, seed): derived seeds are
//! `seed` for data, `seed+1` for flow init, `seed+2` for batch shuffling,
//! and `seed+3` for RBF center subsampling.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffeo::Diffeomorphism;
use crate::dynamics::{
    boundary_starts, generate_dataset, grid_starts, integrate, DomainBox, ExactDiffeoEx1,
    TrajectoryDataset, VectorFieldSpec,
};
use crate::edmd::{fit_generator_edmd, Dictionary, GeneratorEDMDModel};
use crate::eigen::EigenfunctionLibrary;
use crate::error::{Error, Result};
use crate::flow::FlowModel;
use crate::io::{self, DiffeoRef, SystemDoc};
use crate::kefmd::LiftedLTIModel;
use crate::net::AdamParams;
use crate::train::{
    loss_terms, train_observed, EarlyStop, EpochStats, LossWeights, ResidualForm, TrainConfig,
};
use crate::{cast, Scalar};

/// Identification methods the harness can run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Kefmd,
    EdmdMonomial,
    EdmdRbf,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Kefmd => "kefmd",
            Method::EdmdMonomial => "edmd_monomial",
            Method::EdmdRbf => "edmd_rbf",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "kefmd" => Ok(Method::Kefmd),
            "edmd_monomial" => Ok(Method::EdmdMonomial),
            "edmd_rbf" => Ok(Method::EdmdRbf),
            other => Err(Error::Config(format!("unknown method `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct BoxConfig {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub n_trajectories: usize,
    pub dt: f64,
    pub steps: usize,
    /// Truncate the generated dataset to exactly this many pairs.
    #[serde(default)]
    pub n_pairs: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct LiftConfig {
    pub max_powers: Vec<usize>,
    /// Ridge for the reconstruction fit; pseudoinverse when absent.
    #[serde(default)]
    pub ridge: Option<f64>,
}

fn default_activation() -> String {
    "elu".into()
}

fn default_s_clamp() -> f64 {
    crate::flow::DEFAULT_S_CLAMP
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct FlowConfig {
    pub n_layers: usize,
    pub hidden: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: String,
    #[serde(default = "default_s_clamp")]
    pub s_clamp: f64,
}

fn default_batch_size() -> usize {
    64
}

fn default_lr() -> f64 {
    1e-3
}

fn default_residual_form() -> String {
    "premultiplied".into()
}

fn default_loss_weights() -> [f64; 3] {
    [1.0, 1.0, 1.0]
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    pub epochs: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_residual_form")]
    pub residual_form: String,
    #[serde(default = "default_loss_weights")]
    pub loss_weights: [f64; 3],
    #[serde(default)]
    pub early_stop: bool,
    #[serde(default)]
    pub checkpoint_every: Option<usize>,
}

fn default_grid() -> usize {
    10
}

fn default_horizon() -> usize {
    200
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "default_grid")]
    pub grid_per_dim: usize,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
}

fn default_ridge() -> f64 {
    1e-8
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct EdmdConfig {
    pub monomial_degree: usize,
    pub rbf_centers: usize,
    #[serde(default = "default_ridge")]
    pub ridge: f64,
}

/// One experiment: system, data protocol, architectures, and evaluation.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub methods: Vec<Method>,
    pub system: SystemDoc,
    #[serde(rename = "box")]
    pub box_: BoxConfig,
    pub data: DataConfig,
    pub lift: LiftConfig,
    pub flow: FlowConfig,
    pub train: TrainSection,
    pub eval: EvalConfig,
    pub edmd: EdmdConfig,
}

pub const PRESET_EX1: &str = include_str!("../../../configs/ex1.toml");
pub const PRESET_EX3: &str = include_str!("../../../configs/ex3.toml");

impl ExperimentConfig {
    /// Parse and validate a TOML config; unknown keys are rejected.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text)
            .map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// A shipped preset (`ex1`, `ex3`) or a path to a config file.
    pub fn load(name_or_path: &str) -> Result<Self> {
        match name_or_path {
            "ex1" => Self::from_toml(PRESET_EX1),
            "ex3" => Self::from_toml(PRESET_EX3),
            path => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| Error::io(path, e))?;
                Self::from_toml(&text)
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let spec = self.system_spec()?;
        let box_ = self.domain_box()?;
        if box_.dim() != spec.dim {
            return Err(Error::Config("box dimension must match the system".into()));
        }
        if self.lift.max_powers.len() != spec.dim {
            return Err(Error::Config("max_powers must have one entry per state dim".into()));
        }
        if self.data.dt <= 0.0 {
            return Err(Error::Config("data.dt must be positive".into()));
        }
        if self.data.n_trajectories == 0 || self.data.steps == 0 {
            return Err(Error::Config("data protocol needs trajectories and steps".into()));
        }
        if self.eval.grid_per_dim < 2 {
            return Err(Error::Config("eval.grid_per_dim must be ≥ 2".into()));
        }
        self.residual_form()?;
        crate::net::Activation::from_name(&self.flow.activation)?;
        Ok(())
    }

    pub fn system_spec(&self) -> Result<VectorFieldSpec<f64>> {
        self.system.to_spec()
    }

    pub fn domain_box(&self) -> Result<DomainBox<f64>> {
        DomainBox::new(
            DVector::from_vec(self.box_.lo.clone()),
            DVector::from_vec(self.box_.hi.clone()),
        )
    }

    fn residual_form(&self) -> Result<ResidualForm> {
        match self.train.residual_form.as_str() {
            "premultiplied" => Ok(ResidualForm::Premultiplied),
            "inverse_jacobian" => Ok(ResidualForm::InverseJacobian),
            other => Err(Error::Config(format!("unknown residual form `{other}`"))),
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig<f64>> {
        Ok(TrainConfig {
            batch_size: self.train.batch_size,
            epochs: self.train.epochs,
            adam: AdamParams {
                lr: self.train.lr,
                ..AdamParams::default()
            },
            seed: self.seed.wrapping_add(2),
            residual_form: self.residual_form()?,
            loss_weights: LossWeights {
                conjugacy: self.train.loss_weights[0],
                jacobian_origin: self.train.loss_weights[1],
                origin: self.train.loss_weights[2],
            },
            early_stop: self.train.early_stop.then(EarlyStop::default),
        })
    }

    /// Uniformly scale the training effort (pair count and epochs) for
    /// desk-scale runs; evaluation protocol is untouched. The pair count
    /// shrinks through the trajectory count — shortening trajectories
    /// instead would leave the box interior uncovered.
    pub fn apply_scale(&mut self, scale: f64) -> Result<()> {
        if !(scale > 0.0) {
            return Err(Error::Config("--scale must be positive".into()));
        }
        self.data.n_trajectories =
            ((self.data.n_trajectories as f64 * scale).round().max(2.0)) as usize;
        self.train.epochs = ((self.train.epochs as f64 * scale).round().max(1.0)) as usize;
        Ok(())
    }

    // file layout inside out_dir
    pub fn dataset_base(&self) -> PathBuf {
        self.out_dir.join("dataset")
    }

    pub fn flow_path(&self) -> PathBuf {
        self.out_dir.join("flow.json")
    }

    pub fn train_log_path(&self) -> PathBuf {
        self.out_dir.join("train_log.csv")
    }

    pub fn library_path(&self) -> PathBuf {
        self.out_dir.join("library.json")
    }

    pub fn model_path(&self) -> PathBuf {
        self.out_dir.join("model.json")
    }

    pub fn edmd_path(&self, method: Method) -> PathBuf {
        self.out_dir.join(format!("{}.json", method.name()))
    }

    pub fn report_path(&self) -> PathBuf {
        self.out_dir.join("eval_report.json")
    }
}

/// Build the configured flow at its identity initialization.
pub fn init_flow(cfg: &ExperimentConfig) -> Result<FlowModel<f64>> {
    let spec = cfg.system_spec()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    FlowModel::new(
        spec.dim,
        cfg.flow.n_layers,
        &cfg.flow.hidden,
        cfg.flow.s_clamp,
        &mut rng,
    )
}

/// Generate the training dataset and write `dataset.csv` + sidecar.
pub fn cmd_generate(cfg: &ExperimentConfig) -> Result<TrajectoryDataset<f64>> {
    let spec = cfg.system_spec()?;
    let box_ = cfg.domain_box()?;
    let starts = boundary_starts(&box_, cfg.data.n_trajectories, cfg.seed);
    let mut ds = generate_dataset(&spec, &box_, &starts, cfg.data.dt, cfg.data.steps)?;
    if let Some(n) = cfg.data.n_pairs {
        ds.truncate_pairs(n);
    }
    io::write_dataset(&cfg.dataset_base(), &ds, cfg.seed)?;
    Ok(ds)
}

fn load_dataset(cfg: &ExperimentConfig) -> Result<TrajectoryDataset<f64>> {
    Ok(io::load_dataset::<f64>(&cfg.dataset_base())?.0)
}

/// Train the flow on the generated dataset; writes the checkpoint and the
/// per-epoch loss CSV.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<Vec<EpochStats<f64>>> {
    let ds = load_dataset(cfg)?;
    let a = ds.system.jacobian_linearization()?;
    let flow = init_flow(cfg)?;
    let train_cfg = cfg.train_config()?;
    let every = cfg.train.checkpoint_every.unwrap_or(0);
    let out_dir = cfg.out_dir.clone();
    let (flow, history) = train_observed(flow, &ds, &a, &train_cfg, |epoch, flow, _| {
        if every > 0 && (epoch + 1) % every == 0 {
            let path = out_dir.join(format!("flow_epoch_{:04}.json", epoch + 1));
            let _ = io::save_flow(&path, flow);
        }
    })?;
    io::save_flow(&cfg.flow_path(), &flow)?;
    io::write_train_log(&cfg.train_log_path(), &history)?;
    Ok(history)
}

/// Summary of a library/model build.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BuildSummary {
    pub dim_lifted: usize,
    pub training_rmse: f64,
    pub rank_deficient: bool,
    pub constant_mode_norm: f64,
}

/// Construct the eigenfunction library and the lifted LTI model from the
/// trained flow; writes `library.json` and `model.json`.
pub fn cmd_build(cfg: &ExperimentConfig) -> Result<BuildSummary> {
    let ds = load_dataset(cfg)?;
    let a = ds.system.jacobian_linearization()?;
    let flow = io::load_flow::<f64>(&cfg.flow_path())?;
    let library = Arc::new(EigenfunctionLibrary::build(
        &a,
        &cfg.lift.max_powers,
        Arc::new(flow),
        &ds,
    )?);
    let (xs, _) = ds.to_matrices();
    let (model, diag) =
        LiftedLTIModel::fit(library.clone(), &xs, cfg.data.dt, cfg.lift.ridge)?;

    let lib_doc = io::LibraryDoc::from_library(
        &library,
        &a,
        DiffeoRef::Flow {
            path: "flow.json".into(),
        },
    );
    io::save_library(&cfg.library_path(), &lib_doc)?;
    let model_doc = io::ModelDoc::from_model(&model, "library.json");
    io::save_model(&cfg.model_path(), &model_doc)?;

    Ok(BuildSummary {
        dim_lifted: model.dim_lifted(),
        training_rmse: diag.training_rmse,
        rank_deficient: diag.rank_deficient,
        constant_mode_norm: diag.constant_mode_norm,
    })
}

/// Fit one EDMD baseline on the generated dataset and write its model file.
pub fn cmd_fit_edmd(cfg: &ExperimentConfig, method: Method) -> Result<GeneratorEDMDModel<f64>> {
    let ds = load_dataset(cfg)?;
    let dict = match method {
        Method::EdmdMonomial => {
            Dictionary::monomial(ds.system.dim, cfg.edmd.monomial_degree)
        }
        Method::EdmdRbf => {
            let (xs, _) = ds.to_matrices();
            Dictionary::rbf_from_data(&xs, cfg.edmd.rbf_centers, cfg.seed.wrapping_add(3))?
        }
        Method::Kefmd => {
            return Err(Error::Config("kefmd is not an EDMD baseline".into()));
        }
    };
    let (model, _) = fit_generator_edmd(&ds, &dict, cfg.edmd.ridge)?;
    io::save_edmd_model(&cfg.edmd_path(method), &io::EdmdModelDoc::from_model(&model))?;
    Ok(model)
}

/// Per-method evaluation diagnostics.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MethodDiagnostics {
    /// max Re of the method's evolution spectrum.
    pub spectral_abscissa: f64,
    /// Training reconstruction residual of the state from the lift.
    pub reconstruction_rmse: f64,
    /// Sup-error of the learned map against the closed-form conjugacy
    /// (slow-manifold system only).
    pub diffeo_sup_error: Option<f64>,
    /// Evaluation starts whose lift left the scaled unit box by > 50 %.
    pub extrapolation_flags: usize,
}

/// One method's evaluation results.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MethodReport {
    pub method: String,
    pub lifted_dim: usize,
    pub rmse_mean: f64,
    pub rmse_std: f64,
    /// Wall-clock model work; zeroed in [`EvalReport::canonical_json`].
    pub wall_time_s: f64,
    pub per_trajectory_rmse: Vec<f64>,
    pub diagnostics: MethodDiagnostics,
}

/// Evaluation over the grid of start points: per-trajectory RMSE mean ± std
/// per method.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalReport {
    pub config_name: String,
    pub seed: u64,
    pub dt: f64,
    pub horizon: usize,
    pub n_trajectories: usize,
    pub methods: Vec<MethodReport>,
}

impl EvalReport {
    /// Deterministic serialization: wall times zeroed, everything else
    /// bit-faithful.
    pub fn canonical_json(&self) -> String {
        let mut canon = self.clone();
        for m in &mut canon.methods {
            m.wall_time_s = 0.0;
        }
        serde_json::to_string_pretty(&canon).expect("report serializes")
    }

    pub fn method(&self, name: &str) -> Option<&MethodReport> {
        self.methods.iter().find(|m| m.method == name)
    }
}

/// Root-mean-square error between two equally long state sequences, pooled
/// over steps and dimensions.
pub fn trajectory_rmse<T: Scalar>(truth: &[DVector<T>], pred: &[DVector<T>]) -> T {
    assert_eq!(truth.len(), pred.len());
    let d = truth[0].len();
    let mut sum = T::zero();
    for (a, b) in truth.iter().zip(pred.iter()) {
        sum += (a - b).norm_squared();
    }
    (sum / cast::<T>((truth.len() * d) as f64)).sqrt()
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

enum Predictor<'a> {
    Kefmd(&'a LiftedLTIModel<f64>),
    Edmd(&'a GeneratorEDMDModel<f64>, f64),
}

impl Predictor<'_> {
    fn predict(&self, x0: &DVector<f64>, horizon: usize) -> Vec<DVector<f64>> {
        match self {
            Predictor::Kefmd(m) => m.predict_trajectory(x0, horizon),
            Predictor::Edmd(m, dt) => m.predict_trajectory(x0, *dt, horizon),
        }
    }
}

fn evaluate_method(
    cfg: &ExperimentConfig,
    method: Method,
    predictor: &Predictor,
    truth: &[Vec<DVector<f64>>],
    grid: &[DVector<f64>],
    write_csv: bool,
) -> Result<MethodReport> {
    let start = Instant::now();
    let horizon = cfg.eval.horizon;
    let preds: Vec<Vec<DVector<f64>>> = grid
        .par_iter()
        .map(|x0| predictor.predict(x0, horizon))
        .collect();
    let rmse: Vec<f64> = truth
        .iter()
        .zip(preds.iter())
        .map(|(t, p)| trajectory_rmse(t, p))
        .collect();
    let (rmse_mean, rmse_std) = mean_std(&rmse);

    let (lifted_dim, diagnostics) = match predictor {
        Predictor::Kefmd(model) => {
            let flags = grid
                .iter()
                .filter(|x0| model.library.lift_with_flag(x0).1)
                .count();
            let residual = {
                let ds = load_dataset(cfg)?;
                let (xs, _) = ds.to_matrices();
                let zs = model.library.lift_matrix(&xs);
                ((&xs - &model.v * zs).norm_squared() / xs.ncols() as f64).sqrt()
            };
            let sup = diffeo_sup_error(cfg, model.library.diffeo().as_ref())?;
            (
                model.dim_lifted(),
                MethodDiagnostics {
                    spectral_abscissa: model
                        .lambdas
                        .iter()
                        .fold(f64::NEG_INFINITY, |a, b| a.max(*b)),
                    reconstruction_rmse: residual,
                    diffeo_sup_error: sup,
                    extrapolation_flags: flags,
                },
            )
        }
        Predictor::Edmd(model, _) => {
            let abscissa = model
                .l
                .complex_eigenvalues()
                .iter()
                .map(|e| e.re)
                .fold(f64::NEG_INFINITY, f64::max);
            let ds = load_dataset(cfg)?;
            let (xs, _) = ds.to_matrices();
            let mut se = 0.0;
            for c in 0..xs.ncols() {
                let x = xs.column(c).into_owned();
                se += (&x - &model.c * model.dict.eval(&x)).norm_squared();
            }
            (
                model.dict.size(),
                MethodDiagnostics {
                    spectral_abscissa: abscissa,
                    reconstruction_rmse: (se / xs.ncols() as f64).sqrt(),
                    diffeo_sup_error: None,
                    extrapolation_flags: 0,
                },
            )
        }
    };

    if write_csv {
        io::write_predictions(
            &cfg.out_dir.join(format!("pred_{}.csv", method.name())),
            &preds,
            cfg.data.dt,
        )?;
    }

    Ok(MethodReport {
        method: method.name().to_string(),
        lifted_dim,
        rmse_mean,
        rmse_std,
        wall_time_s: start.elapsed().as_secs_f64(),
        per_trajectory_rmse: rmse,
        diagnostics,
    })
}

/// Sup-error of the configured diffeomorphism against the closed-form
/// slow-manifold conjugacy on a 50×50 lattice; `None` when no closed form
/// applies. Also writes the per-dimension error grid CSV.
fn diffeo_sup_error(
    cfg: &ExperimentConfig,
    diffeo: &dyn Diffeomorphism<f64>,
) -> Result<Option<f64>> {
    if cfg.system.name != "ex1" {
        return Ok(None);
    }
    let mu = *cfg.system.params.get("mu").ok_or_else(|| {
        Error::Config("ex1 requires mu".into())
    })?;
    let lambda = *cfg.system.params.get("lambda").ok_or_else(|| {
        Error::Config("ex1 requires lambda".into())
    })?;
    let oracle = ExactDiffeoEx1::new(mu, lambda)?;
    let box_ = cfg.domain_box()?;
    let grid = grid_starts(&box_, 50);
    let mut out = String::from("x_1,x_2,err_1,err_2\n");
    let mut sup: f64 = 0.0;
    for x in &grid {
        let learned = diffeo.forward(x);
        let exact = oracle.forward(x);
        let e1 = (learned[0] - exact[0]).abs();
        let e2 = (learned[1] - exact[1]).abs();
        sup = sup.max(e1).max(e2);
        out.push_str(&format!(
            "{},{},{},{}\n",
            io::fmt_f64(x[0]),
            io::fmt_f64(x[1]),
            io::fmt_f64(e1),
            io::fmt_f64(e2)
        ));
    }
    io::atomic_write(&cfg.out_dir.join("diffeo_error_grid.csv"), out.as_bytes())?;
    Ok(Some(sup))
}

/// Evaluate previously built models on the grid protocol; writes ground
/// truth, per-method prediction CSVs, the RMSE table, and the report.
pub fn cmd_evaluate(cfg: &ExperimentConfig, methods: &[Method]) -> Result<EvalReport> {
    let spec = cfg.system_spec()?;
    let box_ = cfg.domain_box()?;
    let grid = grid_starts(&box_, cfg.eval.grid_per_dim);
    let horizon = cfg.eval.horizon;
    let dt = cfg.data.dt;

    let truth: Vec<Vec<DVector<f64>>> = grid
        .par_iter()
        .map(|x0| integrate(&spec, x0, dt, horizon).map(|t| t.states))
        .collect::<Result<_>>()?;
    io::write_trajectories(&cfg.out_dir.join("truth.csv"), &truth, dt, "x")?;

    let mut reports = Vec::new();
    for &method in methods {
        let report = match method {
            Method::Kefmd => {
                let model = io::load_model::<f64>(&cfg.model_path())?;
                evaluate_method(cfg, method, &Predictor::Kefmd(&model), &truth, &grid, true)?
            }
            Method::EdmdMonomial | Method::EdmdRbf => {
                let model = io::load_edmd_model::<f64>(&cfg.edmd_path(method))?;
                evaluate_method(cfg, method, &Predictor::Edmd(&model, dt), &truth, &grid, true)?
            }
        };
        reports.push(report);
    }

    let report = EvalReport {
        config_name: cfg.name.clone(),
        seed: cfg.seed,
        dt,
        horizon,
        n_trajectories: grid.len(),
        methods: reports,
    };
    write_report_files(cfg, &report)?;
    Ok(report)
}

fn write_report_files(cfg: &ExperimentConfig, report: &EvalReport) -> Result<()> {
    io::atomic_write(&cfg.report_path(), report.canonical_json().as_bytes())?;
    let mut table = String::from("method,traj_id,rmse\n");
    for m in &report.methods {
        for (i, r) in m.per_trajectory_rmse.iter().enumerate() {
            table.push_str(&format!("{},{},{}\n", m.method, i, io::fmt_f64(*r)));
        }
    }
    io::atomic_write(&cfg.out_dir.join("rmse_table.csv"), table.as_bytes())?;
    Ok(())
}

/// Consolidated comparison outcome.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CompareReport {
    pub report: EvalReport,
    /// Methods that failed, with their errors; the others still ran.
    pub failures: Vec<(String, String)>,
}

/// Run every requested method end-to-end (generate → fit → evaluate) and
/// emit the consolidated table. Per-method failures are reported without
/// aborting the remaining methods.
pub fn cmd_compare(cfg: &ExperimentConfig) -> Result<CompareReport> {
    cmd_generate(cfg)?;

    let spec = cfg.system_spec()?;
    let box_ = cfg.domain_box()?;
    let grid = grid_starts(&box_, cfg.eval.grid_per_dim);
    let truth: Vec<Vec<DVector<f64>>> = grid
        .par_iter()
        .map(|x0| integrate(&spec, x0, cfg.data.dt, cfg.eval.horizon).map(|t| t.states))
        .collect::<Result<_>>()?;
    io::write_trajectories(&cfg.out_dir.join("truth.csv"), &truth, cfg.data.dt, "x")?;

    let mut reports = Vec::new();
    let mut failures = Vec::new();
    for &method in &cfg.methods {
        let t0 = Instant::now();
        let result = (|| -> Result<MethodReport> {
            match method {
                Method::Kefmd => {
                    cmd_train(cfg)?;
                    cmd_build(cfg)?;
                    let model = io::load_model::<f64>(&cfg.model_path())?;
                    evaluate_method(cfg, method, &Predictor::Kefmd(&model), &truth, &grid, true)
                }
                Method::EdmdMonomial | Method::EdmdRbf => {
                    let model = cmd_fit_edmd(cfg, method)?;
                    evaluate_method(
                        cfg,
                        method,
                        &Predictor::Edmd(&model, cfg.data.dt),
                        &truth,
                        &grid,
                        true,
                    )
                }
            }
        })();
        match result {
            Ok(mut r) => {
                r.wall_time_s = t0.elapsed().as_secs_f64();
                reports.push(r);
            }
            Err(e) => failures.push((method.name().to_string(), e.to_string())),
        }
    }

    let report = EvalReport {
        config_name: cfg.name.clone(),
        seed: cfg.seed,
        dt: cfg.data.dt,
        horizon: cfg.eval.horizon,
        n_trajectories: grid.len(),
        methods: reports,
    };
    write_report_files(cfg, &report)?;
    write_compare_files(cfg, &report, &failures)?;
    Ok(CompareReport { report, failures })
}

fn write_compare_files(
    cfg: &ExperimentConfig,
    report: &EvalReport,
    failures: &[(String, String)],
) -> Result<()> {
    let mut csv = String::from("method,rmse_mean,rmse_std,lifted_dim\n");
    for m in &report.methods {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            m.method,
            io::fmt_f64(m.rmse_mean),
            io::fmt_f64(m.rmse_std),
            m.lifted_dim
        ));
    }
    io::atomic_write(&cfg.out_dir.join("compare.csv"), csv.as_bytes())?;

    #[derive(Serialize)]
    struct Row<'a> {
        method: &'a str,
        rmse_mean: f64,
        rmse_std: f64,
        lifted_dim: usize,
        wall_time_s: f64,
    }
    #[derive(Serialize)]
    struct FailureRow<'a> {
        method: &'a str,
        error: &'a str,
    }
    #[derive(Serialize)]
    struct Table<'a> {
        experiment: &'a str,
        results: Vec<Row<'a>>,
        failures: Vec<FailureRow<'a>>,
    }
    let table = Table {
        experiment: &cfg.name,
        results: report
            .methods
            .iter()
            .map(|m| Row {
                method: &m.method,
                rmse_mean: m.rmse_mean,
                rmse_std: m.rmse_std,
                lifted_dim: m.lifted_dim,
                wall_time_s: m.wall_time_s,
            })
            .collect(),
        failures: failures
            .iter()
            .map(|(m, e)| FailureRow { method: m, error: e })
            .collect(),
    };
    let toml = toml::to_string_pretty(&table)
        .map_err(|e| Error::Config(format!("compare table: {e}")))?;
    io::atomic_write(&cfg.out_dir.join("compare.toml"), toml.as_bytes())?;
    Ok(())
}

// ---------------------------------------------------------------------------
// oracle checks

/// Outcome of one oracle check.
#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &str, passed: bool, detail: String) -> CheckResult {
    CheckResult {
        name: name.to_string(),
        passed,
        detail,
    }
}

/// Closed-form and finite-difference oracle suites, independent of any
/// training artifacts. Each check carries its tolerance in code.
pub fn oracle_checks(seed: u64) -> Vec<CheckResult> {
    use rand::Rng;
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mu, lambda) = (-0.7f64, -0.3);
    let sys = VectorFieldSpec::ex1(mu, lambda);
    let a = sys.jacobian_linearization().expect("ex1 is Hurwitz");
    let oracle = ExactDiffeoEx1::new(mu, lambda).expect("no resonance");
    let box_ = DomainBox::centered(5.0, 2);

    // (a) conjugacy residual of the closed-form map at 1000 random points
    {
        let mut worst: f64 = 0.0;
        for _ in 0..1000 {
            let x = DVector::from_vec(vec![
                rng.random::<f64>() * 10.0 - 5.0,
                rng.random::<f64>() * 10.0 - 5.0,
            ]);
            let xdot = sys.eval_rhs(&x).unwrap();
            let l = loss_terms(
                &oracle,
                &a,
                &x,
                &xdot,
                ResidualForm::Premultiplied,
                &LossWeights::default(),
            )
            .unwrap();
            worst = worst.max(l.total);
        }
        out.push(check(
            "exact-diffeo conjugacy residual",
            worst <= 1e-12,
            format!("max residual {worst:.3e} (tol 1e-12)"),
        ));
    }

    // dataset shared by the lift checks
    let starts = boundary_starts(&box_, 24, seed);
    let ds = generate_dataset(&sys, &box_, &starts, 0.065, 199).expect("dataset");
    let lib = EigenfunctionLibrary::build(&a, &[5, 5], Arc::new(oracle.clone()), &ds)
        .expect("library");

    // (b) reconstruction through the exact lift
    {
        let (xs, _) = ds.to_matrices();
        let lib = Arc::new(lib.clone());
        let (_, diag) = LiftedLTIModel::fit(lib, &xs, 0.065, None).expect("fit");
        out.push(check(
            "exact-lift reconstruction rmse",
            diag.training_rmse <= 1e-6,
            format!("rmse {:.3e} (tol 1e-6)", diag.training_rmse),
        ));
    }

    // (c) eigenfunction evolution along 20 integrated trajectories
    {
        let mut worst: f64 = 0.0;
        for _ in 0..20 {
            let x0 = DVector::from_vec(vec![
                rng.random::<f64>() * 6.0 - 3.0,
                rng.random::<f64>() * 6.0 - 3.0,
            ]);
            let dt = 0.002;
            let steps = 500;
            let traj = integrate(&sys, &x0, dt, steps).unwrap();
            let z0 = lib.lift(&x0);
            let zt = lib.lift(traj.states.last().unwrap());
            let t = dt * steps as f64;
            for i in 0..lib.dim_lifted() {
                let expect = (lib.library.lambdas[i] * t).exp() * z0[i];
                worst = worst.max((zt[i] - expect).abs() / z0[i].abs().max(1.0));
            }
        }
        out.push(check(
            "eigenfunction evolution along flows",
            worst <= 1e-6,
            format!("max relative deviation {worst:.3e} (tol 1e-6)"),
        ));
    }

    // flow round trip on 1000 points
    {
        let mut flow_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let mut flow = FlowModel::<f64>::new(2, 7, &[24, 24], 5.0, &mut flow_rng).unwrap();
        let mut p = Vec::new();
        flow.write_params(&mut p);
        for v in p.iter_mut() {
            *v = 0.2 * (flow_rng.random::<f64>() - 0.5);
        }
        flow.read_params(&p);
        let mut worst: f64 = 0.0;
        for _ in 0..1000 {
            let x = DVector::from_vec(vec![
                rng.random::<f64>() * 10.0 - 5.0,
                rng.random::<f64>() * 10.0 - 5.0,
            ]);
            let back = flow.inverse(&flow.forward(&x).unwrap()).unwrap();
            worst = worst.max((back - &x).norm());
        }
        out.push(check(
            "flow round-trip",
            worst <= 1e-10,
            format!("max ‖x − d̂⁻¹(d̂(x))‖ {worst:.3e} (tol 1e-10)"),
        ));

        // analytic Jacobians vs central differences
        let mut worst_j: f64 = 0.0;
        let h = 1e-6;
        for _ in 0..50 {
            let x = DVector::from_vec(vec![
                rng.random::<f64>() * 4.0 - 2.0,
                rng.random::<f64>() * 4.0 - 2.0,
            ]);
            let j = FlowModel::jacobian(&flow, &x);
            for c in 0..2 {
                let mut xp = x.clone();
                xp[c] += h;
                let mut xm = x.clone();
                xm[c] -= h;
                let fd = (flow.forward(&xp).unwrap() - flow.forward(&xm).unwrap()) / (2.0 * h);
                for r in 0..2 {
                    worst_j =
                        worst_j.max((j[(r, c)] - fd[r]).abs() / j[(r, c)].abs().max(1.0));
                }
            }
        }
        let dict = Dictionary::<f64>::monomial(2, 4);
        for _ in 0..20 {
            let x = DVector::from_vec(vec![
                rng.random::<f64>() * 2.0 - 1.0,
                rng.random::<f64>() * 2.0 - 1.0,
            ]);
            let g = dict.grad(&x);
            for c in 0..2 {
                let mut xp = x.clone();
                xp[c] += h;
                let mut xm = x.clone();
                xm[c] -= h;
                let fd = (dict.eval(&xp) - dict.eval(&xm)) / (2.0 * h);
                for r in 0..dict.size() {
                    worst_j = worst_j.max((g[(r, c)] - fd[r]).abs() / g[(r, c)].abs().max(1.0));
                }
            }
        }
        out.push(check(
            "analytic Jacobians vs finite differences",
            worst_j < 1e-6,
            format!("max relative error {worst_j:.3e} (tol 1e-6)"),
        ));

        // loss parameter gradient vs finite differences
        let mut worst_g: f64 = 0.0;
        {
            let mut small_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6a0d);
            let mut small = FlowModel::<f64>::new(2, 2, &[6, 6], 5.0, &mut small_rng).unwrap();
            let mut p = Vec::new();
            small.write_params(&mut p);
            for v in p.iter_mut() {
                *v = 0.3 * (small_rng.random::<f64>() - 0.5);
            }
            small.read_params(&p);
            let b = 4;
            let xs = DMatrix::from_fn(2, b, |_, _| rng.random::<f64>() * 4.0 - 2.0);
            let mut xdots = DMatrix::zeros(2, b);
            for c in 0..b {
                xdots.set_column(c, &sys.eval_rhs(&xs.column(c).into_owned()).unwrap());
            }
            let weights = LossWeights::default();
            let mut grad = DVector::zeros(small.param_count());
            crate::train::batch_loss_and_grads(
                &small,
                &a,
                &xs,
                &xdots,
                ResidualForm::Premultiplied,
                &weights,
                &mut grad,
            )
            .unwrap();
            let base = small.params_flat();
            let hp = 1e-6;
            let total = |f: &FlowModel<f64>| -> f64 {
                let mut g = DVector::zeros(base.len());
                let (c, j, o) = crate::train::batch_loss_and_grads(
                    f,
                    &a,
                    &xs,
                    &xdots,
                    ResidualForm::Premultiplied,
                    &weights,
                    &mut g,
                )
                .unwrap();
                c + j + o
            };
            for i in (0..base.len()).step_by(23) {
                let mut pp = base.clone();
                pp[i] += hp;
                small.read_params(pp.as_slice());
                let lp = total(&small);
                pp[i] -= 2.0 * hp;
                small.read_params(pp.as_slice());
                let lm = total(&small);
                small.read_params(base.as_slice());
                let fd = (lp - lm) / (2.0 * hp);
                worst_g = worst_g.max((grad[i] - fd).abs() / grad[i].abs().max(1.0));
            }
        }
        out.push(check(
            "loss gradients vs finite differences",
            worst_g < 1e-4,
            format!("max relative error {worst_g:.3e} (tol 1e-4)"),
        ));
    }

    // spectral/discretization identities
    {
        let lambdas: Vec<f64> = lib.lambdas().to_vec();
        let dt = 0.065;
        let lambda_d = crate::kefmd::discretize(&lambdas, dt);
        let mut worst_exp: f64 = 0.0;
        for (ld, l) in lambda_d.iter().zip(lambdas.iter()) {
            worst_exp = worst_exp.max((ld - (l * dt).exp()).abs());
        }
        let z = DVector::from_fn(lambdas.len(), |i, _| 1.0 / (i + 1) as f64);
        let (ka, kb) = (9i32, 14i32);
        let mut semigroup_err: f64 = 0.0;
        let mut cont_err: f64 = 0.0;
        for (i, ld) in lambda_d.iter().enumerate() {
            let joint = ld.powi(ka + kb) * z[i];
            let split = ld.powi(ka) * (ld.powi(kb) * z[i]);
            semigroup_err = semigroup_err.max((joint - split).abs());
        }
        for k in [1usize, 25, 100] {
            let t = dt * k as f64;
            for (i, (l, ld)) in lambdas.iter().zip(lambda_d.iter()).enumerate() {
                let mut v = z[i];
                for _ in 0..k {
                    v *= ld;
                }
                cont_err = cont_err.max(((l * t).exp() * z[i] - v).abs());
            }
        }
        out.push(check(
            "discretization identities",
            worst_exp <= 1e-15 && semigroup_err <= 1e-13 && cont_err <= 1e-12,
            format!(
                "exp {worst_exp:.3e} (tol 1e-15), semigroup {semigroup_err:.3e} (tol 1e-13), discrete/continuous {cont_err:.3e} (tol 1e-12)"
            ),
        ));
    }

    out
}

/// A view of the key config numbers, for logs.
pub fn describe(cfg: &ExperimentConfig) -> BTreeMap<String, String> {
    let mut m = BTreeMap::new();
    m.insert("name".into(), cfg.name.clone());
    m.insert("system".into(), cfg.system.name.clone());
    m.insert("seed".into(), cfg.seed.to_string());
    m.insert(
        "n_pairs".into(),
        (cfg.data.n_trajectories * (cfg.data.steps + 1)).to_string(),
    );
    m.insert("epochs".into(), cfg.train.epochs.to_string());
    m.insert(
        "lifted_dim".into(),
        cfg.lift
            .max_powers
            .iter()
            .map(|p| p + 1)
            .product::<usize>()
            .to_string(),
    );
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_parse_and_validate() {
        let ex1 = ExperimentConfig::load("ex1").unwrap();
        assert_eq!(ex1.data.n_trajectories * (ex1.data.steps + 1), 4800);
        assert_eq!(
            ex1.lift.max_powers.iter().map(|p| p + 1).product::<usize>(),
            36
        );
        let ex3 = ExperimentConfig::load("ex3").unwrap();
        assert_eq!(ex3.data.n_trajectories * (ex3.data.steps + 1), 11_200);
        assert_eq!(
            ex3.lift.max_powers.iter().map(|p| p + 1).product::<usize>(),
            196
        );
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut text = PRESET_EX1.to_string();
        text.push_str("\n[bogus]\nkey = 1\n");
        let err = ExperimentConfig::from_toml(&text).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn scale_shrinks_training_effort_only() {
        let mut cfg = ExperimentConfig::load("ex1").unwrap();
        cfg.apply_scale(0.25).unwrap();
        assert_eq!(cfg.data.n_trajectories, 6);
        assert_eq!(cfg.data.steps, 199);
        assert_eq!(cfg.train.epochs, 50);
        assert_eq!(cfg.eval.grid_per_dim, 10);
        assert_eq!(cfg.eval.horizon, 200);
    }

    #[test]
    fn oracle_suite_passes() {
        for c in oracle_checks(3) {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }
}
