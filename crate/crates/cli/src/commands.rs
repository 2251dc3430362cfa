use std::path::PathBuf;

use clap::Args;
use rand::Rng;
use serde::Serialize;

use sae_core::bootstrap::{cmse_bootstrap, BootstrapPlan};
use sae_core::cmse::{analytical_report, CmseBreakdown};
use sae_core::estimate::{fit, Method};
use sae_core::family::Family;
use sae_core::model::{AreaObservation, Dataset, Hyperparameters};
use sae_core::predict::eb_predict;
use sae_core::rng::{domain, stream};
use sae_core::sim::{figure_preset, linear_grid, ratio_curves, run_table, CurvePreset, RatioParams, SimConfig, DEFAULT_ALPHAS};

use crate::artifact::FitArtifact;
use crate::error::{CliError, CliResult};
use crate::input::{parse_areas, read_file};
use crate::manifest::ManifestBuilder;

fn parse_family(s: &str) -> Result<Family, String> {
    s.parse().map_err(|e: sae_core::error::SaeError| e.to_string())
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|e: sae_core::error::SaeError| e.to_string())
}

fn csv_writer() -> csv::Writer<Vec<u8>> {
    csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new())
}

fn csv_bytes(w: csv::Writer<Vec<u8>>) -> CliResult<Vec<u8>> {
    w.into_inner().map_err(|e| CliError::Input(e.to_string()))
}

fn csv_err(e: csv::Error) -> CliError {
    CliError::Input(e.to_string())
}

#[derive(Debug, Args, Serialize)]
pub struct FitArgs {
    #[arg(long, value_parser = parse_family)]
    pub family: Family,
    #[arg(long, alias = "method", value_parser = parse_method, default_value = "gt")]
    pub estimator: Method,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Recorded in the manifest; fitting itself is deterministic.
    #[arg(long, env = "SAE_SEED")]
    pub seed: Option<u64>,
}

pub fn cmd_fit(args: &FitArgs) -> CliResult<()> {
    let mut manifest = ManifestBuilder::new("fit", args, args.seed);
    let bytes = read_file(&args.data)?;
    manifest.input(&args.data, &bytes);
    let dataset = parse_areas(&bytes, args.family)?;
    let result = fit(&dataset, args.estimator, None)?;
    let artifact = FitArtifact::new(args.family, &result);
    let mut text = serde_json::to_string_pretty(&artifact).map_err(|e| CliError::Input(e.to_string()))?;
    text.push('\n');
    manifest.finish(&args.out, text.as_bytes())?;
    if !result.converged {
        return Err(CliError::NonConvergence("hyperparameter fit did not converge".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CmseChoice {
    Analytical,
    Bootstrap,
}

#[derive(Debug, Args, Serialize)]
pub struct PredictArgs {
    #[arg(long)]
    pub fit: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "analytical")]
    pub cmse: CmseChoice,
    /// Bootstrap replications B.
    #[arg(long)]
    pub reps: Option<usize>,
    #[arg(long, env = "SAE_SEED")]
    pub seed: Option<u64>,
    /// Multiplies cmse_hat and mse_hat in the output only.
    #[arg(long, default_value_t = 1.0)]
    pub scale: f64,
}

struct Row {
    cmse: CmseBreakdown,
    flags: Vec<String>,
}

pub fn cmd_predict(args: &PredictArgs) -> CliResult<()> {
    if !(args.scale > 0.0 && args.scale.is_finite()) {
        return Err(CliError::Input(format!("--scale must be positive, got {}", args.scale)));
    }
    let mut manifest = ManifestBuilder::new("predict", args, args.seed);
    let fit_bytes = read_file(&args.fit)?;
    manifest.input(&args.fit, &fit_bytes);
    let artifact = FitArtifact::parse(&fit_bytes)?;
    let data_bytes = read_file(&args.data)?;
    manifest.input(&args.data, &data_bytes);
    let dataset = parse_areas(&data_bytes, artifact.family)?;
    let fit_result = artifact.to_fit();
    if !fit_result.converged {
        return Err(CliError::NonConvergence("fit artifact is not converged".into()));
    }
    let boundary = fit_result.at_boundary;
    let rows: Vec<Row> = match args.cmse {
        CmseChoice::Analytical => {
            if fit_result.method != Method::Gt {
                return Err(CliError::Unsupported(
                    "analytical CMSE needs a GT fit; use --cmse bootstrap for ML fits".into(),
                ));
            }
            analytical_report(&dataset, &fit_result)?
                .into_iter()
                .map(|cmse| Row { cmse, flags: Vec::new() })
                .collect()
        }
        CmseChoice::Bootstrap => {
            let reps = args.reps.ok_or_else(|| CliError::Input("--cmse bootstrap requires --reps".into()))?;
            let seed = args.seed.ok_or_else(|| CliError::Input("--cmse bootstrap requires --seed (or SAE_SEED)".into()))?;
            (0..dataset.m())
                .map(|i| {
                    let plan = BootstrapPlan::new(i, reps, seed, fit_result.method);
                    let est = cmse_bootstrap(&dataset, &fit_result, &plan)?;
                    let mut flags = Vec::new();
                    if est.failures > 0 {
                        flags.push(format!("failed-refits={}", est.failures));
                    }
                    if est.low_replication_warning {
                        flags.push("low-replications".to_string());
                    }
                    Ok(Row { cmse: est.breakdown, flags })
                })
                .collect::<CliResult<Vec<Row>>>()?
        }
    };
    let preds = eb_predict(&dataset, &fit_result)?;
    let mut w = csv_writer();
    w.write_record(["area_id", "n", "y", "eb", "cmse_hat", "mse_hat", "rd_percent", "flags"]).map_err(csv_err)?;
    for (p, mut row) in preds.iter().zip(rows) {
        if row.cmse.negative {
            row.flags.insert(0, "negative-cmse".to_string());
        }
        if boundary {
            row.flags.insert(0, "boundary-nu".to_string());
        }
        w.write_record([
            p.area_id.clone(),
            p.n.to_string(),
            p.y.to_string(),
            p.xi_hat.to_string(),
            (row.cmse.cmse_hat * args.scale).to_string(),
            (row.cmse.mse_hat * args.scale).to_string(),
            row.cmse.rd_percent.to_string(),
            row.flags.join(";"),
        ])
        .map_err(csv_err)?;
    }
    manifest.finish(&args.out, &csv_bytes(w)?)
}

#[derive(Debug, Args, Serialize)]
pub struct SimulateArgs {
    #[arg(long, value_parser = parse_family, default_value = "poisson-gamma")]
    pub family: Family,
    #[arg(long, env = "SAE_SEED", default_value_t = 1)]
    pub seed: u64,
    /// R = 10000, T = 2000 instead of the desk-scale R = 2000, T = 200.
    #[arg(long)]
    pub full_scale: bool,
    #[arg(long)]
    pub r_true: Option<usize>,
    #[arg(long)]
    pub t_eval: Option<usize>,
    #[arg(long)]
    pub boot: Option<usize>,
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long)]
    pub n: Option<f64>,
    #[arg(long)]
    pub nu: Option<f64>,
    #[arg(long)]
    pub linear_predictor: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    pub alphas: Option<Vec<f64>>,
    #[arg(long)]
    pub out: PathBuf,
}

impl SimulateArgs {
    pub fn config(&self) -> SimConfig {
        let base = if self.full_scale {
            SimConfig::full_scale(self.family, self.seed)
        } else {
            SimConfig::desk(self.family, self.seed)
        };
        SimConfig {
            m: self.m.unwrap_or(base.m),
            n: self.n.unwrap_or(base.n),
            nu_true: self.nu.unwrap_or(base.nu_true),
            linear_predictor: self.linear_predictor.unwrap_or(base.linear_predictor),
            alphas: self.alphas.clone().unwrap_or_else(|| DEFAULT_ALPHAS.to_vec()),
            r_true: self.r_true.unwrap_or(base.r_true),
            t_eval: self.t_eval.unwrap_or(base.t_eval),
            b_boot: self.boot.unwrap_or(base.b_boot),
            ..base
        }
    }
}

pub fn cmd_simulate(args: &SimulateArgs) -> CliResult<()> {
    let config = args.config();
    let mut manifest = ManifestBuilder::new("simulate", &config, Some(config.seed));
    let report = run_table(&config)?;
    let mut w = csv_writer();
    w.write_record(["alpha", "y_quantile", "cmse_true_x100", "rb_gt", "cv_gt", "rb_ml", "cv_ml"]).map_err(csv_err)?;
    for r in &report.rows {
        w.write_record([
            r.alpha.to_string(),
            r.y_quantile.to_string(),
            (100.0 * r.cmse_true.cmse).to_string(),
            r.gt.rb.to_string(),
            r.gt.cv.to_string(),
            r.ml.rb.to_string(),
            r.ml.cv.to_string(),
        ])
        .map_err(csv_err)?;
    }
    manifest.details(&report);
    manifest.finish(&args.out, &csv_bytes(w)?)
}

#[derive(Debug, Args, Serialize)]
pub struct RatioArgs {
    #[arg(long, value_parser = parse_family)]
    pub family: Family,
    /// Preset curves (1: Ratio1, 2: Ratio2 at m = 10, 15, 20).
    #[arg(long, conflicts_with_all = ["order", "n", "mean", "nu", "m_areas"])]
    pub figure: Option<u8>,
    #[arg(long)]
    pub order: Option<u8>,
    #[arg(long)]
    pub n: Option<f64>,
    /// Prior mean m.
    #[arg(long)]
    pub mean: Option<f64>,
    #[arg(long)]
    pub nu: Option<f64>,
    #[arg(long)]
    pub m_areas: Option<usize>,
    /// `lo:hi` range of y values.
    #[arg(long)]
    pub grid: Option<String>,
    #[arg(long, default_value_t = 200)]
    pub points: usize,
    /// Recorded in the manifest; curves are deterministic.
    #[arg(long, env = "SAE_SEED")]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_range(s: &str) -> CliResult<(f64, f64)> {
    let bad = || CliError::Input(format!("--grid expects lo:hi, got '{s}'"));
    let (a, b) = s.split_once(':').ok_or_else(bad)?;
    let lo: f64 = a.trim().parse().map_err(|_| bad())?;
    let hi: f64 = b.trim().parse().map_err(|_| bad())?;
    if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
        return Err(bad());
    }
    Ok((lo, hi))
}

impl RatioArgs {
    fn presets(&self) -> CliResult<Vec<CurvePreset>> {
        let mut presets = match self.figure {
            Some(f) => figure_preset(f, self.family, self.points)?,
            None => {
                let need = |v: Option<f64>, name: &str| v.ok_or_else(|| CliError::Input(format!("--{name} is required without --figure")));
                let params = RatioParams {
                    n: need(self.n, "n")?,
                    mean: need(self.mean, "mean")?,
                    nu: need(self.nu, "nu")?,
                    m_areas: self.m_areas.unwrap_or(10),
                };
                let grid = self.grid.as_deref().ok_or_else(|| CliError::Input("--grid is required without --figure".into()))?;
                let (lo, hi) = parse_range(grid)?;
                vec![CurvePreset { order: self.order.unwrap_or(1), params, grid: linear_grid(lo, hi, self.points) }]
            }
        };
        if let (Some(g), Some(_)) = (&self.grid, self.figure) {
            let (lo, hi) = parse_range(g)?;
            for p in &mut presets {
                p.grid = linear_grid(lo, hi, self.points);
            }
        }
        Ok(presets)
    }
}

pub fn cmd_ratio(args: &RatioArgs) -> CliResult<()> {
    let presets = args.presets()?;
    let manifest = ManifestBuilder::new("ratio", &presets, args.seed);
    let mut w = csv_writer();
    w.write_record(["y", "ratio", "family", "order", "m"]).map_err(csv_err)?;
    for p in &presets {
        for (y, ratio) in ratio_curves(args.family, p.order, &p.grid, &p.params)? {
            w.write_record([
                y.to_string(),
                ratio.to_string(),
                args.family.to_string(),
                p.order.to_string(),
                p.params.m_areas.to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    manifest.finish(&args.out, &csv_bytes(w)?)
}

#[derive(Debug, Args, Serialize)]
pub struct GenerateArgs {
    #[arg(long, value_parser = parse_family)]
    pub family: Family,
    #[arg(long, default_value_t = 25)]
    pub m: usize,
    #[arg(long, default_value_t = 10.0)]
    pub n: f64,
    /// Coefficients; x1 is the intercept, further covariates are uniform on (0, 1).
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_value = "0")]
    pub beta: Vec<f64>,
    #[arg(long, default_value_t = 15.0)]
    pub nu: f64,
    #[arg(long, env = "SAE_SEED", default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Synthetic area data at known hyperparameters. Discrete families are written
/// as counts `z` so the file is exact.
pub fn cmd_generate(args: &GenerateArgs) -> CliResult<()> {
    let eta = Hyperparameters::new(args.beta.clone(), args.nu);
    eta.validate(args.family)?;
    let mut rng = stream(args.seed, domain::FIXTURE, 0);
    let areas: Vec<AreaObservation> = (0..args.m)
        .map(|i| {
            let mut x = vec![1.0];
            x.extend((1..args.beta.len()).map(|_| (rng.random::<f64>() * 1000.0).round() / 1000.0));
            AreaObservation::new(format!("a{:03}", i + 1), 0.0, args.n, x)
        })
        .collect();
    let template = Dataset::new(args.family, areas)?;
    let data = template.resample(&eta, None, &mut rng);
    let mut w = csv_writer();
    let resp = if args.family.is_discrete() { "z" } else { "y" };
    let mut header = vec!["area_id".to_string(), "n".to_string(), resp.to_string()];
    header.extend((1..=args.beta.len()).map(|k| format!("x{k}")));
    w.write_record(&header).map_err(csv_err)?;
    for a in data.areas() {
        let r = if args.family.is_discrete() { (a.y * a.n).round() } else { a.y };
        let mut rec = vec![a.area_id.clone(), a.n.to_string(), r.to_string()];
        rec.extend(a.x.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(csv_err)?;
    }
    let manifest = ManifestBuilder::new("generate", args, Some(args.seed));
    manifest.finish(&args.out, &csv_bytes(w)?)
}
