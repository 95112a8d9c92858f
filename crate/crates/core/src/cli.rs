//! Batch entry points behind the `kiv` binary.
//!
//! Every command resolves its parameters into a [`RunConfig`] (config file
//! first, then command-line flags on top), writes that resolved config to
//! `<out>/config.json`, and writes its results next to it. Outputs depend
//! only on inputs, config, and seed.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bootstrap::{confidence_band, run_bootstrap, Statistic, DEFAULT_DRAWS};
use crate::dgp::{simulate_iv, DgpKind, DgpSpec};
use crate::diagnostics::{
    check_regime, check_sample_size, fit_decay, local_width, spectral_report, RegimeParams, RegimeVerdict,
};
use crate::error::{Error, Result};
use crate::estimator::{fit_kiv, Dataset, FitState, RegPair};
use crate::kernels::{kernel_bound, KernelSpec, Point, Ranking};

/// Fully resolved parameters of one run. Mirrors the command-line flags.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel_x: Option<KernelSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel_z: Option<KernelSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bootstrap: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chi: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub statistic: Option<Statistic>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dgp: Option<DgpSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regime: Option<RegimeParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spectrum: Option<PathBuf>,
}

macro_rules! overlay {
    ($dst:expr, $src:expr, $($field:ident),*) => {
        $( if $src.$field.is_some() { $dst.$field = $src.$field.clone(); } )*
    };
}

impl RunConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("bad config {}: {e}", path.display())))
    }

    /// Fields set in `other` replace those in `self`.
    pub fn overlay(&mut self, other: &RunConfig) {
        overlay!(
            self, other, input, lambda, mu, kernel_x, kernel_z, bootstrap, chi, seed, out, grid, reps, threads, kappa,
            statistic, dgp, regime, spectrum
        );
    }

    fn fill_defaults(&mut self) {
        self.kernel_x.get_or_insert(KernelSpec::Linear);
        self.kernel_z.get_or_insert(KernelSpec::Linear);
        self.seed.get_or_insert(0);
    }

    fn fill_bootstrap_defaults(&mut self) {
        self.bootstrap.get_or_insert(DEFAULT_DRAWS);
        self.chi.get_or_insert(0.05);
        self.statistic.get_or_insert(Statistic::RkhsNorm);
    }

    fn reg(&self) -> Result<RegPair> {
        let lambda = self.lambda.ok_or_else(|| Error::Config("--lambda is required".into()))?;
        let mu = self.mu.ok_or_else(|| Error::Config("--mu is required".into()))?;
        RegPair::new(lambda, mu).map_err(|e| Error::Config(e.to_string()))
    }

    fn out_dir(&self) -> Result<&Path> {
        self.out.as_deref().ok_or_else(|| Error::Config("--out is required".into()))
    }

    fn kernels(&self) -> (KernelSpec, KernelSpec) {
        (self.kernel_x.unwrap_or(KernelSpec::Linear), self.kernel_z.unwrap_or(KernelSpec::Linear))
    }
}

#[derive(Debug, Parser)]
#[command(name = "kiv", version, about = "Kernel instrumental variable regression with uniform confidence bands")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit and write predictions at the training points (plus --grid).
    Fit(Flags),
    /// Fit, bootstrap, and write the uniform confidence band.
    Band(Flags),
    /// Monte Carlo coverage of the band on a synthetic design.
    Coverage(Flags),
    /// Spectra, effective dimensions, and regime verdicts.
    Diagnose(Flags),
    /// Draw a synthetic dataset and write it as CSV.
    Simulate(Flags),
}

#[derive(Debug, Clone, Default, Args)]
pub struct Flags {
    /// Data CSV with header y, x1..xp, z1..zq (or x_rank / z_rank).
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// JSON config; flags given on the command line take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub mu: Option<f64>,
    /// linear | poly:<d>:<c> | gaussian:<lengthscale> | kendall
    #[arg(long = "kernel-x")]
    pub kernel_x: Option<KernelSpec>,
    #[arg(long = "kernel-z")]
    pub kernel_z: Option<KernelSpec>,
    /// Number of bootstrap draws B.
    #[arg(long)]
    pub bootstrap: Option<usize>,
    #[arg(long)]
    pub chi: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Extra evaluation points (CSV with x1..xp or x_rank).
    #[arg(long)]
    pub grid: Option<PathBuf>,
    #[arg(long)]
    pub reps: Option<usize>,
    #[arg(long)]
    pub threads: Option<usize>,
    /// Override the kernel bound kappa_x used for the sup-norm band.
    #[arg(long)]
    pub kappa: Option<f64>,
    /// rkhs_norm (default) | projector_form
    #[arg(long, value_parser = parse_statistic)]
    pub statistic: Option<Statistic>,
    /// Eigenvalue file (one value per line) for a standalone decay fit.
    #[arg(long)]
    pub spectrum: Option<PathBuf>,
    #[command(flatten)]
    pub dgp: DgpFlags,
    #[command(flatten)]
    pub regime: RegimeFlags,
}

#[derive(Debug, Clone, Default, Args)]
pub struct DgpFlags {
    /// Synthetic design kind: linear | nonlinear.
    #[arg(long = "dgp", value_parser = parse_dgp_kind)]
    pub kind: Option<DgpKind>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub p: Option<usize>,
    #[arg(long)]
    pub q: Option<usize>,
    #[arg(long = "rho-e")]
    pub rho_e: Option<f64>,
    #[arg(long = "sigma-bar")]
    pub sigma_bar: Option<f64>,
    /// Use the covariates as their own instruments.
    #[arg(long = "z-equals-x")]
    pub z_equals_x: bool,
}

#[derive(Debug, Clone, Default, Args)]
pub struct RegimeFlags {
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long = "rho-x")]
    pub rho_x: Option<f64>,
    #[arg(long = "rho-z")]
    pub rho_z: Option<f64>,
    #[arg(long)]
    pub iota: Option<f64>,
}

fn parse_statistic(s: &str) -> std::result::Result<Statistic, String> {
    match s {
        "rkhs_norm" | "rkhs" => Ok(Statistic::RkhsNorm),
        "projector_form" | "projector" => Ok(Statistic::ProjectorForm),
        _ => Err(format!("unknown statistic {s:?}")),
    }
}

fn parse_dgp_kind(s: &str) -> std::result::Result<DgpKind, String> {
    match s {
        "linear" => Ok(DgpKind::Linear),
        "nonlinear" => Ok(DgpKind::Nonlinear),
        _ => Err(format!("unknown dgp kind {s:?}")),
    }
}

impl Flags {
    /// Config file (if any) overlaid with the flags set on the command line.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_json_file(path)?,
            None => RunConfig::default(),
        };
        let flags = RunConfig {
            input: self.input.clone(),
            lambda: self.lambda,
            mu: self.mu,
            kernel_x: self.kernel_x,
            kernel_z: self.kernel_z,
            bootstrap: self.bootstrap,
            chi: self.chi,
            seed: self.seed,
            out: self.out.clone(),
            grid: self.grid.clone(),
            reps: self.reps,
            threads: self.threads,
            kappa: self.kappa,
            statistic: self.statistic,
            spectrum: self.spectrum.clone(),
            dgp: None,
            regime: None,
        };
        cfg.overlay(&flags);
        self.merge_dgp(&mut cfg)?;
        self.merge_regime(&mut cfg)?;
        Ok(cfg)
    }

    fn merge_dgp(&self, cfg: &mut RunConfig) -> Result<()> {
        let d = &self.dgp;
        let any = d.kind.is_some()
            || d.n.is_some()
            || d.p.is_some()
            || d.q.is_some()
            || d.rho_e.is_some()
            || d.sigma_bar.is_some()
            || d.z_equals_x;
        if !any {
            return Ok(());
        }
        let mut spec = cfg.dgp.clone().unwrap_or_else(|| DgpSpec::linear(200, 2, 3, 0.5, 1.0, 0));
        if let Some(k) = d.kind {
            spec.kind = k;
        }
        if let Some(n) = d.n {
            spec.n = n;
        }
        if let Some(p) = d.p {
            spec.p = p;
            spec.gamma = None;
            spec.first_stage = None;
        }
        if let Some(q) = d.q {
            spec.q = q;
            spec.first_stage = None;
        }
        if let Some(r) = d.rho_e {
            spec.rho_e = r;
        }
        if let Some(s) = d.sigma_bar {
            spec.sigma_bar = s;
        }
        if d.z_equals_x {
            spec.z_equals_x = true;
        }
        if let Some(seed) = self.seed {
            spec.seed = seed;
        }
        cfg.dgp = Some(spec);
        Ok(())
    }

    fn merge_regime(&self, cfg: &mut RunConfig) -> Result<()> {
        let r = &self.regime;
        let vals = [r.alpha, r.beta, r.rho_x, r.rho_z, r.iota];
        if vals.iter().all(Option::is_none) {
            return Ok(());
        }
        let base = cfg.regime;
        let pick = |flag: Option<f64>, from: Option<f64>, name: &str| {
            flag.or(from).ok_or_else(|| Error::Config(format!("regime parameter --{name} is missing")))
        };
        cfg.regime = Some(RegimeParams {
            alpha: pick(r.alpha, base.map(|b| b.alpha), "alpha")?,
            beta: r.beta.or(base.map(|b| b.beta)).unwrap_or(0.5),
            rho_x: pick(r.rho_x, base.map(|b| b.rho_x), "rho-x")?,
            rho_z: pick(r.rho_z, base.map(|b| b.rho_z), "rho-z")?,
            iota: pick(r.iota, base.map(|b| b.iota), "iota")?,
        });
        Ok(())
    }
}

/// Parses args, configures logging and threads, runs the command, and returns the exit code.
pub fn run_from_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 4 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: &Command) -> Result<()> {
    let flags = match cmd {
        Command::Fit(f) | Command::Band(f) | Command::Coverage(f) | Command::Diagnose(f) | Command::Simulate(f) => f,
    };
    let cfg = flags.resolve()?;
    if let Some(t) = cfg.threads {
        // Ignore the error when a global pool already exists (repeated in-process runs).
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
    }
    match cmd {
        Command::Fit(_) => cmd_fit(&cfg),
        Command::Band(_) => cmd_band(&cfg),
        Command::Coverage(_) => cmd_coverage(&cfg),
        Command::Diagnose(_) => cmd_diagnose(&cfg),
        Command::Simulate(_) => cmd_simulate(&cfg),
    }
}

// ---------------------------------------------------------------------------
// CSV formats

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Columns {
    Vector(usize),
    Ranking,
}

fn input_err(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Input(format!("{}: {msg}", path.display()))
}

/// Column layout for one prefix (`x` or `z`) given the header names that carry it.
fn layout(names: &[&str], prefix: char, path: &Path) -> Result<Columns> {
    if names == [format!("{prefix}_rank").as_str()] {
        return Ok(Columns::Ranking);
    }
    if names.is_empty() {
        return Err(input_err(path, format!("no {prefix} columns in header")));
    }
    for (i, name) in names.iter().enumerate() {
        if *name != format!("{prefix}{}", i + 1) {
            return Err(input_err(path, format!("expected column {prefix}{}, found {name:?}", i + 1)));
        }
    }
    Ok(Columns::Vector(names.len()))
}

fn parse_point(fields: &[&str], cols: Columns, path: &Path, line: usize) -> Result<Point> {
    match cols {
        Columns::Ranking => {
            fields[0].parse::<Ranking>().map(Point::Ranking).map_err(|e| input_err(path, format!("line {line}: {e}")))
        }
        Columns::Vector(_) => fields
            .iter()
            .map(|f| {
                f.trim()
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| input_err(path, format!("line {line}: bad number {f:?}")))
            })
            .collect::<Result<Vec<_>>>()
            .map(Point::Vector),
    }
}

fn width(c: Columns) -> usize {
    match c {
        Columns::Vector(p) => p,
        Columns::Ranking => 1,
    }
}

fn csv_reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    let file = fs::File::open(path).map_err(|e| input_err(path, e))?;
    Ok(csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(file))
}

/// Reads a dataset CSV: `y`, then `x1..xp` or `x_rank`, then `z1..zq` or `z_rank`.
pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let mut rdr = csv_reader(path)?;
    let header: Vec<String> = rdr.headers().map_err(|e| input_err(path, e))?.iter().map(String::from).collect();
    if header.first().map(String::as_str) != Some("y") {
        return Err(input_err(path, "first column must be y"));
    }
    let names: Vec<&str> = header[1..].iter().map(String::as_str).collect();
    let split = names.iter().position(|n| n.starts_with('z')).ok_or_else(|| input_err(path, "no z columns"))?;
    let xcols = layout(&names[..split], 'x', path)?;
    let zcols = layout(&names[split..], 'z', path)?;
    let (mut ys, mut xs, mut zs) = (Vec::new(), Vec::new(), Vec::new());
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| input_err(path, e))?;
        let fields: Vec<&str> = rec.iter().collect();
        if fields.len() != header.len() {
            return Err(input_err(
                path,
                format!("line {line}: expected {} fields, got {}", header.len(), fields.len()),
            ));
        }
        let y = fields[0]
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| input_err(path, format!("line {line}: bad outcome {:?}", fields[0])))?;
        let xw = width(xcols);
        ys.push(y);
        xs.push(parse_point(&fields[1..1 + xw], xcols, path, line)?);
        zs.push(parse_point(&fields[1 + xw..], zcols, path, line)?);
    }
    Dataset::new(zs, xs, ys).map_err(|e| input_err(path, e))
}

/// Reads evaluation points: header `x1..xp` or `x_rank`.
pub fn read_grid(path: &Path) -> Result<Vec<Point>> {
    let mut rdr = csv_reader(path)?;
    let header: Vec<String> = rdr.headers().map_err(|e| input_err(path, e))?.iter().map(String::from).collect();
    let names: Vec<&str> = header.iter().map(String::as_str).collect();
    let cols = layout(&names, 'x', path)?;
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| input_err(path, e))?;
        let fields: Vec<&str> = rec.iter().collect();
        if fields.len() != header.len() {
            return Err(input_err(path, format!("line {}: wrong field count", i + 2)));
        }
        out.push(parse_point(&fields, cols, path, i + 2)?);
    }
    if out.is_empty() {
        return Err(input_err(path, "grid file has no rows"));
    }
    Ok(out)
}

fn point_fields(p: &Point) -> Vec<String> {
    match p {
        Point::Vector(v) => v.iter().map(|x| x.to_string()).collect(),
        Point::Ranking(r) => vec![r.to_string()],
    }
}

fn prefix_header(p: &Point, prefix: char) -> Vec<String> {
    match p {
        Point::Vector(v) => (1..=v.len()).map(|i| format!("{prefix}{i}")).collect(),
        Point::Ranking(_) => vec![format!("{prefix}_rank")],
    }
}

/// Writes a dataset in the same CSV layout [`read_dataset`] accepts.
pub fn write_dataset(path: &Path, data: &Dataset) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["y".to_string()];
    header.extend(prefix_header(&data.x()[0], 'x'));
    header.extend(prefix_header(&data.z()[0], 'z'));
    w.write_record(&header)?;
    for i in 0..data.len() {
        let mut row = vec![data.y()[i].to_string()];
        row.extend(point_fields(&data.x()[i]));
        row.extend(point_fields(&data.z()[i]));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = fs::File::create(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    Ok(())
}

fn prepare_out(cfg: &RunConfig) -> Result<PathBuf> {
    let out = cfg.out_dir()?.to_path_buf();
    fs::create_dir_all(&out)?;
    write_json(&out.join("config.json"), cfg)?;
    Ok(out)
}

/// Training points followed by grid points, with their ids.
fn evaluation_points(data: &Dataset, cfg: &RunConfig) -> Result<(Vec<String>, Vec<Point>)> {
    let mut ids: Vec<String> = (0..data.len()).map(|i| format!("train:{i}")).collect();
    let mut pts = data.x().to_vec();
    if let Some(grid) = &cfg.grid {
        let g = read_grid(grid)?;
        ids.extend((0..g.len()).map(|i| format!("grid:{i}")));
        pts.extend(g);
    }
    Ok((ids, pts))
}

fn load_input(cfg: &RunConfig) -> Result<Dataset> {
    if let Some(path) = &cfg.input {
        read_dataset(path)
    } else if let Some(spec) = &cfg.dgp {
        Ok(simulate_iv(spec)?.data)
    } else {
        Err(Error::Config("either --input or a synthetic design (--dgp ...) is required".into()))
    }
}

// ---------------------------------------------------------------------------
// Commands

/// Metadata written next to predictions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub n: usize,
    pub lambda: f64,
    pub mu: f64,
    /// `ln λ / ln μ`; absent when `μ = 1`.
    pub iota: Option<f64>,
    /// Whether `μ ≤ λ ≤ 1`.
    pub within_policy: bool,
    pub kernel_x: KernelSpec,
    pub kernel_z: KernelSpec,
    pub residual_l2: f64,
    pub residual_max: f64,
    pub alpha_l2: f64,
}

fn fit_summary(fit: &FitState) -> FitSummary {
    let reg = fit.reg();
    FitSummary {
        n: fit.n(),
        lambda: reg.lambda,
        mu: reg.mu,
        iota: reg.iota(),
        within_policy: reg.within_policy(),
        kernel_x: *fit.kernel_x(),
        kernel_z: *fit.kernel_z(),
        residual_l2: fit.residuals().norm(),
        residual_max: fit.residuals().amax(),
        alpha_l2: fit.alpha().norm(),
    }
}

fn fit_from_config(cfg: &RunConfig) -> Result<(Dataset, FitState)> {
    let data = load_input(cfg)?;
    let reg = cfg.reg()?;
    let (kx, kz) = cfg.kernels();
    let fit = fit_kiv(&data, &kx, &kz, reg)?;
    Ok((data, fit))
}

/// `fit`: predictions.csv (x_id, h_hat) and fit.json.
pub fn cmd_fit(cfg: &RunConfig) -> Result<()> {
    let mut cfg = cfg.clone();
    cfg.fill_defaults();
    cfg.reg()?;
    let (data, fit) = fit_from_config(&cfg)?;
    let (ids, pts) = evaluation_points(&data, &cfg)?;
    let preds = fit.predict_many(&pts)?;
    let out = prepare_out(&cfg)?;
    let mut w = csv::Writer::from_path(out.join("predictions.csv"))?;
    w.write_record(["x_id", "h_hat"])?;
    for (id, h) in ids.iter().zip(&preds) {
        w.write_record([id.as_str(), &h.to_string()])?;
    }
    w.flush()?;
    write_json(&out.join("fit.json"), &fit_summary(&fit))
}

/// Summary of a band run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandSummary {
    pub n: usize,
    #[serde(rename = "B")]
    pub b: usize,
    pub chi: f64,
    pub t_hat: f64,
    pub kappa_x: f64,
    pub inflation: f64,
    pub radius_sup: f64,
    pub radius_rkhs: f64,
    pub seed: u64,
    /// True when `kappa_x` is the max of `√k(x,x)` over training and grid points.
    pub kappa_data_dependent: bool,
    pub statistic: Statistic,
    pub fit: FitSummary,
}

/// `band`: band.csv (x_id, h_hat, lower, upper) and summary.json.
pub fn cmd_band(cfg: &RunConfig) -> Result<()> {
    let mut cfg = cfg.clone();
    cfg.fill_defaults();
    cfg.fill_bootstrap_defaults();
    cfg.reg()?;
    let (data, fit) = fit_from_config(&cfg)?;
    let (ids, pts) = evaluation_points(&data, &cfg)?;
    let (b, chi, seed) = (cfg.bootstrap.unwrap_or(DEFAULT_DRAWS), cfg.chi.unwrap_or(0.05), cfg.seed.unwrap_or(0));
    let statistic = cfg.statistic.unwrap_or_default();
    let (_, t_hat) = run_bootstrap(&fit, b, chi, seed, statistic).map_err(config_if_param)?;
    let (kappa, data_dependent) = match cfg.kappa {
        Some(k) => (k, false),
        None => (kernel_bound(fit.kernel_x(), &pts)?, !fit.kernel_x().is_bounded()),
    };
    let (band, rows) = confidence_band(&fit, t_hat, chi, kappa, &pts).map_err(config_if_param)?;
    let out = prepare_out(&cfg)?;
    let mut w = csv::Writer::from_path(out.join("band.csv"))?;
    w.write_record(["x_id", "h_hat", "lower", "upper"])?;
    for (id, r) in ids.iter().zip(&rows) {
        w.write_record([id.as_str(), &r.h_hat.to_string(), &r.lower.to_string(), &r.upper.to_string()])?;
    }
    w.flush()?;
    let summary = BandSummary {
        n: band.n,
        b,
        chi,
        t_hat,
        kappa_x: band.kappa_x,
        inflation: band.inflation,
        radius_sup: band.radius_sup,
        radius_rkhs: band.radius_rkhs,
        seed,
        kappa_data_dependent: data_dependent,
        statistic,
        fit: fit_summary(&fit),
    };
    write_json(&out.join("summary.json"), &summary)
}

fn config_if_param(e: Error) -> Error {
    match e {
        Error::InvalidParameter(m) => Error::Config(m),
        other => other,
    }
}

/// Per-replication outcome of a coverage experiment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Replication {
    pub t_hat: f64,
    pub radius_sup: f64,
    pub radius_rkhs: f64,
    pub covered_sup: bool,
    pub covered_rkhs: Option<bool>,
    /// `max_x |ĥ(x) − h₀(x)|` over the evaluation grid.
    pub sup_error: f64,
    /// `‖γ̂ − γ*‖` for linear kernels.
    pub rkhs_error: Option<f64>,
}

/// Empirical coverage rate with its binomial standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rate {
    pub rate: f64,
    pub se: f64,
    pub hits: usize,
    pub reps: usize,
}

impl Rate {
    pub fn from_hits(hits: usize, reps: usize) -> Self {
        let rate = hits as f64 / reps as f64;
        Rate { rate, se: (rate * (1.0 - rate) / reps as f64).sqrt(), hits, reps }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageSummary {
    pub reps: usize,
    pub nominal: f64,
    pub sup: Rate,
    pub rkhs: Option<Rate>,
    pub mean_t_hat: f64,
    pub mean_radius_sup: f64,
    pub mean_radius_rkhs: f64,
}

fn mix(seed: u64, index: u64, salt: u64) -> u64 {
    // splitmix64 finalizer over (seed, index, salt).
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ salt.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One simulate–fit–bootstrap replication.
pub fn coverage_replication(cfg: &RunConfig, spec: &DgpSpec, rep: u64) -> Result<Replication> {
    let spec = DgpSpec { seed: mix(spec.seed, rep, 1), ..spec.clone() };
    let sim = simulate_iv(&spec)?;
    let (kx, kz) = cfg.kernels();
    let fit = fit_kiv(&sim.data, &kx, &kz, cfg.reg()?)?;
    let b = cfg.bootstrap.unwrap_or(DEFAULT_DRAWS);
    let chi = cfg.chi.unwrap_or(0.05);
    let boot_seed = mix(cfg.seed.unwrap_or(0), rep, 2);
    let (_, t_hat) = run_bootstrap(&fit, b, chi, boot_seed, cfg.statistic.unwrap_or_default())?;
    let mut pts = sim.data.x().to_vec();
    if let Some(grid) = &cfg.grid {
        pts.extend(read_grid(grid)?);
    }
    let kappa = match cfg.kappa {
        Some(k) => k,
        None => kernel_bound(&kx, &pts)?,
    };
    let (band, rows) = confidence_band(&fit, t_hat, chi, kappa, &pts)?;
    let mut sup_error = 0.0f64;
    for (p, r) in pts.iter().zip(&rows) {
        sup_error = sup_error.max((r.h_hat - sim.h0.eval_point(p)?).abs());
    }
    let rkhs_error = if matches!(kx, KernelSpec::Linear) && spec.kind == DgpKind::Linear {
        let gamma_hat: Vec<f64> = (0..spec.p)
            .map(|j| {
                sim.data
                    .x()
                    .iter()
                    .zip(fit.alpha().iter())
                    .map(|(x, a)| a * x.as_vector().expect("synthetic covariates are vectors")[j])
                    .sum()
            })
            .collect();
        Some(gamma_hat.iter().zip(&sim.h0.gamma).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
    } else {
        None
    };
    Ok(Replication {
        t_hat,
        radius_sup: band.radius_sup,
        radius_rkhs: band.radius_rkhs,
        covered_sup: sup_error <= band.radius_sup,
        covered_rkhs: rkhs_error.map(|e| e <= band.radius_rkhs),
        sup_error,
        rkhs_error,
    })
}

/// Runs `reps` replications and aggregates them by index.
pub fn run_coverage(cfg: &RunConfig) -> Result<CoverageSummary> {
    let mut cfg = cfg.clone();
    cfg.fill_defaults();
    cfg.fill_bootstrap_defaults();
    cfg.reg()?;
    let spec = cfg.dgp.clone().ok_or_else(|| Error::Config("coverage needs a synthetic design (--dgp ...)".into()))?;
    spec.validate().map_err(config_if_param)?;
    let reps = cfg.reps.unwrap_or(100);
    if reps == 0 {
        return Err(Error::Config("--reps must be >= 1".into()));
    }
    let results =
        (0..reps as u64).into_par_iter().map(|r| coverage_replication(&cfg, &spec, r)).collect::<Result<Vec<_>>>()?;
    let sup_hits = results.iter().filter(|r| r.covered_sup).count();
    let rkhs = if results.iter().all(|r| r.covered_rkhs.is_some()) {
        Some(Rate::from_hits(results.iter().filter(|r| r.covered_rkhs == Some(true)).count(), reps))
    } else {
        None
    };
    let mean = |f: fn(&Replication) -> f64| results.iter().map(f).sum::<f64>() / reps as f64;
    Ok(CoverageSummary {
        reps,
        nominal: 1.0 - cfg.chi.unwrap_or(0.05),
        sup: Rate::from_hits(sup_hits, reps),
        rkhs,
        mean_t_hat: mean(|r| r.t_hat),
        mean_radius_sup: mean(|r| r.radius_sup),
        mean_radius_rkhs: mean(|r| r.radius_rkhs),
    })
}

/// `coverage`: coverage.json.
pub fn cmd_coverage(cfg: &RunConfig) -> Result<()> {
    let mut resolved = cfg.clone();
    resolved.fill_defaults();
    resolved.fill_bootstrap_defaults();
    resolved.reps.get_or_insert(100);
    let summary = run_coverage(&resolved)?;
    let out = prepare_out(&resolved)?;
    write_json(&out.join("coverage.json"), &summary)
}

/// Decay fit of a user-supplied spectrum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecaySummary {
    pub count: usize,
    pub rho_hat: f64,
    pub omega_hat: f64,
    pub trace: f64,
    pub in_range: bool,
}

fn read_spectrum(path: &Path) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path).map_err(|e| input_err(path, e))?;
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| l.parse::<f64>().map_err(|_| input_err(path, format!("bad eigenvalue {l:?}"))))
        .collect()
}

/// `diagnose`: spectral.json, plus regime.json with `--alpha/--rho-x/...`
/// and decay.json with `--spectrum`.
pub fn cmd_diagnose(cfg: &RunConfig) -> Result<()> {
    let mut cfg = cfg.clone();
    cfg.fill_defaults();
    let has_data = cfg.input.is_some() || cfg.dgp.is_some();
    if !has_data && cfg.regime.is_none() && cfg.spectrum.is_none() {
        return Err(Error::Config(
            "diagnose needs --input, a synthetic design, --spectrum, or regime parameters".into(),
        ));
    }
    let regime = cfg.regime.map(|p| p.validate().map(|_| p)).transpose().map_err(config_if_param)?;
    let fit = if has_data { Some(fit_from_config(&cfg)?.1) } else { None };
    let report = fit.as_ref().map(spectral_report).transpose()?;
    let decay = match &cfg.spectrum {
        Some(path) => {
            let mut eigs = read_spectrum(path)?;
            eigs.sort_by(|a, b| b.total_cmp(a));
            let (rho_hat, omega_hat) = fit_decay(&eigs)?;
            Some(DecaySummary {
                count: eigs.len(),
                rho_hat,
                omega_hat,
                trace: local_width(&eigs, 0)?,
                in_range: rho_hat > 1.0 && rho_hat <= 2.0,
            })
        }
        None => None,
    };
    let out = prepare_out(&cfg)?;
    if let Some(r) = &report {
        write_json(&out.join("spectral.json"), r)?;
    }
    if let Some(params) = regime {
        let verdict = check_regime(&params)?;
        write_json(&out.join("regime.json"), &verdict.rows)?;
        if let Some(fit) = &fit {
            let reg = fit.reg();
            let sizes: RegimeVerdict = check_sample_size(&params, fit.n(), reg.lambda, reg.mu)?;
            write_json(&out.join("sample_size.json"), &sizes.rows)?;
        }
    }
    if let Some(d) = &decay {
        write_json(&out.join("decay.json"), d)?;
    }
    Ok(())
}

/// `simulate`: data.csv in the input layout, plus truth.json with `h₀`.
pub fn cmd_simulate(cfg: &RunConfig) -> Result<()> {
    let mut cfg = cfg.clone();
    cfg.fill_defaults();
    let spec = cfg.dgp.clone().ok_or_else(|| Error::Config("simulate needs a synthetic design (--dgp ...)".into()))?;
    let sim = simulate_iv(&spec).map_err(config_if_param)?;
    let out = prepare_out(&cfg)?;
    write_dataset(&out.join("data.csv"), &sim.data)?;
    write_json(&out.join("truth.json"), &sim.h0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rate_standard_error() {
        let r = Rate::from_hits(90, 100);
        assert_eq!(r.rate, 0.9);
        assert!((r.se - (0.9f64 * 0.1 / 100.0).sqrt()).abs() < 1e-15);
        let full = Rate::from_hits(10, 10);
        assert_eq!((full.rate, full.se), (1.0, 0.0));
    }

    #[test]
    fn overlay_prefers_flags() {
        let mut base = RunConfig { lambda: Some(0.1), mu: Some(0.2), chi: Some(0.1), ..Default::default() };
        base.overlay(&RunConfig { lambda: Some(0.5), ..Default::default() });
        assert_eq!((base.lambda, base.mu, base.chi), (Some(0.5), Some(0.2), Some(0.1)));
    }

    #[test]
    fn config_roundtrip() {
        let cfg = RunConfig {
            lambda: Some(0.1),
            mu: Some(0.05),
            kernel_x: Some("poly:2:1".parse().unwrap()),
            statistic: Some(Statistic::ProjectorForm),
            dgp: Some(DgpSpec::linear(100, 2, 3, 0.5, 1.0, 7)),
            regime: Some(RegimeParams { alpha: 1.0, beta: 0.5, rho_x: 1.6, rho_z: 1.1, iota: 1.0 }),
            ..Default::default()
        };
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert!(serde_json::from_str::<RunConfig>("{\"lamda\": 1}").is_err());
    }

    #[test]
    fn missing_parameters_are_config_errors() {
        let cfg = RunConfig { out: Some("/tmp/never".into()), ..Default::default() };
        assert_eq!(cmd_fit(&cfg).unwrap_err().exit_code(), 4);
        let cfg = RunConfig { lambda: Some(-1.0), mu: Some(0.1), ..Default::default() };
        assert_eq!(cmd_fit(&cfg).unwrap_err().exit_code(), 4);
    }

    #[test]
    fn mix_spreads_indices() {
        let a: Vec<u64> = (0..100).map(|i| mix(0, i, 1)).collect();
        let mut sorted = a.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), 100);
        assert_ne!(mix(0, 0, 1), mix(0, 0, 2));
    }
}
