use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use piezores::bvd::{self, BvdModel, FitOptions};
use piezores::converter::{self, SweepOptions};
use piezores::io::{self, ConverterConfig, IoError};
use piezores::mason;
use piezores::materials::{self, CouplingForm, MaterialConstantSet};
use piezores::metrics::{self, KConvention, ScoreSettings};
use piezores::sweep::{find_resonances, linspace};
use serde::de::DeserializeOwned;
use serde_json::{json, Value};

#[derive(Parser, Debug)]
#[command(name = "piezores", version, about = "Thickness-mode piezoelectric resonator toolkit")]
struct Cli {
    /// Output directory
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// JSON file with defaults for the subcommand's options
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Recorded in every report; no subcommand draws random numbers
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Coupling coefficients versus rotated-Y cut angle
    CutScan(CutScanArgs),
    /// Mason-model impedance of the electroded plate
    Mason(MasonArgs),
    /// Fit a multi-branch BVD model to a measured sweep
    Fit(FitArgs),
    /// Resonator metrics and suppressed region of a sweep
    Score(ScoreArgs),
    /// Converter steady state or power sweep
    Converter(ConverterArgs),
    /// Rank a sweep against the state-of-the-art table
    Compare(CompareArgs),
}

#[derive(Args, Debug)]
struct CutScanArgs {
    /// Material constants JSON (default: built-in LiNbO3)
    #[arg(long)]
    material: Option<PathBuf>,
    #[arg(long)]
    theta_min: Option<f64>,
    #[arg(long)]
    theta_max: Option<f64>,
    #[arg(long)]
    step: Option<f64>,
    /// `literal` or `stiffened`
    #[arg(long)]
    form: Option<String>,
}

#[derive(Args, Debug)]
struct MasonArgs {
    #[arg(long)]
    material: Option<PathBuf>,
    #[arg(long)]
    electrode_radius_m: Option<f64>,
    #[arg(long)]
    f_min: Option<f64>,
    #[arg(long)]
    f_max: Option<f64>,
    #[arg(long)]
    points: Option<usize>,
}

#[derive(Args, Debug)]
struct FitArgs {
    /// Sweep file (`.s1p` or CSV)
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    max_branches: Option<usize>,
    #[arg(long)]
    peak_factor: Option<f64>,
    #[arg(long)]
    prune_fraction: Option<f64>,
}

#[derive(Args, Debug)]
struct ScoreArgs {
    #[arg(long)]
    input: PathBuf,
    /// Suppressed-region multiplier on R_min
    #[arg(long)]
    threshold: Option<f64>,
    /// `pi_squared_over8`, `fp_squared` or `tangent`
    #[arg(long)]
    k_convention: Option<String>,
}

#[derive(Args, Debug)]
struct ConverterArgs {
    /// BVD model JSON (default: single-branch twin)
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    vin: Option<f64>,
    #[arg(long)]
    vout: Option<f64>,
    #[arg(long)]
    f_op: Option<f64>,
    /// Sweep the band with this many interior points instead of one solve
    #[arg(long)]
    sweep_points: Option<usize>,
    #[arg(long)]
    no_warm_start: bool,
    #[arg(long, default_value_t = 400)]
    waveform_points: usize,
}

#[derive(Args, Debug)]
struct CompareArgs {
    /// Sweep of the device to rank (default: the twin)
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long, default_value = "this device")]
    label: String,
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Debug)]
enum CliError {
    Core(piezores::Error),
    Usage(String),
}

impl From<piezores::Error> for CliError {
    fn from(e: piezores::Error) -> Self {
        CliError::Core(e)
    }
}

macro_rules! core_err {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Core(e.into())
            }
        }
    )*};
}
core_err!(
    IoError,
    piezores::materials::MaterialsError,
    piezores::mason::MasonError,
    piezores::bvd::BvdError,
    piezores::metrics::MetricsError,
    piezores::converter::ConverterError,
    piezores::sweep::ResonanceError,
    piezores::sweep::SweepError
);

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Core(e) => e.exit_code() as u8,
            CliError::Usage(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Usage(m) => write!(f, "{m}"),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

/// Option values: command line first, then the config file, then default.
struct Config(Value);

impl Config {
    fn load(path: Option<&Path>) -> Result<Self> {
        let Some(p) = path else {
            return Ok(Config(Value::Object(Default::default())));
        };
        let text = io::read_text(p)?;
        let v: Value = serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
        if !v.is_object() {
            return Err(CliError::Usage(format!("{}: config must be a JSON object", p.display())));
        }
        Ok(Config(v))
    }

    fn pick<T: DeserializeOwned>(&self, flag: Option<T>, key: &str, default: T) -> Result<T> {
        if let Some(v) = flag {
            return Ok(v);
        }
        match self.0.get(key) {
            None => Ok(default),
            Some(v) => serde_json::from_value(v.clone())
                .map_err(|e| CliError::Usage(format!("config key `{key}`: {e}"))),
        }
    }

    fn path(&self, flag: Option<PathBuf>, key: &str) -> Result<Option<PathBuf>> {
        self.pick(flag.map(Some), key, None)
    }
}

struct Ctx {
    out: PathBuf,
    seed: u64,
}

impl Ctx {
    fn file(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn write(&self, name: &str, text: &str) -> Result<PathBuf> {
        let p = self.file(name);
        io::write_text(&p, text)?;
        Ok(p)
    }

    fn report(&self, name: &str, kind: &str, mut v: Value) -> Result<PathBuf> {
        if let Value::Object(m) = &mut v {
            m.insert("seed".into(), json!(self.seed));
        }
        let v = io::report_value(kind, &v)?;
        self.write(name, &io::canonical_json(&v))
    }
}

fn load_material(path: Option<PathBuf>) -> Result<MaterialConstantSet> {
    match path {
        None => Ok(MaterialConstantSet::linbo3()),
        Some(p) => Ok(MaterialConstantSet::from_json(&io::read_text(&p)?)?),
    }
}

fn check_range(name: &str, x: f64, lo: f64, hi: f64) -> Result<()> {
    if !(x >= lo && x <= hi) {
        return Err(CliError::Usage(format!("{name} = {x} outside [{lo}, {hi}]")));
    }
    Ok(())
}

fn cut_scan(ctx: &Ctx, cfg: &Config, a: CutScanArgs) -> Result<()> {
    let material = load_material(cfg.path(a.material, "material")?)?;
    let lo = cfg.pick(a.theta_min, "theta_min", 0.0)?;
    let hi = cfg.pick(a.theta_max, "theta_max", 180.0)?;
    let step = cfg.pick(a.step, "step", 1.0)?;
    let form = match cfg.pick(a.form, "form", "literal".to_string())?.as_str() {
        "literal" => CouplingForm::Literal,
        "stiffened" => CouplingForm::Stiffened,
        other => return Err(CliError::Usage(format!("unknown coupling form `{other}`"))),
    };
    let rows = materials::coupling_scan_with(&material, lo, hi, step, form)?;
    let zeros = materials::ts_zero_crossings(&material, &rows);
    let at36 = materials::coupling_at(&material, 36.0, form);
    let theta_star = zeros
        .iter()
        .copied()
        .min_by(|a, b| (a - 36.0).abs().total_cmp(&(b - 36.0).abs()));
    ctx.write("cut_scan.csv", &io::write_scan_csv(&rows))?;
    ctx.report(
        "cut_scan.json",
        "cut_scan",
        json!({
            "material": material.name,
            "theta_min_deg": lo,
            "theta_max_deg": hi,
            "step_deg": step,
            "rows": rows.len(),
            "ts_zero_crossings_deg": zeros,
            "theta_star_deg": theta_star,
            "k33_sq_at_36": at36.k33_sq,
            "k35_sq_at_36": at36.k35_sq,
        }),
    )?;
    let z: Vec<String> = zeros.iter().map(|t| format!("{t:.3}")).collect();
    println!("rows: {}", rows.len());
    match theta_star {
        Some(t) => println!("theta* (thickness-shear null nearest 36Y): {t:.3} deg"),
        None => println!("theta*: no thickness-shear null in range"),
    }
    println!("all thickness-shear zero crossings [deg]: {}", z.join(", "));
    println!("k33^2 at 36 deg: {:.5}", at36.k33_sq);
    println!("k35^2 at 36 deg: {:.3e}", at36.k35_sq);
    Ok(())
}

fn mason_cmd(ctx: &Ctx, cfg: &Config, a: MasonArgs) -> Result<()> {
    let material = load_material(cfg.path(a.material, "material")?)?;
    let radius = cfg.pick(a.electrode_radius_m, "electrode_radius_m", mason::DEFAULT_ELECTRODE_RADIUS_M)?;
    check_range("electrode_radius_m", radius, 1e-5, 0.1)?;
    let stack = mason::reference_stack(radius, &material);
    let f0 = mason::free_plate_fp(&stack);
    let f_min = cfg.pick(a.f_min, "f_min", 0.8 * f0)?;
    let f_max = cfg.pick(a.f_max, "f_max", 1.1 * f0)?;
    let n = cfg.pick(a.points, "points", 6001)?;
    if !(f_min > 0.0 && f_max > f_min) || n < 2 {
        return Err(CliError::Usage("need 0 < f_min < f_max and at least 2 points".into()));
    }
    let sweep = mason::input_impedance(&stack, &linspace(f_min, f_max, n))?;
    ctx.write("mason_sweep.csv", &io::write_csv_sweep(&sweep))?;
    let res = find_resonances(&sweep).ok();
    ctx.report(
        "mason.json",
        "mason",
        json!({
            "material": material.name,
            "electrode_radius_m": radius,
            "c0_f": stack.c0(),
            "free_plate_fp_hz": f0,
            "fs_hz": res.map(|r| r.0),
            "fp_hz": res.map(|r| r.1),
            "f_min_hz": f_min,
            "f_max_hz": f_max,
            "points": n,
        }),
    )?;
    match res {
        Some((fs, fp)) => println!("fs = {fs:.6e} Hz, fp = {fp:.6e} Hz"),
        None => println!("no resonance pair inside the sweep"),
    }
    Ok(())
}

fn fit_cmd(ctx: &Ctx, cfg: &Config, a: FitArgs) -> Result<()> {
    let file = io::read_sweep(&a.input)?;
    let d = FitOptions::default();
    let opts = FitOptions {
        max_branches: cfg.pick(a.max_branches, "max_branches", d.max_branches)?,
        peak_factor: cfg.pick(a.peak_factor, "peak_factor", d.peak_factor)?,
        prune_fraction: cfg.pick(a.prune_fraction, "prune_fraction", d.prune_fraction)?,
        ..d
    };
    check_range("prune_fraction", opts.prune_fraction, 0.0, 1.0)?;
    check_range("peak_factor", opts.peak_factor, 1.0, 1e6)?;
    let r = bvd::fit_with(&file.sweep, &opts)?;
    let fitted = bvd::impedance_with_ref(&r.model, file.sweep.freq_hz(), file.sweep.ref_ohm())?;
    ctx.write("fit_model.csv", &io::write_csv_sweep(&fitted))?;
    let mut v = serde_json::to_value(&r).map_err(|e| IoError::Json(e.to_string()))?;
    v["source"] = json!(a.input.display().to_string());
    v["options"] = serde_json::to_value(opts).map_err(|e| IoError::Json(e.to_string()))?;
    ctx.report("fit.json", "fit", v)?;
    println!(
        "C0 = {:.4e} F, {} branch(es), rms log residual {:.3e}",
        r.model.c0,
        r.model.branches.len(),
        r.report.residual
    );
    for b in &r.model.branches {
        println!("  fs = {:.6e} Hz  R = {:.4e}  L = {:.4e}  C = {:.4e}", b.fs(), b.r_m, b.l_m, b.c_m);
    }
    Ok(())
}

fn settings(cfg: &Config, threshold: Option<f64>, conv: Option<String>) -> Result<ScoreSettings> {
    let threshold = cfg.pick(threshold, "threshold", metrics::DEFAULT_THRESHOLD)?;
    check_range("threshold", threshold, 1.0, 1e6)?;
    let conv: KConvention = cfg
        .pick(conv, "k_convention", KConvention::default().name().to_string())?
        .parse()
        .map_err(CliError::Usage)?;
    Ok(ScoreSettings {
        threshold,
        k_sq_convention: conv,
    })
}

fn score_cmd(ctx: &Ctx, cfg: &Config, a: ScoreArgs) -> Result<()> {
    let s = settings(cfg, a.threshold, a.k_convention)?;
    let file = io::read_sweep(&a.input)?;
    let sc = metrics::score_with(&file.sweep, &s)?;
    let bode = metrics::bode_q(&file.sweep)?;
    ctx.write(
        "score_plot.csv",
        &io::write_score_plot_csv(&file.sweep, &bode, sc.supp_lo_hz, sc.supp_hi_hz),
    )?;
    let mut v = serde_json::to_value(sc).map_err(|e| IoError::Json(e.to_string()))?;
    v["threshold"] = json!(s.threshold);
    v["k_sq_convention"] = json!(s.k_sq_convention);
    v["source"] = json!(a.input.display().to_string());
    ctx.report("score.json", "score", v)?;
    println!("fs = {:.6e} Hz, fp = {:.6e} Hz", sc.fs_hz, sc.fp_hz);
    println!("k_r^2 = {:.4}, Q(fs) = {:.1}, FoM = {:.1}", sc.k_r_sq, sc.q_bode_at_fs, sc.fom);
    println!(
        "suppressed region {:.4e}..{:.4e} Hz ({:.1}% of fp - fs)",
        sc.supp_lo_hz,
        sc.supp_hi_hz,
        100.0 * sc.fractional_supp
    );
    Ok(())
}

fn converter_cmd(ctx: &Ctx, cfg_path: Option<&Path>, a: ConverterArgs) -> Result<()> {
    let mut cc = match cfg_path {
        Some(p) => ConverterConfig::parse(&io::read_text(p)?)?,
        None => ConverterConfig {
            v_in: 40.0,
            v_out: 30.0,
            f_op_hz: None,
            f_grid_hz: None,
            stages: None,
            tolerance: None,
            max_iterations: None,
            fd_step: None,
            warm_start: true,
        },
    };
    if let Some(v) = a.vin {
        cc.v_in = v;
    }
    if let Some(v) = a.vout {
        cc.v_out = v;
    }
    if a.no_warm_start {
        cc.warm_start = false;
    }
    let model: BvdModel = match &a.model {
        Some(p) => io::from_json(&io::read_text(p)?)?,
        None => metrics::reference_twin(),
    };
    let (fs, fp) = bvd::resonance_freqs(&model)?;
    if let Some(f) = a.f_op {
        cc.f_op_hz = Some(f);
        cc.f_grid_hz = None;
    }
    if let Some(n) = a.sweep_points {
        if n == 0 {
            return Err(CliError::Usage("sweep_points must be positive".into()));
        }
        let g = linspace(fs, fp, n + 2);
        cc.f_grid_hz = Some(g[1..=n].to_vec());
        cc.f_op_hz = None;
    }
    if cc.f_op_hz.is_none() && cc.f_grid_hz.is_none() {
        cc.f_op_hz = Some(0.5 * (fs + fp));
    }
    cc.validate()?;
    let spec = cc.spec();
    let solver = cc.solver();
    if let Some(grid) = cc.f_grid_hz.clone() {
        let opts = SweepOptions {
            warm_start: cc.warm_start,
            solver,
        };
        let pts = converter::power_sweep_with(&spec, &model, &grid, &opts);
        ctx.write("power_sweep.csv", &io::write_power_csv(&pts))?;
        ctx.report(
            "converter_sweep.json",
            "power_sweep",
            json!({ "config": cc, "points": pts }),
        )?;
        let ok = pts.iter().filter(|p| p.converged).count();
        println!("{ok}/{} points converged", pts.len());
        return Ok(());
    }
    let sol = converter::solve_pss_with(&spec, &model, &solver)?;
    let wave = converter::sample_waveform(&sol, &model, a.waveform_points)?;
    ctx.write("waveform.csv", &io::write_waveform_csv(&wave))?;
    ctx.report("converter.json", "pss", json!({ "config": cc, "solution": sol }))?;
    println!(
        "f_op = {:.6e} Hz: p_out = {:.4} W, p_loss = {:.4e} W, efficiency = {:.5}",
        sol.f_op, sol.p_out, sol.p_loss, sol.efficiency
    );
    println!("periodicity residual {:.2e}", sol.periodicity_residual);
    Ok(())
}

fn compare_cmd(ctx: &Ctx, cfg: &Config, a: CompareArgs) -> Result<()> {
    let s = settings(cfg, a.threshold, None)?;
    let sweep = match &a.input {
        Some(p) => io::read_sweep(p)?.sweep,
        None => metrics::reference_twin_sweep(),
    };
    let sc = metrics::score_with(&sweep, &s)?;
    let rows = metrics::compare(&sc, &a.label);
    ctx.write("comparison.csv", &io::write_comparison_csv(&rows))?;
    ctx.report("comparison.json", "comparison", json!({ "rows": rows, "score": sc }))?;
    for r in &rows {
        let frac = r.row.fractional_supp.map_or("-".into(), |f| format!("{:.0}%", 100.0 * f));
        let mark = if r.user { "*" } else { " " };
        println!("{mark}{:>2}  {:<40} {frac}", r.rank, r.row.reference);
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    std::fs::create_dir_all(&cli.out).map_err(|source| IoError::Fs {
        path: cli.out.clone(),
        source,
    })?;
    let ctx = Ctx {
        out: cli.out,
        seed: cli.seed,
    };
    let cfg_path = cli.config.as_deref();
    match cli.cmd {
        Cmd::Converter(a) => converter_cmd(&ctx, cfg_path, a),
        cmd => {
            let cfg = Config::load(cfg_path)?;
            match cmd {
                Cmd::CutScan(a) => cut_scan(&ctx, &cfg, a),
                Cmd::Mason(a) => mason_cmd(&ctx, &cfg, a),
                Cmd::Fit(a) => fit_cmd(&ctx, &cfg, a),
                Cmd::Score(a) => score_cmd(&ctx, &cfg, a),
                Cmd::Compare(a) => compare_cmd(&ctx, &cfg, a),
                Cmd::Converter(_) => unreachable!(),
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
