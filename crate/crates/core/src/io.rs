//! File formats: Touchstone one-port and CSV impedance sweeps, JSON reports
//! and configs, and the CSV tables behind the plots.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::converter::{default_stages, ConverterSpec, SolverOptions, StageDef, SweepPoint, WaveformSample};
use crate::materials::CouplingRow;
use crate::metrics::RankedRow;
use crate::sweep::{ImpedanceSweep, SweepError, DEFAULT_REF_OHM};

pub const SCHEMA_VERSION: &str = "1";

#[derive(Debug, Error)]
pub enum IoError {
    #[error("input is empty")]
    Empty,
    #[error("line {line}: malformed option line: {reason}")]
    OptionLine { line: usize, reason: String },
    #[error("line {line}: {reason}")]
    Row { line: usize, reason: String },
    #[error("line {line}: |S11| = {magnitude} is not below 1")]
    Reflection { line: usize, magnitude: f64 },
    #[error("line {line}: frequency does not increase")]
    Order { line: usize },
    #[error("missing column `{0}`")]
    MissingColumn(&'static str),
    #[error("line {line}, column `{column}`: cannot parse {value:?} as a number")]
    Cell {
        line: usize,
        column: &'static str,
        value: String,
    },
    #[error("malformed CSV: {0}")]
    Csv(String),
    #[error(transparent)]
    Sweep(#[from] SweepError),
    #[error("malformed JSON: {0}")]
    Json(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Fs {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepFormat {
    TouchstoneS1p,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FreqUnit {
    Hz,
    KHz,
    MHz,
    GHz,
}

impl FreqUnit {
    pub fn scale(self) -> f64 {
        match self {
            FreqUnit::Hz => 1.0,
            FreqUnit::KHz => 1e3,
            FreqUnit::MHz => 1e6,
            FreqUnit::GHz => 1e9,
        }
    }

    fn token(self) -> &'static str {
        match self {
            FreqUnit::Hz => "HZ",
            FreqUnit::KHz => "KHZ",
            FreqUnit::MHz => "MHZ",
            FreqUnit::GHz => "GHZ",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Parameter {
    S,
    Z,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DataFormat {
    RI,
    MA,
    DB,
}

/// Parsed `#` option line.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptionLine {
    pub unit: FreqUnit,
    pub parameter: Parameter,
    pub format: DataFormat,
    pub ref_ohm: f64,
}

impl Default for OptionLine {
    fn default() -> Self {
        OptionLine {
            unit: FreqUnit::Hz,
            parameter: Parameter::S,
            format: DataFormat::MA,
            ref_ohm: DEFAULT_REF_OHM,
        }
    }
}

impl OptionLine {
    pub fn render(&self) -> String {
        let p = match self.parameter {
            Parameter::S => "S",
            Parameter::Z => "Z",
        };
        let f = match self.format {
            DataFormat::RI => "RI",
            DataFormat::MA => "MA",
            DataFormat::DB => "DB",
        };
        format!("# {} {p} {f} R {}", self.unit.token(), fmt_f64(self.ref_ohm))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepMeta {
    pub ref_ohm: f64,
    /// Option line for Touchstone input, `csv` otherwise.
    pub variant: String,
    pub comments: Vec<String>,
}

/// Rows exactly as read from a Touchstone file, in file units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TouchstoneData {
    pub options: OptionLine,
    pub rows: Vec<[f64; 3]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepFile {
    pub source: Option<PathBuf>,
    pub format: SweepFormat,
    pub sweep: ImpedanceSweep,
    pub meta: SweepMeta,
    pub touchstone: Option<TouchstoneData>,
}

/// Shortest decimal that reads back to the same bits.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:e}")
}

fn parse_num(tok: &str) -> Option<f64> {
    tok.parse::<f64>().ok().filter(|x| x.is_finite())
}

fn parse_option_line(line: usize, text: &str) -> Result<OptionLine, IoError> {
    let bad = |reason: String| IoError::OptionLine { line, reason };
    let mut opt = OptionLine::default();
    let mut toks = text.split_whitespace();
    while let Some(t) = toks.next() {
        match t.to_ascii_uppercase().as_str() {
            "HZ" => opt.unit = FreqUnit::Hz,
            "KHZ" => opt.unit = FreqUnit::KHz,
            "MHZ" => opt.unit = FreqUnit::MHz,
            "GHZ" => opt.unit = FreqUnit::GHz,
            "S" => opt.parameter = Parameter::S,
            "Z" => opt.parameter = Parameter::Z,
            "RI" => opt.format = DataFormat::RI,
            "MA" => opt.format = DataFormat::MA,
            "DB" => opt.format = DataFormat::DB,
            "R" => {
                let v = toks.next().ok_or_else(|| bad("R without a value".into()))?;
                let r = parse_num(v).ok_or_else(|| bad(format!("bad reference {v:?}")))?;
                if r <= 0.0 {
                    return Err(bad(format!("reference must be positive, got {r}")));
                }
                opt.ref_ohm = r;
            }
            "Y" | "H" | "G" => return Err(bad(format!("unsupported parameter {t:?}"))),
            _ => return Err(bad(format!("unknown token {t:?}"))),
        }
    }
    Ok(opt)
}

fn pair_to_complex(format: DataFormat, a: f64, b: f64) -> Complex64 {
    match format {
        DataFormat::RI => Complex64::new(a, b),
        DataFormat::MA => Complex64::from_polar(a, b.to_radians()),
        DataFormat::DB => Complex64::from_polar(10f64.powf(a / 20.0), b.to_radians()),
    }
}

/// Touchstone v1 one-port file.
pub fn parse_touchstone_s1p(text: &str) -> Result<SweepFile, IoError> {
    if text.trim().is_empty() {
        return Err(IoError::Empty);
    }
    let mut options: Option<OptionLine> = None;
    let mut comments = Vec::new();
    let mut rows: Vec<[f64; 3]> = Vec::new();
    let mut lines_of_rows = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let (body, comment) = match raw.find('!') {
            Some(p) => (&raw[..p], Some(&raw[p + 1..])),
            None => (raw, None),
        };
        if let Some(c) = comment {
            comments.push(c.trim().to_string());
        }
        let body = body.trim();
        if body.is_empty() {
            continue;
        }
        if let Some(rest) = body.strip_prefix('#') {
            if !rows.is_empty() {
                return Err(IoError::OptionLine {
                    line,
                    reason: "option line after data".into(),
                });
            }
            // only the first option line counts
            if options.is_none() {
                options = Some(parse_option_line(line, rest)?);
            }
            continue;
        }
        let toks: Vec<&str> = body.split_whitespace().collect();
        if toks.len() != 3 {
            return Err(IoError::Row {
                line,
                reason: format!("expected 3 numbers, found {}", toks.len()),
            });
        }
        let mut v = [0.0; 3];
        for (k, t) in toks.iter().enumerate() {
            v[k] = parse_num(t).ok_or_else(|| IoError::Row {
                line,
                reason: format!("cannot parse {t:?} as a number"),
            })?;
        }
        rows.push(v);
        lines_of_rows.push(line);
    }
    if rows.is_empty() {
        return Err(IoError::Empty);
    }
    let options = options.unwrap_or_default();
    let data = TouchstoneData { options, rows };
    let sweep = touchstone_to_sweep(&data, &lines_of_rows)?;
    Ok(SweepFile {
        source: None,
        format: SweepFormat::TouchstoneS1p,
        meta: SweepMeta {
            ref_ohm: options.ref_ohm,
            variant: options.render(),
            comments,
        },
        sweep,
        touchstone: Some(data),
    })
}

fn touchstone_to_sweep(data: &TouchstoneData, lines: &[usize]) -> Result<ImpedanceSweep, IoError> {
    let o = data.options;
    let mut freq = Vec::with_capacity(data.rows.len());
    let mut z = Vec::with_capacity(data.rows.len());
    for (k, r) in data.rows.iter().enumerate() {
        let line = lines[k];
        let f = r[0] * o.unit.scale();
        if !(f > 0.0 && f.is_finite()) {
            return Err(IoError::Row {
                line,
                reason: "frequency must be positive".into(),
            });
        }
        if let Some(&prev) = freq.last() {
            if f <= prev {
                return Err(IoError::Order { line });
            }
        }
        let v = pair_to_complex(o.format, r[1], r[2]);
        let zk = match o.parameter {
            Parameter::S => {
                let m = v.norm();
                if !(m < 1.0) {
                    return Err(IoError::Reflection { line, magnitude: m });
                }
                o.ref_ohm * (1.0 + v) / (1.0 - v)
            }
            // Z-format values are impedances in ohms, not normalized to R
            Parameter::Z => v,
        };
        if !(zk.re.is_finite() && zk.im.is_finite()) {
            return Err(IoError::Row {
                line,
                reason: "impedance is not finite".into(),
            });
        }
        freq.push(f);
        z.push(zk);
    }
    Ok(ImpedanceSweep::new(freq, z, o.ref_ohm)?)
}

/// Re-emits the rows of a parsed Touchstone file in their original
/// option format; parsing the result reproduces the same bits.
pub fn write_touchstone(data: &TouchstoneData) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{}", data.options.render());
    for r in &data.rows {
        let _ = writeln!(s, "{} {} {}", fmt_f64(r[0]), fmt_f64(r[1]), fmt_f64(r[2]));
    }
    s
}

/// S11 in RI form, Hz, against the sweep's reference impedance.
pub fn sweep_to_touchstone(sweep: &ImpedanceSweep) -> TouchstoneData {
    let r = sweep.ref_ohm();
    let rows = sweep
        .freq_hz()
        .iter()
        .zip(sweep.z_ohm())
        .map(|(&f, &z)| {
            let s = (z - r) / (z + r);
            [f, s.re, s.im]
        })
        .collect();
    TouchstoneData {
        options: OptionLine {
            unit: FreqUnit::Hz,
            parameter: Parameter::S,
            format: DataFormat::RI,
            ref_ohm: r,
        },
        rows,
    }
}

const CSV_COLUMNS: [&str; 3] = ["freq_hz", "re_ohm", "im_ohm"];

/// CSV sweep with header `freq_hz,re_ohm,im_ohm` and optional
/// `# ref_ohm=<x>` comment.
pub fn parse_csv_sweep(text: &str) -> Result<SweepFile, IoError> {
    if text.trim().is_empty() {
        return Err(IoError::Empty);
    }
    let mut ref_ohm = DEFAULT_REF_OHM;
    let mut comments = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let Some(c) = raw.trim_start().strip_prefix('#') else {
            continue;
        };
        let c = c.trim();
        comments.push(c.to_string());
        if let Some(v) = c.strip_prefix("ref_ohm") {
            let v = v.trim_start().strip_prefix('=').map(str::trim).unwrap_or("");
            ref_ohm = parse_num(v).ok_or_else(|| IoError::Row {
                line: idx + 1,
                reason: format!("bad ref_ohm {v:?}"),
            })?;
        }
    }
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = rdr.headers().map_err(|e| IoError::Csv(e.to_string()))?.clone();
    let mut cols = [0usize; 3];
    for (k, name) in CSV_COLUMNS.iter().enumerate() {
        cols[k] = headers
            .iter()
            .position(|h| h == *name)
            .ok_or(IoError::MissingColumn(name))?;
    }
    let mut freq: Vec<f64> = Vec::new();
    let mut z = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| IoError::Csv(e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.iter().all(|c| c.is_empty()) {
            continue;
        }
        let mut v = [0.0; 3];
        for k in 0..3 {
            let cell = rec.get(cols[k]).unwrap_or("");
            v[k] = parse_num(cell).ok_or_else(|| IoError::Cell {
                line,
                column: CSV_COLUMNS[k],
                value: cell.to_string(),
            })?;
        }
        if let Some(&prev) = freq.last() {
            if v[0] <= prev {
                return Err(IoError::Order { line });
            }
        }
        if !(v[0] > 0.0) {
            return Err(IoError::Row {
                line,
                reason: "frequency must be positive".into(),
            });
        }
        freq.push(v[0]);
        z.push(Complex64::new(v[1], v[2]));
    }
    if freq.is_empty() {
        return Err(IoError::Empty);
    }
    let sweep = ImpedanceSweep::new(freq, z, ref_ohm)?;
    Ok(SweepFile {
        source: None,
        format: SweepFormat::Csv,
        sweep,
        meta: SweepMeta {
            ref_ohm,
            variant: "csv".into(),
            comments,
        },
        touchstone: None,
    })
}

pub fn write_csv_sweep(sweep: &ImpedanceSweep) -> String {
    let mut s = format!("# ref_ohm={}\nfreq_hz,re_ohm,im_ohm\n", fmt_f64(sweep.ref_ohm()));
    for (f, z) in sweep.freq_hz().iter().zip(sweep.z_ohm()) {
        let _ = writeln!(s, "{},{},{}", fmt_f64(*f), fmt_f64(z.re), fmt_f64(z.im));
    }
    s
}

/// Picks the parser from the extension: `.s1p` is Touchstone, anything
/// else CSV.
pub fn read_sweep(path: &Path) -> Result<SweepFile, IoError> {
    let text = read_text(path)?;
    let is_s1p = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("s1p"));
    let mut f = if is_s1p {
        parse_touchstone_s1p(&text)?
    } else {
        parse_csv_sweep(&text)?
    };
    f.source = Some(path.to_path_buf());
    Ok(f)
}

pub fn read_text(path: &Path) -> Result<String, IoError> {
    std::fs::read_to_string(path).map_err(|source| IoError::Fs {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_text(path: &Path, text: &str) -> Result<(), IoError> {
    std::fs::write(path, text).map_err(|source| IoError::Fs {
        path: path.to_path_buf(),
        source,
    })
}

/// Canonical JSON: keys sorted, two-space indent, trailing newline.
pub fn canonical_json(value: &Value) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("Value always serializes");
    s.push('\n');
    s
}

/// Report body tagged with `schema_version` and `kind`. Object bodies are
/// merged at the top level; anything else lands under `data`.
pub fn report_value<T: Serialize>(kind: &str, body: &T) -> Result<Value, IoError> {
    let v = serde_json::to_value(body).map_err(|e| IoError::Json(e.to_string()))?;
    let mut out = serde_json::Map::new();
    match v {
        Value::Object(m) => out.extend(m),
        other => {
            out.insert("data".into(), other);
        }
    }
    out.insert("schema_version".into(), Value::from(SCHEMA_VERSION));
    out.insert("kind".into(), Value::from(kind));
    Ok(Value::Object(out))
}

pub fn report_json<T: Serialize>(kind: &str, body: &T) -> Result<String, IoError> {
    Ok(canonical_json(&report_value(kind, body)?))
}

pub fn write_report<T: Serialize>(kind: &str, body: &T, path: &Path) -> Result<(), IoError> {
    write_text(path, &report_json(kind, body)?)
}

/// Re-serializes a report in canonical form.
pub fn canonicalize(text: &str) -> Result<String, IoError> {
    let v: Value = serde_json::from_str(text).map_err(|e| IoError::Json(e.to_string()))?;
    Ok(canonical_json(&v))
}

pub fn from_json<T: for<'de> Deserialize<'de>>(text: &str) -> Result<T, IoError> {
    serde_json::from_str(text).map_err(|e| IoError::Json(e.to_string()))
}

/// Converter run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConverterConfig {
    pub v_in: f64,
    pub v_out: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f_op_hz: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f_grid_hz: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stages: Option<Vec<StageDef>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tolerance: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_iterations: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fd_step: Option<f64>,
    #[serde(default = "yes")]
    pub warm_start: bool,
}

fn yes() -> bool {
    true
}

impl ConverterConfig {
    pub fn parse(text: &str) -> Result<Self, IoError> {
        let c: ConverterConfig = from_json(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), IoError> {
        let bad = |m: &str| Err(IoError::Config(m.into()));
        if self.f_op_hz.is_none() && self.f_grid_hz.is_none() {
            return bad("one of f_op_hz or f_grid_hz is required");
        }
        if let Some(g) = &self.f_grid_hz {
            if g.is_empty() || g.windows(2).any(|w| !(w[1] > w[0])) {
                return bad("f_grid_hz must be non-empty and increasing");
            }
        }
        if let Some(t) = self.tolerance {
            if !(t > 0.0 && t < 1.0) {
                return bad("tolerance must lie in (0, 1)");
            }
        }
        if let Some(h) = self.fd_step {
            if !(h > 0.0 && h < 1e-2) {
                return bad("fd_step must lie in (0, 0.01)");
            }
        }
        if self.max_iterations == Some(0) {
            return bad("max_iterations must be positive");
        }
        Ok(())
    }

    pub fn spec(&self) -> ConverterSpec {
        let f = self
            .f_op_hz
            .or_else(|| self.f_grid_hz.as_ref().and_then(|g| g.first().copied()))
            .unwrap_or(f64::NAN);
        ConverterSpec {
            v_in: self.v_in,
            v_out: self.v_out,
            stages: self
                .stages
                .clone()
                .unwrap_or_else(|| default_stages(self.v_in, self.v_out)),
            f_op: f,
        }
    }

    pub fn solver(&self) -> SolverOptions {
        let d = SolverOptions::default();
        SolverOptions {
            tolerance: self.tolerance.unwrap_or(d.tolerance),
            max_iterations: self.max_iterations.unwrap_or(d.max_iterations),
            fd_step: self.fd_step.unwrap_or(d.fd_step),
        }
    }
}

fn csv_table<const N: usize>(header: [&str; N], rows: impl Iterator<Item = [String; N]>) -> String {
    let mut s = header.join(",");
    s.push('\n');
    for r in rows {
        s.push_str(&r.join(","));
        s.push('\n');
    }
    s
}

pub fn write_scan_csv(rows: &[CouplingRow]) -> String {
    csv_table(
        ["theta_deg", "k33_sq", "k35_sq"],
        rows.iter()
            .map(|r| [fmt_f64(r.theta_deg), fmt_f64(r.k33_sq), fmt_f64(r.k35_sq)]),
    )
}

pub fn write_waveform_csv(samples: &[WaveformSample]) -> String {
    csv_table(
        ["t_s", "i_l_a", "v_cm_v", "v_c0_v", "stage_index"],
        samples.iter().map(|w| {
            [
                fmt_f64(w.t_s),
                fmt_f64(w.i_l_a),
                fmt_f64(w.v_cm_v),
                fmt_f64(w.v_c0_v),
                w.stage_index.to_string(),
            ]
        }),
    )
}

pub fn write_power_csv(points: &[SweepPoint]) -> String {
    let opt = |x: f64| if x.is_finite() { fmt_f64(x) } else { String::new() };
    csv_table(
        ["f_op_hz", "p_out_w", "p_loss_w", "efficiency", "converged"],
        points.iter().map(|p| {
            [
                fmt_f64(p.f_op),
                opt(p.p_out),
                opt(p.p_loss),
                opt(p.efficiency),
                p.converged.to_string(),
            ]
        }),
    )
}

pub fn write_comparison_csv(rows: &[RankedRow]) -> String {
    let opt = |x: Option<f64>| x.map(fmt_f64).unwrap_or_default();
    let quote = |s: &str| {
        if s.contains([',', '"', '\n']) {
            format!("\"{}\"", s.replace('"', "\"\""))
        } else {
            s.to_string()
        }
    };
    csv_table(
        [
            "rank",
            "user",
            "reference",
            "fs_mhz",
            "k_r_sq",
            "q",
            "fom",
            "supp_region_mhz",
            "fractional_supp",
        ],
        rows.iter().map(|r| {
            [
                r.rank.to_string(),
                r.user.to_string(),
                quote(&r.row.reference),
                opt(r.row.fs_mhz),
                opt(r.row.k_r_sq),
                opt(r.row.q),
                opt(r.row.fom),
                opt(r.row.supp_region_mhz),
                opt(r.row.fractional_supp),
            ]
        }),
    )
}

/// Plot data for a scored sweep: |Z|, R, Bode Q and the suppressed band.
pub fn write_score_plot_csv(
    sweep: &ImpedanceSweep,
    bode: &[(f64, f64)],
    supp_lo_hz: f64,
    supp_hi_hz: f64,
) -> String {
    let q_at = |f: f64| {
        bode.binary_search_by(|p| p.0.total_cmp(&f))
            .ok()
            .map(|k| fmt_f64(bode[k].1))
            .unwrap_or_default()
    };
    csv_table(
        ["freq_hz", "abs_z_ohm", "re_z_ohm", "bode_q", "suppressed"],
        sweep.freq_hz().iter().zip(sweep.z_ohm()).map(|(&f, z)| {
            [
                fmt_f64(f),
                fmt_f64(z.norm()),
                fmt_f64(z.re),
                q_at(f),
                (f >= supp_lo_hz && f <= supp_hi_hz).to_string(),
            ]
        }),
    )
}
