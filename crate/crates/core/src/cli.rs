//! Scenario files, run dispatch, and the table and field output formats.
//!
//! A scenario is TOML with the sections `model`, `grid`, `zgrid`,
//! `amplitude` and `study`. Only `model.alpha` and `model.epsilon` are
//! mandatory; unknown keys are rejected.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dynamics::{
    build_initial_fibered, effective_mode, effective_solution_fibered, error_study, evolve_general, propagate_times, synthesize,
    AmplitudeSpec, ExpansionTerm, Propagator, StudySetup, ZGrid,
};
use crate::error::{Error, Result};
use crate::model::{eval_confining_potential, make_model, AzimuthalProfile, Grid2D, ModelParams, Stencil, TailSpec};
use crate::operators::{assemble_h, Branch};
use crate::perturbation::{
    almost_invariance_sweep, coupling_matrix, eigenvalue_tracking_oracle, loglog_slope, rs_coefficients, PerturbationFamily,
    ReducedResolvent,
};
use crate::spectral::{decay_profile, lowest_eigenpairs, weighted_resolvent_norm, EigenMethod, SpectralData};

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    model: RawModel,
    grid: Option<RawGrid>,
    zgrid: Option<RawZGrid>,
    amplitude: Option<RawAmplitude>,
    study: Option<RawStudy>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    alpha: f64,
    epsilon: f64,
    /// Cosine coefficients `c0, a1, a2, ...` of the angular profile.
    theta: Option<Vec<f64>>,
    theta_sin: Option<Vec<f64>>,
    p0: Option<f64>,
    tail: Option<RawTail>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTail {
    gamma: f64,
    delta: f64,
    coeff: f64,
    profile: Option<Vec<f64>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGrid {
    half_width: Option<f64>,
    n: Option<usize>,
    stencil: Option<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawZGrid {
    half_length: Option<f64>,
    nz: Option<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAmplitude {
    center: Option<f64>,
    half_width: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawStudy {
    k: Option<usize>,
    tol_eig: Option<f64>,
    gap_tol: Option<f64>,
    cluster: Option<usize>,
    member: Option<usize>,
    eps: Option<Vec<f64>>,
    times: Option<Vec<f64>>,
    order: Option<usize>,
    etas: Option<Vec<f64>>,
    momentum: Option<f64>,
    branch: Option<String>,
    propagator: Option<String>,
    omegas: Option<Vec<f64>>,
    delta: Option<f64>,
    expansion: Option<Vec<RawTerm>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTerm {
    cluster: usize,
    member: Option<usize>,
    weight: f64,
}

/// Subcommands.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Command {
    Spectrum,
    Coeffs,
    Evolve,
    Converge,
    Almostinv,
    Decay,
    General,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Spectrum => "spectrum",
            Command::Coeffs => "coeffs",
            Command::Evolve => "evolve",
            Command::Converge => "converge",
            Command::Almostinv => "almostinv",
            Command::Decay => "decay",
            Command::General => "general",
        }
    }
}

/// One term of a general initial state: `sqrt(weight) a(p) chi_member^cluster`.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpansionSpec {
    pub cluster: usize,
    pub member: usize,
    pub weight: f64,
}

/// Study parameters with defaults filled in.
#[derive(Clone, Debug, PartialEq)]
pub struct StudyParams {
    pub k: usize,
    pub tol_eig: f64,
    /// `None` means `1e-6` times the largest computed eigenvalue.
    pub gap_tol: Option<f64>,
    pub cluster: usize,
    pub member: usize,
    pub eps: Vec<f64>,
    pub times: Vec<f64>,
    pub order: usize,
    pub etas: Vec<f64>,
    pub momentum: f64,
    pub branch: Branch,
    pub propagator: Propagator,
    pub omegas: Vec<f64>,
    pub delta: f64,
    pub expansion: Vec<ExpansionSpec>,
}

/// Validated scenario plus run options.
#[derive(Clone, Debug)]
pub struct RunPlan {
    pub command: Command,
    pub model: ModelParams,
    pub grid: Grid2D,
    pub zgrid: ZGrid,
    pub amplitude: AmplitudeSpec,
    pub study: StudyParams,
    pub out_dir: PathBuf,
    pub seed: u64,
    /// Hex SHA-256 of the scenario text.
    pub config_sha256: String,
}

impl RunPlan {
    fn meta(&self) -> OutputMeta {
        OutputMeta {
            config_sha256: self.config_sha256.clone(),
            seed: self.seed,
        }
    }
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

fn backticked(msg: &str) -> Option<String> {
    let start = msg.find('`')? + 1;
    let len = msg[start..].find('`')?;
    Some(msg[start..start + len].to_string())
}

fn key_line(text: &str, key: &str) -> usize {
    text.lines()
        .position(|l| {
            let t = l.trim_start();
            t.starts_with(key) && t[key.len()..].trim_start().starts_with('=')
        })
        .map_or(0, |i| i + 1)
}

fn parse_err(text: &str, key: &str, message: impl Into<String>) -> Error {
    let leaf = key.rsplit('.').next().unwrap_or(key);
    Error::Parse {
        line: key_line(text, leaf),
        key: key.to_string(),
        message: message.into(),
    }
}

fn nonempty(text: &str, key: &str, v: Option<Vec<f64>>, default: &[f64]) -> Result<Vec<f64>> {
    match v {
        Some(v) if v.is_empty() => Err(parse_err(text, key, "list must not be empty")),
        Some(v) => Ok(v),
        None => Ok(default.to_vec()),
    }
}

/// Parses and validates a scenario. The command defaults to `spectrum`, the
/// output directory to `.` and the seed to 0.
pub fn parse_scenario(text: &str) -> Result<RunPlan> {
    let raw: RawConfig = toml::from_str(text).map_err(|e| {
        let message = e.message().to_string();
        let key = backticked(&message).unwrap_or_default();
        let line = e.span().map_or(0, |s| line_of(text, s.start));
        Error::Parse { line, key, message }
    })?;

    let m = raw.model;
    let theta = match (&m.theta, &m.theta_sin) {
        (None, None) => AzimuthalProfile::constant(1.0)?,
        (c, s) => {
            let c = c.clone().unwrap_or_else(|| vec![1.0]);
            if c.is_empty() {
                return Err(parse_err(text, "model.theta", "profile needs a constant coefficient"));
            }
            AzimuthalProfile::series(c[0], c[1..].to_vec(), s.clone().unwrap_or_default())?
        }
    };
    let tail = match m.tail {
        Some(t) => {
            let mut spec = TailSpec::new(t.gamma, t.delta, t.coeff);
            if let Some(p) = t.profile {
                spec.profile = Some(AzimuthalProfile::cosine_series(&p)?);
            }
            Some(spec)
        }
        None => None,
    };

    let amp = raw.amplitude.unwrap_or(RawAmplitude {
        center: None,
        half_width: None,
    });
    let amplitude = AmplitudeSpec::new(amp.center.unwrap_or(1.0), amp.half_width.unwrap_or(0.5))?;
    let model = make_model(m.alpha, theta, m.epsilon, tail, m.p0.unwrap_or(amplitude.p0()))?;

    let g = raw.grid.unwrap_or(RawGrid {
        half_width: None,
        n: None,
        stencil: None,
    });
    let stencil = match g.stencil.as_deref() {
        None | Some("fourth-order") => Stencil::FourthOrder,
        Some("five-point") => Stencil::FivePoint,
        Some(other) => return Err(parse_err(text, "grid.stencil", format!("unknown stencil `{other}`"))),
    };
    let grid = Grid2D::new(g.half_width.unwrap_or(6.0), g.n.unwrap_or(48))?.with_stencil(stencil);

    let z = raw.zgrid.unwrap_or(RawZGrid {
        half_length: None,
        nz: None,
    });
    let zgrid = ZGrid::new(z.half_length.unwrap_or(32.0), z.nz.unwrap_or(256))?;

    let s = raw.study.unwrap_or(RawStudy {
        k: None,
        tol_eig: None,
        gap_tol: None,
        cluster: None,
        member: None,
        eps: None,
        times: None,
        order: None,
        etas: None,
        momentum: None,
        branch: None,
        propagator: None,
        omegas: None,
        delta: None,
        expansion: None,
    });
    let branch = match s.branch.as_deref() {
        None => {
            if model.tail().is_some() {
                Branch::Singular
            } else {
                Branch::Regular
            }
        }
        Some("regular") => Branch::Regular,
        Some("singular") => Branch::Singular,
        Some(other) => return Err(parse_err(text, "study.branch", format!("unknown branch `{other}`"))),
    };
    let propagator = match s.propagator.as_deref() {
        None | Some("auto") => Propagator::Auto,
        Some("dense") => Propagator::Dense,
        Some("krylov") => Propagator::Krylov {
            tol: crate::dynamics::KRYLOV_TOL,
            subspace: crate::dynamics::KRYLOV_SUBSPACE,
        },
        Some(other) => return Err(parse_err(text, "study.propagator", format!("unknown propagator `{other}`"))),
    };
    let expansion = match s.expansion {
        Some(v) if v.is_empty() => return Err(parse_err(text, "study.expansion", "list must not be empty")),
        Some(v) => v
            .into_iter()
            .map(|t| ExpansionSpec {
                cluster: t.cluster,
                member: t.member.unwrap_or(0),
                weight: t.weight,
            })
            .collect(),
        None => vec![ExpansionSpec {
            cluster: 0,
            member: 0,
            weight: 1.0,
        }],
    };
    if expansion.iter().any(|t| !(t.weight >= 0.0)) {
        return Err(parse_err(text, "study.expansion", "weights must be non-negative"));
    }
    let study = StudyParams {
        k: s.k.unwrap_or(6),
        tol_eig: s.tol_eig.unwrap_or(crate::spectral::DEFAULT_TOL_EIG),
        gap_tol: s.gap_tol,
        cluster: s.cluster.unwrap_or(0),
        member: s.member.unwrap_or(0),
        eps: nonempty(text, "study.eps", s.eps, &[0.1, 0.05, 0.025])?,
        times: nonempty(text, "study.times", s.times, &[0.25, 0.5, 1.0])?,
        order: s.order.unwrap_or(2),
        etas: nonempty(text, "study.etas", s.etas, &crate::perturbation::series::default_eta_sweep())?,
        momentum: s.momentum.unwrap_or(1.0),
        branch,
        propagator,
        omegas: nonempty(text, "study.omegas", s.omegas, &[0.0, 0.25, 0.5])?,
        delta: s.delta.unwrap_or(0.1),
        expansion,
    };
    if study.k == 0 {
        return Err(parse_err(text, "study.k", "need at least one eigenpair"));
    }

    Ok(RunPlan {
        command: Command::Spectrum,
        model,
        grid,
        zgrid,
        amplitude,
        study,
        out_dir: PathBuf::from("."),
        seed: 0,
        config_sha256: hex::encode(Sha256::digest(text.as_bytes())),
    })
}

/// Provenance written into every output file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputMeta {
    pub config_sha256: String,
    pub seed: u64,
}

/// Rectangular table of floats with a header.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Table {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<f64>) {
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let j = self.header.iter().position(|h| h == name)?;
        Some(self.rows.iter().map(|r| r[j]).collect())
    }
}

fn fmt_cell(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v:.16e}")
    }
}

/// CSV with LF endings and 17 significant digits. `meta` adds a leading `#` line.
pub fn write_table(table: &Table, path: &Path, meta: Option<&OutputMeta>) -> Result<()> {
    let width = table.header.len();
    if let Some(bad) = table.rows.iter().position(|r| r.len() != width) {
        return Err(Error::InvalidInput(format!("row {bad} has {} cells, header has {width}", table.rows[bad].len())));
    }
    let mut out = String::new();
    if let Some(m) = meta {
        writeln!(out, "# config_sha256={} seed={}", m.config_sha256, m.seed).expect("string write");
    }
    out.push_str(&table.header.join(","));
    out.push('\n');
    for row in &table.rows {
        let cells: Vec<String> = row.iter().map(|v| fmt_cell(*v)).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Reads a table written by [`write_table`]; `#` lines are skipped.
pub fn read_table(path: &Path) -> Result<Table> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut header: Option<Vec<String>> = None;
    let mut rows = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.starts_with('#') {
            continue;
        }
        match &header {
            None => header = Some(line.split(',').map(str::to_string).filter(|s| !s.is_empty()).collect()),
            Some(h) => {
                let row = line
                    .split(',')
                    .map(|c| {
                        c.parse::<f64>().map_err(|e| Error::Parse {
                            line: i + 1,
                            key: c.to_string(),
                            message: e.to_string(),
                        })
                    })
                    .collect::<Result<Vec<f64>>>()?;
                if row.len() != h.len() {
                    return Err(Error::Parse {
                        line: i + 1,
                        key: String::new(),
                        message: format!("expected {} cells, found {}", h.len(), row.len()),
                    });
                }
                rows.push(row);
            }
        }
    }
    Ok(Table {
        header: header.unwrap_or_default(),
        rows,
    })
}

/// Header line of a binary field file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldHeader {
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Values stored as interleaved `re, im` pairs.
    pub complex: bool,
    /// `[lo, hi]` per axis.
    pub extents: Vec<[f64; 2]>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub config_sha256: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub seed: Option<u64>,
}

/// Real or complex row-major array.
#[derive(Clone, Debug, PartialEq)]
pub enum FieldData {
    Real(Vec<f64>),
    Complex(Vec<Complex64>),
}

impl FieldData {
    fn len(&self) -> usize {
        match self {
            FieldData::Real(v) => v.len(),
            FieldData::Complex(v) => v.len(),
        }
    }
}

/// One-line JSON header followed by little-endian row-major float64 data.
pub fn write_field(data: &FieldData, shape: &[usize], extents: &[[f64; 2]], path: &Path, meta: Option<&OutputMeta>) -> Result<()> {
    let count: usize = shape.iter().product();
    if count != data.len() {
        return Err(Error::DimensionMismatch {
            expected: count,
            found: data.len(),
        });
    }
    let header = FieldHeader {
        shape: shape.to_vec(),
        dtype: "<f8".into(),
        complex: matches!(data, FieldData::Complex(_)),
        extents: extents.to_vec(),
        config_sha256: meta.map(|m| m.config_sha256.clone()),
        seed: meta.map(|m| m.seed),
    };
    let mut bytes = serde_json::to_vec(&header).map_err(|e| Error::InvalidInput(e.to_string()))?;
    bytes.push(b'\n');
    match data {
        FieldData::Real(v) => v.iter().for_each(|x| bytes.extend_from_slice(&x.to_le_bytes())),
        FieldData::Complex(v) => v.iter().for_each(|c| {
            bytes.extend_from_slice(&c.re.to_le_bytes());
            bytes.extend_from_slice(&c.im.to_le_bytes());
        }),
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

/// Reads a file written by [`write_field`].
pub fn read_field(path: &Path) -> Result<(FieldHeader, FieldData)> {
    let mut raw = Vec::new();
    fs::File::open(path)?.read_to_end(&mut raw)?;
    let nl = raw
        .iter()
        .position(|b| *b == b'\n')
        .ok_or_else(|| Error::InvalidInput("field file has no header line".into()))?;
    let header: FieldHeader = serde_json::from_slice(&raw[..nl]).map_err(|e| Error::Parse {
        line: 1,
        key: "header".into(),
        message: e.to_string(),
    })?;
    let payload = &raw[nl + 1..];
    let count: usize = header.shape.iter().product();
    let width = if header.complex { 2 } else { 1 };
    if payload.len() != 8 * width * count {
        return Err(Error::DimensionMismatch {
            expected: 8 * width * count,
            found: payload.len(),
        });
    }
    let vals: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let data = if header.complex {
        FieldData::Complex(vals.chunks_exact(2).map(|c| Complex64::new(c[0], c[1])).collect())
    } else {
        FieldData::Real(vals)
    };
    Ok((header, data))
}

/// Outcome of a successful run.
#[derive(Clone, Debug, Default)]
pub struct RunReport {
    /// One line per study.
    pub summary: Vec<String>,
    /// Names of failed checks.
    pub failed: Vec<String>,
    pub files: Vec<PathBuf>,
}

impl RunReport {
    fn check(&mut self, name: &str, ok: bool) {
        if !ok {
            self.failed.push(name.to_string());
        }
    }
}

/// Process exit code of a run result: 0 success, 1 domain error, 2 parse
/// error, 3 failed check.
pub fn exit_code(result: &Result<RunReport>) -> i32 {
    match result {
        Ok(r) if r.failed.is_empty() => 0,
        Ok(_) => 3,
        Err(Error::Parse { .. }) => 2,
        Err(_) => 1,
    }
}

struct Ctx<'a> {
    plan: &'a RunPlan,
    report: RunReport,
}

impl Ctx<'_> {
    fn table(&mut self, name: &str, table: &Table) -> Result<()> {
        let path = self.plan.out_dir.join(name);
        write_table(table, &path, Some(&self.plan.meta()))?;
        self.report.files.push(path);
        Ok(())
    }

    fn field(&mut self, name: &str, data: &FieldData, shape: &[usize], extents: &[[f64; 2]]) -> Result<()> {
        let path = self.plan.out_dir.join(name);
        write_field(data, shape, extents, &path, Some(&self.plan.meta()))?;
        self.report.files.push(path);
        Ok(())
    }
}

fn spectrum(plan: &RunPlan) -> Result<(crate::SymOp, SpectralData)> {
    let h = assemble_h(&plan.grid, &eval_confining_potential(&plan.grid, &plan.model))?;
    let sp = lowest_eigenpairs(&h, plan.study.k, plan.study.tol_eig, EigenMethod::Auto, plan.seed)?;
    let scale = sp.eigenvalues().iter().fold(1.0f64, |a, v| a.max(v.abs()));
    let gap_tol = plan.study.gap_tol.unwrap_or(1e-6 * scale);
    Ok((h, sp.group_degenerate(gap_tol)?))
}

fn cluster_of(sp: &SpectralData, j: usize) -> (usize, usize) {
    let c = sp.clusters().iter().position(|c| c.members.contains(&j)).expect("every pair is clustered");
    (c, sp.clusters()[c].multiplicity())
}

fn grid_extents(grid: &Grid2D) -> [f64; 2] {
    [grid.coord(0), grid.coord(grid.n() - 1)]
}

/// Executes a plan, writing its outputs into `plan.out_dir`.
pub fn run(plan: &RunPlan) -> Result<RunReport> {
    fs::create_dir_all(&plan.out_dir)?;
    let mut ctx = Ctx {
        plan,
        report: RunReport::default(),
    };
    match plan.command {
        Command::Spectrum => run_spectrum(&mut ctx)?,
        Command::Coeffs => run_coeffs(&mut ctx)?,
        Command::Evolve => run_evolve(&mut ctx)?,
        Command::Converge => run_converge(&mut ctx)?,
        Command::Almostinv => run_almostinv(&mut ctx)?,
        Command::Decay => run_decay(&mut ctx)?,
        Command::General => run_general(&mut ctx)?,
    }
    Ok(ctx.report)
}

fn run_spectrum(ctx: &mut Ctx) -> Result<()> {
    let plan = ctx.plan;
    let (_, sp) = spectrum(plan)?;
    let mut t = Table::new(&["index", "lambda", "residual", "cluster", "multiplicity"]);
    for j in 0..sp.len() {
        let (c, m) = cluster_of(&sp, j);
        t.push(vec![j as f64, sp.eigenvalues()[j], sp.residuals()[j], c as f64, m as f64]);
    }
    ctx.table("spectrum.csv", &t)?;
    let n = plan.grid.n();
    let chi = sp.eigenvector(0);
    let e = grid_extents(&plan.grid);
    ctx.field("chi0.field", &FieldData::Real(chi.to_vec()), &[n, n], &[e, e])?;
    let mults: Vec<String> = sp.clusters().iter().map(|c| c.multiplicity().to_string()).collect();
    ctx.report.summary.push(format!(
        "spectrum: {} pairs, lowest {:.10}, multiplicities [{}], max residual {:.2e}",
        sp.len(),
        sp.eigenvalues()[0],
        mults.join(" "),
        sp.max_residual()
    ));
    ctx.report.check("eigen-residual", sp.max_residual() <= plan.study.tol_eig);
    Ok(())
}

fn run_coeffs(ctx: &mut Ctx) -> Result<()> {
    let plan = ctx.plan;
    let (h, sp) = spectrum(plan)?;
    let coupling = coupling_matrix(&sp, &plan.model);
    let mut t = Table::new(&["cluster", "member", "lambda", "lambda1", "lambda2", "lambda2_truncated", "tail_bound"]);
    for (c, cl) in sp.clusters().iter().enumerate() {
        let res = match ReducedResolvent::new(&h, &sp, c) {
            Ok(r) => r,
            Err(Error::GapTooSmall { .. }) => continue,
            Err(e) => return Err(e),
        };
        match rs_coefficients(&coupling, &sp, c, Some(&res)) {
            Ok(rs) => {
                for k in 0..cl.multiplicity() {
                    t.push(vec![
                        c as f64,
                        k as f64,
                        rs.lambda,
                        rs.lambda1[k],
                        rs.lambda2[k],
                        rs.lambda2_truncated[k],
                        rs.tail_bound[k],
                    ]);
                }
            }
            // first order does not split the cluster: the second-order formula is not applicable
            Err(Error::DegenerateFirstOrder { .. }) => {
                for k in 0..cl.multiplicity() {
                    t.push(vec![c as f64, k as f64, cl.value, f64::NAN, f64::NAN, f64::NAN, f64::NAN]);
                }
            }
            Err(e) => return Err(e),
        }
    }
    ctx.table("coeffs.csv", &t)?;
    ctx.report.check("coupling-symmetry", coupling.symmetry_defect() <= 1e-10);

    let target = plan.study.cluster;
    if sp.clusters().get(target).is_some_and(|c| c.multiplicity() == 1) {
        let res = ReducedResolvent::new(&h, &sp, target)?;
        let rs = rs_coefficients(&coupling, &sp, target, Some(&res))?;
        let j = sp.clusters()[target].members[0];
        let etas = crate::perturbation::tracking::default_etas(crate::perturbation::tracking::ORACLE_ETA_MAX, 6);
        let fit = eigenvalue_tracking_oracle(&h, &plan.model, &sp, j, &etas, plan.study.tol_eig.min(1e-10))?;
        let diff = (rs.lambda2[0] - fit.c2).abs();
        ctx.report.summary.push(format!(
            "coeffs: cluster {target}: lambda {:.10}, lambda1 {:.10}, lambda2 {:.10} (oracle fit {:.10}, diff {:.2e})",
            rs.lambda, rs.lambda1[0], rs.lambda2[0], fit.c2, diff
        ));
        ctx.report.check("lambda2-oracle", diff <= 1e-4);
    } else {
        ctx.report.summary.push(format!("coeffs: {} rows", t.rows.len()));
    }
    Ok(())
}

fn amplitude(plan: &RunPlan) -> Result<Vec<f64>> {
    plan.amplitude.sample(&plan.zgrid)
}

fn run_evolve(ctx: &mut Ctx) -> Result<()> {
    let plan = ctx.plan;
    let (h, sp) = spectrum(plan)?;
    let mode = effective_mode(&h, &plan.model, &sp, plan.study.cluster, plan.study.member)?;
    let amp = amplitude(plan)?;
    let camp: Vec<Complex64> = amp.iter().map(|a| Complex64::new(*a, 0.0)).collect();
    let chi = mode.chi.as_slice().expect("contiguous");
    let init = build_initial_fibered(&amp, chi, &plan.zgrid, &plan.grid, plan.model.epsilon())?;
    let states = propagate_times(&plan.model, plan.study.branch, &init, &plan.study.times, plan.study.propagator)?;
    let mut t = Table::new(&["t", "norm", "effective_norm", "error", "peak", "effective_peak", "drift_prediction"]);
    let mut env = Table::new(&["t", "z", "envelope", "effective_envelope"]);
    let mut unitarity = 0.0f64;
    let zg = &plan.zgrid;
    let wrap = |x: f64| (x + zg.half_length()).rem_euclid(2.0 * zg.half_length()) - zg.half_length();
    for (state, &time) in states.iter().zip(&plan.study.times) {
        for i in init.active() {
            unitarity = unitarity.max((state.fiber_norm(i) - init.fiber_norm(i)).abs());
        }
        let eff = effective_solution_fibered(time, &mode.eff, &camp, chi, zg, &plan.grid, &plan.model)?;
        let fs = synthesize(state);
        let fe = synthesize(&eff);
        t.push(vec![
            time,
            state.norm(),
            eff.norm(),
            state.distance(&eff)?,
            fs.peak(),
            fe.peak(),
            wrap(time * mode.eff.drift_velocity(&plan.model)),
        ]);
        for (j, (a, b)) in fs.envelope().iter().zip(fe.envelope()).enumerate() {
            env.push(vec![time, zg.z(j), *a, b]);
        }
    }
    ctx.table("evolve.csv", &t)?;
    ctx.table("envelope.csv", &env)?;
    if let Some(last) = states.last() {
        let f = synthesize(last);
        let n = plan.grid.n();
        let e = grid_extents(&plan.grid);
        ctx.field(
            "psi_final.field",
            &FieldData::Complex(f.values.iter().copied().collect()),
            &[n, n, zg.len()],
            &[e, e, [zg.z(0), zg.z(zg.len() - 1)]],
        )?;
    }
    let tol = if matches!(plan.study.propagator, Propagator::Dense) || plan.grid.n() <= 64 && plan.study.propagator == Propagator::Auto {
        1e-12
    } else {
        1e-8
    };
    ctx.report.summary.push(format!(
        "evolve: {} times, drift velocity {:.6}, max fiber-norm drift {:.2e}",
        plan.study.times.len(),
        mode.eff.drift_velocity(&plan.model),
        unitarity
    ));
    ctx.report.check("fiber-unitarity", unitarity <= tol);
    Ok(())
}

fn run_converge(ctx: &mut Ctx) -> Result<()> {
    let plan = ctx.plan;
    let (h, sp) = spectrum(plan)?;
    let mode = effective_mode(&h, &plan.model, &sp, plan.study.cluster, plan.study.member)?;
    let setup = StudySetup {
        zgrid: plan.zgrid.clone(),
        amplitude: plan.amplitude.clone(),
        propagator: plan.study.propagator,
    };
    let table = error_study(&plan.model, plan.study.branch, &mode, &setup, &plan.grid, &plan.study.times, &plan.study.eps)?;
    let mut t = Table::new(&["eps", "t", "error", "slope"]);
    for (e, &eps) in table.eps.iter().enumerate() {
        for (k, &time) in table.times.iter().enumerate() {
            t.push(vec![eps, time, table.errors[e][k], table.slopes[k]]);
        }
    }
    ctx.table("convergence.csv", &t)?;
    let beta = plan.model.beta();
    let in_window = table
        .times
        .iter()
        .zip(&table.slopes)
        .filter(|(time, _)| **time > 0.0)
        .all(|(_, s)| (s - beta).abs() <= 0.3);
    let growth = table.doubling_ratios().iter().all(|(_, _, e1, e2)| *e2 <= 2.5 * e1 + 1e-8);
    let slopes: Vec<String> = table.slopes.iter().map(|s| format!("{s:.3}")).collect();
    ctx.report.summary.push(format!(
        "converge: slopes [{}] against beta {beta}, max fiber-norm drift {:.2e}",
        slopes.join(" "),
        table.unitarity_defect
    ));
    ctx.report.check("rate-window", in_window && plan.study.eps.len() > 1);
    ctx.report.check("linear-growth", growth);
    Ok(())
}

fn run_almostinv(ctx: &mut Ctx) -> Result<()> {
    let plan = ctx.plan;
    let (h, sp) = spectrum(plan)?;
    let res = ReducedResolvent::new(&h, &sp, plan.study.cluster)?;
    let family = PerturbationFamily::new(&h, &plan.model, plan.study.momentum, plan.study.branch)?;
    let rows = almost_invariance_sweep(&family, &res, plan.study.order, &plan.study.etas)?;
    let mut t = Table::new(&["order", "eta", "t_defect", "commutator", "p_idempotency", "p_minus_t", "rank", "slope_t", "slope_commutator"]);
    let mut ok = true;
    let mut slopes_txt = Vec::new();
    for order in 0..=plan.study.order {
        let sel: Vec<_> = rows.iter().filter(|r| r.order == order).collect();
        let etas: Vec<f64> = sel.iter().map(|r| r.eta).collect();
        let td: Vec<f64> = sel.iter().map(|r| r.t_defect).collect();
        let cm: Vec<f64> = sel.iter().map(|r| r.commutator).collect();
        let exact_t = td.iter().all(|v| *v <= 1e-13);
        let st = if exact_t || etas.len() < 2 { f64::NAN } else { loglog_slope(&etas, &td) };
        let sc = if etas.len() < 2 { f64::NAN } else { loglog_slope(&etas, &cm) };
        let need = order as f64 + 1.0 - 0.3;
        ok &= (exact_t || st >= need) && sc >= need && sel.iter().all(|r| r.p_idempotency <= 1e-10);
        slopes_txt.push(format!("N={order}: T {st:.2}, [H,P] {sc:.2}"));
        for r in sel {
            t.push(vec![order as f64, r.eta, r.t_defect, r.commutator, r.p_idempotency, r.p_minus_t, r.rank as f64, st, sc]);
        }
    }
    ctx.table("defects.csv", &t)?;
    ctx.report.summary.push(format!("almostinv: {}", slopes_txt.join("; ")));
    ctx.report.check("defect-scaling", ok && plan.study.etas.len() > 1);
    Ok(())
}

fn run_decay(ctx: &mut Ctx) -> Result<()> {
    let plan = ctx.plan;
    let (h, sp) = spectrum(plan)?;
    let j = sp.clusters().get(plan.study.cluster).map(|c| c.members[0]).ok_or_else(|| {
        Error::InvalidInput(format!("cluster {} not computed", plan.study.cluster))
    })?;
    let chi = sp.eigenvector(j);
    let rep = decay_profile(chi.as_slice().expect("contiguous"), &plan.grid, &plan.study.omegas)?;
    let mut t = Table::new(&["omega", "weighted_norm", "resolvent_norm"]);
    for (k, &w) in plan.study.omegas.iter().enumerate() {
        let r = weighted_resolvent_norm(&h, Complex64::new(-1.0, 0.0), w, Some(&sp), plan.seed)?;
        t.push(vec![w, rep.weighted_norms[k], r]);
    }
    ctx.table("decay.csv", &t)?;
    let mut a = Table::new(&["r", "mean_abs_chi"]);
    for (r, c) in &rep.annuli {
        a.push(vec![*r, *c]);
    }
    ctx.table("decay_profile.csv", &a)?;
    ctx.report.summary.push(format!(
        "decay: slope vs r^2 {:.4}, slope vs r {:.4}, boundary mass {:.2e}",
        rep.slope_r2, rep.slope_r, rep.boundary_mass
    ));
    ctx.report.check("boundary-mass", rep.boundary_mass < 1e-10);
    Ok(())
}

fn run_general(ctx: &mut Ctx) -> Result<()> {
    let plan = ctx.plan;
    let (h, sp) = spectrum(plan)?;
    let amp = amplitude(plan)?;
    let mut terms = Vec::new();
    for spec in &plan.study.expansion {
        let mode = effective_mode(&h, &plan.model, &sp, spec.cluster, spec.member)?;
        let w = spec.weight.sqrt();
        terms.push(ExpansionTerm {
            mode,
            amplitude: amp.iter().map(|a| Complex64::new(a * w, 0.0)).collect(),
        });
    }
    let time = plan.study.times.last().copied().unwrap_or(0.0);
    let (state, report) = evolve_general(&terms, plan.study.delta, &plan.model, &plan.zgrid, &plan.grid, time)?;
    let mut t = Table::new(&["cluster", "member", "mass", "kept"]);
    for term in &terms {
        let kept = report.kept_clusters.contains(&term.mode.cluster);
        t.push(vec![term.mode.cluster as f64, term.mode.member as f64, term.mass(&plan.zgrid), if kept { 1.0 } else { 0.0 }]);
    }
    ctx.table("general.csv", &t)?;
    let mut b = Table::new(&["t", "tail_mass", "error_budget", "norm"]);
    b.push(vec![time, report.tail_mass, report.error_budget, state.norm()]);
    ctx.table("general_budget.csv", &b)?;
    ctx.report.summary.push(format!(
        "general: kept clusters {:?}, tail mass {:.3e}, error budget {:.3e}",
        report.kept_clusters, report.tail_mass, report.error_budget
    ));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "[model]\nalpha = 1.0\nepsilon = 0.1\n";

    #[test]
    fn minimal_config_has_beta_one_half() {
        let plan = parse_scenario(MINIMAL).unwrap();
        assert_eq!(plan.model.beta(), 0.5);
        assert_eq!(plan.grid.n(), 48);
        assert_eq!(plan.study.branch, Branch::Regular);
        assert_eq!(plan.config_sha256.len(), 64);
    }

    #[test]
    fn missing_alpha_names_the_key() {
        let err = parse_scenario("[model]\nepsilon = 0.1\n").unwrap_err();
        match err {
            Error::Parse { key, .. } => assert_eq!(key, "alpha"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_key_is_rejected_with_line() {
        let err = parse_scenario("[model]\nalpha = 1.0\nepsilon = 0.1\ngamma_typo = 4\n").unwrap_err();
        match err {
            Error::Parse { key, line, .. } => {
                assert_eq!(key, "gamma_typo");
                assert_eq!(line, 4);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_list_and_bad_enum_are_parse_errors() {
        let e = parse_scenario("[model]\nalpha = 1.0\nepsilon = 0.1\n[study]\neps = []\n").unwrap_err();
        assert!(matches!(e, Error::Parse { ref key, line: 5, .. } if key == "study.eps"));
        let e = parse_scenario("[model]\nalpha = 1.0\nepsilon = 0.1\n[grid]\nstencil = \"nine\"\n").unwrap_err();
        assert!(matches!(e, Error::Parse { ref key, .. } if key == "grid.stencil"));
    }

    #[test]
    fn domain_errors_are_not_parse_errors() {
        let e = parse_scenario("[model]\nalpha = 1.0\nepsilon = 2.0\n").unwrap_err();
        assert!(matches!(e, Error::AssumptionViolated { .. }));
        assert_eq!(exit_code(&Err(e)), 1);
        let p = parse_scenario("[model]\nalpha = 1.0\n").unwrap_err();
        assert_eq!(exit_code(&Err(p)), 2);
    }

    #[test]
    fn tail_selects_singular_branch() {
        let plan = parse_scenario("[model]\nalpha = 1.0\nepsilon = 0.1\n[model.tail]\ngamma = 4.0\ndelta = 4.0\ncoeff = 1.0\n").unwrap();
        assert_eq!(plan.study.branch, Branch::Singular);
    }

    #[test]
    fn cell_format_has_17_digits() {
        assert_eq!(fmt_cell(0.1), "1.0000000000000001e-1");
        assert_eq!(fmt_cell(-2.0), "-2.0000000000000000e0");
    }
}
