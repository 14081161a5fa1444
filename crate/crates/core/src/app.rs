//! Run configuration, segment generation and the end-to-end pipeline.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assembly::{assemble_system, build_blocks, BoxBcs, FaceBc, LineSet, Physics, Sources};
use crate::geometry::Traverser;
use crate::mesh::{build_box_mesh, import_mesh, BoxDomain, EndpointBc, SegmentGeom, TetMesh};
use crate::postprocess::{
    boundary_fluxes, equivalent_transmissivity, export_fields, inlet_outlet, Fields, FluxReport,
};
use crate::solver::{CgOptions, ReducedOperator, SolverState};

type BoxedError = Box<dyn std::error::Error + Send + Sync>;

#[derive(Debug, Error)]
pub enum AppError {
    #[error("{stage}: {source}")]
    Stage { stage: &'static str, source: BoxedError },
    #[error("config {path}: {msg}")]
    Config { path: String, msg: String },
    #[error("segment file {path}, line {line}: {msg}")]
    SegmentFile { path: String, line: usize, msg: String },
    #[error("segment generator: {0}")]
    Generator(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl AppError {
    /// Pipeline stage the error belongs to.
    pub fn stage(&self) -> &'static str {
        match self {
            AppError::Stage { stage, .. } => stage,
            AppError::Config { .. } => "config",
            AppError::SegmentFile { .. } | AppError::Generator(_) => "segments",
            AppError::Io { .. } => "io",
        }
    }
}

fn stage<E: Into<BoxedError>>(stage: &'static str) -> impl FnOnce(E) -> AppError {
    move |e| AppError::Stage { stage, source: e.into() }
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> AppError + '_ {
    move |source| AppError::Io { path: path.display().to_string(), source }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainConfig {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Default for DomainConfig {
    fn default() -> Self {
        Self { min: [-1.0; 3], max: [1.0; 3] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeshConfig {
    /// Target maximum tet diameter of the generated mesh.
    pub h: f64,
    /// Mesh file to import instead of generating one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhysicsConfig {
    #[serde(default = "unit3")]
    pub conductivity: [f64; 3],
    #[serde(default = "one")]
    pub alpha: f64,
    #[serde(default = "one")]
    pub alpha_hat: f64,
}

fn unit3() -> [f64; 3] {
    [1.0; 3]
}

fn one() -> f64 {
    1.0
}

impl Default for PhysicsConfig {
    fn default() -> Self {
        Self { conductivity: unit3(), alpha: 1.0, alpha_hat: 1.0 }
    }
}

/// `"neumann"` or `{ dirichlet = value }`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BcConfig {
    #[default]
    Neumann,
    Dirichlet(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundaryConfig {
    pub xm: BcConfig,
    pub xp: BcConfig,
    pub ym: BcConfig,
    pub yp: BcConfig,
    pub zm: BcConfig,
    pub zp: BcConfig,
}

impl BoundaryConfig {
    pub fn to_bcs(&self) -> BoxBcs {
        let f = |b: BcConfig| match b {
            BcConfig::Neumann => FaceBc::Neumann,
            BcConfig::Dirichlet(v) => FaceBc::Dirichlet(v),
        };
        BoxBcs([f(self.xm), f(self.xp), f(self.ym), f(self.yp), f(self.zm), f(self.zp)])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentConfig {
    pub p0: [f64; 3],
    pub p1: [f64; 3],
    pub radius: f64,
    pub conductivity: f64,
    #[serde(default)]
    pub bc0: BcConfig,
    #[serde(default)]
    pub bc1: BcConfig,
}

impl SegmentConfig {
    pub fn to_geom(&self) -> SegmentGeom {
        let f = |b: BcConfig| match b {
            BcConfig::Neumann => EndpointBc::Neumann,
            BcConfig::Dirichlet(v) => EndpointBc::Dirichlet(v),
        };
        let mut g = SegmentGeom::new(self.p0, self.p1, self.radius, self.conductivity);
        g.endpoint_bc = [f(self.bc0), f(self.bc1)];
        g
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Orientation {
    ZParallel,
    UniformRandom,
}

/// Seeded random segment layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    pub count: usize,
    pub mode: Orientation,
    pub seed: u64,
    #[serde(default = "default_bounds")]
    pub bounds: [f64; 2],
    pub radius: f64,
    pub conductivity: f64,
    #[serde(default = "default_min_length")]
    pub min_length: f64,
}

fn default_bounds() -> [f64; 2] {
    [-0.8, 0.8]
}

fn default_min_length() -> f64 {
    0.05
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentsConfig {
    #[serde(default = "default_ratio")]
    pub ratio: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub list: Vec<SegmentConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<GeneratorSpec>,
}

fn default_ratio() -> f64 {
    crate::mesh::DEFAULT_REFINEMENT_RATIO
}

impl Default for SegmentsConfig {
    fn default() -> Self {
        Self { ratio: default_ratio(), file: None, list: Vec::new(), generator: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
}

fn default_tol() -> f64 {
    1e-6
}

fn default_max_iter() -> usize {
    100_000
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { tol: default_tol(), max_iter: default_max_iter() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "default_out")]
    pub dir: PathBuf,
    /// Write the VTK file and per-segment CSVs.
    #[serde(default = "yes")]
    pub fields: bool,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

fn yes() -> bool {
    true
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: default_out(), fields: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub domain: DomainConfig,
    pub mesh: MeshConfig,
    #[serde(default)]
    pub physics: PhysicsConfig,
    pub boundary: BoundaryConfig,
    #[serde(default)]
    pub segments: SegmentsConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

impl RunConfig {
    pub fn parse(text: &str, origin: &str) -> Result<Self, AppError> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| AppError::Config { path: origin.to_string(), msg: e.to_string() })?;
        cfg.validate().map_err(|msg| AppError::Config { path: origin.to_string(), msg })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, AppError> {
        let text = fs::read_to_string(path).map_err(io(path))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    pub fn validate(&self) -> Result<(), String> {
        if !self.boundary.to_bcs().0.iter().any(|b| matches!(b, FaceBc::Dirichlet(_))) {
            return Err("at least one box face must carry a Dirichlet condition".into());
        }
        if !(self.mesh.h > 0.0) {
            return Err(format!("mesh.h must be positive, got {}", self.mesh.h));
        }
        if !(self.solver.tol > 0.0) {
            return Err(format!("solver.tol must be positive, got {}", self.solver.tol));
        }
        if !(self.segments.ratio > 0.0) {
            return Err(format!("segments.ratio must be positive, got {}", self.segments.ratio));
        }
        Ok(())
    }

    pub fn domain(&self) -> BoxDomain {
        BoxDomain::new(self.domain.min, self.domain.max)
    }

    pub fn physics(&self) -> Physics {
        Physics {
            conductivity: self.physics.conductivity,
            alpha: self.physics.alpha,
            alpha_hat: self.physics.alpha_hat,
        }
    }

    pub fn cg_options(&self) -> CgOptions {
        CgOptions { tol: self.solver.tol, max_iter: self.solver.max_iter, ..Default::default() }
    }

    /// Segments from the inline list, the segment file and the generator, in
    /// that order. Relative file paths are taken from `base`.
    pub fn collect_segments(&self, base: &Path) -> Result<Vec<SegmentGeom>, AppError> {
        let mut out: Vec<SegmentGeom> = self.segments.list.iter().map(SegmentConfig::to_geom).collect();
        if let Some(file) = &self.segments.file {
            out.extend(read_segments(&base.join(file))?);
        }
        if let Some(g) = &self.segments.generator {
            out.extend(generate_segments(g)?);
        }
        Ok(out)
    }
}

/// Draws `spec.count` segments. `z-parallel` segments span the bounds along
/// `z` at uniform `(x, y)`; `uniform-random` segments have both endpoints
/// uniform in the bounding cube and at least `min_length` long.
pub fn generate_segments(spec: &GeneratorSpec) -> Result<Vec<SegmentGeom>, AppError> {
    let [lo, hi] = spec.bounds;
    if !(lo < hi) {
        return Err(AppError::Generator(format!("empty bounds [{lo}, {hi}]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::with_capacity(spec.count);
    match spec.mode {
        Orientation::ZParallel => {
            for _ in 0..spec.count {
                let (x, y) = (rng.gen_range(lo..hi), rng.gen_range(lo..hi));
                out.push(SegmentGeom::new([x, y, lo], [x, y, hi], spec.radius, spec.conductivity));
            }
        }
        Orientation::UniformRandom => {
            let mut draws = 0;
            while out.len() < spec.count {
                if draws >= 100 * spec.count {
                    return Err(AppError::Generator(format!(
                        "{} draws produced only {} segments longer than {}",
                        draws,
                        out.len(),
                        spec.min_length
                    )));
                }
                draws += 1;
                let p0: [f64; 3] = std::array::from_fn(|_| rng.gen_range(lo..hi));
                let p1: [f64; 3] = std::array::from_fn(|_| rng.gen_range(lo..hi));
                let g = SegmentGeom::new(p0, p1, spec.radius, spec.conductivity);
                if g.length() >= spec.min_length {
                    out.push(g);
                }
            }
        }
    }
    Ok(out)
}

/// One line per segment: `x0 y0 z0 x1 y1 z1 R Ktilde`.
pub fn format_segments(segs: &[SegmentGeom]) -> String {
    let mut s = String::from("# x0 y0 z0 x1 y1 z1 R Ktilde\n");
    for g in segs {
        let _ = writeln!(
            s,
            "{} {} {} {} {} {} {} {}",
            g.p0[0], g.p0[1], g.p0[2], g.p1[0], g.p1[1], g.p1[2], g.radius, g.conductivity
        );
    }
    s
}

pub fn parse_segments(text: &str, origin: &str) -> Result<Vec<SegmentGeom>, AppError> {
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let body = line.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let bad = |msg: String| AppError::SegmentFile { path: origin.to_string(), line: ln + 1, msg };
        let v: Vec<f64> = body
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|_| bad(format!("not a number: {t}"))))
            .collect::<Result<_, _>>()?;
        if v.len() != 8 {
            return Err(bad(format!("expected 8 values, found {}", v.len())));
        }
        out.push(SegmentGeom::new([v[0], v[1], v[2]], [v[3], v[4], v[5]], v[6], v[7]));
    }
    Ok(out)
}

pub fn read_segments(path: &Path) -> Result<Vec<SegmentGeom>, AppError> {
    let text = fs::read_to_string(path).map_err(io(path))?;
    parse_segments(&text, &path.display().to_string())
}

pub fn write_segments(path: &Path, segs: &[SegmentGeom]) -> Result<(), AppError> {
    fs::write(path, format_segments(segs)).map_err(io(path))
}

/// Inputs of one coupled solve.
pub struct Problem {
    pub mesh: TetMesh,
    pub segments: Vec<SegmentGeom>,
    pub physics: Physics,
    pub bcs: BoxBcs,
    pub ratio: f64,
}

/// Output of [`solve`].
pub struct Solution {
    pub lines: LineSet,
    pub cg: SolverState,
    /// 3D solution on all nodes.
    pub u: Vec<f64>,
    /// Stacked 1D solution on all nodes.
    pub uhat: Vec<f64>,
    pub phi: Vec<f64>,
    pub psi: Vec<f64>,
    pub fluxes: FluxReport,
    pub keq: Option<f64>,
}

impl Solution {
    pub fn iter_ratio(&self) -> f64 {
        let n = self.phi.len() + self.psi.len();
        if n == 0 { 0.0 } else { self.cg.iterations as f64 / n as f64 }
    }
}

/// Equivalent transmissivity when the pressure drop is between opposite
/// faces of one axis.
pub fn keq_for(mesh: &TetMesh, bcs: &BoxBcs, fluxes: &FluxReport) -> Option<f64> {
    let (inlet, outlet, drop) = inlet_outlet(bcs)?;
    if inlet.axis() != outlet.axis() {
        return None;
    }
    equivalent_transmissivity(fluxes, drop, mesh.domain().edge(outlet.axis())).ok()
}

/// traverse → 1D meshes → assemble → factorize → CG → recover → fluxes
pub fn solve(problem: &Problem, opts: &CgOptions) -> Result<Solution, AppError> {
    let t0 = Instant::now();
    let traverser = Traverser::new(&problem.mesh);
    let lines = LineSet::build(&traverser, &problem.segments, problem.ratio).map_err(stage("traverse"))?;
    info!("traversed {} segments in {:.2?}", lines.len(), t0.elapsed());
    let sys = assemble_system(&problem.mesh, &lines, &problem.physics, &problem.bcs, &Sources::default())
        .map_err(stage("assemble"))?;
    let blocks = build_blocks(&sys).map_err(stage("assemble"))?;
    info!("assembled in {:.2?}", t0.elapsed());
    let op = ReducedOperator::new(blocks).map_err(stage("factorize"))?;
    info!("factorized in {:.2?}", t0.elapsed());
    let cg = op.solve(opts).map_err(stage("cg"))?;
    let rec = op.recover_state(&cg.x).map_err(stage("recover"))?;
    let u = sys.u_dofs.expand(&rec.u_free);
    let uhat = sys.uhat_dofs.expand(&rec.uhat_free);
    let (phi, psi) = cg.x.split_at(op.n_phi());
    let (phi, psi) = (phi.to_vec(), psi.to_vec());
    let fluxes =
        boundary_fluxes(&problem.mesh, &u, problem.physics.conductivity, &problem.bcs).map_err(stage("postprocess"))?;
    let keq = keq_for(&problem.mesh, &problem.bcs, &fluxes);
    info!("solved in {:.2?}", t0.elapsed());
    Ok(Solution { lines, cg, u, uhat, phi, psi, fluxes, keq })
}

/// Columns of the summary file.
pub const SUMMARY_HEADER: &str = "N,Nhat,Nphi,Npsi,cg_iters,iter_ratio,sigma_xm,sigma_xp,sigma_ym,sigma_yp,sigma_zm,sigma_zp,total_mismatch,rel_mismatch,Keq";

/// Figures reported for one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub n: usize,
    pub nhat: usize,
    pub nphi: usize,
    pub npsi: usize,
    pub cg_iters: usize,
    pub iter_ratio: f64,
    pub sigma: [f64; 6],
    pub total_mismatch: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rel_mismatch: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub keq: Option<f64>,
    pub tol: f64,
    pub max_iter: usize,
    pub final_residual: f64,
}

impl RunReport {
    pub fn new(mesh: &TetMesh, sol: &Solution) -> Self {
        Self {
            n: mesh.num_nodes(),
            nhat: sol.uhat.len(),
            nphi: sol.phi.len(),
            npsi: sol.psi.len(),
            cg_iters: sol.cg.iterations,
            iter_ratio: sol.iter_ratio(),
            sigma: sol.fluxes.sigma,
            total_mismatch: sol.fluxes.total_mismatch(),
            rel_mismatch: sol.fluxes.relative_mismatch(),
            keq: sol.keq,
            tol: sol.cg.tol,
            max_iter: sol.cg.max_iter,
            final_residual: sol.cg.history.last().copied().unwrap_or(0.0),
        }
    }

    pub fn summary_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
        let mut s = String::from(SUMMARY_HEADER);
        s.push('\n');
        let _ = write!(s, "{},{},{},{},{},{:e}", self.n, self.nhat, self.nphi, self.npsi, self.cg_iters, self.iter_ratio);
        for v in self.sigma {
            let _ = write!(s, ",{v:e}");
        }
        let _ = writeln!(s, ",{:e},{},{}", self.total_mismatch, opt(self.rel_mismatch), opt(self.keq));
        s
    }
}

/// Builds or imports the mesh described by the config.
pub fn build_mesh(cfg: &RunConfig, base: &Path) -> Result<TetMesh, AppError> {
    match &cfg.mesh.file {
        Some(f) => import_mesh(&base.join(f)).map_err(stage("mesh")),
        None => build_box_mesh(&cfg.domain(), cfg.mesh.h).map_err(stage("mesh")),
    }
}

/// Runs a configured case and writes `summary.csv`, `report.toml`,
/// `residuals.csv`, `fluxes.csv` and, when enabled, the solution fields
/// into the output directory. Relative paths in the config resolve against
/// `base`.
pub fn run(cfg: &RunConfig, base: &Path) -> Result<RunReport, AppError> {
    let mesh = build_mesh(cfg, base)?;
    info!("mesh: {} nodes, {} tets, h = {:.4}", mesh.num_nodes(), mesh.num_tets(), mesh.h());
    let segments = cfg.collect_segments(base)?;
    let bcs = cfg.boundary.to_bcs();
    let problem = Problem { mesh, segments, physics: cfg.physics(), bcs, ratio: cfg.segments.ratio };
    let sol = solve(&problem, &cfg.cg_options())?;
    let report = RunReport::new(&problem.mesh, &sol);

    let dir = &base.join(&cfg.output.dir);
    fs::create_dir_all(dir).map_err(io(dir))?;
    let write = |name: &str, text: String| {
        let p = dir.join(name);
        fs::write(&p, text).map_err(|source| AppError::Io { path: p.display().to_string(), source })
    };
    write("summary.csv", report.summary_csv())?;
    write("report.toml", toml::to_string(&report).expect("report is serializable"))?;
    let mut hist = Vec::new();
    sol.cg.write_history_csv(&mut hist).map_err(io(dir))?;
    write("residuals.csv", String::from_utf8(hist).expect("ascii"))?;
    let mut flux = Vec::new();
    sol.fluxes.write_csv(&mut flux).map_err(io(dir))?;
    write("fluxes.csv", String::from_utf8(flux).expect("ascii"))?;
    if cfg.output.fields {
        let fields = Fields { u: &sol.u, uhat: &sol.uhat, phi: &sol.phi, psi: &sol.psi };
        export_fields(dir, &problem.mesh, &sol.lines, &fields, None).map_err(stage("export"))?;
    }
    Ok(report)
}
