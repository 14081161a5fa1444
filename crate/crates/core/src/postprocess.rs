//! Boundary fluxes, equivalent transmissivity and field export.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use thiserror::Error;

use crate::assembly::{BoxBcs, FaceBc, LineSet};
use crate::mesh::{ElementKind, FaceTag, Mesh1D, Point3, TetMesh};

#[derive(Debug, Error)]
pub enum PostprocessError {
    #[error("no inlet/outlet pair: exactly two Dirichlet faces with different values are required")]
    NoPressureDrop,
    #[error("outlet face {0} has zero area")]
    ZeroArea(FaceTag),
    #[error("pressure drop must be positive, got {0}")]
    InvalidDrop(f64),
    #[error("length mismatch for {what}: expected {expected}, got {got}")]
    Length { what: &'static str, expected: usize, got: usize },
    #[error("cannot write {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("cannot read {path}: {msg}")]
    Parse { path: String, msg: String },
}

/// Fluxes through the six box faces.
#[derive(Debug, Clone, PartialEq)]
pub struct FluxReport {
    /// `σ_i = −∫ K∇U·n_i`, indexed by [`FaceTag::index`].
    pub sigma: [f64; 6],
    pub area: [f64; 6],
    pub inlet: Option<FaceTag>,
    pub outlet: Option<FaceTag>,
}

impl FluxReport {
    pub fn get(&self, tag: FaceTag) -> f64 {
        self.sigma[tag.index()]
    }

    /// `|Σ_i σ_i|`
    pub fn total_mismatch(&self) -> f64 {
        self.sigma.iter().sum::<f64>().abs()
    }

    /// `||σ_out| − |σ_in|| / |σ_out|`
    pub fn relative_mismatch(&self) -> Option<f64> {
        let (i, o) = (self.inlet?, self.outlet?);
        let out = self.get(o).abs();
        Some((out - self.get(i).abs()).abs() / out)
    }

    /// Writes `face,sigma` rows.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "face,sigma")?;
        for tag in FaceTag::ALL {
            writeln!(w, "{},{:e}", tag.name(), self.get(tag))?;
        }
        Ok(())
    }
}

/// The inlet (higher value) and outlet (lower value) when exactly two faces
/// carry different Dirichlet values.
pub fn inlet_outlet(bcs: &BoxBcs) -> Option<(FaceTag, FaceTag, f64)> {
    let dir: Vec<(FaceTag, f64)> = FaceTag::ALL
        .iter()
        .filter_map(|&t| match bcs.get(t) {
            FaceBc::Dirichlet(v) => Some((t, v)),
            FaceBc::Neumann => None,
        })
        .collect();
    match dir.as_slice() {
        [(a, va), (b, vb)] if va != vb => {
            if va > vb { Some((*a, *b, va - vb)) } else { Some((*b, *a, vb - va)) }
        }
        _ => None,
    }
}

fn triangle_area(a: &Point3, b: &Point3, c: &Point3) -> f64 {
    let u = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let v = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
    let x = [u[1] * v[2] - u[2] * v[1], u[2] * v[0] - u[0] * v[2], u[0] * v[1] - u[1] * v[0]];
    0.5 * (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]).sqrt()
}

/// Integrates the piecewise-constant normal flux of `u` (all nodes) over
/// each box face, using the gradient of the tetrahedron owning each
/// boundary triangle.
pub fn boundary_fluxes(
    mesh: &TetMesh,
    u: &[f64],
    conductivity: [f64; 3],
    bcs: &BoxBcs,
) -> Result<FluxReport, PostprocessError> {
    if u.len() != mesh.num_nodes() {
        return Err(PostprocessError::Length { what: "U", expected: mesh.num_nodes(), got: u.len() });
    }
    let mut sigma = [0.0; 6];
    let mut area = [0.0; 6];
    for f in mesh.boundary_faces() {
        let nodes = mesh.nodes();
        let a = triangle_area(&nodes[f.nodes[0]], &nodes[f.nodes[1]], &nodes[f.nodes[2]]);
        let g = mesh.basis_gradients(f.tet);
        let tet = mesh.tets()[f.tet];
        let axis = f.tag.axis();
        let grad: f64 = (0..4).map(|j| u[tet[j]] * g[j][axis]).sum();
        let sign = if f.tag.is_max_side() { 1.0 } else { -1.0 };
        sigma[f.tag.index()] -= a * conductivity[axis] * grad * sign;
        area[f.tag.index()] += a;
    }
    let (inlet, outlet) = match inlet_outlet(bcs) {
        Some((i, o, _)) => (Some(i), Some(o)),
        None => (None, None),
    };
    Ok(FluxReport { sigma, area, inlet, outlet })
}

/// `Keq = |σ_out| / (|∂Ω_out| · drop / edge_length)`.
pub fn equivalent_transmissivity(report: &FluxReport, drop: f64, edge_length: f64) -> Result<f64, PostprocessError> {
    let outlet = report.outlet.ok_or(PostprocessError::NoPressureDrop)?;
    if !(drop > 0.0) {
        return Err(PostprocessError::InvalidDrop(drop));
    }
    let area = report.area[outlet.index()];
    if !(area > 0.0) {
        return Err(PostprocessError::ZeroArea(outlet));
    }
    Ok(report.get(outlet).abs() / (area * drop / edge_length))
}

fn create(path: &Path) -> Result<BufWriter<fs::File>, PostprocessError> {
    let file = fs::File::create(path).map_err(|source| PostprocessError::Io { path: path.display().to_string(), source })?;
    Ok(BufWriter::new(file))
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> PostprocessError + '_ {
    move |source| PostprocessError::Io { path: path.display().to_string(), source }
}

/// Legacy ASCII unstructured grid with `U` as point data.
pub fn write_vtk<W: Write>(mesh: &TetMesh, u: &[f64], mut w: W) -> std::io::Result<()> {
    writeln!(w, "# vtk DataFile Version 3.0")?;
    writeln!(w, "coupled 3D-1D solution")?;
    writeln!(w, "ASCII")?;
    writeln!(w, "DATASET UNSTRUCTURED_GRID")?;
    writeln!(w, "POINTS {} double", mesh.num_nodes())?;
    for p in mesh.nodes() {
        writeln!(w, "{} {} {}", p[0], p[1], p[2])?;
    }
    writeln!(w, "CELLS {} {}", mesh.num_tets(), 5 * mesh.num_tets())?;
    for t in mesh.tets() {
        writeln!(w, "4 {} {} {} {}", t[0], t[1], t[2], t[3])?;
    }
    writeln!(w, "CELL_TYPES {}", mesh.num_tets())?;
    for _ in mesh.tets() {
        writeln!(w, "10")?;
    }
    writeln!(w, "POINT_DATA {}", u.len())?;
    writeln!(w, "SCALARS U double 1")?;
    writeln!(w, "LOOKUP_TABLE default")?;
    for v in u {
        writeln!(w, "{v}")?;
    }
    Ok(())
}

/// Contents of a legacy VTK file written by [`write_vtk`].
#[derive(Debug, Clone, PartialEq)]
pub struct VtkField {
    pub points: Vec<Point3>,
    pub cells: Vec<Vec<usize>>,
    pub point_data: Vec<f64>,
}

/// Reads back the subset of the legacy format that [`write_vtk`] produces.
pub fn read_vtk(path: &Path) -> Result<VtkField, PostprocessError> {
    let bad = |msg: &str| PostprocessError::Parse { path: path.display().to_string(), msg: msg.to_string() };
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut tokens = text.lines().skip(4).flat_map(str::split_whitespace);
    let mut next = || tokens.next().ok_or_else(|| bad("unexpected end of file"));
    let expect = |tok: &str, want: &str| if tok == want { Ok(()) } else { Err(bad(&format!("expected {want}, found {tok}"))) };
    let num = |tok: &str| tok.parse::<f64>().map_err(|_| bad(&format!("bad number {tok}")));
    let int = |tok: &str| tok.parse::<usize>().map_err(|_| bad(&format!("bad integer {tok}")));

    expect(next()?, "POINTS")?;
    let np = int(next()?)?;
    next()?;
    let mut points = Vec::with_capacity(np);
    for _ in 0..np {
        points.push([num(next()?)?, num(next()?)?, num(next()?)?]);
    }
    expect(next()?, "CELLS")?;
    let nc = int(next()?)?;
    next()?;
    let mut cells = Vec::with_capacity(nc);
    for _ in 0..nc {
        let k = int(next()?)?;
        cells.push((0..k).map(|_| next().and_then(|t| int(t))).collect::<Result<Vec<_>, _>>()?);
    }
    expect(next()?, "CELL_TYPES")?;
    let nt = int(next()?)?;
    for _ in 0..nt {
        next()?;
    }
    expect(next()?, "POINT_DATA")?;
    let nd = int(next()?)?;
    // SCALARS U double 1 / LOOKUP_TABLE default
    for _ in 0..6 {
        next()?;
    }
    let point_data = (0..nd).map(|_| next().and_then(|t| num(t))).collect::<Result<Vec<_>, _>>()?;
    Ok(VtkField { points, cells, point_data })
}

fn eval_1d(mesh: &Mesh1D, values: &[f64], s: f64) -> f64 {
    let (b, n) = mesh.basis_at(mesh.cell_of(s), s);
    b[..n].iter().map(|&(k, w)| w * values[k]).sum()
}

/// Samples `Û`, `Ψ` and `Φ` of one segment at every node of its three
/// meshes. `Φ` at a cell boundary takes the value of the cell on the right
/// (the last cell at `s = S`).
pub fn segment_samples(lines: &LineSet, seg: usize, uhat: &[f64], psi: &[f64], phi: &[f64]) -> Vec<[f64; 4]> {
    let m = &lines.segments[seg].meshes;
    let (uh, ps, ph) = (&uhat[lines.uhat_range(seg)], &psi[lines.psi_range(seg)], &phi[lines.phi_range(seg)]);
    let mut s: Vec<f64> = [&m.uhat, &m.psi, &m.phi].iter().flat_map(|mm| mm.nodes().iter().copied()).collect();
    s.sort_by(f64::total_cmp);
    s.dedup_by(|a, b| (*a - *b).abs() <= 1e-12 * m.uhat.length());
    debug_assert_eq!(m.phi.kind(), ElementKind::P0Cellwise);
    s.into_iter()
        .map(|s| [s, eval_1d(&m.uhat, uh, s), eval_1d(&m.psi, ps, s), ph[m.phi.cell_of(s)]])
        .collect()
}

pub fn write_segment_csv<W: Write>(rows: &[[f64; 4]], mut w: W) -> std::io::Result<()> {
    writeln!(w, "s,Uhat,Psi,Phi")?;
    for r in rows {
        writeln!(w, "{:e},{:e},{:e},{:e}", r[0], r[1], r[2], r[3])?;
    }
    Ok(())
}

/// Full solution fields for export.
pub struct Fields<'a> {
    /// 3D solution on all nodes.
    pub u: &'a [f64],
    /// Stacked 1D solution on all nodes.
    pub uhat: &'a [f64],
    pub phi: &'a [f64],
    pub psi: &'a [f64],
}

/// Writes `solution.vtk`, one `segment_<i>.csv` per segment and, when
/// given, `fluxes.csv` into `dir`.
pub fn export_fields(
    dir: &Path,
    mesh: &TetMesh,
    lines: &LineSet,
    fields: &Fields<'_>,
    fluxes: Option<&FluxReport>,
) -> Result<(), PostprocessError> {
    let check = |what, expected: usize, got: usize| {
        if expected == got { Ok(()) } else { Err(PostprocessError::Length { what, expected, got }) }
    };
    check("U", mesh.num_nodes(), fields.u.len())?;
    check("Û", lines.n_uhat(), fields.uhat.len())?;
    check("Φ", lines.n_phi(), fields.phi.len())?;
    check("Ψ", lines.n_psi(), fields.psi.len())?;
    fs::create_dir_all(dir).map_err(io_err(dir))?;

    let path = dir.join("solution.vtk");
    let mut w = create(&path)?;
    write_vtk(mesh, fields.u, &mut w).and_then(|_| w.flush()).map_err(io_err(&path))?;
    for i in 0..lines.len() {
        let path = dir.join(format!("segment_{i}.csv"));
        let rows = segment_samples(lines, i, fields.uhat, fields.psi, fields.phi);
        let mut w = create(&path)?;
        write_segment_csv(&rows, &mut w).and_then(|_| w.flush()).map_err(io_err(&path))?;
    }
    if let Some(report) = fluxes {
        let path = dir.join("fluxes.csv");
        let mut w = create(&path)?;
        report.write_csv(&mut w).and_then(|_| w.flush()).map_err(io_err(&path))?;
    }
    Ok(())
}
