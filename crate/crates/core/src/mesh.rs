//! Tetrahedral mesh of an axis-aligned box and the uniform 1D meshes laid on
//! each inclusion centreline.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use log::warn;
use thiserror::Error;

pub type Point3 = [f64; 3];

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("degenerate box: edge {axis} has length {length}")]
    DegenerateBox { axis: usize, length: f64 },
    #[error("invalid mesh size h = {0}")]
    InvalidSize(f64),
    #[error("tetrahedron {tet} is inverted or degenerate (signed volume {volume:e})")]
    InvertedTet { tet: usize, volume: f64 },
    #[error("face {face:?} is shared by {count} tetrahedra (non-manifold)")]
    NonManifold { face: [usize; 3], count: usize },
    #[error("boundary face {face:?} does not lie on a box face")]
    UntaggedFace { face: [usize; 3] },
    #[error("tet {tet} references node {node} but only {nodes} nodes exist")]
    BadIndex { tet: usize, node: usize, nodes: usize },
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("invalid segment {index}: {msg}")]
    InvalidSegment { index: usize, msg: String },
}

/// Axis-aligned box `[min, max]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxDomain {
    pub min: Point3,
    pub max: Point3,
}

impl BoxDomain {
    pub fn new(min: Point3, max: Point3) -> Self {
        Self { min, max }
    }

    /// Cube of the given edge centred at the origin.
    pub fn centered_cube(edge: f64) -> Self {
        let h = 0.5 * edge;
        Self { min: [-h; 3], max: [h; 3] }
    }

    pub fn edge(&self, axis: usize) -> f64 {
        self.max[axis] - self.min[axis]
    }

    pub fn min_edge(&self) -> f64 {
        (0..3).map(|a| self.edge(a)).fold(f64::INFINITY, f64::min)
    }

    pub fn max_edge(&self) -> f64 {
        (0..3).map(|a| self.edge(a)).fold(0.0, f64::max)
    }

    pub fn volume(&self) -> f64 {
        self.edge(0) * self.edge(1) * self.edge(2)
    }

    pub fn contains(&self, p: &Point3, tol: f64) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] - tol && p[a] <= self.max[a] + tol)
    }

    pub fn face_area(&self, tag: FaceTag) -> f64 {
        let axis = tag.axis();
        let (a, b) = ((axis + 1) % 3, (axis + 2) % 3);
        self.edge(a) * self.edge(b)
    }

    fn validate(&self) -> Result<(), MeshError> {
        for axis in 0..3 {
            let length = self.edge(axis);
            if !(length > 0.0) || !length.is_finite() {
                return Err(MeshError::DegenerateBox { axis, length });
            }
        }
        Ok(())
    }
}

/// One of the six box faces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FaceTag {
    XMinus,
    XPlus,
    YMinus,
    YPlus,
    ZMinus,
    ZPlus,
}

impl FaceTag {
    pub const ALL: [FaceTag; 6] =
        [FaceTag::XMinus, FaceTag::XPlus, FaceTag::YMinus, FaceTag::YPlus, FaceTag::ZMinus, FaceTag::ZPlus];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn axis(self) -> usize {
        self.index() / 2
    }

    pub fn is_max_side(self) -> bool {
        self.index() % 2 == 1
    }

    /// Outward unit normal.
    pub fn normal(self) -> Point3 {
        let mut n = [0.0; 3];
        n[self.axis()] = if self.is_max_side() { 1.0 } else { -1.0 };
        n
    }

    pub fn name(self) -> &'static str {
        ["x-", "x+", "y-", "y+", "z-", "z+"][self.index()]
    }

    /// Column-friendly name used in reports (`xm`, `xp`, ...).
    pub fn short_name(self) -> &'static str {
        ["xm", "xp", "ym", "yp", "zm", "zp"][self.index()]
    }

    pub fn parse(s: &str) -> Option<Self> {
        FaceTag::ALL.into_iter().find(|t| t.name() == s || t.short_name() == s)
    }
}

impl fmt::Display for FaceTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundaryFace {
    pub nodes: [usize; 3],
    /// The unique tetrahedron owning the face.
    pub tet: usize,
    pub tag: FaceTag,
}

/// Conforming tetrahedral mesh of a box.
#[derive(Debug, Clone, PartialEq)]
pub struct TetMesh {
    nodes: Vec<Point3>,
    tets: Vec<[usize; 4]>,
    boundary_faces: Vec<BoundaryFace>,
    domain: BoxDomain,
    h: f64,
}

fn sub(a: &Point3, b: &Point3) -> Point3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: &Point3, b: &Point3) -> Point3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn dot3(a: &Point3, b: &Point3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn distance(a: &Point3, b: &Point3) -> f64 {
    let d = sub(a, b);
    dot3(&d, &d).sqrt()
}

/// Signed volume of the tetrahedron `(a, b, c, d)`.
pub fn signed_volume(a: &Point3, b: &Point3, c: &Point3, d: &Point3) -> f64 {
    dot3(&sub(b, a), &cross(&sub(c, a), &sub(d, a))) / 6.0
}

impl TetMesh {
    /// Validates connectivity, derives boundary faces and tags them against
    /// the bounding box of the nodes.
    pub fn from_parts(nodes: Vec<Point3>, tets: Vec<[usize; 4]>) -> Result<Self, MeshError> {
        let n = nodes.len();
        for (t, tet) in tets.iter().enumerate() {
            if let Some(&node) = tet.iter().find(|&&v| v >= n) {
                return Err(MeshError::BadIndex { tet: t, node, nodes: n });
            }
        }
        let mut min = [f64::INFINITY; 3];
        let mut max = [f64::NEG_INFINITY; 3];
        for p in &nodes {
            for a in 0..3 {
                min[a] = min[a].min(p[a]);
                max[a] = max[a].max(p[a]);
            }
        }
        let domain = BoxDomain::new(min, max);
        domain.validate()?;

        let scale = domain.max_edge();
        for (t, tet) in tets.iter().enumerate() {
            let volume = signed_volume(&nodes[tet[0]], &nodes[tet[1]], &nodes[tet[2]], &nodes[tet[3]]);
            if !(volume > 1e-14 * scale.powi(3)) {
                return Err(MeshError::InvertedTet { tet: t, volume });
            }
        }

        let mut faces: Vec<([u32; 3], u32)> = Vec::with_capacity(4 * tets.len());
        for (t, tet) in tets.iter().enumerate() {
            for skip in 0..4 {
                let mut f = [0u32; 3];
                let mut k = 0;
                for (i, &v) in tet.iter().enumerate() {
                    if i != skip {
                        f[k] = v as u32;
                        k += 1;
                    }
                }
                f.sort_unstable();
                faces.push((f, t as u32));
            }
        }
        faces.sort_unstable();
        let mut boundary_faces = Vec::new();
        let tol = 1e-12 * scale.max(1.0);
        let mut i = 0;
        while i < faces.len() {
            let mut j = i + 1;
            while j < faces.len() && faces[j].0 == faces[i].0 {
                j += 1;
            }
            let face = faces[i].0.map(|v| v as usize);
            let tet = faces[i].1 as usize;
            match j - i {
                1 => {
                    let tag = FaceTag::ALL
                        .into_iter()
                        .find(|tag| {
                            let axis = tag.axis();
                            let plane = if tag.is_max_side() { max[axis] } else { min[axis] };
                            face.iter().all(|&v| (nodes[v][axis] - plane).abs() <= tol)
                        })
                        .ok_or(MeshError::UntaggedFace { face })?;
                    // orient so the normal of (a, b, c) points outward
                    let opposite = tets[tet].iter().copied().find(|v| !face.contains(v)).unwrap();
                    let mut f = face;
                    if signed_volume(&nodes[f[0]], &nodes[f[1]], &nodes[f[2]], &nodes[opposite]) > 0.0 {
                        f.swap(1, 2);
                    }
                    boundary_faces.push(BoundaryFace { nodes: f, tet, tag });
                }
                2 => {}
                count => return Err(MeshError::NonManifold { face, count }),
            }
            i = j;
        }
        boundary_faces.sort_by_key(|f| (f.tag, f.tet, f.nodes));

        let h = tets.iter().map(|t| tet_diameter(&nodes, t)).fold(0.0, f64::max);
        Ok(Self { nodes, tets, boundary_faces, domain, h })
    }

    pub fn nodes(&self) -> &[Point3] {
        &self.nodes
    }

    pub fn tets(&self) -> &[[usize; 4]] {
        &self.tets
    }

    pub fn boundary_faces(&self) -> &[BoundaryFace] {
        &self.boundary_faces
    }

    pub fn domain(&self) -> &BoxDomain {
        &self.domain
    }

    /// Maximum tetrahedron diameter.
    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_tets(&self) -> usize {
        self.tets.len()
    }

    pub fn tet_vertices(&self, t: usize) -> [Point3; 4] {
        self.tets[t].map(|v| self.nodes[v])
    }

    pub fn tet_volume(&self, t: usize) -> f64 {
        let [a, b, c, d] = self.tet_vertices(t);
        signed_volume(&a, &b, &c, &d)
    }

    /// Barycentric coordinates of `p` with respect to tet `t`.
    pub fn barycentric(&self, t: usize, p: &Point3) -> [f64; 4] {
        let [a, b, c, d] = self.tet_vertices(t);
        let v = signed_volume(&a, &b, &c, &d);
        let l0 = signed_volume(p, &b, &c, &d) / v;
        let l1 = signed_volume(&a, p, &c, &d) / v;
        let l2 = signed_volume(&a, &b, p, &d) / v;
        let l3 = signed_volume(&a, &b, &c, p) / v;
        [l0, l1, l2, l3]
    }

    /// Constant gradients of the four P1 basis functions on tet `t`.
    pub fn basis_gradients(&self, t: usize) -> [Point3; 4] {
        let [a, b, c, d] = self.tet_vertices(t);
        let six_v = 6.0 * signed_volume(&a, &b, &c, &d);
        // grad λ_i = (face normal opposite to i, pointing towards i) / (6V)
        let g0 = cross(&sub(&d, &b), &sub(&c, &b));
        let g1 = cross(&sub(&c, &a), &sub(&d, &a));
        let g2 = cross(&sub(&d, &a), &sub(&b, &a));
        let g3 = cross(&sub(&b, &a), &sub(&c, &a));
        [g0, g1, g2, g3].map(|g| g.map(|x| x / six_v))
    }

    /// Writes the plain-text `nodes`/`tets` format.
    pub fn write_text<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "nodes {}", self.nodes.len())?;
        for p in &self.nodes {
            writeln!(w, "{} {} {}", p[0], p[1], p[2])?;
        }
        writeln!(w, "tets {}", self.tets.len())?;
        for t in &self.tets {
            writeln!(w, "{} {} {} {}", t[0], t[1], t[2], t[3])?;
        }
        Ok(())
    }

    pub fn export(&self, path: &Path) -> Result<(), MeshError> {
        let io = |source| MeshError::Io { path: path.display().to_string(), source };
        let file = fs::File::create(path).map_err(io)?;
        let mut w = std::io::BufWriter::new(file);
        self.write_text(&mut w).map_err(io)?;
        w.flush().map_err(io)
    }
}

fn tet_diameter(nodes: &[Point3], t: &[usize; 4]) -> f64 {
    let mut d: f64 = 0.0;
    for i in 0..4 {
        for j in i + 1..4 {
            d = d.max(distance(&nodes[t[i]], &nodes[t[j]]));
        }
    }
    d
}

/// Structured mesh of `domain`: each axis is split into
/// `ceil(edge / (h_target/√3))` cells and every brick is cut into six
/// tetrahedra sharing its main diagonal (Kuhn split), so the maximum tet
/// diameter (the brick diagonal) does not exceed `h_target`.
pub fn build_box_mesh(domain: &BoxDomain, h_target: f64) -> Result<TetMesh, MeshError> {
    domain.validate()?;
    if !(h_target > 0.0) || !h_target.is_finite() {
        return Err(MeshError::InvalidSize(h_target));
    }
    let cell = h_target / 3f64.sqrt();
    let mut n = [0usize; 3];
    for a in 0..3 {
        let mut k = (domain.edge(a) / cell).ceil().max(1.0) as usize;
        if domain.edge(a) / k as f64 > cell * (1.0 + 1e-12) {
            k += 1;
        }
        n[a] = k;
    }
    structured_mesh(domain, n)
}

/// Structured Kuhn mesh with an explicit number of bricks per axis.
pub fn structured_mesh(domain: &BoxDomain, n: [usize; 3]) -> Result<TetMesh, MeshError> {
    domain.validate()?;
    let [nx, ny, nz] = n;
    let coord = |a: usize, i: usize, k: usize| -> f64 {
        if i == k {
            domain.max[a]
        } else {
            domain.min[a] + domain.edge(a) * i as f64 / k as f64
        }
    };
    let mut nodes = Vec::with_capacity((nx + 1) * (ny + 1) * (nz + 1));
    for k in 0..=nz {
        for j in 0..=ny {
            for i in 0..=nx {
                nodes.push([coord(0, i, nx), coord(1, j, ny), coord(2, k, nz)]);
            }
        }
    }
    let id = |i: usize, j: usize, k: usize| i + (nx + 1) * (j + (ny + 1) * k);
    const PERMS: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    let mut tets = Vec::with_capacity(6 * nx * ny * nz);
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                for perm in PERMS {
                    let mut c = [i, j, k];
                    let mut tet = [id(c[0], c[1], c[2]), 0, 0, 0];
                    for (step, &axis) in perm.iter().enumerate() {
                        c[axis] += 1;
                        tet[step + 1] = id(c[0], c[1], c[2]);
                    }
                    let v = signed_volume(&nodes[tet[0]], &nodes[tet[1]], &nodes[tet[2]], &nodes[tet[3]]);
                    if v < 0.0 {
                        tet.swap(2, 3);
                    }
                    tets.push(tet);
                }
            }
        }
    }
    TetMesh::from_parts(nodes, tets)
}

fn parse_count(line: &str, keyword: &str, lineno: usize) -> Result<usize, MeshError> {
    let mut it = line.split_whitespace();
    match (it.next(), it.next(), it.next()) {
        (Some(k), Some(n), None) if k == keyword => n
            .parse()
            .map_err(|_| MeshError::Parse { line: lineno, msg: format!("bad {keyword} count '{n}'") }),
        _ => Err(MeshError::Parse { line: lineno, msg: format!("expected '{keyword} <count>'") }),
    }
}

/// Parses the plain-text mesh format.
pub fn parse_mesh(text: &str) -> Result<TetMesh, MeshError> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
        .filter(|(_, l)| !l.is_empty());
    let mut next = |what: &str| {
        lines.next().ok_or_else(|| MeshError::Parse { line: 0, msg: format!("unexpected end of file, expected {what}") })
    };
    let (ln, l) = next("'nodes'")?;
    let n = parse_count(l, "nodes", ln)?;
    let mut nodes = Vec::with_capacity(n);
    for _ in 0..n {
        let (ln, l) = next("node coordinates")?;
        let v: Vec<f64> = l
            .split_whitespace()
            .map(str::parse)
            .collect::<Result<_, _>>()
            .map_err(|_| MeshError::Parse { line: ln, msg: "bad coordinate".into() })?;
        if v.len() != 3 {
            return Err(MeshError::Parse { line: ln, msg: "expected 3 coordinates".into() });
        }
        nodes.push([v[0], v[1], v[2]]);
    }
    let (ln, l) = next("'tets'")?;
    let t = parse_count(l, "tets", ln)?;
    let mut tets = Vec::with_capacity(t);
    for _ in 0..t {
        let (ln, l) = next("tet indices")?;
        let v: Vec<usize> = l
            .split_whitespace()
            .map(str::parse)
            .collect::<Result<_, _>>()
            .map_err(|_| MeshError::Parse { line: ln, msg: "bad node index".into() })?;
        if v.len() != 4 {
            return Err(MeshError::Parse { line: ln, msg: "expected 4 node indices".into() });
        }
        tets.push([v[0], v[1], v[2], v[3]]);
    }
    if let Some((ln, _)) = lines.next() {
        return Err(MeshError::Parse { line: ln, msg: "trailing content".into() });
    }
    TetMesh::from_parts(nodes, tets)
}

pub fn import_mesh(path: &Path) -> Result<TetMesh, MeshError> {
    let text =
        fs::read_to_string(path).map_err(|source| MeshError::Io { path: path.display().to_string(), source })?;
    parse_mesh(&text)
}

/// Boundary condition at a segment endpoint.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum EndpointBc {
    #[default]
    Neumann,
    Dirichlet(f64),
}

/// Straight inclusion centreline with its cross-section data.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentGeom {
    pub p0: Point3,
    pub p1: Point3,
    pub radius: f64,
    pub conductivity: f64,
    pub endpoint_bc: [EndpointBc; 2],
}

impl SegmentGeom {
    pub fn new(p0: Point3, p1: Point3, radius: f64, conductivity: f64) -> Self {
        Self { p0, p1, radius, conductivity, endpoint_bc: [EndpointBc::Neumann; 2] }
    }

    pub fn length(&self) -> f64 {
        distance(&self.p0, &self.p1)
    }

    /// Unit tangent from `p0` to `p1`.
    pub fn direction(&self) -> Point3 {
        let l = self.length();
        sub(&self.p1, &self.p0).map(|x| x / l)
    }

    pub fn point_at(&self, s: f64) -> Point3 {
        let t = s / self.length();
        [0, 1, 2].map(|a| self.p0[a] + t * (self.p1[a] - self.p0[a]))
    }

    /// Perimeter of the cross-section, `2πR`.
    pub fn perimeter(&self) -> f64 {
        2.0 * std::f64::consts::PI * self.radius
    }

    /// Cross-section area, `πR²`.
    pub fn section_area(&self) -> f64 {
        std::f64::consts::PI * self.radius * self.radius
    }

    /// Checks the geometric invariants; warns when the radius is not small
    /// compared to the box.
    pub fn validate(&self, index: usize, domain: &BoxDomain) -> Result<(), MeshError> {
        let bad = |msg: String| MeshError::InvalidSegment { index, msg };
        if !(self.length() > 0.0) {
            return Err(bad("zero length".into()));
        }
        if !(self.radius > 0.0) {
            return Err(bad(format!("radius must be positive, got {}", self.radius)));
        }
        if !(self.conductivity > 0.0) {
            return Err(bad(format!("conductivity must be positive, got {}", self.conductivity)));
        }
        let tol = 1e-12 * domain.max_edge();
        for p in [&self.p0, &self.p1] {
            if !domain.contains(p, tol) {
                return Err(bad(format!("endpoint {p:?} lies outside the box")));
            }
        }
        if self.radius > 0.1 * domain.min_edge() {
            warn!("segment {index}: radius {} is not small compared to the box", self.radius);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementKind {
    /// Continuous piecewise linear, one DOF per node.
    P1Nodal,
    /// Piecewise constant, one DOF per cell.
    P0Cellwise,
}

/// Uniform 1D mesh on `[0, S]` in arclength.
#[derive(Debug, Clone, PartialEq)]
pub struct Mesh1D {
    pub segment: usize,
    nodes: Vec<f64>,
    kind: ElementKind,
}

impl Mesh1D {
    pub fn uniform(segment: usize, length: f64, num_nodes: usize, kind: ElementKind) -> Self {
        assert!(num_nodes >= 2);
        let cells = num_nodes - 1;
        let nodes = (0..num_nodes)
            .map(|k| if k == cells { length } else { length * k as f64 / cells as f64 })
            .collect();
        Self { segment, nodes, kind }
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn kind(&self) -> ElementKind {
        self.kind
    }

    pub fn length(&self) -> f64 {
        *self.nodes.last().unwrap()
    }

    pub fn num_cells(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn num_dofs(&self) -> usize {
        match self.kind {
            ElementKind::P1Nodal => self.nodes.len(),
            ElementKind::P0Cellwise => self.num_cells(),
        }
    }

    pub fn spacing(&self) -> f64 {
        self.length() / self.num_cells() as f64
    }

    /// Cell containing `s` (the last cell for `s = S`).
    pub fn cell_of(&self, s: f64) -> usize {
        let c = (s / self.spacing()).floor();
        (c.max(0.0) as usize).min(self.num_cells() - 1)
    }

    /// Non-zero basis functions at `s` inside `cell`, as `(dof, value)`.
    pub fn basis_at(&self, cell: usize, s: f64) -> ([(usize, f64); 2], usize) {
        match self.kind {
            ElementKind::P0Cellwise => ([(cell, 1.0), (0, 0.0)], 1),
            ElementKind::P1Nodal => {
                let (a, b) = (self.nodes[cell], self.nodes[cell + 1]);
                let t = (s - a) / (b - a);
                ([(cell, 1.0 - t), (cell + 1, t)], 2)
            }
        }
    }
}

/// The three independent 1D meshes of one segment.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentMeshes {
    /// P1 mesh for the inclusion unknown.
    pub uhat: Mesh1D,
    /// P0 mesh for the interface flux.
    pub phi: Mesh1D,
    /// P1 mesh for the interface value.
    pub psi: Mesh1D,
}

pub const DEFAULT_REFINEMENT_RATIO: f64 = 0.5;

/// Sizes the 1D meshes from the number of face crossings `n_star`: the
/// inclusion mesh gets `n_star` nodes, the interface meshes `ratio·n_star`.
pub fn build_segment_meshes(segment: usize, length: f64, n_star: usize, ratio: f64) -> SegmentMeshes {
    let n_star = if n_star < 3 {
        warn!("segment {segment}: only {n_star} crossing points, using 3");
        3
    } else {
        n_star
    };
    let coarse = (ratio * n_star as f64).round() as usize;
    SegmentMeshes {
        uhat: Mesh1D::uniform(segment, length, n_star, ElementKind::P1Nodal),
        psi: Mesh1D::uniform(segment, length, coarse.max(2), ElementKind::P1Nodal),
        phi: Mesh1D::uniform(segment, length, coarse.max(1) + 1, ElementKind::P0Cellwise),
    }
}
