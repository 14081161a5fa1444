//! Assembly of the discrete 3D and 1D operators, the coupling matrices, the
//! load vectors and the block operators of the constrained problem.
//!
//! Unknown layout. The full 3D vector has one entry per mesh node; the
//! inclusion unknown `Û` stacks the P1 nodal values of every segment; `Φ`
//! (P0) and `Ψ` (P1) stack the interface unknowns segment by segment. The
//! state of the constraint system is `W = [U_free; Û_free; λ]`, where
//! Dirichlet nodes are eliminated and `λ` are the multipliers of the
//! junction constraints `Q`.
//!
//! Constraint equations, with `ℬ = [B; −B̂; 0]` and `𝒞^α = [C^α; Ĉ^α; 0]`:
//!
//! ```text
//! 𝒜 W = ℬ Φ + 𝒞^α Ψ + ℱ
//! ```

use thiserror::Error;

use crate::geometry::{build_quadrature, GeometryError, Quadrature1D, TraceMap, Traverser};
use crate::linalg::{SparseMatrix, TripletBuilder};
use crate::mesh::{
    build_segment_meshes, EndpointBc, FaceTag, MeshError, Point3, SegmentGeom, SegmentMeshes, TetMesh,
};

#[derive(Debug, Error)]
pub enum AssemblyError {
    #[error("segment {segment} endpoint {end} is both Dirichlet-constrained and joined to another segment")]
    OverConstrained { segment: usize, end: usize },
    #[error("no Dirichlet face: the 3D problem would be singular")]
    NoDirichlet,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension { what: &'static str, expected: usize, got: usize },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
}

/// Boundary condition on one box face.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum FaceBc {
    #[default]
    Neumann,
    Dirichlet(f64),
}

/// Conditions on the six box faces, indexed by [`FaceTag::index`].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BoxBcs(pub [FaceBc; 6]);

impl BoxBcs {
    /// Value `high` on `inlet`, `low` on `outlet`, no-flux elsewhere.
    pub fn pressure_drop(inlet: FaceTag, high: f64, outlet: FaceTag, low: f64) -> Self {
        let mut f = [FaceBc::Neumann; 6];
        f[inlet.index()] = FaceBc::Dirichlet(high);
        f[outlet.index()] = FaceBc::Dirichlet(low);
        Self(f)
    }

    pub fn get(&self, tag: FaceTag) -> FaceBc {
        self.0[tag.index()]
    }
}

/// Bulk and stabilisation parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Physics {
    /// Diagonal of the (constant) bulk conductivity tensor.
    pub conductivity: [f64; 3],
    pub alpha: f64,
    pub alpha_hat: f64,
}

impl Default for Physics {
    fn default() -> Self {
        Self { conductivity: [1.0; 3], alpha: 1.0, alpha_hat: 1.0 }
    }
}

/// Everything attached to one segment after traversal.
#[derive(Debug, Clone)]
pub struct SegmentDiscretization {
    pub geom: SegmentGeom,
    pub trace: TraceMap,
    pub meshes: SegmentMeshes,
    pub quad: Quadrature1D,
}

/// Segments with their offsets in the stacked `Û`, `Φ`, `Ψ` vectors.
#[derive(Debug, Clone)]
pub struct LineSet {
    pub segments: Vec<SegmentDiscretization>,
    uhat_offset: Vec<usize>,
    phi_offset: Vec<usize>,
    psi_offset: Vec<usize>,
}

impl LineSet {
    /// Traverses each segment and builds its 1D meshes from the crossing
    /// count with the given refinement ratio.
    pub fn build(traverser: &Traverser<'_>, segments: &[SegmentGeom], ratio: f64) -> Result<Self, AssemblyError> {
        let domain = *traverser.mesh().domain();
        let mut out = Vec::with_capacity(segments.len());
        for (i, geom) in segments.iter().enumerate() {
            geom.validate(i, &domain)?;
            let trace = traverser.traverse(i, geom)?;
            let meshes = build_segment_meshes(i, trace.length(), trace.n_star(), ratio);
            let quad = build_quadrature(&trace, &meshes);
            out.push(SegmentDiscretization { geom: geom.clone(), trace, meshes, quad });
        }
        Ok(Self::from_parts(out))
    }

    pub fn from_parts(segments: Vec<SegmentDiscretization>) -> Self {
        let prefix = |f: &dyn Fn(&SegmentDiscretization) -> usize| -> Vec<usize> {
            let mut v = Vec::with_capacity(segments.len() + 1);
            v.push(0);
            for s in &segments {
                v.push(v.last().unwrap() + f(s));
            }
            v
        };
        let uhat_offset = prefix(&|s| s.meshes.uhat.num_dofs());
        let phi_offset = prefix(&|s| s.meshes.phi.num_dofs());
        let psi_offset = prefix(&|s| s.meshes.psi.num_dofs());
        Self { segments, uhat_offset, phi_offset, psi_offset }
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn n_uhat(&self) -> usize {
        *self.uhat_offset.last().unwrap()
    }

    pub fn n_phi(&self) -> usize {
        *self.phi_offset.last().unwrap()
    }

    pub fn n_psi(&self) -> usize {
        *self.psi_offset.last().unwrap()
    }

    pub fn uhat_range(&self, i: usize) -> std::ops::Range<usize> {
        self.uhat_offset[i]..self.uhat_offset[i + 1]
    }

    pub fn phi_range(&self, i: usize) -> std::ops::Range<usize> {
        self.phi_offset[i]..self.phi_offset[i + 1]
    }

    pub fn psi_range(&self, i: usize) -> std::ops::Range<usize> {
        self.psi_offset[i]..self.psi_offset[i + 1]
    }
}

/// Split of a full vector into free and prescribed entries.
#[derive(Debug, Clone, PartialEq)]
pub struct DofMap {
    /// Full index of each free unknown.
    pub free: Vec<usize>,
    /// Free index of each full entry, `None` when prescribed.
    pub to_free: Vec<Option<usize>>,
    /// Full-length vector holding prescribed values (zero at free entries).
    pub fixed_values: Vec<f64>,
}

impl DofMap {
    pub fn new(n: usize, fixed: &[(usize, f64)]) -> Self {
        let mut fixed_values = vec![0.0; n];
        let mut is_fixed = vec![false; n];
        for &(i, v) in fixed {
            if !is_fixed[i] {
                is_fixed[i] = true;
                fixed_values[i] = v;
            }
        }
        let mut to_free = vec![None; n];
        let mut free = Vec::new();
        for i in 0..n {
            if !is_fixed[i] {
                to_free[i] = Some(free.len());
                free.push(i);
            }
        }
        Self { free, to_free, fixed_values }
    }

    pub fn len_full(&self) -> usize {
        self.to_free.len()
    }

    pub fn len_free(&self) -> usize {
        self.free.len()
    }

    pub fn fixed(&self) -> Vec<usize> {
        (0..self.len_full()).filter(|&i| self.to_free[i].is_none()).collect()
    }

    /// Full vector from free values plus the prescribed ones.
    pub fn expand(&self, free_values: &[f64]) -> Vec<f64> {
        let mut full = self.fixed_values.clone();
        for (k, &i) in self.free.iter().enumerate() {
            full[i] = free_values[k];
        }
        full
    }

    pub fn restrict(&self, full: &[f64]) -> Vec<f64> {
        self.free.iter().map(|&i| full[i]).collect()
    }
}

/// Dirichlet nodes of the 3D mesh. A node shared by several Dirichlet faces
/// takes the value of the face with the lowest tag index.
pub fn dirichlet_nodes(mesh: &TetMesh, bcs: &BoxBcs) -> Vec<(usize, f64)> {
    let mut value: Vec<Option<(usize, f64)>> = vec![None; mesh.num_nodes()];
    for f in mesh.boundary_faces() {
        if let FaceBc::Dirichlet(v) = bcs.get(f.tag) {
            for &n in &f.nodes {
                match value[n] {
                    Some((tag, _)) if tag <= f.tag.index() => {}
                    _ => value[n] = Some((f.tag.index(), v)),
                }
            }
        }
    }
    value.into_iter().enumerate().filter_map(|(n, v)| v.map(|(_, x)| (n, x))).collect()
}

fn node_pattern(mesh: &TetMesh) -> Vec<Vec<usize>> {
    let mut rows = vec![Vec::with_capacity(16); mesh.num_nodes()];
    for tet in mesh.tets() {
        for &i in tet {
            rows[i].extend_from_slice(tet);
        }
    }
    rows
}

/// ∫ a b over a piece on which both are linear with the given end values.
#[inline]
fn linear_product(len: f64, a: (f64, f64), b: (f64, f64)) -> f64 {
    len / 6.0 * (2.0 * a.0 * b.0 + a.0 * b.1 + a.1 * b.0 + 2.0 * a.1 * b.1)
}

/// Adds `weight · ∫_Λ φ_k φ_l ds` over every segment.
fn add_line_mass(m: &mut SparseMatrix, lines: &LineSet, weight: impl Fn(&SegmentGeom) -> f64) {
    for seg in &lines.segments {
        let w = weight(&seg.geom);
        for (p, piece) in seg.trace.pieces().iter().enumerate() {
            let nodes = seg.trace.piece_nodes(p);
            for a in 0..4 {
                for b in 0..4 {
                    let v = linear_product(
                        piece.len(),
                        (piece.bary0[a], piece.bary1[a]),
                        (piece.bary0[b], piece.bary1[b]),
                    );
                    m.add_to(nodes[a], nodes[b], w * v);
                }
            }
        }
    }
}

/// P1 stiffness `(K∇φ_k, ∇φ_l)` only.
pub fn assemble_stiffness(mesh: &TetMesh, conductivity: [f64; 3]) -> SparseMatrix {
    let mut a = SparseMatrix::from_pattern(mesh.num_nodes(), mesh.num_nodes(), node_pattern(mesh));
    for (t, tet) in mesh.tets().iter().enumerate() {
        let k = tet_stiffness(&mesh.tet_vertices(t), conductivity);
        for i in 0..4 {
            for j in 0..4 {
                a.add_to(tet[i], tet[j], k[i][j]);
            }
        }
    }
    a
}

/// Element stiffness of one P1 tetrahedron.
pub fn tet_stiffness(v: &[Point3; 4], conductivity: [f64; 3]) -> [[f64; 4]; 4] {
    let e = |a: usize| [v[a][0] - v[0][0], v[a][1] - v[0][1], v[a][2] - v[0][2]];
    let (e1, e2, e3) = (e(1), e(2), e(3));
    let cross = |a: [f64; 3], b: [f64; 3]| {
        [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
    };
    let det = e1[0] * (e2[1] * e3[2] - e2[2] * e3[1]) - e1[1] * (e2[0] * e3[2] - e2[2] * e3[0])
        + e1[2] * (e2[0] * e3[1] - e2[1] * e3[0]);
    // rows of the inverse Jacobian are the gradients of λ1..λ3
    let mut g = [[0.0; 3]; 4];
    g[1] = cross(e2, e3);
    g[2] = cross(e3, e1);
    g[3] = cross(e1, e2);
    for d in 0..3 {
        for r in 1..4 {
            g[r][d] /= det;
        }
        g[0][d] = -(g[1][d] + g[2][d] + g[3][d]);
    }
    let vol = det.abs() / 6.0;
    std::array::from_fn(|i| {
        std::array::from_fn(|j| vol * (0..3).map(|d| conductivity[d] * g[i][d] * g[j][d]).sum::<f64>())
    })
}

/// Full (all nodes) 3D matrix: stiffness plus `α·|Γ_i|` line mass of the
/// traced basis along each segment.
pub fn assemble_a(mesh: &TetMesh, lines: &LineSet, conductivity: [f64; 3], alpha: f64) -> SparseMatrix {
    let mut a = assemble_stiffness(mesh, conductivity);
    add_line_mass(&mut a, lines, |g| alpha * g.perimeter());
    a.finalize()
}

/// Unweighted line mass `G = Σ_i (φ_k|Λ_i, φ_l|Λ_i)`.
pub fn assemble_g(mesh: &TetMesh, lines: &LineSet) -> SparseMatrix {
    let mut g = SparseMatrix::from_pattern(mesh.num_nodes(), mesh.num_nodes(), node_pattern(mesh));
    add_line_mass(&mut g, lines, |_| 1.0);
    g.finalize()
}

/// One endpoint of one segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Endpoint {
    pub segment: usize,
    /// 0 for `s = 0`, 1 for `s = S`.
    pub end: usize,
}

/// Groups segment endpoints that coincide within `tol`; only groups with at
/// least two members are returned.
pub fn junctions(segments: &[SegmentGeom], tol: f64) -> Vec<Vec<Endpoint>> {
    let pts: Vec<(Endpoint, Point3)> = segments
        .iter()
        .enumerate()
        .flat_map(|(i, s)| [(Endpoint { segment: i, end: 0 }, s.p0), (Endpoint { segment: i, end: 1 }, s.p1)])
        .collect();
    let mut parent: Vec<usize> = (0..pts.len()).collect();
    fn find(p: &mut [usize], i: usize) -> usize {
        let mut r = i;
        while p[r] != r {
            r = p[r];
        }
        let mut c = i;
        while p[c] != r {
            let n = p[c];
            p[c] = r;
            c = n;
        }
        r
    }
    // sort by x to prune the pairwise search
    let mut order: Vec<usize> = (0..pts.len()).collect();
    order.sort_by(|&a, &b| pts[a].1[0].total_cmp(&pts[b].1[0]));
    for (oi, &i) in order.iter().enumerate() {
        for &j in &order[oi + 1..] {
            if pts[j].1[0] - pts[i].1[0] > tol {
                break;
            }
            if pts[i].0.segment != pts[j].0.segment && crate::mesh::distance(&pts[i].1, &pts[j].1) <= tol {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                if ri != rj {
                    parent[ri.max(rj)] = ri.min(rj);
                }
            }
        }
    }
    let mut groups: std::collections::BTreeMap<usize, Vec<Endpoint>> = Default::default();
    for i in 0..pts.len() {
        let r = find(&mut parent, i);
        groups.entry(r).or_default().push(pts[i].0);
    }
    groups
        .into_values()
        .filter(|g| g.len() > 1)
        .map(|mut g| {
            g.sort();
            g
        })
        .collect()
}

/// Per-segment 1D operators and the junction constraints.
#[derive(Debug, Clone)]
pub struct InclusionBlocks {
    /// `diag(Â_1, …, Â_I)` over the full stacked `Û`.
    pub a_hat: SparseMatrix,
    /// Junction constraints over the full stacked `Û`, one row per pairing.
    pub q: SparseMatrix,
    /// Prescribed `Û` values from Dirichlet endpoints, as `(index, value)`.
    pub dirichlet: Vec<(usize, f64)>,
}

fn uhat_endpoint_index(lines: &LineSet, e: Endpoint) -> usize {
    let r = lines.uhat_range(e.segment);
    if e.end == 0 { r.start } else { r.end - 1 }
}

/// `Â_i = K̃_i|Σ_i| (φ̂', φ̂') + α̂|Γ_i| (φ̂, φ̂)` per segment, plus the
/// chained `±1` rows equating `Û` at coincident endpoints.
pub fn assemble_ahat(lines: &LineSet, alpha_hat: f64, junction_tol: f64) -> Result<InclusionBlocks, AssemblyError> {
    let n = lines.n_uhat();
    let mut t = TripletBuilder::with_capacity(n, n, 4 * n);
    let mut dirichlet = Vec::new();
    for (i, seg) in lines.segments.iter().enumerate() {
        let off = lines.uhat_offset[i];
        let stiff = seg.geom.conductivity * seg.geom.section_area();
        let mass = alpha_hat * seg.geom.perimeter();
        let nodes = seg.meshes.uhat.nodes();
        for e in 0..nodes.len() - 1 {
            let h = nodes[e + 1] - nodes[e];
            let (k, m) = (stiff / h, mass * h / 6.0);
            t.push(off + e, off + e, k + 2.0 * m);
            t.push(off + e + 1, off + e + 1, k + 2.0 * m);
            t.push(off + e, off + e + 1, -k + m);
            t.push(off + e + 1, off + e, -k + m);
        }
        for (end, bc) in seg.geom.endpoint_bc.iter().enumerate() {
            if let EndpointBc::Dirichlet(v) = bc {
                dirichlet.push((uhat_endpoint_index(lines, Endpoint { segment: i, end }), *v));
            }
        }
    }
    let geoms: Vec<SegmentGeom> = lines.segments.iter().map(|s| s.geom.clone()).collect();
    let groups = junctions(&geoms, junction_tol);
    let mut rows = Vec::new();
    for g in &groups {
        for e in g {
            if matches!(lines.segments[e.segment].geom.endpoint_bc[e.end], EndpointBc::Dirichlet(_)) {
                return Err(AssemblyError::OverConstrained { segment: e.segment, end: e.end });
            }
        }
        for w in g.windows(2) {
            rows.push((uhat_endpoint_index(lines, w[0]), uhat_endpoint_index(lines, w[1])));
        }
    }
    let mut q = TripletBuilder::new(rows.len(), n);
    for (r, &(a, b)) in rows.iter().enumerate() {
        q.push(r, a, 1.0);
        q.push(r, b, -1.0);
    }
    Ok(InclusionBlocks { a_hat: t.build(), q: q.build(), dirichlet })
}

/// Coupling matrices over full index sets; rows are 3D nodes or stacked `Û`,
/// columns are stacked `Φ` or `Ψ`.
#[derive(Debug, Clone)]
pub struct Couplings {
    pub b: SparseMatrix,
    pub b_hat: SparseMatrix,
    pub c_alpha: SparseMatrix,
    pub c_hat_alpha: SparseMatrix,
    pub c: SparseMatrix,
    pub c_hat: SparseMatrix,
    pub g_hat: SparseMatrix,
    pub g_psi: SparseMatrix,
}

/// Integrates every coupling matrix with the merged per-segment quadrature.
pub fn assemble_couplings(mesh: &TetMesh, lines: &LineSet, alpha: f64, alpha_hat: f64) -> Couplings {
    let (n, nh, nphi, npsi) = (mesh.num_nodes(), lines.n_uhat(), lines.n_phi(), lines.n_psi());
    let mut b = TripletBuilder::new(n, nphi);
    let mut b_hat = TripletBuilder::new(nh, nphi);
    let mut c = TripletBuilder::new(n, npsi);
    let mut c_hat = TripletBuilder::new(nh, npsi);
    let mut g_hat = TripletBuilder::new(nh, nh);
    let mut g_psi = TripletBuilder::new(npsi, npsi);
    let mut c_alpha = TripletBuilder::new(n, npsi);
    let mut c_hat_alpha = TripletBuilder::new(nh, npsi);
    for (i, seg) in lines.segments.iter().enumerate() {
        let gamma = seg.geom.perimeter();
        let (oh, ophi, opsi) = (lines.uhat_offset[i], lines.phi_offset[i], lines.psi_offset[i]);
        let m = &seg.meshes;
        for (cell, s, w) in seg.quad.points() {
            let piece = &seg.trace.pieces()[cell.piece];
            let tr = piece.bary_at(s);
            let nodes = seg.trace.piece_nodes(cell.piece);
            let (uh, nuh) = m.uhat.basis_at(cell.uhat_cell, s);
            let (ph, nph) = m.phi.basis_at(cell.phi_cell, s);
            let (ps, nps) = m.psi.basis_at(cell.psi_cell, s);
            let (uh, ph, ps) = (&uh[..nuh], &ph[..nph], &ps[..nps]);
            for &(l, eta) in ps {
                for (a, &k) in nodes.iter().enumerate() {
                    let v = w * tr[a] * eta;
                    c.push(k, opsi + l, v);
                    c_alpha.push(k, opsi + l, alpha * gamma * v);
                }
                for &(k, phat) in uh {
                    let v = w * phat * eta;
                    c_hat.push(oh + k, opsi + l, v);
                    c_hat_alpha.push(oh + k, opsi + l, alpha_hat * gamma * v);
                }
                for &(l2, eta2) in ps {
                    g_psi.push(opsi + l, opsi + l2, w * eta * eta2);
                }
            }
            for &(l, theta) in ph {
                for (a, &k) in nodes.iter().enumerate() {
                    b.push(k, ophi + l, gamma * w * tr[a] * theta);
                }
                for &(k, phat) in uh {
                    b_hat.push(oh + k, ophi + l, gamma * w * phat * theta);
                }
            }
            for &(k, pk) in uh {
                for &(l, pl) in uh {
                    g_hat.push(oh + k, oh + l, w * pk * pl);
                }
            }
        }
    }
    Couplings {
        b: b.build(),
        b_hat: b_hat.build(),
        c_alpha: c_alpha.build(),
        c_hat_alpha: c_hat_alpha.build(),
        c: c.build(),
        c_hat: c_hat.build(),
        g_hat: g_hat.build(),
        g_psi: g_psi.build(),
    }
}

/// Volume source `f(x)` and per-segment line source `ḡ_i(s)` (section
/// average). `None` means zero.
#[derive(Default)]
pub struct Sources<'a> {
    pub bulk: Option<&'a (dyn Fn(&Point3) -> f64 + Sync)>,
    pub line: Option<&'a (dyn Fn(usize, f64) -> f64 + Sync)>,
}

// 4-point rule on the reference tet, exact for quadratics
const TET_QA: f64 = 0.585_410_196_624_968_5;
const TET_QB: f64 = 0.138_196_601_125_010_5;

/// Full load vectors `f_k = (f, φ_k)` and `(g_i)_k = (|Σ_i| ḡ, φ̂_{i,k})`,
/// before any lifting.
pub fn assemble_rhs(mesh: &TetMesh, lines: &LineSet, sources: &Sources<'_>) -> (Vec<f64>, Vec<f64>) {
    let mut f = vec![0.0; mesh.num_nodes()];
    if let Some(src) = sources.bulk {
        for (t, tet) in mesh.tets().iter().enumerate() {
            let vs = mesh.tet_vertices(t);
            let w = mesh.tet_volume(t) / 4.0;
            for q in 0..4 {
                let bary: [f64; 4] = std::array::from_fn(|j| if j == q { TET_QA } else { TET_QB });
                let x = [0, 1, 2].map(|d| (0..4).map(|j| bary[j] * vs[j][d]).sum::<f64>());
                let val = src(&x);
                for j in 0..4 {
                    f[tet[j]] += w * val * bary[j];
                }
            }
        }
    }
    let mut g = vec![0.0; lines.n_uhat()];
    if let Some(src) = sources.line {
        for (i, seg) in lines.segments.iter().enumerate() {
            let area = seg.geom.section_area();
            let off = lines.uhat_offset[i];
            for (cell, s, w) in seg.quad.points() {
                let val = src(i, s);
                let (uh, n) = seg.meshes.uhat.basis_at(cell.uhat_cell, s);
                for &(k, phat) in &uh[..n] {
                    g[off + k] += w * area * val * phat;
                }
            }
        }
    }
    (f, g)
}

/// Every assembled block over full index sets, with the 3D and 1D Dirichlet
/// splits.
#[derive(Debug, Clone)]
pub struct CoupledSystem {
    pub n_nodes: usize,
    pub a: SparseMatrix,
    pub inclusion: InclusionBlocks,
    pub couplings: Couplings,
    pub g: SparseMatrix,
    pub f: Vec<f64>,
    pub g_rhs: Vec<f64>,
    pub u_dofs: DofMap,
    pub uhat_dofs: DofMap,
    pub n_phi: usize,
    pub n_psi: usize,
}

/// Default junction tolerance relative to the box size.
pub const JUNCTION_TOL: f64 = 1e-9;

pub fn assemble_system(
    mesh: &TetMesh,
    lines: &LineSet,
    physics: &Physics,
    bcs: &BoxBcs,
    sources: &Sources<'_>,
) -> Result<CoupledSystem, AssemblyError> {
    if !(physics.alpha > 0.0 && physics.alpha_hat > 0.0) {
        return Err(AssemblyError::InvalidParameter("α and α̂ must be positive".into()));
    }
    if physics.conductivity.iter().any(|&k| !(k > 0.0)) {
        return Err(AssemblyError::InvalidParameter("bulk conductivity must be positive".into()));
    }
    if !bcs.0.iter().any(|b| matches!(b, FaceBc::Dirichlet(_))) {
        return Err(AssemblyError::NoDirichlet);
    }
    let a = assemble_a(mesh, lines, physics.conductivity, physics.alpha);
    let g = assemble_g(mesh, lines);
    let inclusion = assemble_ahat(lines, physics.alpha_hat, JUNCTION_TOL * mesh.domain().max_edge())?;
    let couplings = assemble_couplings(mesh, lines, physics.alpha, physics.alpha_hat);
    let (f, g_rhs) = assemble_rhs(mesh, lines, sources);
    let u_dofs = DofMap::new(mesh.num_nodes(), &dirichlet_nodes(mesh, bcs));
    let uhat_dofs = DofMap::new(lines.n_uhat(), &inclusion.dirichlet);
    Ok(CoupledSystem {
        n_nodes: mesh.num_nodes(),
        a,
        inclusion,
        couplings,
        g,
        f,
        g_rhs,
        u_dofs,
        uhat_dofs,
        n_phi: lines.n_phi(),
        n_psi: lines.n_psi(),
    })
}

/// Sizes of the parts of `W = [U_free; Û_free; λ]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StateLayout {
    pub n_u: usize,
    pub n_uhat: usize,
    pub n_mult: usize,
}

impl StateLayout {
    pub fn len(&self) -> usize {
        self.n_u + self.n_uhat + self.n_mult
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Block operators of the constrained problem on the free state space.
///
/// The discrete functional is
/// `J̃ = ½(Wᵀ𝒢W − 2Wᵀ𝒞Ψ + 2ΨᵀG^ψΨ) + h_wᵀW + h_ψᵀΨ + ½q_lift`; the affine
/// terms collect the prescribed (Dirichlet) values of `U` and `Û`, so that
/// the mismatch is always measured on the full fields.
#[derive(Debug, Clone)]
pub struct BlockSystem {
    pub layout: StateLayout,
    /// `𝒜 = blockdiag(A, [Â Qᵀ; Q 0])`.
    pub a: SparseMatrix,
    /// `ℬ = [B; −B̂; 0]`.
    pub b: SparseMatrix,
    /// `𝒞^α = [C^α; Ĉ^α; 0]`.
    pub c_alpha: SparseMatrix,
    /// `𝒞 = [C; Ĉ; 0]`.
    pub c: SparseMatrix,
    /// `𝒢 = blockdiag(G, Ĝ, 0)`.
    pub g: SparseMatrix,
    pub g_psi: SparseMatrix,
    /// `ℱ = [f; g; 0]` with the lifting of prescribed values.
    pub f: Vec<f64>,
    pub h_w: Vec<f64>,
    pub h_psi: Vec<f64>,
    pub q_lift: f64,
    /// Index sets of `W` that can be solved independently: the 3D block
    /// first, then one set per connected group of segments.
    pub solve_groups: Vec<Vec<usize>>,
    /// Whether each solve group is a bordered (indefinite) matrix.
    pub group_indefinite: Vec<bool>,
}

fn stack_rows(parts: &[&SparseMatrix], ncols: usize, extra_rows: usize, signs: &[f64]) -> SparseMatrix {
    let nrows: usize = parts.iter().map(|p| p.nrows()).sum::<usize>() + extra_rows;
    let mut t = Vec::new();
    let mut off = 0;
    for (p, &sgn) in parts.iter().zip(signs) {
        assert_eq!(p.ncols(), ncols);
        t.extend(p.iter().map(|(i, j, v)| (off + i, j, sgn * v)));
        off += p.nrows();
    }
    SparseMatrix::from_triplets(nrows, ncols, t)
}

fn block_diag(parts: &[&SparseMatrix], extra: usize) -> SparseMatrix {
    let n: usize = parts.iter().map(|p| p.nrows()).sum::<usize>() + extra;
    let mut t = Vec::new();
    let mut off = 0;
    for p in parts {
        assert_eq!(p.nrows(), p.ncols());
        t.extend(p.iter().map(|(i, j, v)| (off + i, off + j, v)));
        off += p.nrows();
    }
    SparseMatrix::from_triplets(n, n, t)
}

/// Restricts the assembled blocks to free unknowns and stacks them into the
/// block operators.
pub fn build_blocks(sys: &CoupledSystem) -> Result<BlockSystem, AssemblyError> {
    let ud = &sys.u_dofs;
    let hd = &sys.uhat_dofs;
    let cp = &sys.couplings;
    let check = |what, expected: usize, got: usize| {
        if expected == got { Ok(()) } else { Err(AssemblyError::Dimension { what, expected, got }) }
    };
    check("A", sys.n_nodes, sys.a.nrows())?;
    check("G", sys.n_nodes, sys.g.nrows())?;
    check("B", sys.n_nodes, cp.b.nrows())?;
    check("C", sys.n_nodes, cp.c.nrows())?;
    check("Â", hd.len_full(), sys.inclusion.a_hat.nrows())?;
    check("B̂", hd.len_full(), cp.b_hat.nrows())?;
    check("Φ columns", sys.n_phi, cp.b.ncols())?;
    check("Ψ columns", sys.n_psi, cp.c.ncols())?;
    check("G^ψ", sys.n_psi, cp.g_psi.nrows())?;

    let (uf, ufix) = (&ud.free, ud.fixed());
    let (hf, hfix) = (&hd.free, hd.fixed());
    let layout = StateLayout { n_u: uf.len(), n_uhat: hf.len(), n_mult: sys.inclusion.q.nrows() };
    let all_phi: Vec<usize> = (0..sys.n_phi).collect();
    let all_psi: Vec<usize> = (0..sys.n_psi).collect();

    let a_ff = sys.a.submatrix(uf, uf);
    let ah_ff = sys.inclusion.a_hat.submatrix(hf, hf);
    let q_f = sys.inclusion.q.submatrix(&(0..layout.n_mult).collect::<Vec<_>>(), hf);
    // bordered inclusion block [Â Qᵀ; Q 0]
    let mut t: Vec<_> = ah_ff.iter().collect();
    for (r, c, v) in q_f.iter() {
        t.push((layout.n_uhat + r, c, v));
        t.push((c, layout.n_uhat + r, v));
    }
    let bordered = SparseMatrix::from_triplets(layout.n_uhat + layout.n_mult, layout.n_uhat + layout.n_mult, t);
    let a = block_diag(&[&a_ff, &bordered], 0);

    let b = stack_rows(
        &[&cp.b.submatrix(uf, &all_phi), &cp.b_hat.submatrix(hf, &all_phi)],
        sys.n_phi,
        layout.n_mult,
        &[1.0, -1.0],
    );
    let c_alpha = stack_rows(
        &[&cp.c_alpha.submatrix(uf, &all_psi), &cp.c_hat_alpha.submatrix(hf, &all_psi)],
        sys.n_psi,
        layout.n_mult,
        &[1.0, 1.0],
    );
    let c = stack_rows(
        &[&cp.c.submatrix(uf, &all_psi), &cp.c_hat.submatrix(hf, &all_psi)],
        sys.n_psi,
        layout.n_mult,
        &[1.0, 1.0],
    );
    let g = block_diag(&[&sys.g.submatrix(uf, uf), &cp.g_hat.submatrix(hf, hf)], layout.n_mult);

    // lifting of prescribed values
    let u_fix_vals: Vec<f64> = ufix.iter().map(|&i| ud.fixed_values[i]).collect();
    let h_fix_vals: Vec<f64> = hfix.iter().map(|&i| hd.fixed_values[i]).collect();
    let mut f = Vec::with_capacity(layout.len());
    let a_fd = sys.a.submatrix(uf, &ufix).spmv(&u_fix_vals, false).expect("lifting dims");
    f.extend(uf.iter().zip(&a_fd).map(|(&i, l)| sys.f[i] - l));
    let ah_fd = sys.inclusion.a_hat.submatrix(hf, &hfix).spmv(&h_fix_vals, false).expect("lifting dims");
    f.extend(hf.iter().zip(&ah_fd).map(|(&i, l)| sys.g_rhs[i] - l));
    // Q applied to prescribed values is zero: junction endpoints are never prescribed
    f.extend(std::iter::repeat_n(0.0, layout.n_mult));

    let mut h_w = sys.g.submatrix(uf, &ufix).spmv(&u_fix_vals, false).expect("lifting dims");
    h_w.extend(cp.g_hat.submatrix(hf, &hfix).spmv(&h_fix_vals, false).expect("lifting dims"));
    h_w.extend(std::iter::repeat_n(0.0, layout.n_mult));
    let mut h_psi = cp.c.submatrix(&ufix, &all_psi).spmv(&u_fix_vals, true).expect("lifting dims");
    let h2 = cp.c_hat.submatrix(&hfix, &all_psi).spmv(&h_fix_vals, true).expect("lifting dims");
    h_psi.iter_mut().zip(&h2).for_each(|(a, b)| *a = -(*a + b));
    let q_lift = sys.g.submatrix(&ufix, &ufix).quad_form(&u_fix_vals, &u_fix_vals)
        + cp.g_hat.submatrix(&hfix, &hfix).quad_form(&h_fix_vals, &h_fix_vals);

    // independent solve groups: 3D block, then connected components of the
    // bordered inclusion block
    let mut solve_groups = vec![(0..layout.n_u).collect::<Vec<_>>()];
    let mut group_indefinite = vec![false];
    let nb = bordered.nrows();
    let mut comp = vec![usize::MAX; nb];
    let mut ncomp = 0;
    for start in 0..nb {
        if comp[start] != usize::MAX {
            continue;
        }
        let mut stack = vec![start];
        comp[start] = ncomp;
        while let Some(i) = stack.pop() {
            for &j in bordered.row(i).0 {
                if comp[j] == usize::MAX {
                    comp[j] = ncomp;
                    stack.push(j);
                }
            }
        }
        ncomp += 1;
    }
    let mut groups = vec![Vec::new(); ncomp];
    for (i, &c) in comp.iter().enumerate() {
        groups[c].push(layout.n_u + i);
    }
    for g in groups {
        let indefinite = g.iter().any(|&i| i >= layout.n_u + layout.n_uhat);
        solve_groups.push(g);
        group_indefinite.push(indefinite);
    }

    Ok(BlockSystem {
        layout,
        a,
        b,
        c_alpha,
        c,
        g,
        g_psi: cp.g_psi.clone(),
        f,
        h_w,
        h_psi,
        q_lift,
        solve_groups,
        group_indefinite,
    })
}

impl BlockSystem {
    pub fn n_phi(&self) -> usize {
        self.b.ncols()
    }

    pub fn n_psi(&self) -> usize {
        self.c.ncols()
    }

    pub fn n_state(&self) -> usize {
        self.layout.len()
    }

    /// `J̃(W, Ψ)` including the affine lifting terms.
    pub fn functional(&self, w: &[f64], psi: &[f64]) -> f64 {
        let cpsi = self.c.spmv(psi, false).expect("Ψ dims");
        0.5 * (self.g.quad_form(w, w) - 2.0 * crate::linalg::dot(w, &cpsi) + 2.0 * self.g_psi.quad_form(psi, psi))
            + crate::linalg::dot(&self.h_w, w)
            + crate::linalg::dot(&self.h_psi, psi)
            + 0.5 * self.q_lift
    }

    /// Residual of `𝒜W − ℬΦ − 𝒞^αΨ − ℱ`.
    pub fn constraint_residual(&self, w: &[f64], phi: &[f64], psi: &[f64]) -> Vec<f64> {
        let mut r = self.a.spmv(w, false).expect("W dims");
        let bphi = self.b.spmv(phi, false).expect("Φ dims");
        let cpsi = self.c_alpha.spmv(psi, false).expect("Ψ dims");
        for i in 0..r.len() {
            r[i] -= bphi[i] + cpsi[i] + self.f[i];
        }
        r
    }
}
