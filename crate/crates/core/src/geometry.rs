//! Segment traversal through the tetrahedral mesh.
//!
//! The restriction of a P1 basis function to a straight segment is piecewise
//! linear, with breakpoints where the segment crosses tetrahedron faces. The
//! traversal walks from the tet containing the first endpoint through
//! successive faces, recording for each sub-interval the owning tet and the
//! barycentric coordinates at both ends.

use thiserror::Error;

use crate::mesh::{Mesh1D, Point3, SegmentGeom, SegmentMeshes, TetMesh};

/// Barycentric slack accepted when deciding that a point lies in a tet.
const BARY_TOL: f64 = 1e-10;
/// Relative distance (in units of the segment length) below which two
/// breakpoints are the same.
pub const MERGE_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("segment {segment}: endpoint {point:?} is outside the meshed box")]
    OutsideMesh { segment: usize, point: Point3 },
    #[error("segment {segment}: traversal stuck at s = {s} after tet {tet}")]
    DeadEnd { segment: usize, tet: usize, s: f64 },
    #[error("arclength {s} outside [0, {length}]")]
    OutOfRange { s: f64, length: f64 },
}

/// Portion of a segment inside one tetrahedron.
#[derive(Debug, Clone, PartialEq)]
pub struct TracePiece {
    pub s0: f64,
    pub s1: f64,
    pub tet: usize,
    /// Barycentric coordinates of the tet vertices at `s0` and `s1`.
    pub bary0: [f64; 4],
    pub bary1: [f64; 4],
}

impl TracePiece {
    pub fn bary_at(&self, s: f64) -> [f64; 4] {
        let len = self.s1 - self.s0;
        let t = if len > 0.0 { (s - self.s0) / len } else { 0.0 };
        std::array::from_fn(|j| self.bary0[j] + t * (self.bary1[j] - self.bary0[j]))
    }

    pub fn len(&self) -> f64 {
        self.s1 - self.s0
    }
}

/// Piecewise-linear restriction of the 3D basis to one segment.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceMap {
    pub segment: usize,
    length: f64,
    pieces: Vec<TracePiece>,
    /// Owning tet vertices per piece, cached for lookups.
    piece_nodes: Vec<[usize; 4]>,
}

impl TraceMap {
    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn pieces(&self) -> &[TracePiece] {
        &self.pieces
    }

    pub fn piece_nodes(&self, piece: usize) -> [usize; 4] {
        self.piece_nodes[piece]
    }

    /// Arclength of every face crossing, including both endpoints.
    pub fn crossings(&self) -> Vec<f64> {
        let mut c: Vec<f64> = self.pieces.iter().map(|p| p.s0).collect();
        c.push(self.length);
        c
    }

    /// Number of distinct crossing points, endpoints included.
    pub fn n_star(&self) -> usize {
        self.pieces.len() + 1
    }

    /// Index of the piece containing `s` (the left one at a breakpoint).
    pub fn piece_at(&self, s: f64) -> usize {
        let i = self.pieces.partition_point(|p| p.s1 < s);
        i.min(self.pieces.len() - 1)
    }

    /// Value of the 3D basis function of node `k` at arclength `s`.
    pub fn eval(&self, k: usize, s: f64) -> Result<f64, GeometryError> {
        let tol = MERGE_TOL * self.length;
        if !(s >= -tol && s <= self.length + tol) {
            return Err(GeometryError::OutOfRange { s, length: self.length });
        }
        let i = self.piece_at(s);
        let nodes = &self.piece_nodes[i];
        Ok(match nodes.iter().position(|&v| v == k) {
            Some(j) => self.pieces[i].bary_at(s)[j],
            None => 0.0,
        })
    }
}

/// Free-function form of [`TraceMap::eval`].
pub fn eval_trace(tm: &TraceMap, k: usize, s: f64) -> Result<f64, GeometryError> {
    tm.eval(k, s)
}

/// Uniform bucket grid over the mesh bounding box for point location.
#[derive(Debug, Clone)]
pub struct PointLocator {
    origin: Point3,
    cell: Point3,
    dims: [usize; 3],
    buckets: Vec<Vec<u32>>,
}

impl PointLocator {
    pub fn new(mesh: &TetMesh) -> Self {
        let d = mesh.domain();
        let per_axis = ((mesh.num_tets() as f64).cbrt() / 1.5).ceil().max(1.0) as usize;
        let dims = [per_axis; 3];
        let cell = [0, 1, 2].map(|a| d.edge(a) / per_axis as f64);
        let mut buckets = vec![Vec::new(); per_axis * per_axis * per_axis];
        let pad = 1e-9 * d.max_edge();
        let mut loc = Self { origin: d.min, cell, dims, buckets: Vec::new() };
        for (t, _) in mesh.tets().iter().enumerate() {
            let vs = mesh.tet_vertices(t);
            let mut lo = [f64::INFINITY; 3];
            let mut hi = [f64::NEG_INFINITY; 3];
            for v in &vs {
                for a in 0..3 {
                    lo[a] = lo[a].min(v[a] - pad);
                    hi[a] = hi[a].max(v[a] + pad);
                }
            }
            let (i0, i1) = (loc.cell_index(&lo), loc.cell_index(&hi));
            for k in i0[2]..=i1[2] {
                for j in i0[1]..=i1[1] {
                    for i in i0[0]..=i1[0] {
                        buckets[i + dims[0] * (j + dims[1] * k)].push(t as u32);
                    }
                }
            }
        }
        loc.buckets = buckets;
        loc
    }

    fn cell_index(&self, p: &Point3) -> [usize; 3] {
        std::array::from_fn(|a| {
            let c = ((p[a] - self.origin[a]) / self.cell[a]).floor();
            (c.max(0.0) as usize).min(self.dims[a] - 1)
        })
    }

    /// All tets containing `p` up to the barycentric tolerance.
    pub fn containing(&self, mesh: &TetMesh, p: &Point3) -> Vec<usize> {
        let c = self.cell_index(p);
        self.buckets[c[0] + self.dims[0] * (c[1] + self.dims[1] * c[2])]
            .iter()
            .map(|&t| t as usize)
            .filter(|&t| mesh.barycentric(t, p).iter().all(|&l| l >= -BARY_TOL))
            .collect()
    }
}

/// Reusable traversal context for one mesh.
pub struct Traverser<'m> {
    mesh: &'m TetMesh,
    locator: PointLocator,
    node_tets: Vec<Vec<u32>>,
}

struct Candidate {
    tet: usize,
    exit: f64,
    l0: [f64; 4],
    l1: [f64; 4],
}

impl<'m> Traverser<'m> {
    pub fn new(mesh: &'m TetMesh) -> Self {
        let mut node_tets = vec![Vec::new(); mesh.num_nodes()];
        for (t, tet) in mesh.tets().iter().enumerate() {
            for &v in tet {
                node_tets[v].push(t as u32);
            }
        }
        Self { mesh, locator: PointLocator::new(mesh), node_tets }
    }

    pub fn mesh(&self) -> &TetMesh {
        self.mesh
    }

    pub fn locator(&self) -> &PointLocator {
        &self.locator
    }

    /// Evaluates how far along the segment tet `t` keeps it inside, starting
    /// at parameter `tc`. Returns `None` when `p(tc)` is not in the tet.
    fn candidate(&self, t: usize, seg: &SegmentGeom, tc: f64, len: f64) -> Option<Candidate> {
        let l0 = self.mesh.barycentric(t, &seg.p0);
        let l1 = self.mesh.barycentric(t, &seg.p1);
        let frac = tc / len;
        if (0..4).any(|j| l0[j] + frac * (l1[j] - l0[j]) < -BARY_TOL) {
            return None;
        }
        // the face that is crossed first (with slack) determines the exit;
        // its exact zero gives the breakpoint
        let mut first: Option<(f64, usize)> = None;
        for j in 0..4 {
            let slope = l1[j] - l0[j];
            if slope < 0.0 {
                let with_slack = (l0[j] + BARY_TOL) / -slope;
                if first.is_none_or(|(f, _)| with_slack < f) {
                    first = Some((with_slack, j));
                }
            }
        }
        let exit = match first {
            Some((f, j)) if f < 1.0 => {
                let zero = l0[j] / (l0[j] - l1[j]);
                zero.clamp(frac, 1.0) * len
            }
            _ => len,
        };
        Some(Candidate { tet: t, exit, l0, l1 })
    }

    fn best<I: IntoIterator<Item = usize>>(
        &self,
        tets: I,
        seg: &SegmentGeom,
        tc: f64,
        len: f64,
    ) -> Option<Candidate> {
        let tie = MERGE_TOL * len;
        let mut best: Option<Candidate> = None;
        for t in tets {
            if let Some(c) = self.candidate(t, seg, tc, len) {
                let better = match &best {
                    None => true,
                    Some(b) => c.exit > b.exit + tie || ((c.exit - b.exit).abs() <= tie && c.tet < b.tet),
                };
                if better {
                    best = Some(c);
                }
            }
        }
        best
    }

    /// Walks segment `index` through the mesh.
    pub fn traverse(&self, index: usize, seg: &SegmentGeom) -> Result<TraceMap, GeometryError> {
        let mesh = self.mesh;
        let len = seg.length();
        let tie = MERGE_TOL * len;
        let start = self.locator.containing(mesh, &seg.p0);
        if start.is_empty() {
            return Err(GeometryError::OutsideMesh { segment: index, point: seg.p0 });
        }
        if self.locator.containing(mesh, &seg.p1).is_empty() {
            return Err(GeometryError::OutsideMesh { segment: index, point: seg.p1 });
        }

        let mut raw: Vec<(f64, f64, usize, [f64; 4], [f64; 4])> = Vec::new();
        let mut tc = 0.0;
        let mut current = self.best(start, seg, tc, len);
        let mut guard = 0usize;
        loop {
            let Some(c) = current else {
                let tet = raw.last().map_or(usize::MAX, |r| r.2);
                return Err(GeometryError::DeadEnd { segment: index, tet, s: tc });
            };
            if c.exit <= tc && tc < len - tie {
                return Err(GeometryError::DeadEnd { segment: index, tet: c.tet, s: tc });
            }
            let exit = if c.exit >= len - tie { len } else { c.exit };
            raw.push((tc, exit, c.tet, c.l0, c.l1));
            tc = exit;
            if tc >= len {
                break;
            }
            guard += 1;
            if guard > 4 * mesh.num_tets() + 16 {
                return Err(GeometryError::DeadEnd { segment: index, tet: c.tet, s: tc });
            }
            let mut near: Vec<usize> = mesh.tets()[c.tet]
                .iter()
                .flat_map(|&v| self.node_tets[v].iter().map(|&t| t as usize))
                .filter(|&t| t != c.tet)
                .collect();
            near.sort_unstable();
            near.dedup();
            current = self.best(near, seg, tc, len);
        }

        // merge slivers shorter than the tolerance into a neighbour
        let mut merged: Vec<(f64, f64, usize, [f64; 4], [f64; 4])> = Vec::with_capacity(raw.len());
        for piece in raw {
            if piece.1 - piece.0 <= tie {
                if let Some(last) = merged.last_mut() {
                    last.1 = piece.1;
                    continue;
                }
            }
            match merged.last() {
                Some(last) if last.1 - last.0 <= tie => {
                    let start = last.0;
                    merged.pop();
                    merged.push((start, piece.1, piece.2, piece.3, piece.4));
                }
                _ => merged.push(piece),
            }
        }

        let mut pieces = Vec::with_capacity(merged.len());
        let mut piece_nodes = Vec::with_capacity(merged.len());
        for (s0, s1, tet, l0, l1) in merged {
            let at = |s: f64| -> [f64; 4] { std::array::from_fn(|j| l0[j] + s / len * (l1[j] - l0[j])) };
            pieces.push(TracePiece { s0, s1, tet, bary0: at(s0), bary1: at(s1) });
            piece_nodes.push(mesh.tets()[tet]);
        }
        Ok(TraceMap { segment: index, length: len, pieces, piece_nodes })
    }

    /// Traverses every segment.
    pub fn traverse_all(&self, segments: &[SegmentGeom]) -> Result<Vec<TraceMap>, GeometryError> {
        segments.iter().enumerate().map(|(i, s)| self.traverse(i, s)).collect()
    }
}

/// One-shot traversal; prefer [`Traverser`] when handling many segments.
pub fn traverse(mesh: &TetMesh, index: usize, seg: &SegmentGeom) -> Result<TraceMap, GeometryError> {
    Traverser::new(mesh).traverse(index, seg)
}

/// Sub-interval of the merged breakpoint set with the owners of each field.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadCell {
    pub a: f64,
    pub b: f64,
    pub piece: usize,
    pub uhat_cell: usize,
    pub phi_cell: usize,
    pub psi_cell: usize,
}

/// Two-point Gauss rule on every sub-interval between consecutive trace
/// breakpoints and 1D mesh nodes. All coupling integrands are polynomials of
/// degree ≤ 2 on such sub-intervals, so the rule is exact for them.
#[derive(Debug, Clone, PartialEq)]
pub struct Quadrature1D {
    cells: Vec<QuadCell>,
}

const GAUSS2: f64 = 0.577_350_269_189_625_8; // 1/sqrt(3)

impl Quadrature1D {
    pub fn cells(&self) -> &[QuadCell] {
        &self.cells
    }

    pub fn breakpoints(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.cells.iter().map(|c| c.a).collect();
        if let Some(c) = self.cells.last() {
            v.push(c.b);
        }
        v
    }

    /// Quadrature points `(cell, s, weight)`.
    pub fn points(&self) -> impl Iterator<Item = (&QuadCell, f64, f64)> + '_ {
        self.cells.iter().flat_map(|c| {
            let mid = 0.5 * (c.a + c.b);
            let half = 0.5 * (c.b - c.a);
            [(c, mid - half * GAUSS2, half), (c, mid + half * GAUSS2, half)]
        })
    }

    pub fn integrate<F: Fn(f64) -> f64>(&self, f: F) -> f64 {
        self.points().map(|(_, s, w)| w * f(s)).sum()
    }
}

fn cell_containing(mesh: &Mesh1D, s: f64) -> usize {
    let nodes = mesh.nodes();
    let i = nodes.partition_point(|&x| x <= s);
    i.saturating_sub(1).min(mesh.num_cells() - 1)
}

/// Builds the merged quadrature of one segment.
pub fn build_quadrature(tm: &TraceMap, meshes: &SegmentMeshes) -> Quadrature1D {
    let len = tm.length();
    let tol = MERGE_TOL * len;
    let mut pts: Vec<f64> = tm.crossings();
    for m in [&meshes.uhat, &meshes.phi, &meshes.psi] {
        debug_assert_eq!(m.segment, tm.segment);
        pts.extend_from_slice(m.nodes());
    }
    pts.sort_by(f64::total_cmp);
    let mut merged: Vec<f64> = Vec::with_capacity(pts.len());
    for p in pts {
        match merged.last() {
            Some(&q) if p - q <= tol => {}
            _ => merged.push(p),
        }
    }
    // pin the ends exactly
    merged[0] = 0.0;
    if len - merged[merged.len() - 1] <= tol && merged.len() > 1 {
        let last = merged.len() - 1;
        merged[last] = len;
    } else {
        merged.push(len);
    }
    let cells = merged
        .windows(2)
        .map(|w| {
            let mid = 0.5 * (w[0] + w[1]);
            QuadCell {
                a: w[0],
                b: w[1],
                piece: tm.piece_at(mid),
                uhat_cell: cell_containing(&meshes.uhat, mid),
                phi_cell: cell_containing(&meshes.phi, mid),
                psi_cell: cell_containing(&meshes.psi, mid),
            }
        })
        .collect();
    Quadrature1D { cells }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_segment_meshes, structured_mesh, BoxDomain};

    fn unit_cube_mesh() -> TetMesh {
        structured_mesh(&BoxDomain::new([0.0; 3], [1.0; 3]), [1, 1, 1]).unwrap()
    }

    #[test]
    fn segment_inside_one_tet() {
        let mesh = unit_cube_mesh();
        // tet (0,0,0)-(1,0,0)-(1,1,0)-(1,1,1) contains points with x >= y >= z
        let seg = SegmentGeom::new([0.6, 0.3, 0.1], [0.7, 0.4, 0.2], 0.01, 1.0);
        let tm = traverse(&mesh, 0, &seg).unwrap();
        assert_eq!(tm.pieces().len(), 1);
        assert_eq!(tm.n_star(), 2);
    }

    #[test]
    fn diagonal_segment_stays_on_shared_edge() {
        let mesh = unit_cube_mesh();
        let seg = SegmentGeom::new([0.1; 3], [0.9; 3], 0.01, 1.0);
        let tm = traverse(&mesh, 0, &seg).unwrap();
        // the main diagonal is an edge of all six tets: a single piece
        assert_eq!(tm.pieces().len(), 1);
        let s = seg.length() * 0.5;
        let total: f64 = (0..8).map(|k| tm.eval(k, s).unwrap()).sum();
        assert!((total - 1.0).abs() < 1e-12);
        // only the diagonal's end nodes are active
        assert!((tm.eval(0, s).unwrap() - 0.5).abs() < 1e-12);
        assert!((tm.eval(7, s).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn pieces_tile_and_values_are_continuous() {
        let mesh = structured_mesh(&BoxDomain::centered_cube(2.0), [5, 5, 5]).unwrap();
        let seg = SegmentGeom::new([-0.83, -0.41, -0.77], [0.71, 0.66, 0.59], 0.01, 1.0);
        let tm = traverse(&mesh, 0, &seg).unwrap();
        let p = tm.pieces();
        assert_eq!(p[0].s0, 0.0);
        assert_eq!(p.last().unwrap().s1, tm.length());
        for w in p.windows(2) {
            assert_eq!(w[0].s1, w[1].s0);
            let left = w[0].bary1;
            let right = w[1].bary0;
            let (na, nb) = (mesh.tets()[w[0].tet], mesh.tets()[w[1].tet]);
            for k in na.iter().chain(nb.iter()) {
                let l = na.iter().position(|v| v == k).map_or(0.0, |j| left[j]);
                let r = nb.iter().position(|v| v == k).map_or(0.0, |j| right[j]);
                assert!((l - r).abs() <= 1e-10, "discontinuity {l} vs {r}");
            }
        }
        for piece in p {
            for b in [piece.bary0, piece.bary1] {
                assert!(b.iter().all(|&l| (-1e-10..=1.0 + 1e-10).contains(&l)));
            }
        }
        let total: f64 = p.iter().map(|x| x.len()).sum();
        assert!((total - tm.length()).abs() <= 1e-10 * tm.length());
    }

    #[test]
    fn trace_matches_direct_evaluation() {
        let mesh = structured_mesh(&BoxDomain::centered_cube(2.0), [4, 4, 4]).unwrap();
        let seg = SegmentGeom::new([-0.3, 0.52, -0.9], [0.8, -0.61, 0.35], 0.01, 1.0);
        let tm = traverse(&mesh, 0, &seg).unwrap();
        for i in 0..=50 {
            let s = tm.length() * i as f64 / 50.0;
            let x = seg.point_at(s);
            // exhaustive: any tet containing x gives the same nodal values
            let t = (0..mesh.num_tets())
                .find(|&t| mesh.barycentric(t, &x).iter().all(|&l| l >= -1e-12))
                .unwrap();
            let l = mesh.barycentric(t, &x);
            for (j, &k) in mesh.tets()[t].iter().enumerate() {
                assert!((tm.eval(k, s).unwrap() - l[j]).abs() < 1e-12);
            }
            let sum: f64 = (0..mesh.num_nodes()).map(|k| tm.eval(k, s).unwrap()).sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
        assert!(tm.eval(0, -1.0).is_err());
        assert!(tm.eval(0, tm.length() * 1.01).is_err());
    }

    #[test]
    fn endpoint_outside_is_error() {
        let mesh = unit_cube_mesh();
        let seg = SegmentGeom::new([0.5; 3], [1.5, 0.5, 0.5], 0.01, 1.0);
        assert!(matches!(traverse(&mesh, 3, &seg), Err(GeometryError::OutsideMesh { segment: 3, .. })));
    }

    #[test]
    fn quadrature_is_exact_for_low_degree() {
        let mesh = structured_mesh(&BoxDomain::centered_cube(2.0), [3, 3, 3]).unwrap();
        let seg = SegmentGeom::new([-0.8, 0.1, 0.2], [0.7, -0.3, 0.5], 0.01, 1.0);
        let tm = traverse(&mesh, 0, &seg).unwrap();
        let meshes = build_segment_meshes(0, tm.length(), tm.n_star(), 0.5);
        let q = build_quadrature(&tm, &meshes);
        let s = tm.length();
        assert!((q.integrate(|_| 1.0) - s).abs() <= 1e-13);
        assert!((q.integrate(|x| x * x) - s.powi(3) / 3.0).abs() <= 1e-12);
        assert!((q.integrate(|x| x * x * x) - s.powi(4) / 4.0).abs() <= 1e-12);
        // every breakpoint of every ingredient is present
        let bp = q.breakpoints();
        for c in tm.crossings().iter().chain(meshes.uhat.nodes()).chain(meshes.psi.nodes()) {
            assert!(bp.iter().any(|b| (b - c).abs() <= MERGE_TOL * s));
        }
    }
}
