//! Independent reference computations shared by the integration tests.
#![allow(dead_code)]

pub mod geometry;

use coupled3d1d::assembly::{
    assemble_system, build_blocks, BoxBcs, CoupledSystem, LineSet, Physics, Sources,
};
use coupled3d1d::geometry::Traverser;
use coupled3d1d::linalg::dense_solve;
use coupled3d1d::mesh::{structured_mesh, BoxDomain, FaceTag, Point3, SegmentGeom, TetMesh};
use rand::Rng;

pub fn lerp(p0: &Point3, p1: &Point3, t: f64) -> Point3 {
    [0, 1, 2].map(|a| p0[a] + t * (p1[a] - p0[a]))
}

/// Barycentric coordinates by Cramer's rule on the 3×3 edge system.
pub fn barycentric(v: &[Point3; 4], p: &Point3) -> [f64; 4] {
    let e = |i: usize| [v[i][0] - v[0][0], v[i][1] - v[0][1], v[i][2] - v[0][2]];
    let r = [p[0] - v[0][0], p[1] - v[0][1], p[2] - v[0][2]];
    let det3 = |a: [f64; 3], b: [f64; 3], c: [f64; 3]| {
        a[0] * (b[1] * c[2] - b[2] * c[1]) - b[0] * (a[1] * c[2] - a[2] * c[1]) + c[0] * (a[1] * b[2] - a[2] * b[1])
    };
    let (e1, e2, e3) = (e(1), e(2), e(3));
    let d = det3(e1, e2, e3);
    let l1 = det3(r, e2, e3) / d;
    let l2 = det3(e1, r, e3) / d;
    let l3 = det3(e1, e2, r) / d;
    [1.0 - l1 - l2 - l3, l1, l2, l3]
}

fn vertices(mesh: &TetMesh, t: usize) -> [Point3; 4] {
    mesh.tets()[t].map(|i| mesh.nodes()[i])
}

/// Every tet containing `p`, by exhaustive search.
pub fn locate_all(mesh: &TetMesh, p: &Point3, tol: f64) -> Vec<usize> {
    (0..mesh.num_tets())
        .filter(|&t| barycentric(&vertices(mesh, t), p).iter().all(|&l| l >= -tol))
        .collect()
}

/// Value of the 3D hat function of node `k` at `p`.
pub fn phi3d(mesh: &TetMesh, k: usize, p: &Point3) -> f64 {
    let t = *locate_all(mesh, p, 1e-11).first().expect("point outside mesh");
    let tet = mesh.tets()[t];
    match tet.iter().position(|&v| v == k) {
        Some(j) => barycentric(&vertices(mesh, t), p)[j],
        None => 0.0,
    }
}

/// All hat values at `p` as `(node, value)` pairs from one containing tet.
pub fn phi3d_all(mesh: &TetMesh, p: &Point3) -> Vec<(usize, f64)> {
    let t = *locate_all(mesh, p, 1e-11).first().expect("point outside mesh");
    let b = barycentric(&vertices(mesh, t), p);
    mesh.tets()[t].iter().copied().zip(b).collect()
}

/// Crossing parameters in (0, S) found by sampling the segment and
/// bisecting every interval whose endpoints lie in different tets.
pub fn sampled_crossings(mesh: &TetMesh, seg: &SegmentGeom, samples: usize) -> Vec<f64> {
    let len = seg.length();
    let at = |t: f64| {
        let mut v = locate_all(mesh, &lerp(&seg.p0, &seg.p1, t), 1e-12);
        v.sort_unstable();
        v
    };
    let min_width = 1e-14;
    let mut out = Vec::new();
    fn refine(
        a: f64,
        b: f64,
        sa: &[usize],
        sb: &[usize],
        at: &dyn Fn(f64) -> Vec<usize>,
        min_width: f64,
        out: &mut Vec<f64>,
    ) {
        if sa == sb {
            return;
        }
        if b - a <= min_width {
            out.push(0.5 * (a + b));
            return;
        }
        let m = 0.5 * (a + b);
        let sm = at(m);
        // a set shared by both neighbours means `m` sits on the crossing itself
        let shared_a = sa.iter().any(|t| sm.contains(t));
        let shared_b = sb.iter().any(|t| sm.contains(t));
        if shared_a && shared_b && sm.len() > sa.len().min(sb.len()) {
            out.push(m);
            return;
        }
        refine(a, m, sa, &sm, at, min_width, out);
        refine(m, b, &sm, sb, at, min_width, out);
    }
    let mut prev_t = 0.0;
    let mut prev = at(0.0);
    for j in 1..=samples {
        let t = j as f64 / samples as f64;
        let cur = at(t);
        refine(prev_t, t, &prev, &cur, &at, min_width, &mut out);
        prev_t = t;
        prev = cur;
    }
    let mut s: Vec<f64> = out.into_iter().map(|t| t * len).collect();
    s.sort_by(f64::total_cmp);
    let mut merged: Vec<f64> = Vec::new();
    for v in s {
        if merged.last().is_none_or(|&l| v - l > 1e-9 * len) {
            merged.push(v);
        }
    }
    merged.retain(|&v| v > 1e-9 * len && v < len * (1.0 - 1e-9));
    merged
}

/// Composite Simpson with `n` (even) panels on `[a, b]`.
pub fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

/// Simpson over each interval between the given sorted breakpoints.
pub fn piecewise_simpson(f: &dyn Fn(f64) -> f64, breaks: &[f64], panels: usize) -> f64 {
    breaks.windows(2).map(|w| simpson(f, w[0], w[1], panels)).sum()
}

/// Hat function `k` of a uniform P1 mesh with `n` nodes on `[0, len]`.
pub fn hat(len: f64, n: usize, k: usize, s: f64) -> f64 {
    let h = len / (n - 1) as f64;
    (1.0 - ((s - k as f64 * h) / h).abs()).max(0.0)
}

/// Indicator of cell `l` of a uniform mesh with `cells` cells on `[0, len]`,
/// evaluated away from cell boundaries.
pub fn cell_indicator(len: f64, cells: usize, l: usize, s: f64) -> f64 {
    let h = len / cells as f64;
    if s >= l as f64 * h && s <= (l + 1) as f64 * h { 1.0 } else { 0.0 }
}

/// Structured mesh with interior nodes jittered by up to `jitter` times the
/// smallest cell width.
pub fn jittered_mesh<R: Rng>(rng: &mut R, domain: &BoxDomain, n: [usize; 3], jitter: f64) -> TetMesh {
    let base = structured_mesh(domain, n).unwrap();
    let w = (0..3).map(|a| domain.edge(a) / n[a] as f64).fold(f64::INFINITY, f64::min);
    let nodes: Vec<Point3> = base
        .nodes()
        .iter()
        .map(|p| {
            let interior = (0..3).all(|a| p[a] > domain.min[a] + 1e-9 && p[a] < domain.max[a] - 1e-9);
            if interior { p.map(|x| x + jitter * w * rng.gen_range(-1.0..1.0)) } else { *p }
        })
        .collect();
    TetMesh::from_parts(nodes, base.tets().to_vec()).unwrap()
}

pub fn random_point<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> Point3 {
    [0, 1, 2].map(|_| rng.gen_range(lo..hi))
}

/// The small two-segment instance used by the oracle comparisons.
pub struct SmallProblem {
    pub mesh: TetMesh,
    pub lines: LineSet,
    pub physics: Physics,
    pub bcs: BoxBcs,
    pub sys: CoupledSystem,
}

pub fn small_problem() -> SmallProblem {
    let mesh = structured_mesh(&BoxDomain::centered_cube(2.0), [4, 4, 4]).unwrap();
    let segs = vec![
        SegmentGeom::new([-0.45, 0.2, -0.8], [0.35, -0.15, 0.75], 0.05, 20.0),
        SegmentGeom::new([0.6, 0.55, -0.6], [-0.5, -0.3, 0.3], 0.03, 50.0),
    ];
    let lines = LineSet::build(&Traverser::new(&mesh), &segs, 0.5).unwrap();
    let physics = Physics::default();
    let bcs = BoxBcs::pressure_drop(FaceTag::ZPlus, 1.0, FaceTag::ZMinus, 0.0);
    let sys = assemble_system(&mesh, &lines, &physics, &bcs, &Sources::default()).unwrap();
    SmallProblem { mesh, lines, physics, bcs, sys }
}

/// Solution of the stationarity system of
/// `min J̃(U, Û, Ψ)` subject to the discrete constraints, built from the
/// full assembled matrices with its own Dirichlet elimination and solved
/// densely.
pub struct KktSolution {
    /// Free 3D values, free 1D values and junction multipliers.
    pub w: Vec<f64>,
    pub phi: Vec<f64>,
    pub psi: Vec<f64>,
}

fn dense(m: &coupled3d1d::linalg::SparseMatrix) -> Vec<Vec<f64>> {
    m.to_dense()
}

pub fn kkt_solve(sys: &CoupledSystem) -> KktSolution {
    let n = sys.n_nodes;
    let nh = sys.uhat_dofs.len_full();
    let (nphi, npsi) = (sys.n_phi, sys.n_psi);
    let m = sys.inclusion.q.nrows();
    let ufix: Vec<bool> = (0..n).map(|i| sys.u_dofs.to_free[i].is_none()).collect();
    let hfix: Vec<bool> = (0..nh).map(|i| sys.uhat_dofs.to_free[i].is_none()).collect();
    let uf: Vec<usize> = (0..n).filter(|&i| !ufix[i]).collect();
    let hf: Vec<usize> = (0..nh).filter(|&i| !hfix[i]).collect();
    let ud = &sys.u_dofs.fixed_values;
    let hd = &sys.uhat_dofs.fixed_values;

    let a = dense(&sys.a);
    let ah = dense(&sys.inclusion.a_hat);
    let q = dense(&sys.inclusion.q);
    let g = dense(&sys.g);
    let cp = &sys.couplings;
    let (b, bh, ca, cha, c, ch, gh, gpsi) = (
        dense(&cp.b),
        dense(&cp.b_hat),
        dense(&cp.c_alpha),
        dense(&cp.c_hat_alpha),
        dense(&cp.c),
        dense(&cp.c_hat),
        dense(&cp.g_hat),
        dense(&cp.g_psi),
    );

    // state unknowns: free U, free Û, multipliers
    let nw = uf.len() + hf.len() + m;
    let (o_phi, o_psi, o_lam) = (nw, nw + nphi, nw + nphi + npsi);
    let size = o_lam + nw;
    let mut k = vec![vec![0.0; size]; size];
    let mut rhs = vec![0.0; size];

    // rows of the state block: full index, and whether it is a 3D node
    let state: Vec<(usize, bool)> = uf.iter().map(|&i| (i, true)).chain(hf.iter().map(|&i| (i, false))).collect();

    // functional Hessian and gradient at zero, from full-field products
    for (r, &(i, is3d)) in state.iter().enumerate() {
        for (s, &(j, js3d)) in state.iter().enumerate() {
            if is3d && js3d {
                k[r][s] = g[i][j];
            } else if !is3d && !js3d {
                k[r][s] = gh[i][j];
            }
        }
        for l in 0..npsi {
            let v = if is3d { c[i][l] } else { ch[i][l] };
            k[r][o_psi + l] = -v;
            k[o_psi + l][r] = -v;
        }
        // gradient contribution of the prescribed values
        let h: f64 = if is3d {
            (0..n).filter(|&j| ufix[j]).map(|j| g[i][j] * ud[j]).sum()
        } else {
            (0..nh).filter(|&j| hfix[j]).map(|j| gh[i][j] * hd[j]).sum()
        };
        rhs[r] = -h;
    }
    for l in 0..npsi {
        for l2 in 0..npsi {
            k[o_psi + l][o_psi + l2] = 2.0 * gpsi[l][l2];
        }
        let h: f64 = (0..n).filter(|&j| ufix[j]).map(|j| c[j][l] * ud[j]).sum::<f64>()
            + (0..nh).filter(|&j| hfix[j]).map(|j| ch[j][l] * hd[j]).sum::<f64>();
        rhs[o_psi + l] = h;
    }

    // constraint rows: A U − B Φ − C^α Ψ = f, Â Û + Qᵀλ + B̂ Φ − Ĉ^α Ψ = g, Q Û = 0
    let mut crow = vec![vec![0.0; o_lam]; nw];
    let mut cval = vec![0.0; nw];
    for (r, &(i, is3d)) in state.iter().enumerate() {
        if is3d {
            for (s, &(j, js3d)) in state.iter().enumerate() {
                if js3d {
                    crow[r][s] = a[i][j];
                }
            }
            for l in 0..nphi {
                crow[r][o_phi + l] = -b[i][l];
            }
            for l in 0..npsi {
                crow[r][o_psi + l] = -ca[i][l];
            }
            cval[r] = sys.f[i] - (0..n).filter(|&j| ufix[j]).map(|j| a[i][j] * ud[j]).sum::<f64>();
        } else {
            for (s, &(j, js3d)) in state.iter().enumerate() {
                if !js3d {
                    crow[r][s] = ah[i][j];
                }
            }
            for p in 0..m {
                crow[r][uf.len() + hf.len() + p] = q[p][i];
            }
            for l in 0..nphi {
                crow[r][o_phi + l] = bh[i][l];
            }
            for l in 0..npsi {
                crow[r][o_psi + l] = -cha[i][l];
            }
            cval[r] = sys.g_rhs[i] - (0..nh).filter(|&j| hfix[j]).map(|j| ah[i][j] * hd[j]).sum::<f64>();
        }
    }
    for p in 0..m {
        let r = uf.len() + hf.len() + p;
        for (s, &(j, js3d)) in state.iter().enumerate() {
            if !js3d {
                crow[r][s] = q[p][j];
            }
        }
    }
    for r in 0..nw {
        for s in 0..o_lam {
            k[o_lam + r][s] = crow[r][s];
            k[s][o_lam + r] = crow[r][s];
        }
        rhs[o_lam + r] = cval[r];
    }
    let x = dense_solve(&k, &rhs).expect("KKT system singular");
    KktSolution { w: x[..nw].to_vec(), phi: x[o_phi..o_psi].to_vec(), psi: x[o_psi..o_lam].to_vec() }
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(f64::MIN_POSITIVE)
}

/// Explicit `M` formed column by column from the matrix-free product.
pub fn explicit_m(op: &coupled3d1d::solver::ReducedOperator) -> Vec<Vec<f64>> {
    use coupled3d1d::solver::SpdOperator;
    let n = op.dim();
    let mut cols = Vec::with_capacity(n);
    for j in 0..n {
        let mut e = vec![0.0; n];
        e[j] = 1.0;
        cols.push(op.apply_m(&e).unwrap());
    }
    (0..n).map(|i| (0..n).map(|j| cols[j][i]).collect()).collect()
}

pub fn small_operator() -> (SmallProblem, coupled3d1d::solver::ReducedOperator) {
    let p = small_problem();
    let blocks = build_blocks(&p.sys).unwrap();
    let op = coupled3d1d::solver::ReducedOperator::new(blocks).unwrap();
    (p, op)
}
