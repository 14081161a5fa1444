//! Geometry and line-integral oracles built from point location and
//! Simpson's rule.

use super::{hat, jittered_mesh, lerp, locate_all, phi3d_all, random_point, sampled_crossings, simpson};
use coupled3d1d::assembly::{assemble_a, assemble_ahat, assemble_couplings, assemble_g, assemble_stiffness, LineSet};
use coupled3d1d::geometry::Traverser;
use coupled3d1d::linalg::SparseMatrix;
use coupled3d1d::mesh::{BoxDomain, SegmentGeom, TetMesh};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn random_segment(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> SegmentGeom {
    loop {
        let p0 = random_point(rng, lo, hi);
        let p1 = random_point(rng, lo, hi);
        let seg = SegmentGeom::new(p0, p1, 0.01, 100.0);
        if seg.length() > 0.2 {
            return seg;
        }
    }
}

/// Compares the traversal of `seg` with the sampling oracle: same n_star,
/// crossings within 1e-8·S, and each piece owned by a tet containing its
/// midpoint.
pub fn check_crossings(mesh: &TetMesh, seg: &SegmentGeom) -> Result<(), String> {
    let tm = Traverser::new(mesh).traverse(0, seg).map_err(|e| e.to_string())?;
    let oracle = sampled_crossings(mesh, seg, 400);
    let found = tm.crossings();
    let interior = &found[1..found.len() - 1];
    if tm.n_star() != oracle.len() + 2 {
        return Err(format!("n_star {} vs oracle {}", tm.n_star(), oracle.len() + 2));
    }
    for (a, b) in interior.iter().zip(&oracle) {
        if (a - b).abs() > 1e-8 * seg.length() {
            return Err(format!("crossing {a} vs {b}"));
        }
    }
    for (i, p) in tm.pieces().iter().enumerate() {
        let mid = lerp(&seg.p0, &seg.p1, 0.5 * (p.s0 + p.s1) / seg.length());
        if !locate_all(mesh, &mid, 1e-10).contains(&p.tet) {
            return Err(format!("piece {i} owned by wrong tet"));
        }
    }
    Ok(())
}

/// Dense reference values of every line integral, from Simpson's rule on the
/// sub-intervals between sampled crossings and 1D mesh nodes.
struct Reference {
    g: Vec<Vec<f64>>,
    b: Vec<Vec<f64>>,
    c: Vec<Vec<f64>>,
    b_hat: Vec<Vec<f64>>,
    c_hat: Vec<Vec<f64>>,
    g_hat: Vec<Vec<f64>>,
    g_psi: Vec<Vec<f64>>,
    a_hat: Vec<Vec<f64>>,
    perimeter_weighted_g: Vec<Vec<f64>>,
}

fn reference(mesh: &TetMesh, lines: &LineSet, alpha_hat: f64) -> Reference {
    let n = mesh.num_nodes();
    let (nh, nphi, npsi) = (lines.n_uhat(), lines.n_phi(), lines.n_psi());
    let z = |r: usize, c: usize| vec![vec![0.0; c]; r];
    let mut out = Reference {
        g: z(n, n),
        b: z(n, nphi),
        c: z(n, npsi),
        b_hat: z(nh, nphi),
        c_hat: z(nh, npsi),
        g_hat: z(nh, nh),
        g_psi: z(npsi, npsi),
        a_hat: z(nh, nh),
        perimeter_weighted_g: z(n, n),
    };
    for (i, seg) in lines.segments.iter().enumerate() {
        let geom = &seg.geom;
        let len = geom.length();
        let nu = seg.meshes.uhat.num_dofs();
        let cells = seg.meshes.phi.num_cells();
        let np = seg.meshes.psi.num_dofs();
        let (u0, f0, p0) = (lines.uhat_range(i).start, lines.phi_range(i).start, lines.psi_range(i).start);

        let mut breaks = vec![0.0, len];
        breaks.extend(sampled_crossings(mesh, geom, 300));
        breaks.extend((1..nu - 1).map(|k| len * k as f64 / (nu - 1) as f64));
        breaks.extend((1..cells).map(|k| len * k as f64 / cells as f64));
        breaks.extend((1..np - 1).map(|k| len * k as f64 / (np - 1) as f64));
        breaks.sort_by(f64::total_cmp);
        breaks.dedup_by(|a, b| (*a - *b).abs() < 1e-12);

        let perimeter = geom.perimeter();
        let stiff = geom.conductivity * geom.section_area();
        let hu = len / (nu - 1) as f64;
        for w in breaks.windows(2) {
            let (a, b) = (w[0], w[1]);
            let mid = 0.5 * (a + b);
            let cell = ((mid / len * cells as f64) as usize).min(cells - 1);
            let point = |s: f64| lerp(&geom.p0, &geom.p1, s / len);
            let hats3 = |s: f64| phi3d_all(mesh, &point(s));
            let active3: Vec<usize> = hats3(mid).iter().map(|&(k, _)| k).collect();
            let value3 = |k: usize, s: f64| hats3(s).iter().find(|&&(j, _)| j == k).map_or(0.0, |&(_, v)| v);
            let simp = |f: &dyn Fn(f64) -> f64| simpson(f, a, b, 2);

            for &k in &active3 {
                for &l in &active3 {
                    let v = simp(&|s| value3(k, s) * value3(l, s));
                    out.g[k][l] += v;
                    out.perimeter_weighted_g[k][l] += perimeter * v;
                }
                out.b[k][f0 + cell] += perimeter * simp(&|s| value3(k, s));
                for m in 0..np {
                    out.c[k][p0 + m] += simp(&|s| value3(k, s) * hat(len, np, m, s));
                }
            }
            let du = |k: usize| {
                let x = mid / hu;
                if (x - k as f64).abs() >= 1.0 { 0.0 } else if x < k as f64 { 1.0 / hu } else { -1.0 / hu }
            };
            for k in 0..nu {
                out.b_hat[u0 + k][f0 + cell] += perimeter * simp(&|s| hat(len, nu, k, s));
                for m in 0..np {
                    out.c_hat[u0 + k][p0 + m] += simp(&|s| hat(len, nu, k, s) * hat(len, np, m, s));
                }
                for l in 0..nu {
                    let mass = simp(&|s| hat(len, nu, k, s) * hat(len, nu, l, s));
                    out.g_hat[u0 + k][u0 + l] += mass;
                    out.a_hat[u0 + k][u0 + l] += stiff * du(k) * du(l) * (b - a) + alpha_hat * perimeter * mass;
                }
            }
            for m in 0..np {
                for l in 0..np {
                    out.g_psi[p0 + m][p0 + l] += simp(&|s| hat(len, np, m, s) * hat(len, np, l, s));
                }
            }
        }
    }
    out
}

fn compare(name: &str, m: &SparseMatrix, dense: &[Vec<f64>]) -> Result<(), String> {
    if m.nrows() != dense.len() || dense.iter().any(|r| r.len() != m.ncols()) {
        return Err(format!("{name}: shape {}x{} differs from oracle", m.nrows(), m.ncols()));
    }
    for (i, row) in dense.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            let got = m.get(i, j);
            if (got - v).abs() > 1e-10 {
                return Err(format!("{name}[{i},{j}] = {got}, oracle {v}"));
            }
        }
    }
    Ok(())
}

fn scaled(dense: &[Vec<f64>], f: f64) -> Vec<Vec<f64>> {
    dense.iter().map(|r| r.iter().map(|v| v * f).collect()).collect()
}

/// Checks every line-integral block of one random instance (jittered 3³
/// mesh, `segments` random segments) against the Simpson oracle to 1e-10.
pub fn check_couplings(rng: &mut ChaCha8Rng, segments: usize) -> Result<(), String> {
    let (alpha, alpha_hat) = (1.7, 0.6);
    let mesh = jittered_mesh(rng, &BoxDomain::centered_cube(2.0), [3, 3, 3], 0.2);
    let segs: Vec<SegmentGeom> = (0..segments)
        .map(|_| {
            let mut s = random_segment(rng, -0.9, 0.9);
            s.radius = rng.gen_range(0.005..0.05);
            s.conductivity = rng.gen_range(1.0..200.0);
            s
        })
        .collect();
    let lines = LineSet::build(&Traverser::new(&mesh), &segs, 0.5).map_err(|e| e.to_string())?;
    let r = reference(&mesh, &lines, alpha_hat);
    let cp = assemble_couplings(&mesh, &lines, alpha, alpha_hat);
    compare("B", &cp.b, &r.b)?;
    compare("B^", &cp.b_hat, &r.b_hat)?;
    compare("C", &cp.c, &r.c)?;
    compare("C^", &cp.c_hat, &r.c_hat)?;
    compare("G^", &cp.g_hat, &r.g_hat)?;
    compare("Gpsi", &cp.g_psi, &r.g_psi)?;
    compare("G", &assemble_g(&mesh, &lines), &r.g)?;

    // the alpha-weighted couplings scale by the segment perimeter
    let mut c_alpha = vec![vec![0.0; lines.n_psi()]; mesh.num_nodes()];
    let mut c_hat_alpha = vec![vec![0.0; lines.n_psi()]; lines.n_uhat()];
    for (i, seg) in lines.segments.iter().enumerate() {
        let w = seg.geom.perimeter();
        for col in lines.psi_range(i) {
            for (row, v) in c_alpha.iter_mut().enumerate() {
                v[col] = alpha * w * r.c[row][col];
            }
            for (row, v) in c_hat_alpha.iter_mut().enumerate() {
                v[col] = alpha_hat * w * r.c_hat[row][col];
            }
        }
    }
    compare("Calpha", &cp.c_alpha, &c_alpha)?;
    compare("C^alpha", &cp.c_hat_alpha, &c_hat_alpha)?;

    let k = [1.0, 1.0, 1.0];
    let stiffness = assemble_stiffness(&mesh, k).to_dense();
    let a = assemble_a(&mesh, &lines, k, alpha);
    let expected: Vec<Vec<f64>> = stiffness
        .iter()
        .zip(scaled(&r.perimeter_weighted_g, alpha))
        .map(|(s, g)| s.iter().zip(&g).map(|(x, y)| x + y).collect())
        .collect();
    compare("A", &a, &expected)?;

    let inclusion = assemble_ahat(&lines, alpha_hat, 1e-9).map_err(|e| e.to_string())?;
    compare("A^", &inclusion.a_hat, &r.a_hat)?;
    Ok(())
}
