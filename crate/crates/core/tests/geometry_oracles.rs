mod common;

use common::geometry::{check_couplings, check_crossings, random_segment};
use common::{barycentric, jittered_mesh, lerp, phi3d};
use coupled3d1d::geometry::{eval_trace, Traverser};
use coupled3d1d::mesh::{structured_mesh, BoxDomain, SegmentGeom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn traversal_matches_sampling_oracle_on_random_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let domain = BoxDomain::centered_cube(2.0);
    for case in 0..24 {
        let n = [rng.gen_range(2..5), rng.gen_range(2..5), rng.gen_range(2..5)];
        let mesh = jittered_mesh(&mut rng, &domain, n, 0.2);
        let seg = random_segment(&mut rng, -0.95, 0.95);
        check_crossings(&mesh, &seg).unwrap_or_else(|e| panic!("case {case}: {e}"));
    }
}

#[test]
fn axial_segment_on_structured_mesh_matches_oracle() {
    let mesh = structured_mesh(&BoxDomain::centered_cube(2.0), [20, 20, 20]).unwrap();
    let seg = SegmentGeom::new([0.0, 0.0, -0.8], [0.0, 0.0, 0.8], 0.01, 100.0);
    check_crossings(&mesh, &seg).unwrap();
    let tm = Traverser::new(&mesh).traverse(0, &seg).unwrap();
    // the axis runs along grid edges, so only the z-planes at spacing 0.1 are crossed
    assert_eq!(tm.n_star(), 17);
}

#[test]
fn segment_inside_one_tet_has_two_crossings() {
    let mesh = structured_mesh(&BoxDomain::centered_cube(2.0), [2, 2, 2]).unwrap();
    let t = 5;
    let v = mesh.tet_vertices(t);
    let c = |w: [f64; 4]| [0, 1, 2].map(|a| (0..4).map(|j| w[j] * v[j][a]).sum::<f64>());
    let seg = SegmentGeom::new(c([0.4, 0.2, 0.2, 0.2]), c([0.2, 0.4, 0.2, 0.2]), 0.01, 100.0);
    let tm = Traverser::new(&mesh).traverse(0, &seg).unwrap();
    assert_eq!(tm.n_star(), 2);
    assert_eq!(tm.pieces()[0].tet, t);
}

#[test]
fn trace_evaluation_matches_point_location() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mesh = jittered_mesh(&mut rng, &BoxDomain::centered_cube(2.0), [3, 3, 3], 0.2);
    for _ in 0..4 {
        let seg = random_segment(&mut rng, -0.9, 0.9);
        let tm = Traverser::new(&mesh).traverse(0, &seg).unwrap();
        for j in 0..=50 {
            let s = seg.length() * j as f64 / 50.0;
            let p = lerp(&seg.p0, &seg.p1, s / seg.length());
            for k in 0..mesh.num_nodes() {
                let a = eval_trace(&tm, k, s).unwrap();
                let b = phi3d(&mesh, k, &p);
                assert!((a - b).abs() <= 1e-12, "node {k} at s = {s}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn oracle_barycentrics_are_consistent_with_the_mesh() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mesh = jittered_mesh(&mut rng, &BoxDomain::centered_cube(2.0), [3, 2, 4], 0.25);
    for t in 0..mesh.num_tets() {
        let v = mesh.tet_vertices(t);
        let p = [0, 1, 2].map(|a| 0.1 * v[0][a] + 0.2 * v[1][a] + 0.3 * v[2][a] + 0.4 * v[3][a]);
        let ours = barycentric(&v, &p);
        let theirs = mesh.barycentric(t, &p);
        for j in 0..4 {
            assert!((ours[j] - theirs[j]).abs() < 1e-12);
        }
    }
}

#[test]
fn coupling_matrices_match_simpson_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for instance in 0..3 {
        check_couplings(&mut rng, 2 + instance).unwrap_or_else(|e| panic!("instance {instance}: {e}"));
    }
}
