mod common;

use std::f64::consts::PI;

use nalgebra::SymmetricEigen;
use proptest::prelude::*;
use toda_core::hypmesh::{
    build_fuchsian_mesh, corner_angle, laplace_pair, load_mesh, mesh_report, parse_itri, to_itri, write_mesh, MeshError,
};

#[test]
fn generator_meshes_are_flat_with_gauss_bonnet_area() {
    for (genus, k) in [(2, 0), (2, 1), (2, 2), (2, 3), (3, 1)] {
        let m = build_fuchsian_mesh(genus, k).unwrap();
        let r = mesh_report(&m);
        assert!(r.max_vertex_defect <= 1e-8, "g{genus} k{k}: defect {}", r.max_vertex_defect);
        let expected = 4.0 * PI * (genus as f64 - 1.0);
        assert!((r.total_area - expected).abs() <= 1e-8, "g{genus} k{k}: area {}", r.total_area);
        assert_eq!(m.euler_characteristic(), 2 - 2 * genus as i64);
        assert_eq!(m.genus(), genus);
    }
}

#[test]
fn subdivision_quadruples_faces() {
    let f: Vec<usize> = (0..3).map(|k| build_fuchsian_mesh(2, k).unwrap().face_count()).collect();
    assert_eq!(f[1], 4 * f[0]);
    assert_eq!(f[2], 4 * f[1]);
}

#[test]
fn vertex_areas_partition_the_surface() {
    let m = build_fuchsian_mesh(2, 2).unwrap();
    let by_vertex: f64 = m.vertex_areas().iter().sum();
    let by_face: f64 = m.face_areas().iter().sum();
    assert!((by_vertex - by_face).abs() < 1e-12);
    assert!(m.vertex_areas().iter().all(|&a| a > 0.0));
}

#[test]
fn half_edges_are_consistent() {
    let m = build_fuchsian_mesh(2, 1).unwrap();
    for h in 0..m.half_edge_count() {
        let t = m.twin(h);
        assert_eq!(m.twin(t), h);
        assert_eq!(m.origin(t), m.target(h));
        assert_eq!(m.edge(t), m.edge(h));
        assert_eq!(m.next(m.prev(h)), h);
        assert!((m.length(h) - m.length(t)).abs() < 1e-15);
    }
    for v in 0..m.vertex_count() {
        let out = m.outgoing(v);
        assert!(out.iter().all(|&h| m.origin(h) == v));
        let sum: f64 = out.iter().map(|&h| m.angle_at_origin(h)).sum();
        assert!((sum - m.cone_angle(v)).abs() < 1e-12);
    }
}

#[test]
fn stiffness_is_semidefinite_with_constant_kernel() {
    let m = build_fuchsian_mesh(2, 2).unwrap();
    let lp = laplace_pair(&m);
    assert!((&lp.stiffness - lp.stiffness.transpose()).amax() < 1e-14);
    let ev = SymmetricEigen::new(lp.stiffness.clone()).eigenvalues;
    let mut ev: Vec<f64> = ev.iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    let scale = ev.last().unwrap().abs();
    assert!(ev[0].abs() < 1e-12 * scale);
    assert!(ev[1] > 1e-6 * scale, "second eigenvalue {}", ev[1]);
}

#[test]
fn dirichlet_energy_is_an_edge_sum() {
    let m = build_fuchsian_mesh(2, 1).unwrap();
    let lp = laplace_pair(&m);
    let mut rng = common::rng(3);
    let u = common::random_vector(&mut rng, m.vertex_count(), 1.0);
    let direct: f64 = (0..m.edge_count())
        .map(|e| {
            let h = m.edge_halves(e)[0];
            m.cotan_weight(e) * (u[m.origin(h)] - u[m.target(h)]).powi(2)
        })
        .sum();
    let quad = u.dot(&(&lp.stiffness * &u));
    assert!((direct - quad).abs() < 1e-12 * direct.abs());
}

#[test]
fn itri_round_trip_is_exact() {
    for k in 1..=2 {
        let m = build_fuchsian_mesh(2, k).unwrap();
        let dir = std::env::temp_dir().join(format!("toda_itri_{}_{k}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("m.itri");
        write_mesh(&m, &path).unwrap();
        let back = load_mesh(&path).unwrap();
        assert_eq!(back.faces(), m.faces());
        assert_eq!(back.edge_lengths(), m.edge_lengths());
        assert_eq!(to_itri(&back), to_itri(&m));
        std::fs::remove_dir_all(&dir).unwrap();
    }
}

#[test]
fn perturbed_lengths_are_rejected() {
    let m = build_fuchsian_mesh(2, 1).unwrap();
    let mut lengths = m.edge_lengths().to_vec();
    lengths[0] *= 1.01;
    let bent = m.with_edge_lengths(lengths).unwrap();
    assert!(matches!(bent.check_hyperbolic_structure(1e-8), Err(MeshError::AngleDefect { .. })));
    assert!(parse_itri(&to_itri(&bent)).is_err());
}

#[test]
fn malformed_itri_reports_a_line() {
    let text = "ITRI 1\n3 1 2\n0 1 x 1 1 1\n";
    assert!(matches!(parse_itri(text), Err(MeshError::Malformed { line: 3, .. })));
    assert!(matches!(parse_itri("ITRI 1\n3 1 2\n0 1 2 1 -1 1\n"), Err(MeshError::NonpositiveLength { .. })));
}

/// Hyperbolic law of cosines: `cos α = (cosh b cosh c − cosh a) / (sinh b sinh c)`.
fn law_of_cosines(a: f64, b: f64, c: f64) -> f64 {
    ((b.cosh() * c.cosh() - a.cosh()) / (b.sinh() * c.sinh())).acos()
}

proptest! {
    #[test]
    fn corner_angle_matches_law_of_cosines(a in 0.05f64..3.0, b in 0.05f64..3.0, t in 0.05f64..0.95) {
        // c strictly inside the triangle-inequality window
        let c = (a - b).abs() + t * (a + b - (a - b).abs());
        let alpha = corner_angle(a, b, c);
        prop_assert!((alpha - law_of_cosines(a, b, c)).abs() < 1e-7);
    }

    #[test]
    fn hyperbolic_triangles_have_angle_deficit(a in 0.05f64..3.0, b in 0.05f64..3.0, t in 0.05f64..0.95) {
        let c = (a - b).abs() + t * (a + b - (a - b).abs());
        let sum = corner_angle(a, b, c) + corner_angle(b, c, a) + corner_angle(c, a, b);
        prop_assert!(sum < PI);
        prop_assert!(sum > 0.0);
    }
}
