use proptest::prelude::*;
use rustfft::num_complex::Complex;

use vbdf2::integrator::{
    dahlquist_march, energy_series, l2_stability_ratio, march, Bdf2Config, Problem, StartingScheme,
};
use vbdf2::kernels::{
    build_bdf2_kernels, c_r_constant, doc_explicit_row, doc_recursive, doc_row_sum, doc_tail_sum,
    orthogonality_defect, psd_min_eigenvalue, quadratic_form, theta_factor, theta_hat,
};
use vbdf2::mesh::{
    capped_random_mesh, grigorieff_bound, random_mesh, ratio_profile, s1_ratio_bound, TimeMesh,
};
use vbdf2::spatial::{Field, ScalarOperator, SpatialOperator, SpectralOperator};

fn s1_mesh() -> impl Strategy<Value = TimeMesh> {
    (2usize..80, any::<u64>()).prop_map(|(n, seed)| capped_random_mesh(1.0, n, seed, s1_ratio_bound()).unwrap())
}

fn scalar(v: f64) -> Field {
    ScalarOperator::field(Complex::new(v, 0.0))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn random_meshes_cover_the_interval(n in 1usize..300, seed in any::<u64>(), t in 0.1f64..10.0) {
        let mesh = random_mesh(t, n, seed).unwrap();
        prop_assert!(mesh.steps().iter().all(|&s| s > 0.0));
        prop_assert!((mesh.final_time() - t).abs() <= 1e-12 * t);
        prop_assert_eq!(mesh, random_mesh(t, n, seed).unwrap());
    }

    #[test]
    fn capped_meshes_respect_the_cap(n in 2usize..300, seed in any::<u64>(), cap in 1.05f64..8.0) {
        let mesh = capped_random_mesh(1.0, n, seed, cap).unwrap();
        let profile = ratio_profile(&mesh);
        prop_assert!(profile.r_max <= cap);
        prop_assert!((mesh.final_time() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn ratio_counts_partition(n in 2usize..200, seed in any::<u64>()) {
        let profile = ratio_profile(&random_mesh(1.0, n, seed).unwrap());
        let below = profile.r.iter().filter(|&&r| r < grigorieff_bound()).count();
        prop_assert_eq!(below + profile.n0_count + profile.n1_count, n - 1);
    }

    #[test]
    fn doc_identities_on_s1_meshes(mesh in s1_mesh()) {
        let kernels = build_bdf2_kernels(&mesh);
        let mut double_sum = 0.0;
        for n in 1..=mesh.n_steps() {
            let rec = doc_recursive(&kernels, n).unwrap();
            let exp = doc_explicit_row(&kernels, n).unwrap();
            let scale = exp.theta_hat.iter().copied().fold(1.0, f64::max);
            prop_assert!(orthogonality_defect(&kernels, n).unwrap() <= 1e-14 * scale);
            for (a, b) in rec.theta.iter().zip(&exp.theta) {
                prop_assert!((a - b).abs() <= 1e-13 * b.abs());
            }
            let row = doc_row_sum(&kernels, n).unwrap();
            prop_assert!((row - mesh.step(n)).abs() <= 1e-12 * mesh.step(n));
            double_sum += row;
            prop_assert!((double_sum - mesh.level(n)).abs() <= 1e-12 * mesh.level(n));
        }
    }

    #[test]
    fn theta_hat_factors(mesh in s1_mesh()) {
        let kernels = build_bdf2_kernels(&mesh);
        let n = mesh.n_steps();
        for k in 1..n {
            let ratio = theta_hat(&kernels, n, k).unwrap() / theta_hat(&kernels, n, k + 1).unwrap();
            let want = theta_factor(mesh.ratio(k + 1));
            prop_assert!((ratio - want).abs() <= 1e-14 * want.max(1e-300));
        }
    }

    #[test]
    fn kernels_are_psd_under_s1(mesh in s1_mesh(), w in prop::collection::vec(-1.0f64..1.0, 80)) {
        let kernels = build_bdf2_kernels(&mesh);
        let n = mesh.n_steps();
        let scale = (1..=n).map(|k| kernels.b0(k)).fold(0.0, f64::max);
        let w = &w[..n];
        let norm2: f64 = w.iter().map(|x| x * x).sum();
        prop_assert!(quadratic_form(&kernels, w).unwrap() >= -1e-10 * scale * norm2);
        prop_assert!(psd_min_eigenvalue(&kernels, n).unwrap() >= -1e-10 * scale);
    }

    #[test]
    fn telescoping_lower_bound(mesh in s1_mesh(), w in prop::collection::vec(-1.0f64..1.0, 80)) {
        let kernels = build_bdf2_kernels(&mesh);
        let n = mesh.n_steps();
        let scale = (1..=n).map(|k| kernels.b0(k)).fold(0.0, f64::max);
        for k in 2..n {
            let lhs = 2.0 * w[k - 1] * (kernels.b0(k) * w[k - 1] + kernels.b1(k) * w[k - 2]);
            let (r_next, r_k) = (mesh.ratio(k + 1), mesh.ratio(k));
            let rhs = r_next / (1.0 + r_next) * w[k - 1].powi(2) / mesh.step(k)
                - r_k / (1.0 + r_k) * w[k - 2].powi(2) / mesh.step(k - 1);
            prop_assert!(lhs >= rhs - 1e-10 * scale, "k = {}", k);
        }
    }

    #[test]
    fn tail_sums_bounded_by_c_r(n in 2usize..120, seed in any::<u64>()) {
        let mesh = capped_random_mesh(1.0, n, seed, grigorieff_bound() * 0.95).unwrap();
        let kernels = build_bdf2_kernels(&mesh);
        let c_r = c_r_constant(&ratio_profile(&mesh)).unwrap();
        for j in 1..=n {
            prop_assert!(doc_tail_sum(&kernels, j, n).unwrap() <= c_r * (1.0 + 1e-10));
        }
    }

    #[test]
    fn dahlquist_never_amplifies(mesh in s1_mesh(), re in -200.0f64..0.0, im in -50.0f64..50.0) {
        let ys = dahlquist_march(Complex::new(re, im), &mesh, Complex::new(0.6, -0.8)).unwrap();
        prop_assert!(ys.iter().all(|&y| y <= 1.0 + 1e-12));
    }

    #[test]
    fn quadratics_reproduced_exactly(mesh in s1_mesh(), c in prop::array::uniform3(-2.0f64..2.0)) {
        let p = move |t: f64| c[0] + c[1] * t + c[2] * t * t;
        let dp = move |t: f64| scalar(c[1] + 2.0 * c[2] * t);
        let exact = move |t: f64| scalar(p(t));
        let problem = Problem { u0: scalar(c[0]), forcing: Some(&dp), reference: Some(&exact) };
        let config = Bdf2Config::default().with_start(StartingScheme::ExactFirstStep);
        let op = ScalarOperator::real(0.0);
        let (_, trace) = march(&op, &mesh, &config, &problem).unwrap();
        let scale = trace.records.iter().map(|r| p(r.t_n).abs()).fold(1.0, f64::max);
        for r in &trace.records[1..] {
            prop_assert!((r.l2_norm - p(r.t_n).abs()).abs() <= 1e-12 * scale);
        }
    }

    #[test]
    fn scalar_l2_stability_and_energy_law(mesh in s1_mesh(), lambda in -500.0f64..0.0, amp in 0.0f64..3.0) {
        let forcing = move |t: f64| scalar(amp * (5.0 * t).sin());
        let op = ScalarOperator::real(lambda);
        let problem = Problem { u0: scalar(1.0), forcing: Some(&forcing), reference: None };
        let (_, trace) = march(&op, &mesh, &Bdf2Config::default(), &problem).unwrap();
        prop_assert!(l2_stability_ratio(&trace) <= 1.0 + 1e-8);
        let series = energy_series(&trace).unwrap();
        let scale = series.scale().max(1e-300);
        prop_assert!(series.law_residuals.iter().all(|&d| d <= 1e-10 * scale));
    }

    #[test]
    fn spectral_solve_inverts_the_shift(seed in any::<u64>(), sigma in 0.1f64..1e4) {
        let op = SpectralOperator::new(8, 0.3, -1.0).unwrap();
        let mut rng = vbdf2::mesh::mesh_rng(seed);
        let values: Vec<f64> = (0..64).map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0)).collect();
        let u = Field::from_values(op.shape(), values).unwrap();
        let mut rhs = u.scaled(sigma);
        rhs.add_scaled(-1.0, &op.apply(&u).unwrap());
        let back = op.shifted_solve(sigma, &rhs).unwrap().field;
        prop_assert!(back.combine(1.0, &u, -1.0).max_abs() <= 1e-11);
    }
}
