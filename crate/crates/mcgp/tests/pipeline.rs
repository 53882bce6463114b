//! End-to-end checks of the public API: solver dataset -> fitted emulators ->
//! predictions, exercised exactly as an external consumer would.

use mcgp::emulator::{load_model, save_model};
use mcgp::femgen::{
    analytic_solution, build_mesh, canonical_mesh, generate_solutions, load_dataset,
    write_dataset,
};
use mcgp::gp::OptimizerConfig;
use mcgp::mixture::{default_priors, fit, MixtureConfig};
use mcgp::{baselines, Error};
use nalgebra::DMatrix;

/// Midpoint-equispaced design on [-1, 1].
fn design(n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, 1, |i, _| (2 * i as i64 + 1 - n as i64) as f64 / n as f64)
}

fn fast_config() -> MixtureConfig {
    MixtureConfig {
        multistarts: 2,
        max_evals: 60,
        max_iter: 60,
        ..MixtureConfig::default()
    }
}

fn fast_optimizer() -> OptimizerConfig {
    OptimizerConfig {
        multistarts: 2,
        max_evals: 60,
        ..OptimizerConfig::default()
    }
}

#[test]
fn emulator_tracks_the_solver_field() {
    let mesh = build_mesh(0.25).unwrap();
    let x = design(4);
    let b = generate_solutions(&mesh, &x).unwrap();
    let priors = default_priors(mesh.nodes(), 2).unwrap();
    let model = fit(&b, &x, mesh.nodes(), &priors, &fast_config()).unwrap();

    // Training inputs reproduce the training columns.
    let (means, vars) = model.predict_all_nodes(&x).unwrap();
    for i in 0..x.nrows() {
        let col_norm = b.column(i).norm().max(1.0);
        for j in 0..mesh.n_nodes() {
            assert!(
                (means[(i, j)] - b[(j, i)]).abs() <= 1e-5 * col_norm,
                "node {j} at training input {i} off by {:e}",
                (means[(i, j)] - b[(j, i)]).abs()
            );
            assert!(vars[(i, j)] >= 0.0, "negative variance at ({i}, {j})");
        }
    }

    // A held-out input tracks the closed-form solution at an interior point.
    let s = [0.43, 0.67];
    let x_new = 0.31;
    let (mean, var) = model.predict_field(&mesh, &s, &[x_new]).unwrap();
    let truth = analytic_solution(s[0], s[1], x_new);
    assert!(
        (mean - truth).abs() < 2e-2,
        "field mean {mean} vs closed form {truth}"
    );
    assert!(var.is_finite() && var >= 0.0);
}

#[test]
fn dataset_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let mesh = build_mesh(0.5).unwrap();
    let x = design(3);
    let b = generate_solutions(&mesh, &x).unwrap();
    write_dataset(dir.path(), &mesh, &x, &b).unwrap();

    let data = load_dataset(dir.path()).unwrap();
    assert_eq!(data.mesh.nodes(), mesh.nodes());
    assert_eq!(data.mesh.elements(), mesh.elements());
    assert_eq!(data.design, x);
    assert_eq!(data.solutions, b);

    // The lattice is recoverable from the node table alone.
    let rebuilt = canonical_mesh(mesh.nodes()).unwrap();
    assert_eq!(rebuilt.cells(), mesh.cells());
    assert_eq!(rebuilt.pitch(), mesh.pitch());
}

#[test]
fn saved_model_reloads_to_identical_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let mesh = build_mesh(0.5).unwrap();
    let x = design(3);
    let b = generate_solutions(&mesh, &x).unwrap();
    let priors = default_priors(mesh.nodes(), 2).unwrap();
    let model = fit(&b, &x, mesh.nodes(), &priors, &fast_config()).unwrap();

    save_model(&model, dir.path()).unwrap();
    let reloaded = load_model(dir.path()).unwrap();

    let grid = DMatrix::from_fn(21, 1, |i, _| i as f64 / 10.0 - 1.0);
    let (m0, v0) = model.predict_all_nodes(&grid).unwrap();
    let (m1, v1) = reloaded.predict_all_nodes(&grid).unwrap();
    assert!(
        m0.iter().zip(m1.iter()).all(|(a, b)| a.to_bits() == b.to_bits()),
        "reloaded means differ"
    );
    assert!(
        v0.iter().zip(v1.iter()).all(|(a, b)| a.to_bits() == b.to_bits()),
        "reloaded variances differ"
    );
}

#[test]
fn baseline_emulators_interpolate_their_training_data() {
    let mesh = build_mesh(0.5).unwrap();
    let x = design(3);
    let b = generate_solutions(&mesh, &x).unwrap();
    let opt = fast_optimizer();

    let ugp = baselines::fit_ugp(&b, &x, mesh.nodes(), &opt).unwrap();
    let igp = baselines::fit_igp(&b, &x, mesh.nodes(), &opt).unwrap();
    for (name, (means, _)) in [
        ("ugp", ugp.predict_all_nodes(&x).unwrap()),
        ("igp", igp.predict_all_nodes(&x).unwrap()),
    ] {
        for i in 0..x.nrows() {
            let col_norm = b.column(i).norm().max(1.0);
            for j in 0..mesh.n_nodes() {
                assert!(
                    (means[(i, j)] - b[(j, i)]).abs() <= 1e-5 * col_norm,
                    "{name} misses node {j} at training input {i}"
                );
            }
        }
    }

    // The component-truncated baseline still predicts finite values of the
    // right shape.
    let pcagp = baselines::fit_pcagp(&b, &x, mesh.nodes(), &opt).unwrap();
    let (means, vars) = pcagp.predict_all_nodes(&x).unwrap();
    assert_eq!(means.shape(), (x.nrows(), mesh.n_nodes()));
    assert!(means.iter().all(|v| v.is_finite()));
    assert!(vars.iter().all(|v| v.is_finite() && *v >= 0.0));
}

#[test]
fn field_queries_outside_the_domain_fail() {
    let mesh = build_mesh(0.5).unwrap();
    let x = design(3);
    let b = generate_solutions(&mesh, &x).unwrap();
    let priors = default_priors(mesh.nodes(), 2).unwrap();
    let model = fit(&b, &x, mesh.nodes(), &priors, &fast_config()).unwrap();

    let err = model.predict_field(&mesh, &[1.5, 0.5], &[0.0]).unwrap_err();
    assert!(matches!(err, Error::OutOfDomain(..)), "got {err:?}");

    let err = model.predict_field(&mesh, &[0.5], &[0.0]).unwrap_err();
    assert!(matches!(err, Error::InvalidArgument(_)), "got {err:?}");
}

#[test]
fn mismatched_shapes_are_rejected_up_front() {
    let mesh = build_mesh(0.5).unwrap();
    let x = design(3);
    let b = generate_solutions(&mesh, &x).unwrap();
    let priors = default_priors(mesh.nodes(), 2).unwrap();

    // One fewer design row than solution columns.
    let short = design(2);
    let err = fit(&b, &short, mesh.nodes(), &priors, &fast_config()).unwrap_err();
    assert!(matches!(err, Error::InvalidArgument(_)), "got {err:?}");
}

#[test]
fn closed_form_solution_vanishes_on_the_boundary() {
    for &t in &[0.0, 0.25, 0.5, 0.75, 1.0] {
        for &x in &[-1.0, 0.3, 1.0] {
            for (s1, s2) in [(0.0, t), (1.0, t), (t, 0.0), (t, 1.0)] {
                assert!(
                    analytic_solution(s1, s2, x).abs() < 1e-14,
                    "u0({s1}, {s2}, {x}) should vanish"
                );
            }
        }
    }
}
