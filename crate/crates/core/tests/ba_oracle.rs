//! Cross-checks the sparse Levenberg-Marquardt backend against the dense
//! Gauss-Newton reference in `common`: both solvers are handed the same
//! small noisy problem and must land on the same minimum, in cost and in
//! state. One test per free-parameter pattern the bundle adjustment
//! variants use: free points under pinned cameras, a free pose against
//! pinned lines, a free similarity group, and the full joint problem with
//! free lines and virtual observations.

mod common;

use common::{dense_cost, dense_gn_solve};
use lineslam::geometry::{Pose, ProjectionModel};
use lineslam::line_cloud::Line3D;
use lineslam::optim::{lm_solve, LmConfig, Problem, Term};
use lineslam::residuals::RobustConfig;
use nalgebra::{Matrix2, Matrix3, UnitQuaternion, Vector2, Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cam() -> ProjectionModel {
    ProjectionModel::Perspective {
        fx: 300.0,
        fy: 300.0,
        cx: 320.0,
        cy: 240.0,
        width: 640.0,
        height: 480.0,
    }
}

fn ring_pose(i: usize) -> Pose {
    let rot = UnitQuaternion::from_axis_angle(&Vector3::y_axis(), 0.08 * i as f64);
    Pose::from_rotation_center(rot, Vector3::new(0.4 * i as f64, 0.1 * i as f64, 0.0))
}

fn rand_unit(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    let v: [f64; 3] = rng.sample(rand_distr::UnitSphere);
    Vector3::from(v)
}

fn world_point(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    Vector3::new(
        rng.random_range(-1.5..1.5),
        rng.random_range(-1.0..1.0),
        rng.random_range(4.0..8.5),
    )
}

fn nudge(pose: &Pose, rng: &mut ChaCha8Rng, rot: f64, trans: f64) -> Pose {
    pose.retract(&(rand_unit(rng) * rot), &(rand_unit(rng) * trans), 0.0)
}

fn pixel_noise(rng: &mut ChaCha8Rng, s: f64) -> Vector2<f64> {
    Vector2::new(rng.random_range(-s..s), rng.random_range(-s..s))
}

fn attach_sigma() -> Matrix3<f64> {
    Matrix3::identity() * 0.0025
}

fn tight() -> LmConfig {
    LmConfig {
        max_iterations: 300,
        cost_tolerance: 1e-12,
        gradient_tolerance: 1e-12,
        ..LmConfig::default()
    }
}

/// Runs both solvers on copies of the problem and checks the costs agree.
/// Returns (sparse solution, dense solution).
fn solve_both(problem: &Problem) -> (Problem, Problem) {
    let mut sparse = problem.clone();
    let report = lm_solve(&mut sparse, &tight()).expect("sparse solve failed");
    assert!(report.monotone(), "sparse cost trace increased");
    let (dense, dreport) = dense_gn_solve(problem, 300);
    assert!(
        dreport.final_cost <= dreport.initial_cost,
        "reference solver went uphill"
    );

    // Same evaluator on both final states: the two minimizations must agree.
    let c_sparse = dense_cost(&sparse);
    let c_dense = dense_cost(&dense);
    assert!(
        (c_sparse - c_dense).abs() <= 1e-8 * c_dense.max(1.0),
        "solvers disagree: sparse {c_sparse} ({:?} after {}) vs dense {c_dense} (after {})",
        report.termination,
        report.iterations,
        dreport.iterations
    );
    // And the sparse solver's own accounting must match the evaluator.
    assert!(
        (report.final_cost - c_sparse).abs() <= 1e-8 * (1.0 + c_sparse),
        "sparse reported {} but evaluates to {c_sparse}",
        report.final_cost
    );
    (sparse, dense)
}

fn assert_pose_close(a: &Pose, b: &Pose, tol: f64, what: &str) {
    let dc = (a.center() - b.center()).norm();
    let dr = a.rotation_angle_to(b);
    assert!(dc < tol, "{what}: centers differ by {dc}");
    assert!(dr < tol, "{what}: rotations differ by {dr} rad");
}

#[test]
fn point_bundle_matches_the_dense_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let model = cam();
    let mut problem = Problem::new(cam());
    problem.robust = RobustConfig::without_kernels();

    // Two pinned cameras remove every gauge freedom; the third starts off.
    let truth: Vec<Pose> = (0..3).map(ring_pose).collect();
    problem.add_pose(truth[0], true, false);
    problem.add_pose(truth[1], true, false);
    problem.add_pose(nudge(&truth[2], &mut rng, 0.02, 0.03), false, false);

    let info = Matrix2::identity() * 4.0;
    for _ in 0..25 {
        let x = world_point(&mut rng);
        let xi = problem.add_point(x + rand_unit(&mut rng) * 0.05, false);
        for (pi, t) in truth.iter().enumerate() {
            let pixel = model.project(&t.transform(&x)).unwrap() + pixel_noise(&mut rng, 0.5);
            problem
                .terms
                .push(Term::Reproj { pose: pi, pre: None, point: xi, pixel, info });
        }
    }

    let (sparse, dense) = solve_both(&problem);
    assert_pose_close(&sparse.poses[2].pose, &dense.poses[2].pose, 1e-6, "free camera");
    for (s, d) in sparse.points.iter().zip(&dense.points) {
        let diff = (s.position - d.position).norm();
        assert!(diff < 1e-6, "point placement differs by {diff}");
    }
}

#[test]
fn line_attached_bundle_matches_the_dense_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let model = cam();
    let mut problem = Problem::new(cam());
    problem.robust = RobustConfig::without_kernels();

    let truth: Vec<Pose> = (0..2).map(ring_pose).collect();
    problem.add_pose(truth[0], true, false);
    problem.add_pose(nudge(&truth[1], &mut rng, 0.02, 0.03), false, false);

    let info = Matrix2::identity() * 4.0;
    // Pinned lines carrying free reconstructed points.
    for _ in 0..12 {
        let anchor = world_point(&mut rng);
        let line = Line3D::from_point_direction(
            &anchor,
            &rand_unit(&mut rng),
            &attach_sigma(),
            Vec::new(),
        )
        .unwrap();
        let li = problem.add_line(line, true);
        let xi = problem.add_point(anchor + rand_unit(&mut rng) * 0.03, false);
        for (pi, t) in truth.iter().enumerate() {
            let pixel = model.project(&t.transform(&anchor)).unwrap() + pixel_noise(&mut rng, 0.4);
            problem.terms.push(Term::ReprojLine {
                pose: pi,
                pre: None,
                point: xi,
                line: li,
                pixel,
                info,
            });
        }
    }
    // Plain free points seen by both cameras.
    for _ in 0..15 {
        let x = world_point(&mut rng);
        let xi = problem.add_point(x + rand_unit(&mut rng) * 0.05, false);
        for (pi, t) in truth.iter().enumerate() {
            let pixel = model.project(&t.transform(&x)).unwrap() + pixel_noise(&mut rng, 0.5);
            problem
                .terms
                .push(Term::Reproj { pose: pi, pre: None, point: xi, pixel, info });
        }
    }

    let (sparse, dense) = solve_both(&problem);
    assert_pose_close(&sparse.poses[1].pose, &dense.poses[1].pose, 1e-6, "free camera");
    for (s, d) in sparse.points.iter().zip(&dense.points) {
        let diff = (s.position - d.position).norm();
        assert!(diff < 1e-6, "point placement differs by {diff}");
    }
}

#[test]
fn rigid_group_bundle_matches_the_dense_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    let model = cam();
    let mut problem = Problem::new(cam());
    problem.robust = RobustConfig::without_kernels();

    // One free similarity pose moves three cameras rigidly through frozen
    // member offsets, tracking reconstructed points on pinned lines.
    let group_truth = ring_pose(1);
    let deltas = [
        Pose::identity(),
        Pose::from_rt(
            UnitQuaternion::from_axis_angle(&Vector3::y_axis(), 0.05),
            Vector3::new(0.3, 0.0, 0.0),
        ),
        Pose::from_rt(
            UnitQuaternion::from_axis_angle(&Vector3::x_axis(), -0.04),
            Vector3::new(-0.25, 0.1, 0.0),
        ),
    ];
    let start = group_truth.retract(
        &(rand_unit(&mut rng) * 0.02),
        &(rand_unit(&mut rng) * 0.03),
        0.015,
    );
    problem.add_pose(start, false, true);

    let info = Matrix2::identity() * 4.0;
    for _ in 0..14 {
        let anchor = world_point(&mut rng);
        let line = Line3D::from_point_direction(
            &anchor,
            &rand_unit(&mut rng),
            &attach_sigma(),
            Vec::new(),
        )
        .unwrap();
        let li = problem.add_line(line, true);
        let xi = problem.add_point(anchor + rand_unit(&mut rng) * 0.03, false);
        for delta in &deltas {
            let member = delta.compose(&group_truth);
            let pixel = model.project(&member.transform(&anchor)).unwrap()
                + pixel_noise(&mut rng, 0.4);
            problem.terms.push(Term::ReprojLine {
                pose: 0,
                pre: Some(*delta),
                point: xi,
                line: li,
                pixel,
                info,
            });
        }
    }

    let (sparse, dense) = solve_both(&problem);
    assert_pose_close(&sparse.poses[0].pose, &dense.poses[0].pose, 1e-6, "group pose");
    let ds = (sparse.poses[0].pose.scale - dense.poses[0].pose.scale).abs();
    assert!(ds < 1e-6, "group scale differs by {ds}");
    for (s, d) in sparse.points.iter().zip(&dense.points) {
        let diff = (s.position - d.position).norm();
        assert!(diff < 1e-6, "point placement differs by {diff}");
    }
}

#[test]
fn joint_map_bundle_matches_the_dense_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let model = cam();
    let mut problem = Problem::new(cam());
    problem.robust = RobustConfig::without_kernels();

    // Two pinned client cameras with pixels (pinning both kills the
    // scale-about-camera-center mode that pixels cannot see), three
    // map-side cameras with virtual observations of which one is pinned.
    // Lines, their reconstructed points, and plain points are all free.
    let clients: Vec<Pose> = (0..2).map(ring_pose).collect();
    problem.add_pose(clients[0], true, false);
    problem.add_pose(clients[1], true, false);
    // Non-collinear centers: three map cameras on a common axis constrain
    // lines near that axis only to second order, leaving a crawling valley.
    let server_rig = [
        (0.30_f64, Vector3::new(-0.5, 0.2, -0.6)),
        (0.42, Vector3::new(-1.1, 0.9, -0.2)),
        (0.18, Vector3::new(-0.8, -0.5, -1.3)),
    ];
    let servers: Vec<Pose> = server_rig
        .iter()
        .map(|(yaw, center)| {
            Pose::from_rotation_center(
                UnitQuaternion::from_axis_angle(&Vector3::y_axis(), *yaw),
                *center,
            )
        })
        .collect();
    problem.add_pose(servers[0], true, false);
    for s in &servers[1..] {
        problem.add_pose(nudge(s, &mut rng, 0.01, 0.015), false, false);
    }

    let info = Matrix2::identity() * 4.0;
    let mut truth_lines = Vec::new();
    for _ in 0..12 {
        // Two landmarks well apart on each line: a single attachment point
        // leaves the rotation of the line about it in the hands of the
        // virtual terms alone, and an unlucky line can sit nearly coplanar
        // with every map camera, turning that rotation into a crawling
        // valley neither solver settles in.
        let anchor = Vector3::new(
            rng.random_range(-1.2..1.2),
            rng.random_range(-0.8..0.8),
            rng.random_range(4.5..7.5),
        );
        let dir = rand_unit(&mut rng);
        let line =
            Line3D::from_point_direction(&anchor, &dir, &attach_sigma(), Vec::new()).unwrap();
        let perturbed = line
            .retract(&Vector4::new(
                rng.random_range(-0.02..0.02),
                rng.random_range(-0.02..0.02),
                rng.random_range(-0.01..0.01),
                rng.random_range(-0.01..0.01),
            ))
            .with_transported_info(&line.direction);
        let li = problem.add_line(perturbed, false);
        let side = if rng.random_range(0.0..1.0) < 0.5 { -1.0 } else { 1.0 };
        for offset in [0.0, side * rng.random_range(0.4..0.7)] {
            let target = anchor + dir * offset;
            let xi = problem.add_point(target + rand_unit(&mut rng) * 0.02, false);
            for (pi, t) in clients.iter().enumerate() {
                let pixel =
                    model.project(&t.transform(&target)).unwrap() + pixel_noise(&mut rng, 0.4);
                problem.terms.push(Term::ReprojLine {
                    pose: pi,
                    pre: None,
                    point: xi,
                    line: li,
                    pixel,
                    info,
                });
            }
        }
        for (j, s) in servers.iter().enumerate() {
            let p = s.transform(&line.base);
            let d = s.rotate(&line.direction);
            let exact = p.cross(&d).normalize();
            let tilt = UnitQuaternion::from_axis_angle(
                &nalgebra::Unit::new_normalize(rand_unit(&mut rng)),
                rng.random_range(0.002..0.004),
            );
            problem.terms.push(Term::Virtual {
                pose: 2 + j,
                line: li,
                normal: tilt * exact,
                weight: 100.0,
            });
        }
        truth_lines.push(line);
    }
    // Relative-pose edges between the map cameras. The normal-consistency
    // residual is quadratic around agreement, so it leaves both the map
    // cameras and the overall scale with vanishing curvature at the
    // minimum; the edges pin those directions the way a pose graph would.
    for (i, j) in [(0usize, 1usize), (1, 2), (0, 2)] {
        let measured = servers[i]
            .inverse()
            .compose(&servers[j])
            .retract(&(rand_unit(&mut rng) * 0.002), &(rand_unit(&mut rng) * 0.005), 0.0);
        problem.terms.push(Term::Sim3Edge { pose_i: 2 + i, pose_j: 2 + j, measured });
    }
    for _ in 0..10 {
        let x = world_point(&mut rng);
        let xi = problem.add_point(x + rand_unit(&mut rng) * 0.04, false);
        for (pi, t) in clients.iter().enumerate() {
            let pixel = model.project(&t.transform(&x)).unwrap() + pixel_noise(&mut rng, 0.5);
            problem
                .terms
                .push(Term::Reproj { pose: pi, pre: None, point: xi, pixel, info });
        }
    }

    let (sparse, dense) = solve_both(&problem);
    assert_pose_close(&sparse.poses[3].pose, &dense.poses[3].pose, 1e-4, "map camera 1");
    assert_pose_close(&sparse.poses[4].pose, &dense.poses[4].pose, 1e-4, "map camera 2");
    for (s, d) in sparse.points.iter().zip(&dense.points) {
        let diff = (s.position - d.position).norm();
        assert!(diff < 1e-5, "point placement differs by {diff}");
    }
    for (s, d) in sparse.lines.iter().zip(&dense.lines) {
        let dot = s.line.direction.dot(&d.line.direction).abs();
        assert!(dot > 1.0 - 1e-7, "line directions disagree: dot err {}", 1.0 - dot);
        let db = (s.line.base - d.line.base).norm();
        assert!(db < 1e-4, "line bases differ by {db}");
        // Solutions stay canonical: unit direction, base closest to origin.
        assert!((s.line.direction.norm() - 1.0).abs() < 1e-12);
        assert!(s.line.base.dot(&s.line.direction).abs() < 1e-9);
    }
}
