use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::{check_function, grad_check, CheckOptions, Graph, Tensor};
use crate::puppet::fixtures::{square, two_layers};
use crate::puppet::Layer;
use crate::render::{render_mask, render_mask_var, render_rgb_var, render};

/// `n×n` grid over `[-0.5, 0.5]²` with jittered interior vertices.
fn grid(n: usize, seed: u64) -> Puppet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = Vec::new();
    for r in 0..=n {
        for c in 0..=n {
            let mut p = [c as f64 / n as f64 - 0.5, r as f64 / n as f64 - 0.5];
            if r > 0 && r < n && c > 0 && c < n {
                p[0] += rng.random_range(-0.2..0.2) / n as f64;
                p[1] += rng.random_range(-0.2..0.2) / n as f64;
            }
            v.push(p);
        }
    }
    let id = |r: usize, c: usize| r * (n + 1) + c;
    let mut faces = Vec::new();
    for r in 0..n {
        for c in 0..n {
            faces.push([id(r, c), id(r, c + 1), id(r + 1, c + 1)]);
            faces.push([id(r, c), id(r + 1, c + 1), id(r + 1, c)]);
        }
    }
    let uv = v.iter().map(|p| [p[0] + 0.5, 0.5 - p[1]]).collect();
    Puppet {
        rest_vertices: v,
        layers: vec![Layer {
            name: "grid".into(),
            face_start: 0,
            face_end: faces.len(),
        }],
        faces,
        joints: vec![],
        uv,
        texture: Image::from_fn(8, 8, 4, |c, r| vec![c as f64 / 7.0, r as f64 / 7.0, 0.5, 1.0]),
    }
}

fn rigid(v: &[Point2], theta: f64, t: Point2) -> Vec<Point2> {
    let r = Rot2::from_angle(theta);
    v.iter().map(|p| geom::add(r.apply(*p), t)).collect()
}

fn jitter(v: &[Point2], amount: f64, seed: u64) -> Vec<Point2> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    v.iter()
        .map(|p| [p[0] + rng.random_range(-amount..amount), p[1] + rng.random_range(-amount..amount)])
        .collect()
}

fn flat(v: &[Point2]) -> Vec<f64> {
    v.iter().flat_map(|p| [p[0], p[1]]).collect()
}

fn unflat(x: &[f64]) -> Vec<Point2> {
    x.chunks(2).map(|c| [c[0], c[1]]).collect()
}

/// Orthogonal polar factor by Newton iteration `X ← ½(X + X⁻ᵀ)`.
fn polar(m: [[f64; 2]; 2]) -> [[f64; 2]; 2] {
    let mut x = m;
    for _ in 0..100 {
        let det = x[0][0] * x[1][1] - x[0][1] * x[1][0];
        let inv_t = [[x[1][1] / det, -x[1][0] / det], [-x[0][1] / det, x[0][0] / det]];
        for a in 0..2 {
            for b in 0..2 {
                x[a][b] = 0.5 * (x[a][b] + inv_t[a][b]);
            }
        }
    }
    x
}

#[test]
fn rec_loss_examples() {
    let a = Image::filled(4, 3, &[0.2, 0.4, 0.6]);
    assert_eq!(rec_loss(&a, &a).unwrap(), 0.0);
    let mut b = a.clone();
    b.data[7] += 0.5;
    assert!((rec_loss(&a, &b).unwrap() - 0.25).abs() < 1e-15);
    assert!(rec_loss(&a, &Image::filled(3, 4, &[0.0; 3])).is_err());

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Image::from_fn(9, 7, 3, |_, _| (0..3).map(|_| rng.random::<f64>()).collect());
    let y = Image::from_fn(9, 7, 3, |_, _| (0..3).map(|_| rng.random::<f64>()).collect());
    let mut want = 0.0;
    for r in 0..7 {
        for c in 0..9 {
            for k in 0..3 {
                let d = x.pixel(c, r)[k] - y.pixel(c, r)[k];
                want += d * d;
            }
        }
    }
    assert!((rec_loss(&x, &y).unwrap() - want).abs() < 1e-12);
}

#[test]
fn rotations_identity_at_rest() {
    let p = grid(4, 1);
    let w = cotangent_weights(&p).unwrap();
    for r in optimal_rotations(&p.rest_vertices, &p.rest_vertices, &w) {
        assert!((r.c - 1.0).abs() < 1e-12 && r.s.abs() < 1e-12);
    }
}

#[test]
fn rotations_recover_global_rotation() {
    for seed in 0..5 {
        let p = grid(5, seed);
        let w = cotangent_weights(&p).unwrap();
        let def = rigid(&p.rest_vertices, 30f64.to_radians(), [0.2, -0.1]);
        let rots = optimal_rotations(&p.rest_vertices, &def, &w);
        for (i, r) in rots.iter().enumerate() {
            assert!((r.angle() - 30f64.to_radians()).abs() < 1e-10);
            // compare with the polar factor of Sᵀ
            let mut st = [[0.0; 2]; 2];
            for &(j, wij) in &w.neighbors[i] {
                let e = geom::sub(p.rest_vertices[i], p.rest_vertices[j]);
                let d = geom::sub(def[i], def[j]);
                for a in 0..2 {
                    for b in 0..2 {
                        st[a][b] += wij * d[a] * e[b];
                    }
                }
            }
            let q = polar(st);
            assert!((q[0][0] - r.c).abs() < 1e-9 && (q[1][0] - r.s).abs() < 1e-9);
        }
    }
}

#[test]
fn rotations_resolve_reflections() {
    let p = grid(3, 2);
    let w = cotangent_weights(&p).unwrap();
    let mirrored: Vec<Point2> = p.rest_vertices.iter().map(|v| [-v[0], v[1]]).collect();
    for r in optimal_rotations(&p.rest_vertices, &mirrored, &w) {
        assert!((r.det() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn isolated_vertex_keeps_identity() {
    let mut p = square();
    p.rest_vertices.push([5.0, 5.0]);
    p.uv.push([0.0, 0.0]);
    let w = cotangent_weights(&p).unwrap();
    let mut def = rigid(&p.rest_vertices, 1.0, [0.0, 0.0]);
    def[4] = [-3.0, 2.0];
    let rots = optimal_rotations(&p.rest_vertices, &def, &w);
    assert_eq!(rots[4], Rot2::IDENTITY);
}

#[test]
fn arap_rigid_motion_is_free() {
    let p = grid(6, 4);
    let w = cotangent_weights(&p).unwrap();
    for (k, theta) in [0.3, -2.0, 3.1].iter().enumerate() {
        let def = rigid(&p.rest_vertices, *theta, [k as f64, -0.5]);
        assert!(arap_energy(&p.rest_vertices, &def, &w).abs() <= 1e-10);
    }
}

#[test]
fn arap_scaled_equilateral() {
    let h = 3f64.sqrt() / 2.0;
    let mut p = square();
    p.rest_vertices = vec![[0.0, 0.0], [1.0, 0.0], [0.5, h]];
    p.faces = vec![[0, 1, 2]];
    p.layers[0].face_end = 1;
    p.uv.truncate(3);
    let w = cotangent_weights(&p).unwrap();
    let def: Vec<Point2> = p.rest_vertices.iter().map(|v| geom::scale(*v, 2.0)).collect();
    let e = arap_energy(&p.rest_vertices, &def, &w);
    // brute force over ordered pairs with R = I
    let wij = 0.5 / 60f64.to_radians().tan();
    let mut want = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            if i != j {
                let r = geom::sub(geom::sub(def[i], def[j]), geom::sub(p.rest_vertices[i], p.rest_vertices[j]));
                want += wij * geom::norm_sq(r);
            }
        }
    }
    assert!((e - want).abs() < 1e-12);
    assert!((e - 1.7321).abs() < 1e-4);
}

#[test]
fn arap_zero_for_per_component_rigid_motion() {
    let p = two_layers();
    let w = cotangent_weights(&p).unwrap();
    let mut def = rigid(&p.rest_vertices[..3], 0.7, [0.1, 0.2]);
    def.extend(rigid(&p.rest_vertices[3..], -1.2, [-0.3, 0.0]));
    assert!(arap_energy(&p.rest_vertices, &def, &w) < 1e-12);
    def[4][0] += 0.1;
    assert!(arap_energy(&p.rest_vertices, &def, &w) > 1e-6);
}

#[test]
fn arap_gradient_matches_differences() {
    let p = grid(4, 9);
    let w = cotangent_weights(&p).unwrap();
    let def = jitter(&rigid(&p.rest_vertices, 0.4, [0.1, 0.0]), 0.05, 11);
    let (_, g) = arap_with_gradient(&p.rest_vertices, &def, &w);
    let report = check_function(
        |x| arap_energy(&p.rest_vertices, &unflat(x), &w),
        &flat(&def),
        &flat(&g),
        &CheckOptions::default(),
    )
    .unwrap();
    assert!(report.max_rel_error() <= 1e-5, "{}", report.max_rel_error());
}

#[test]
fn joints_examples() {
    let v = [[0.0, 0.0], [3.0, 4.0], [1.0, 1.0], [1.0, 1.0], [0.0, 2.0]];
    assert_eq!(joints_loss(&v, &[[2, 3]]), 0.0);
    assert_eq!(joints_loss(&v, &[[0, 1]]), 25.0);
    assert_eq!(joints_loss(&v, &[[2, 4], [0, 4]]), 2.0 + 4.0);
    let v2 = [[0.0, 0.0], [1.0, 0.0], [5.0, 5.0], [5.0, 7.0]];
    assert_eq!(joints_loss(&v2, &[[0, 1], [2, 3]]), 5.0);
}

#[test]
fn joints_gradient_matches_differences() {
    let v = jitter(&[[0.0, 0.0]; 6], 1.0, 5);
    let j = [[0, 1], [1, 2], [4, 5], [0, 5]];
    let report = check_function(
        |x| joints_loss(&unflat(x), &j),
        &flat(&v),
        &flat(&joints_gradient(&v, &j)),
        &CheckOptions::default(),
    )
    .unwrap();
    assert!(report.max_rel_error() <= 1e-5);
}

#[test]
fn total_loss_weighting() {
    let w = LossWeights::default();
    assert_eq!(LossParts { rec: 1.0, arap: 0.0, joints: 0.0 }.total(&w), 1.0);
    let parts = LossParts {
        rec: 2.0,
        arap: 0.001,
        joints: 0.0001,
    };
    assert!((parts.total(&w) - 5.5).abs() < 1e-12);
    let zero = LossWeights {
        lambda1: 0.0,
        lambda2: 0.0,
        ..w
    };
    assert_eq!(parts.total(&zero), 2.0);
}

#[test]
fn total_loss_from_images_and_poses() {
    let p = two_layers();
    let rest = DeformState::rest(&p);
    let mut def = rest.clone();
    def.vertices[3] = geom::add(def.vertices[3], [0.1, 0.0]);
    let a = Image::filled(8, 8, &[0.5; 3]);
    let b = Image::filled(8, 8, &[0.0; 3]);
    let w = LossWeights::default();
    let weights = cotangent_weights(&p).unwrap();
    let want = 64.0 * 3.0 * 0.25
        + w.lambda1 * arap_energy(&rest.vertices, &def.vertices, &weights)
        + w.lambda2 * joints_loss(&def.vertices, &p.joints);
    assert!((total_loss(&a, &b, &rest, &def, &p, &w).unwrap() - want).abs() < 1e-9);
}

#[test]
fn weights_validate() {
    assert!(LossWeights::default().validate().is_ok());
    let bad = LossWeights {
        alpha1: -1.0,
        ..Default::default()
    };
    assert!(bad.validate().is_err());
    let parsed: LossWeights = toml::from_str("lambda1 = 3.0").unwrap();
    assert_eq!(parsed.lambda1, 3.0);
    assert_eq!(parsed.lambda2, 1e4);
}

fn center_constraint(p: &Puppet, s: &DeformState, offset: Point2) -> Constraint {
    let point = ControlPoint {
        face: 0,
        bary: [0.2, 0.3, 0.5],
    };
    Constraint {
        point,
        target: geom::add(eval_control_point(s, p, &point), offset),
    }
}

#[test]
fn user_loss_examples() {
    let p = square();
    let s = DeformState::rest(&p);
    assert_eq!(user_loss(&s, &p, &[center_constraint(&p, &s, [0.0, 0.0])]), 0.0);
    let c = center_constraint(&p, &s, [0.3, 0.4]);
    assert!((user_loss(&s, &p, &[c]) - 0.25).abs() < 1e-15);
    assert_eq!(user_loss(&s, &p, &[]), 0.0);
}

#[test]
fn user_gradient_matches_differences() {
    let p = grid(3, 1);
    let s = DeformState {
        vertices: jitter(&p.rest_vertices, 0.05, 2),
    };
    let cs = [
        center_constraint(&p, &s, [0.2, -0.1]),
        Constraint {
            point: ControlPoint {
                face: 7,
                bary: [0.6, 0.1, 0.3],
            },
            target: [0.4, 0.4],
        },
    ];
    let report = check_function(
        |x| user_loss(&DeformState::from_flat(x), &p, &cs),
        &s.flat(),
        &flat(&user_gradient(&s, &p, &cs)),
        &CheckOptions::default(),
    )
    .unwrap();
    assert!(report.max_rel_error() <= 1e-5);
}

#[test]
fn deform_objective_weighting() {
    let mut p = two_layers();
    p.rest_vertices[3] = p.rest_vertices[2];
    let rest = DeformState::rest(&p);
    let w = LossWeights::default();
    let c = center_constraint(&p, &rest, [0.0, 0.0]);
    assert_eq!(deform_objective(&rest, &rest, &p, &[c], &w).unwrap(), 0.0);
    assert!((1.0 + w.alpha1 * 0.1 + w.alpha2 * 0.01 - 4.0).abs() < 1e-12);

    let def = DeformState {
        vertices: jitter(&rest.vertices, 0.1, 8),
    };
    let weights = cotangent_weights(&p).unwrap();
    let want = w.alpha1 * arap_energy(&rest.vertices, &def.vertices, &weights)
        + w.alpha2 * joints_loss(&def.vertices, &p.joints);
    assert!((deform_objective(&def, &rest, &p, &[], &w).unwrap() - want).abs() < 1e-12);
}

fn character_over(bg: [f64; 3]) -> (Image, Image, Image) {
    let p = two_layers();
    let s = DeformState::rest(&p);
    let cfg = RasterConfig::new(24, 24);
    let mask = render_mask(&s, &p, &cfg).unwrap();
    let character = render(&s, &p, &cfg).unwrap().rgba.to_rgb_over([0.0; 3]);
    let input = render(&s, &p, &cfg.clone().with_background([bg[0], bg[1], bg[2], 1.0]))
        .unwrap()
        .rgba
        .to_rgb_over([0.0; 3]);
    (input, character, mask)
}

#[test]
fn masked_loss_ignores_background() {
    let (in_a, rendered, mask) = character_over([0.9, 0.1, 0.3]);
    let (in_b, _, _) = character_over([0.0, 0.7, 0.2]);
    assert_ne!(in_a, in_b);
    assert_eq!(masked_rec_loss(&in_a, &rendered, &mask).unwrap(), 0.0);
    let mut off = rendered.clone();
    off.data.iter_mut().for_each(|x| *x *= 0.5);
    let la = masked_rec_loss(&in_a, &off, &mask).unwrap();
    let lb = masked_rec_loss(&in_b, &off, &mask).unwrap();
    assert!(la > 0.0);
    assert_eq!(la, lb);
    assert!(matches!(
        masked_rec_loss(&in_a, &rendered, &Image::new(24, 24, 1)),
        Err(Error::DegenerateMask)
    ));
    assert!(masked_rec_loss(&in_a, &rendered, &Image::new(24, 23, 1)).is_err());
}

#[test]
fn masked_loss_matches_naive_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let input = Image::from_fn(6, 5, 3, |_, _| (0..3).map(|_| rng.random::<f64>()).collect());
    let rendered = Image::from_fn(6, 5, 3, |_, _| (0..3).map(|_| rng.random::<f64>()).collect());
    let mask = Image::from_fn(6, 5, 1, |_, _| vec![rng.random::<f64>()]);
    let mut num = 0.0;
    let mut den = 0.0;
    for r in 0..5 {
        for c in 0..6 {
            let m = mask.pixel(c, r)[0];
            den += m;
            for k in 0..3 {
                num += (input.pixel(c, r)[k] * m - rendered.pixel(c, r)[k]).powi(2);
            }
        }
    }
    assert!((masked_rec_loss(&input, &rendered, &mask).unwrap() - num / den).abs() < 1e-12);
}

#[test]
fn masked_var_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let input = Image::from_fn(5, 4, 3, |_, _| (0..3).map(|_| rng.random::<f64>()).collect());
    let r = Tensor::new(vec![4, 5, 3], (0..60).map(|_| rng.random::<f64>()).collect()).unwrap();
    let m = Tensor::new(vec![4, 5], (0..20).map(|_| rng.random_range(0.1..1.0)).collect()).unwrap();
    let report = grad_check(|g, v| masked_rec_var(g, v[0], v[1], &input), &[r, m], &CheckOptions::default()).unwrap();
    assert!(report.max_rel_error() <= 1e-5, "{}", report.max_rel_error());
}

#[test]
fn mesh_vars_match_plain_functions() {
    let mut p = grid(3, 6);
    p.joints = vec![[0, 5], [3, 10]];
    let terms = MeshTerms::new(&p).unwrap();
    let def = jitter(&p.rest_vertices, 0.05, 4);
    let cs = [center_constraint(&p, &DeformState::rest(&p), [0.1, 0.1])];
    let mut g = Graph::new();
    let v = g.leaf(Tensor::new(vec![def.len(), 2], flat(&def)).unwrap());
    let a = arap_var(&mut g, v, &terms).unwrap();
    let j = joints_var(&mut g, v, &terms).unwrap();
    let u = user_var(&mut g, v, &p, &cs).unwrap();
    assert_eq!(g.value(a).item(), terms.arap(&def));
    assert_eq!(g.value(j).item(), terms.joints(&def));
    let s = DeformState { vertices: def.clone() };
    assert_eq!(g.value(u).item(), user_loss(&s, &p, &cs));
    let aj = g.add(a, j).unwrap();
    let l = g.add(aj, u).unwrap();
    g.backward(l).unwrap();
    let (_, ga) = arap_with_gradient(&terms.rest, &def, &terms.weights);
    let gj = joints_gradient(&def, &terms.joints);
    let gu = user_gradient(&s, &p, &cs);
    let got = g.grad(v).unwrap();
    for i in 0..def.len() {
        for k in 0..2 {
            assert!((got[2 * i + k] - (ga[i][k] + gj[i][k] + gu[i][k])).abs() < 1e-12);
        }
    }
    let mut g = Graph::new();
    let bad = g.leaf(Tensor::zeros(&[2, 2]));
    assert!(arap_var(&mut g, bad, &terms).is_err());
}

#[test]
fn rec_var_through_renderer() {
    let p = grid(2, 3);
    let cfg = RasterConfig::new(24, 24).with_background([1.0; 4]);
    let target_state = rigid(&p.rest_vertices, 0.1, [0.05, 0.0]);
    let target = {
        let mut g = Graph::new();
        let v = g.constant(Tensor::new(vec![9, 2], flat(&target_state)).unwrap());
        let r = render_rgb_var(&mut g, v, &p, &cfg).unwrap();
        Image::from_data(24, 24, 3, g.value(r).data().to_vec()).unwrap()
    };
    // off-axis start so no pixel center sits exactly where two outline
    // edges are equally near
    let start = Tensor::new(vec![9, 2], flat(&rigid(&p.rest_vertices, 0.03, [0.013, 0.007]))).unwrap();
    let opts = CheckOptions {
        h: 1e-3,
        ..Default::default()
    };
    let report = grad_check(
        |g, v| {
            let r = render_rgb_var(g, v[0], &p, &cfg)?;
            rec_var(g, r, &target)
        },
        &[start],
        &opts,
    )
    .unwrap();
    assert!(report.max_rel_error() <= 2e-2, "{:?}", report.params[0].samples);
}

#[test]
fn area_examples() {
    let p = grid(2, 0);
    let cfg = RasterConfig::new(64, 64);
    let rest = DeformState::rest(&p);
    assert_eq!(area_loss(&rest, &rest, &p, &cfg).unwrap(), 0.0);

    // a quarter-width square covers 1/16 of the view; doubling its size
    // triples the covered area's excess
    let small = DeformState {
        vertices: rest.vertices.iter().map(|v| geom::scale(*v, 0.5)).collect(),
    };
    let big = DeformState {
        vertices: rest.vertices.iter().map(|v| geom::scale(*v, 1.0)).collect(),
    };
    let hard = render_mask(&small, &p, &cfg).unwrap().data.iter().sum::<f64>();
    assert_eq!(hard, 256.0);
    let l = area_loss(&big, &small, &p, &cfg).unwrap();
    let want = (3.0 * hard) * (3.0 * hard);
    assert!((l - want).abs() <= 0.1 * want, "{l} vs {want}");
}

#[test]
fn area_var_gradient() {
    let p = grid(2, 5);
    let cfg = RasterConfig::new(32, 32);
    let rest = DeformState::rest(&p);
    let rest_area = coverage_area(&rest, &p, &cfg).unwrap();
    let start = Tensor::new(vec![9, 2], flat(&jitter(&rest.vertices, 0.03, 1))).unwrap();
    let mut g = Graph::new();
    let v = g.constant(start.clone());
    let a = area_var(&mut g, v, &p, &cfg, rest_area).unwrap();
    let s = DeformState::from_flat(start.data());
    assert!((g.value(a).item() - area_loss(&s, &rest, &p, &cfg).unwrap()).abs() < 1e-9);
    let opts = CheckOptions {
        h: 1e-3,
        ..Default::default()
    };
    let report = grad_check(|g, v| area_var(g, v[0], &p, &cfg, rest_area), &[start], &opts).unwrap();
    assert!(report.max_rel_error() <= 2e-2, "{}", report.max_rel_error());
    let _ = render_mask_var;
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn arap_nonnegative_and_rigid_invariant(seed in 0u64..1_000_000, theta in -3.2f64..3.2, tx in -1.0f64..1.0) {
        let p = grid(2, seed % 7);
        let w = cotangent_weights(&p).unwrap();
        let def = jitter(&p.rest_vertices, 0.3, seed);
        let e = arap_energy(&p.rest_vertices, &def, &w);
        prop_assert!(e >= 0.0);
        let moved = rigid(&def, theta, [tx, -tx]);
        prop_assert!((arap_energy(&p.rest_vertices, &moved, &w) - e).abs() <= 1e-10);
    }
}
