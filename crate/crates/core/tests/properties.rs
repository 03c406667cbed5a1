use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tss_koopman::benchmark::Variant;
use tss_koopman::cost::CostQuadratic;
use tss_koopman::lifting::LiftingMap;
use tss_koopman::linalg::{spectral_radius, Mat, Vector};
use tss_koopman::lqr::{bellman_residuals, bellman_rhs, solve_bellman, LqrPolicy};
use tss_koopman::model::{combined_limit, tss_limit, KoopmanBlocks, LiftedDims, LiftedState, ModelForm};
use tss_koopman::ocp::{best_constant_policy, solve_ocp, system_cost, Actuation, Dynamics, OcpSpec, Plant};
use tss_koopman::stability::{complex_stability_radius, GridConfig};
use tss_koopman::training::stabilize::{project, stabilize};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_vec(n: usize, rng: &mut ChaCha8Rng) -> Vector {
    Vector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0))
}

fn random_mat(r: usize, c: usize, scale: f64, rng: &mut ChaCha8Rng) -> Mat {
    Mat::from_fn(r, c, |_, _| scale * rng.gen_range(-1.0..1.0))
}

fn random_lifting(input: usize, seed: u64) -> LiftingMap {
    let mut r = rng(seed);
    let mut map = LiftingMap::new(input, 3, 5, &mut r);
    let (w2, b2) = map.output_layer_mut();
    w2.iter_mut().for_each(|v| *v = r.gen_range(-1.0..1.0));
    b2.iter_mut().for_each(|v| *v = r.gen_range(-0.5..0.5));
    map
}

fn actuated_dims(form: ModelForm) -> LiftedDims {
    match form {
        ModelForm::Hier => LiftedDims { x: 0, y: 3, w: 2, u: 1 },
        _ => LiftedDims { x: 3, y: 3, w: 2, u: 1 },
    }
}

fn form_strategy() -> impl Strategy<Value = ModelForm> {
    prop_oneof![Just(ModelForm::Hier), Just(ModelForm::Combined)]
}

/// Positive definite cost over the whole lifted vector with a random linear term.
fn random_cost(dims: LiftedDims, rng: &mut ChaCha8Rng) -> CostQuadratic {
    let mut cost = CostQuadratic::zeros(dims);
    let n = cost.total_dim();
    let l = random_mat(n, n, 0.5, rng);
    cost.q = &l * l.transpose() + Mat::identity(n, n) * 0.1;
    cost.c = random_vec(n, rng) * 0.2;
    cost
}

fn solved(form: ModelForm, seed: u64) -> (KoopmanBlocks, CostQuadratic, LqrPolicy) {
    let mut r = rng(seed);
    let model = KoopmanBlocks::random(form, actuated_dims(form), 0.9, &mut r).unwrap();
    let cost = random_cost(model.dims, &mut r);
    let policy = solve_bellman(&model, &cost).unwrap();
    (model, cost, policy)
}

fn sample_xu(dims: LiftedDims, rng: &mut ChaCha8Rng) -> (Vector, Vector) {
    (random_vec(dims.x, rng), random_vec(dims.u, rng))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn lifting_is_state_inclusive(seed in any::<u64>(), input in 1usize..4, scale in 0.01f64..10.0) {
        let map = random_lifting(input, seed);
        let v: Vec<f64> = random_vec(input, &mut rng(seed ^ 1)).iter().map(|a| a * scale).collect();
        let psi = map.lift(&v).unwrap();
        prop_assert_eq!(psi.len(), input + 3);
        prop_assert_eq!(&psi.as_slice()[..input], v.as_slice());
    }

    #[test]
    fn lifting_jacobian_matches_finite_differences(seed in any::<u64>(), input in 1usize..4) {
        let map = random_lifting(input, seed);
        let v: Vec<f64> = random_vec(input, &mut rng(seed ^ 2)).iter().copied().collect();
        let jac = map.jacobian(&v).unwrap();
        let h = 1e-6;
        for j in 0..input {
            let (mut plus, mut minus) = (v.clone(), v.clone());
            plus[j] += h;
            minus[j] -= h;
            let fd = (map.lift(&plus).unwrap() - map.lift(&minus).unwrap()) / (2.0 * h);
            for i in 0..fd.len() {
                prop_assert!((fd[i] - jac[(i, j)]).abs() <= 1e-4 * (1.0 + fd[i].abs()));
            }
        }
    }

    #[test]
    fn projection_caps_spectral_radius(seed in any::<u64>(), n in 1usize..6, scale in 0.05f64..5.0, delta in 1e-4f64..0.1) {
        let mut a = random_mat(n, n, scale, &mut rng(seed));
        let before = a.clone();
        let rho = spectral_radius(&a);
        let out = project(&mut a, delta);
        prop_assert!(spectral_radius(&a) <= 1.0 - delta + 1e-9);
        if rho <= 1.0 - delta {
            prop_assert!(out.is_none());
            prop_assert_eq!(a, before);
        }
    }

    #[test]
    fn stabilized_models_respect_margin(seed in any::<u64>(), form in form_strategy(), scale in 1.0f64..4.0) {
        let delta = 1e-4;
        let mut r = rng(seed);
        let mut model = KoopmanBlocks::random(form, actuated_dims(form), 0.9, &mut r).unwrap();
        for (_, a) in model.blocks_mut() {
            *a *= scale;
        }
        stabilize(&mut model, delta).unwrap();
        for a in [&model.k_xx, &model.k_yy] {
            prop_assert!(spectral_radius(a) <= 1.0 - delta + 1e-9);
        }
        prop_assert!(model.closed_fast_radius() <= 1.0 - delta + 1e-9);
    }

    #[test]
    fn lqr_action_is_stationary_and_minimal(seed in any::<u64>(), form in form_strategy()) {
        let (model, cost, policy) = solved(form, seed);
        let mut r = rng(seed ^ 3);
        for _ in 0..5 {
            let y = random_vec(model.dims.y, &mut r);
            let (x, u) = sample_xu(model.dims, &mut r);
            let w = policy.actuation(&y, &x, &u);
            let at = |w: &Vector| bellman_rhs(&policy, &model, &cost, &y, &x, &u, w).unwrap();
            let best = at(&w);
            let h = 1e-5;
            for j in 0..model.dims.w {
                let mut e = Vector::zeros(model.dims.w);
                e[j] = h;
                let grad = (at(&(&w + &e)) - at(&(&w - &e))) / (2.0 * h);
                prop_assert!(grad.abs() < 1e-6 * (1.0 + best.abs()), "gradient {grad}");
            }
            for _ in 0..5 {
                let d = random_vec(model.dims.w, &mut r) * 0.1;
                prop_assert!(at(&(&w + &d)) >= best - 1e-10 * (1.0 + best.abs()));
            }
        }
    }

    #[test]
    fn lqr_solution_satisfies_bellman(seed in any::<u64>(), form in form_strategy()) {
        let (model, cost, policy) = solved(form, seed);
        let mut r = rng(seed ^ 4);
        let samples: Vec<_> = (0..4).map(|_| sample_xu(model.dims, &mut r)).collect();
        let res = bellman_residuals(&policy, &model, &cost, &samples).unwrap();
        prop_assert!(res.within(1e-8), "{res:?}");
        prop_assert!(spectral_radius(&policy.closed_loop(&model)) < 1.0);
    }

    #[test]
    fn lqr_gain_invariant_under_cost_scaling(seed in any::<u64>(), form in form_strategy(), alpha in 0.01f64..100.0) {
        let (model, cost, policy) = solved(form, seed);
        let scaled = solve_bellman(&model, &cost.scaled(alpha)).unwrap();
        let close = |a: &Mat, b: &Mat| (a - b).amax() <= 1e-7 * (1.0 + b.amax());
        prop_assert!(close(&scaled.f, &policy.f));
        prop_assert!(close(&scaled.d_affine.x, &policy.d_affine.x));
        prop_assert!(close(&scaled.p, &(&policy.p * alpha)));
    }

    #[test]
    fn collapsed_fast_state_is_a_fixed_point(seed in any::<u64>(), form in form_strategy()) {
        let (model, _, policy) = solved(form, seed);
        let mut r = rng(seed ^ 5);
        let (x, u) = sample_xu(model.dims, &mut r);
        let limit = combined_limit(&model, None).unwrap();
        let (y, w) = limit.fast_equilibrium(&x, &u);
        let (y1, w1) = model.step_fast(&y, &x, &w, &u).unwrap();
        prop_assert!((&y1 - &y).amax() < 1e-9 * (1.0 + y.amax()));
        prop_assert!((&w1 - &w).amax() < 1e-9 * (1.0 + w.amax()));

        let lqr = combined_limit(&model, Some(policy.feedback())).unwrap();
        let (y, w) = lqr.fast_equilibrium(&x, &u);
        let w_law = policy.actuation(&y, &x, &u);
        prop_assert!((&w_law - &w).amax() < 1e-9 * (1.0 + w.amax()));
        let fm = model.fast_map();
        let y1 = &fm.yy * &y + &fm.yw * &w + &fm.yx * &x;
        prop_assert!((&y1 - &y).amax() < 1e-9 * (1.0 + y.amax()));
        if form == ModelForm::Combined {
            let x1 = model.step_slow_mean(&x, &y, &w);
            prop_assert!((&x1 - lqr.step(&x, &u)).amax() < 1e-9 * (1.0 + x1.amax()));
        }
    }

    #[test]
    fn window_map_approaches_collapsed_transition(seed in any::<u64>()) {
        let mut r = rng(seed);
        let dims = LiftedDims { x: 2, y: 3, w: 0, u: 0 };
        let model = KoopmanBlocks::random(ModelForm::Tss, dims, 0.9, &mut r).unwrap();
        let target = tss_limit(&model).unwrap().b_xx;
        let rho = spectral_radius(&model.k_yy);
        // Past this window length the transient is dominated by its 1/m tail.
        let m0 = ((1e-3f64).ln() / rho.max(1e-3).ln()).ceil().max(1.0) as usize;
        let mut prev = f64::INFINITY;
        for k in 0..8 {
            let m = m0 << k;
            let err = (window_map(&model, m) - &target).norm();
            prop_assert!(err <= prev + 1e-10, "m {m}: {err} after {prev}");
            prev = err;
        }
        prop_assert!(prev < 1e-1);
    }

    #[test]
    fn normal_matrix_radius_is_distance_to_circle(seed in any::<u64>(), pairs in 1usize..3, real in 0usize..2) {
        let mut r = rng(seed);
        let a = random_normal(pairs, real, &mut r);
        let rho = spectral_radius(&a);
        let grid = GridConfig { angular: 64, radial: 8, ..GridConfig::default() };
        let radius = complex_stability_radius(&a, &grid).unwrap();
        prop_assert!((radius - (1.0 - rho)).abs() < 1e-4, "radius {radius}, rho {rho}");
    }

    #[test]
    fn collapsed_ocp_is_feasible_and_beats_constant(seed in any::<u64>(), x_bound in 0.3f64..3.0, u_bound in 0.1f64..2.0) {
        let mut r = rng(seed);
        let dims = actuated_dims(ModelForm::Combined);
        let model = KoopmanBlocks::random(ModelForm::Combined, dims, 0.9, &mut r).unwrap();
        let limit = combined_limit(&model, None).unwrap();
        let plant = Plant::Collapsed(&limit);
        let spec = OcpSpec {
            horizon: 12,
            x_bound,
            u_bound,
            dynamics: Dynamics::Collapsed,
            actuation: Actuation::Pi,
            cost: system_cost(dims, Variant::Combined, 0.1),
            initial: LiftedState { x: random_vec(dims.x, &mut r), y: Vector::zeros(0), w: Vector::zeros(0) },
            constant_u: false,
        };
        let sol = solve_ocp(&spec, &plant).unwrap();
        prop_assert_eq!(sol.u.len(), spec.horizon);
        for u in &sol.u {
            prop_assert!(u.iter().all(|v| v.abs() <= u_bound));
        }
        for (k, u) in sol.u.iter().enumerate() {
            let next = limit.step(&sol.trajectory[k].x, u);
            prop_assert!((&next - &sol.trajectory[k + 1].x).amax() < 1e-10 * (1.0 + next.amax()));
        }
        if sol.max_x_violation == 0.0 {
            let (_, constant) = best_constant_policy(&spec, &plant, 0.01).unwrap();
            prop_assert!(sol.cost <= constant + 1e-8 * (1.0 + constant.abs()), "{} vs {constant}", sol.cost);
        }
    }

    #[test]
    fn multirate_ocp_trajectory_follows_rollout(seed in any::<u64>(), lqr in any::<bool>()) {
        let (model, _, policy) = solved(ModelForm::Combined, seed);
        let mut r = rng(seed ^ 6);
        let dims = model.dims;
        let m = 3;
        let plant = Plant::Full { blocks: &model, m, policy: lqr.then_some(&policy) };
        let initial = LiftedState { x: random_vec(dims.x, &mut r), y: random_vec(dims.y, &mut r), w: random_vec(dims.w, &mut r) };
        let spec = OcpSpec {
            horizon: 6,
            x_bound: 1e3,
            u_bound: 0.7,
            dynamics: Dynamics::Full,
            actuation: if lqr { Actuation::Lqr } else { Actuation::Pi },
            cost: system_cost(dims, Variant::Combined, 1.0 / m as f64),
            initial: initial.clone(),
            constant_u: false,
        };
        let sol = solve_ocp(&spec, &plant).unwrap();
        for u in &sol.u {
            prop_assert!(u.iter().all(|v| v.abs() <= spec.u_bound));
        }
        let slow = if lqr {
            lqr_rollout(&model, &policy, &initial, &sol.u, m)
        } else {
            model.rollout(&initial, &sol.u, m).unwrap().slow
        };
        for (a, b) in slow.iter().zip(&sol.trajectory) {
            prop_assert!((a - &b.x).amax() < 1e-10 * (1.0 + a.amax()));
        }
    }
}

/// Slow one-step map with a window of `m` fast steps started from `ψ_y = 0`.
fn window_map(model: &KoopmanBlocks, m: usize) -> Mat {
    let n = model.dims.x;
    let mut out = Mat::zeros(n, n);
    for j in 0..n {
        let mut x = Vector::zeros(n);
        x[j] = 1.0;
        let mut y = Vector::zeros(model.dims.y);
        let mut mean = Vector::zeros(model.dims.y);
        let none = Vector::zeros(0);
        for _ in 0..m {
            y = model.step_fast(&y, &x, &none, &none).unwrap().0;
            mean += &y;
        }
        mean /= m as f64;
        out.set_column(j, &model.step_slow_mean(&x, &mean, &none));
    }
    out
}

/// Real normal matrix `Q D Qᵀ` with rotation-scaling and real diagonal blocks.
fn random_normal(pairs: usize, real: usize, r: &mut ChaCha8Rng) -> Mat {
    let n = 2 * pairs + real;
    let mut d = Mat::zeros(n, n);
    for p in 0..pairs {
        let (rad, th) = (r.gen_range(0.05..0.95), r.gen_range(0.0..std::f64::consts::PI));
        let (c, s) = (rad * th.cos(), rad * th.sin());
        d[(2 * p, 2 * p)] = c;
        d[(2 * p, 2 * p + 1)] = -s;
        d[(2 * p + 1, 2 * p)] = s;
        d[(2 * p + 1, 2 * p + 1)] = c;
    }
    for k in 0..real {
        d[(2 * pairs + k, 2 * pairs + k)] = r.gen_range(-0.95..0.95);
    }
    let q = random_mat(n, n, 1.0, r).qr().q();
    &q * d * q.transpose()
}

fn lqr_rollout(model: &KoopmanBlocks, policy: &LqrPolicy, init: &LiftedState, controls: &[Vector], m: usize) -> Vec<Vector> {
    let fm = model.fast_map();
    let mut x = init.x.clone();
    let mut y = init.y.clone();
    let mut out = vec![x.clone()];
    for u in controls {
        let mut y_mean = Vector::zeros(y.len());
        let mut w_mean = Vector::zeros(model.dims.w);
        for _ in 0..m {
            let w = policy.actuation(&y, &x, u);
            y = &fm.yy * &y + &fm.yw * &w + &fm.yx * &x;
            let w_next = policy.actuation(&y, &x, u);
            y_mean += &y;
            w_mean += w_next;
        }
        y_mean /= m as f64;
        w_mean /= m as f64;
        x = model.step_slow_mean(&x, &y_mean, &w_mean);
        out.push(x.clone());
    }
    out
}
