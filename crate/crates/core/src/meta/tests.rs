use std::sync::Arc;

use rand::Rng;

use super::*;
use crate::data::{Color, DomainDescriptor, Rotation, Scale};
use crate::diffcore::{finite_difference_coordinate, max_relative_error, QuadraticLoss};
use crate::models::{build_mlp, Activation};

fn quad(a: Vec<f64>, c: Vec<f64>) -> QuadraticLoss {
    QuadraticLoss::new(a, c).unwrap()
}

fn matvec(a: &[f64], x: &[f64]) -> Vec<f64> {
    let n = x.len();
    (0..n)
        .map(|i| (0..n).map(|j| a[i * n + j] * x[j]).sum())
        .collect()
}

const A_S: [f64; 9] = [2.0, 0.5, 0.0, 0.5, 1.0, -0.25, 0.0, -0.25, 3.0];
const A_Q: [f64; 9] = [1.5, -0.5, 0.25, -0.5, 2.0, 0.0, 0.25, 0.0, 0.5];
const C_S: [f64; 3] = [1.0, -1.0, 0.5];
const C_Q: [f64; 3] = [-0.5, 0.25, 2.0];

fn random_domain(
    rng: &mut impl Rng,
    id: usize,
    per_class: usize,
    features: usize,
    classes: usize,
) -> DomainDataset {
    let shift: Vec<f64> = (0..features).map(|_| rng.random_range(-0.5..0.5)).collect();
    let mut examples = Vec::new();
    for c in 0..classes {
        for _ in 0..per_class {
            let x: Vec<f64> = (0..features)
                .map(|j| {
                    shift[j]
                        + if j % classes == c { 1.0 } else { 0.0 }
                        + 0.3 * rng.random_range(-1.0..1.0)
                })
                .collect();
            examples.push(LabeledExample::new(x, c));
        }
    }
    let descriptor = DomainDescriptor::Rainbow {
        color: Color::ALL[id % 7],
        rotation: Rotation::ALL[id % 4],
        scale: Scale::Full,
    };
    DomainDataset::new(format!("dom-{id:02}"), descriptor, classes, examples).unwrap()
}

fn small_setup(seed: u64) -> (ModelSpec, Vec<DomainDataset>, Vec<DomainDataset>) {
    let mut rng = seeded_rng(seed);
    let spec = build_mlp(6, &[8], Activation::Tanh, 3).unwrap();
    let train: Vec<_> = (0..5)
        .map(|i| random_domain(&mut rng, i, 6, 6, 3))
        .collect();
    let val: Vec<_> = (5..7)
        .map(|i| random_domain(&mut rng, i, 6, 6, 3))
        .collect();
    (spec, train, val)
}

fn small_hp() -> HyperParams {
    HyperParams {
        inner_lr: 0.1,
        outer_lr: 0.01,
        shots: 2,
        meta_batch_size: 2,
        max_iterations: 40,
        eval_interval: 10,
        early_stop_patience: 3,
        validation_tasks: 2,
        ..HyperParams::default()
    }
}

#[test]
fn stationary_support_is_a_fixed_point() {
    let q = quad(A_S.to_vec(), C_S.to_vec());
    let theta = q.params(C_S.to_vec()).unwrap();
    assert_eq!(inner_adapt_with(&q, &theta, 0.1, 3).unwrap(), theta);
}

#[test]
fn quadratic_inner_step_is_closed_form() {
    let q = quad(A_S.to_vec(), C_S.to_vec());
    let t = [0.3, 0.7, -1.1];
    let theta = q.params(t.to_vec()).unwrap();
    let alpha = 0.05;
    let phi = inner_adapt_with(&q, &theta, alpha, 1).unwrap();
    let d: Vec<f64> = t.iter().zip(&C_S).map(|(a, b)| a - b).collect();
    let ad = matvec(&A_S, &d);
    for i in 0..3 {
        assert_eq!(phi.values()[i], t[i] - alpha * ad[i]);
    }
    let twice = inner_adapt_with(
        &q,
        &inner_adapt_with(&q, &theta, alpha, 1).unwrap(),
        alpha,
        1,
    )
    .unwrap();
    assert_eq!(inner_adapt_with(&q, &theta, alpha, 2).unwrap(), twice);
    assert!(matches!(
        inner_adapt_with(&q, &theta, alpha, 0),
        Err(Error::Config(_))
    ));
}

#[test]
fn quadratic_meta_gradient_is_closed_form() {
    let (s, q) = (
        quad(A_S.to_vec(), C_S.to_vec()),
        quad(A_Q.to_vec(), C_Q.to_vec()),
    );
    let t = [0.3, 0.7, -1.1];
    let theta = s.params(t.to_vec()).unwrap();
    let alpha = 0.05;
    let phi = inner_adapt_with(&s, &theta, alpha, 1).unwrap();
    let dq: Vec<f64> = phi.values().iter().zip(&C_Q).map(|(a, b)| a - b).collect();
    let gq = matvec(&A_Q, &dq);
    let hs_gq = matvec(&A_S, &gq);
    let want: Vec<f64> = gq.iter().zip(&hs_gq).map(|(g, h)| g - alpha * h).collect();
    let (_, got) = meta_gradient_with(&s, &q, &theta, alpha, 1).unwrap();
    assert!(max_relative_error(got.values(), &want) < 1e-15);
    let fo = meta_gradient_first_order_with(&s, &q, &theta, alpha, 1).unwrap();
    assert!(max_relative_error(fo.values(), &gq) < 1e-15);

    // two steps: (I − αA_S)² A_Q(φ₂ − c_Q)
    let phi2 = inner_adapt_with(&s, &theta, alpha, 2).unwrap();
    let d2: Vec<f64> = phi2.values().iter().zip(&C_Q).map(|(a, b)| a - b).collect();
    let mut v = matvec(&A_Q, &d2);
    for _ in 0..2 {
        let h = matvec(&A_S, &v);
        v = v.iter().zip(&h).map(|(a, b)| a - alpha * b).collect();
    }
    let (_, got2) = meta_gradient_with(&s, &q, &theta, alpha, 2).unwrap();
    assert!(max_relative_error(got2.values(), &v) < 1e-14);
}

#[test]
fn zero_step_size_gives_the_query_gradient() {
    let (spec, train, _) = small_setup(1);
    let params = init_params(&spec, 2);
    let task = sample_standard_task(&train[0], 2, &mut seeded_rng(3)).unwrap();
    let plain = crate::diffcore::gradient(&spec, &params, &task.query).unwrap();
    assert_eq!(meta_gradient(&spec, &params, &task, 0.0, 1).unwrap(), plain);
    assert_eq!(
        meta_gradient_first_order(&spec, &params, &task, 0.0, 1).unwrap(),
        plain
    );
}

#[test]
fn mlp_meta_gradient_matches_finite_differences() {
    let (spec, train, _) = small_setup(4);
    let mut rng = seeded_rng(5);
    for (trial, domain) in train.iter().enumerate() {
        let params = init_params(&spec, trial as u64);
        let task = sample_ocda_task(domain, 1, 2, &mut rng).unwrap();
        for k in [1, 2] {
            let support = DatasetLoss::new(&spec, &task.support);
            let query = DatasetLoss::new(&spec, &task.query);
            let composite = AdaptedQueryLoss {
                support: &support,
                query: &query,
                alpha: 0.1,
                inner_steps: k,
            };
            let g = meta_gradient(&spec, &params, &task, 0.1, k).unwrap();
            let mut probe = params.clone();
            let coords: Vec<usize> = (0..20).map(|_| rng.random_range(0..params.len())).collect();
            let fd: Vec<f64> = coords
                .iter()
                .map(|&i| finite_difference_coordinate(&composite, &mut probe, i, 1e-5).unwrap())
                .collect();
            let exact: Vec<f64> = coords.iter().map(|&i| g.values()[i]).collect();
            let err = max_relative_error(&exact, &fd);
            assert!(err < 1e-5, "k={k}: {err}");
        }
    }
}

#[test]
fn first_order_gap_is_linear_in_alpha() {
    let (spec, train, _) = small_setup(6);
    let params = init_params(&spec, 7);
    let task = sample_standard_task(&train[1], 2, &mut seeded_rng(8)).unwrap();
    let gap = |alpha: f64| {
        let exact = meta_gradient(&spec, &params, &task, alpha, 1).unwrap();
        let fo = meta_gradient_first_order(&spec, &params, &task, alpha, 1).unwrap();
        exact.sub(&fo).unwrap().norm()
    };
    let ratio = gap(0.01) / gap(0.005);
    assert!((1.8..2.2).contains(&ratio), "{ratio}");
}

fn two_param_state(values: [f64; 2]) -> TrainState {
    TrainState::new(
        ParameterVector::new(Arc::new(crate::diffcore::Layout::flat(2)), values.to_vec()).unwrap(),
    )
}

fn grad2(state: &TrainState, g: [f64; 2]) -> GradientVector {
    GradientVector::new(state.params.layout().clone(), g.to_vec()).unwrap()
}

#[test]
fn adam_zero_gradient_is_inert() {
    let hp = HyperParams {
        weight_decay: 0.0,
        ..HyperParams::default()
    };
    let mut state = two_param_state([1.0, -2.0]);
    state.first_moment.values_mut().copy_from_slice(&[0.5, 0.5]);
    state
        .second_moment
        .values_mut()
        .copy_from_slice(&[0.25, 0.25]);
    let g = grad2(&state, [0.0, 0.0]);
    let next = adam_step(state.clone(), &g, &hp).unwrap();
    assert_eq!(next.first_moment.values(), &[0.45, 0.45]);
    assert!(next.second_moment.values()[0] < 0.25);
    let fresh = adam_step(two_param_state([1.0, -2.0]), &g, &hp).unwrap();
    assert_eq!(fresh.params.values(), &[1.0, -2.0]);
    assert_eq!(fresh.iteration, 1);
}

#[test]
fn adam_first_step_has_magnitude_beta() {
    let hp = HyperParams {
        weight_decay: 0.0,
        ..HyperParams::default()
    };
    let state = two_param_state([0.0, 0.0]);
    let g = grad2(&state, [3.0, -0.02]);
    let next = adam_step(state, &g, &hp).unwrap();
    for (p, g) in next.params.values().iter().zip([3.0, -0.02]) {
        assert!((p + hp.outer_lr * f64::signum(g)).abs() < 1e-8);
    }
}

#[test]
fn adam_matches_hand_transcript() {
    let hp = HyperParams {
        outer_lr: 0.1,
        weight_decay: 0.01,
        ..HyperParams::default()
    };
    // bias-corrected Adam with coupled L2, stepped by hand
    let want = [
        [0.9000000019607843, -1.9000000009803921],
        [0.8189151743261174, -1.8551761608807558],
        [0.7821658470448363, -1.8194114845187794],
    ];
    let mut state = two_param_state([1.0, -2.0]);
    for (g, w) in [[0.5, -1.0], [0.1, 0.3], [-0.2, 0.0]].into_iter().zip(want) {
        let grad = grad2(&state, g);
        state = adam_step(state, &grad, &hp).unwrap();
        assert!(max_relative_error(state.params.values(), &w) < 1e-15);
    }
    assert_eq!(state.iteration, 3);
}

#[test]
fn adam_decoupled_decay_and_errors() {
    let hp = HyperParams {
        outer_lr: 0.1,
        weight_decay: 0.5,
        weight_decay_mode: WeightDecayMode::Decoupled,
        ..HyperParams::default()
    };
    let state = two_param_state([2.0, 0.0]);
    let g = grad2(&state, [0.0, 0.0]);
    let next = adam_step(state.clone(), &g, &hp).unwrap();
    assert_eq!(next.params.values(), &[2.0 - 0.1 * 0.5 * 2.0, 0.0]);
    let wrong = GradientVector::zeros(Arc::new(crate::diffcore::Layout::flat(3)));
    assert!(matches!(
        adam_step(state.clone(), &wrong, &hp),
        Err(Error::Layout(_))
    ));
    let nan = grad2(&state, [f64::NAN, 0.0]);
    assert!(matches!(
        adam_step(state, &nan, &hp),
        Err(Error::Numeric(_))
    ));
}

#[test]
fn table_defaults() {
    let r = HyperParams::rainbow();
    assert_eq!(
        (r.inner_lr, r.outer_lr, r.inner_steps, r.meta_batch_size),
        (0.01, 0.001, 1, 4)
    );
    assert_eq!((r.max_iterations, r.weight_decay), (30_000, 1e-5));
    let p = HyperParams::pump();
    assert_eq!(
        (p.meta_batch_size, p.max_iterations, p.shots),
        (2, 20_000, 2)
    );
    r.validate().unwrap();
    assert!(HyperParams {
        inner_lr: 0.0,
        ..r.clone()
    }
    .validate()
    .is_err());
    assert!(HyperParams {
        adam_beta1: 1.0,
        ..r
    }
    .validate()
    .is_err());
}

#[test]
fn zero_budget_returns_initial_parameters() {
    let (spec, train, val) = small_setup(9);
    let hp = HyperParams {
        max_iterations: 0,
        ..small_hp()
    };
    let (params, history) = train_fn(&spec, &hp, &train, &val, Strategy::Standard, None, 3);
    assert_eq!(params, init_params(&spec, 3));
    assert!(history.records.is_empty());
}

fn train_fn(
    spec: &ModelSpec,
    hp: &HyperParams,
    train_domains: &[DomainDataset],
    val: &[DomainDataset],
    strategy: Strategy,
    normal: Option<usize>,
    seed: u64,
) -> (ParameterVector, TrainHistory) {
    train(spec, hp, train_domains, val, strategy, normal, seed).unwrap()
}

#[test]
fn ocda_requires_a_normal_class() {
    let (spec, train_domains, val) = small_setup(10);
    let r = train(
        &spec,
        &small_hp(),
        &train_domains,
        &val,
        Strategy::Ocda,
        None,
        1,
    );
    assert!(matches!(r, Err(Error::Config(_))));
}

#[test]
fn single_task_iteration_is_one_adam_step() {
    let (spec, train_domains, _) = small_setup(11);
    let hp = HyperParams {
        meta_batch_size: 1,
        max_iterations: 1,
        ..small_hp()
    };
    let seed = 12;
    let task = sample_meta_batch(
        &train_domains,
        &hp,
        Strategy::Standard,
        None,
        &mut seeded_rng(seed),
    )
    .unwrap();
    let init = init_params(&spec, seed);
    let g = meta_gradient(&spec, &init, &task[0], hp.inner_lr, hp.inner_steps).unwrap();
    let want = adam_step(TrainState::new(init.clone()), &g, &hp).unwrap();
    let out = train_from(
        &spec,
        &hp,
        init,
        &train_domains,
        &[],
        Strategy::Standard,
        None,
        seed,
    )
    .unwrap();
    assert_eq!(out.state.params, want.params);
    assert_eq!(out.params, want.params);
}

#[test]
fn training_is_deterministic_and_reduces_loss() {
    let (spec, train_domains, val) = small_setup(13);
    let hp = small_hp();
    let a = train_fn(&spec, &hp, &train_domains, &val, Strategy::Ocda, Some(1), 5);
    let b = train_fn(&spec, &hp, &train_domains, &val, Strategy::Ocda, Some(1), 5);
    assert_eq!(a.0, b.0);
    assert_eq!(a.1.to_csv(), b.1.to_csv());
    let iters: Vec<usize> = a.1.records.iter().map(|r| r.iteration).collect();
    assert!(iters.windows(2).all(|w| w[0] < w[1]));
    assert!(a
        .1
        .to_csv()
        .starts_with("iteration,train_loss,val_loss,val_acc\n"));
    assert_eq!(a.1.to_csv().lines().count(), a.1.records.len() + 1);
}

#[test]
fn parallel_and_serial_steps_agree_bitwise() {
    let (spec, train_domains, _) = small_setup(14);
    let hp = HyperParams {
        meta_batch_size: 4,
        ..small_hp()
    };
    let tasks = sample_meta_batch(
        &train_domains,
        &hp,
        Strategy::Standard,
        None,
        &mut seeded_rng(1),
    )
    .unwrap();
    let ids: Vec<&str> = tasks.iter().map(|t| t.domain_id.as_str()).collect();
    assert!(ids.windows(2).all(|w| w[0] < w[1]));
    let run = |threads| {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap();
        pool.install(|| {
            meta_train_step(&spec, &hp, TrainState::new(init_params(&spec, 2)), &tasks).unwrap()
        })
    };
    let (serial, l1) = run(1);
    let (parallel, l2) = run(4);
    assert_eq!(serial, parallel);
    assert_eq!(l1.to_bits(), l2.to_bits());
}

#[test]
fn early_stopping_and_best_checkpoint() {
    let (spec, train_domains, val) = small_setup(15);
    let hp = HyperParams {
        outer_lr: 0.5,
        max_iterations: 400,
        eval_interval: 5,
        early_stop_patience: 2,
        ..small_hp()
    };
    let out = train_from(
        &spec,
        &hp,
        init_params(&spec, 1),
        &train_domains,
        &val,
        Strategy::Standard,
        None,
        1,
    )
    .unwrap();
    let best = out
        .history
        .records
        .iter()
        .min_by(|a, b| a.val_loss.total_cmp(&b.val_loss))
        .unwrap();
    assert_eq!(best.iteration, out.history.best_iteration);
    if out.history.stopped_early {
        assert!(out.state.iteration < hp.max_iterations);
        assert!(
            out.state.iteration - out.history.best_iteration
                >= hp.early_stop_patience * hp.eval_interval
        );
    }
}
