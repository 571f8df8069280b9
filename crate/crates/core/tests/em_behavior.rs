//! EM driver contracts: deterministic reduction to plain VAE training,
//! weighted-update semantics, monotone objective in the deterministic
//! mode, and permutation equivariance of the cluster slots.

use mixvae::data::{half_moons, Dataset};
use mixvae::em::{
    self, build_models, fit, fit_from, init_assignments, m_step, EmConfig, EmError, TrainMode,
};
use mixvae::nn::Mlp;
use mixvae::rng::{self, tags};
use mixvae::vae::{Vae, VaeAdam};
use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;

fn tiny_config(num_clusters: usize, seed: u64) -> EmConfig {
    let mut config = EmConfig::synthetic_preset(num_clusters);
    config.encoder_dims = vec![2, 5, 2];
    config.decoder_dims = vec![2, 5, 2];
    config.learning_rate = 1e-3;
    config.batch_size = 4;
    config.num_mc_e = 2;
    config.epochs_per_m_step = 2;
    config.iterations = 3;
    config.seed = seed;
    config
}

fn mlps_identical(a: &Mlp<f64>, b: &Mlp<f64>) -> bool {
    a.layers.len() == b.layers.len()
        && a.layers
            .iter()
            .zip(&b.layers)
            .all(|(la, lb)| la.weight == lb.weight && la.bias == lb.bias)
}

fn vaes_identical(a: &Vae<f64>, b: &Vae<f64>) -> bool {
    mlps_identical(a.trunk(), b.trunk())
        && mlps_identical(a.mean_head(), b.mean_head())
        && mlps_identical(a.logvar_head(), b.logvar_head())
        && mlps_identical(a.decoder(), b.decoder())
}

#[test]
fn m_step_leaves_zero_weight_cluster_untouched() {
    let config = tiny_config(2, 8);
    let mut models = build_models::<f64>(&config).unwrap();
    let before = models.clone();
    let mut optimizers: Vec<VaeAdam<f64>> = models.iter().map(VaeAdam::new).collect();
    let x = half_moons::<f64>(12, 2, 0.05, 1).features;
    let mut u = Array2::<f64>::zeros((12, 2));
    u.column_mut(0).fill(1.0);
    m_step(
        &mut models,
        &mut optimizers,
        x.view(),
        u.view(),
        config.learning_rate,
        &config,
        1,
    );
    assert!(!vaes_identical(&models[0], &before[0]));
    assert!(vaes_identical(&models[1], &before[1]));
}

#[test]
fn m_step_matches_hand_unrolled_update() {
    let mut config = tiny_config(1, 21);
    config.epochs_per_m_step = 1;
    config.batch_size = 8;
    let mut models = build_models::<f64>(&config).unwrap();
    let mut manual = models[0].clone();
    let mut optimizers: Vec<VaeAdam<f64>> = models.iter().map(VaeAdam::new).collect();
    let x = ndarray::array![[0.4, -0.2]];
    let u = ndarray::array![[1.0]];
    let round = 5;
    m_step(
        &mut models,
        &mut optimizers,
        x.view(),
        u.view(),
        config.learning_rate,
        &config,
        round,
    );

    // Same stream, same shuffle, one weighted gradient, one Adam step.
    let mut stream = rng::substream(manual.stream_seed, &[tags::M_STEP, round]);
    let mut order = vec![0usize];
    order.shuffle(&mut stream);
    let xb = x.select(Axis(0), &order);
    let wb = Array1::from_elem(1, 1.0);
    let (grads, _) = manual
        .weighted_elbo_grad(xb.view(), wb.view(), config.num_mc_m, &mut stream)
        .unwrap();
    let mut adam = VaeAdam::new(&manual);
    adam.step(&mut manual, &grads, config.learning_rate).unwrap();
    assert!(vaes_identical(&models[0], &manual));
}

#[test]
fn single_cluster_fit_is_plain_weighted_training() {
    let mut config = tiny_config(1, 13);
    config.dropout = 0.2;
    let data = half_moons::<f64>(10, 1, 0.05, 1);
    let result = fit(&config, &data).unwrap();

    // One cluster forces unit weights, so fit must walk the exact same
    // parameter trajectory as standalone minibatch training.
    let mut manual = build_models::<f64>(&config).unwrap().remove(0);
    let mut adam = VaeAdam::new(&manual);
    let n = data.len();
    let weights = Array1::from_elem(config.batch_size, 1.0);
    for iteration in 1..=config.iterations as u64 {
        let mut stream = rng::substream(manual.stream_seed, &[tags::M_STEP, iteration]);
        let mut order: Vec<usize> = (0..n).collect();
        for _ in 0..config.epochs_per_m_step {
            order.shuffle(&mut stream);
            for batch in order.chunks(config.batch_size) {
                let xb = data.features.select(Axis(0), batch);
                let (grads, _) = manual
                    .weighted_elbo_grad(
                        xb.view(),
                        weights.slice(ndarray::s![..batch.len()]),
                        config.num_mc_m,
                        &mut stream,
                    )
                    .unwrap();
                adam.step(&mut manual, &grads, config.learning_rate).unwrap();
            }
        }
    }
    assert!(vaes_identical(&result.models[0], &manual));
    assert!(result.assignments.iter().all(|&v| v == 1.0));
    assert_eq!(result.history.len(), config.iterations);
    assert!(result.history.iter().all(|r| r.accuracy == Some(1.0)));
}

#[test]
fn frozen_mode_objective_never_increases() {
    let mut config = tiny_config(2, 3);
    config.mode = TrainMode::FullBatchFrozen;
    config.epochs_per_m_step = 3;
    config.iterations = 6;
    let data = half_moons::<f64>(40, 2, 0.05, 7);
    let result = fit(&config, &data).unwrap();
    let objectives: Vec<f64> = result.history.iter().map(|r| r.objective).collect();
    for pair in objectives.windows(2) {
        assert!(
            pair[1] <= pair[0] + 1e-9,
            "objective rose from {} to {}",
            pair[0],
            pair[1]
        );
    }
    assert!(
        objectives.last().unwrap() < &objectives[0],
        "no progress across the run: {objectives:?}"
    );
}

#[test]
fn permuting_model_slots_permutes_assignment_columns() {
    let mut config = tiny_config(2, 5);
    config.dropout = 0.2;
    config.iterations = 2;
    let data = half_moons::<f64>(16, 2, 0.05, 9);
    let models = build_models::<f64>(&config).unwrap();
    let u0 = init_assignments::<f64>(16, 2, config.seed);

    let forward = fit_from(&config, &data, models.clone(), u0.clone()).unwrap();
    let swapped = fit_from(
        &config,
        &data,
        vec![models[1].clone(), models[0].clone()],
        u0.select(Axis(1), &[1, 0]),
    )
    .unwrap();

    assert_eq!(
        forward.assignments,
        swapped.assignments.select(Axis(1), &[1, 0])
    );
    assert!(vaes_identical(&forward.models[0], &swapped.models[1]));
    assert!(vaes_identical(&forward.models[1], &swapped.models[0]));
    for (a, b) in forward.history.iter().zip(&swapped.history) {
        // The objective sums (point, cluster) terms in storage order, so a
        // column swap reorders the accumulation; identical up to rounding.
        let scale = a.objective.abs().max(1.0);
        assert!((a.objective - b.objective).abs() <= 1e-12 * scale);
        assert_eq!(a.mean_max_responsibility, b.mean_max_responsibility);
        assert_eq!(a.accuracy, b.accuracy);
    }
}

#[test]
fn fit_is_reproducible_under_a_fixed_seed() {
    let mut config = tiny_config(2, 17);
    config.dropout = 0.2;
    config.iterations = 2;
    let data = half_moons::<f64>(14, 2, 0.05, 4);
    let a = fit(&config, &data).unwrap();
    let b = fit(&config, &data).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.assignments, b.assignments);
    for (ma, mb) in a.models.iter().zip(&b.models) {
        assert!(vaes_identical(ma, mb));
    }
}

#[test]
fn fit_rejects_malformed_inputs() {
    let config = tiny_config(3, 2);
    let two_points = half_moons::<f64>(2, 2, 0.05, 1);
    assert!(matches!(
        fit(&config, &two_points),
        Err(EmError::TooFewPoints {
            points: 2,
            clusters: 3
        })
    ));

    let config = tiny_config(2, 2);
    let data = half_moons::<f64>(8, 2, 0.05, 1);
    let models = build_models::<f64>(&config).unwrap();
    assert!(matches!(
        fit_from(&config, &data, models[..1].to_vec(), init_assignments(8, 2, 0)),
        Err(EmError::ModelCount {
            models: 1,
            clusters: 2
        })
    ));
    assert!(matches!(
        fit_from(&config, &data, models.clone(), init_assignments(8, 3, 0)),
        Err(EmError::AssignmentShape { cols: 3, k: 2, .. })
    ));
    let doubled = init_assignments::<f64>(8, 2, 0) * 2.0;
    assert!(matches!(
        fit_from(&config, &data, models.clone(), doubled),
        Err(EmError::OffSimplex { row: 0 })
    ));

    let mut wide = tiny_config(2, 2);
    wide.encoder_dims = vec![3, 5, 2];
    wide.decoder_dims = vec![2, 5, 3];
    assert!(matches!(
        fit(&wide, &data),
        Err(EmError::InvalidConfig(_))
    ));
    let wide_models = build_models::<f64>(&wide).unwrap();
    assert!(matches!(
        fit_from(&config, &data, wide_models, init_assignments(8, 2, 0)),
        Err(EmError::DataDimMismatch {
            data: 2,
            cluster: 0,
            model: 3
        })
    ));

    let mislabeled = Dataset {
        features: data.features.clone(),
        labels: Some(vec![0; 3]),
    };
    assert!(matches!(
        fit_from(&config, &mislabeled, models, init_assignments(8, 2, 0)),
        Err(EmError::LabelCount {
            labels: 3,
            points: 8
        })
    ));

    // Objective shape guard on the public scorer.
    let ok = em::em_objective(
        &build_models::<f64>(&config).unwrap(),
        data.features.view(),
        init_assignments::<f64>(8, 2, 0).view(),
        2,
        1,
    );
    assert!(ok.is_ok());
}
