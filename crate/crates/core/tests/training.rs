use flip_core::disentangle::{cka_transposed, train_phase2, FairnessConfig, Stage};
use flip_core::dp::{plan_balanced_sampling, DpSgd};
use flip_core::params::{ParamStore, Sgd};
use flip_core::rng::{sample_normal, stream};
use flip_core::schema_io::{fit_transform, Dataset, EncodedDataset, FeatureSpec, TabularSchema};
use flip_core::vae::{train_phase1, TrainState, TrainingConfig, Vae, VaeConfig};
use ndarray::Array2;
use rand::Rng;

/// `x` carries the protected attribute plus noise; `c` is unrelated.
fn toy(n: usize, seed: u64) -> EncodedDataset {
    let schema = TabularSchema::new(
        vec![
            FeatureSpec::numerical("x"),
            FeatureSpec::numerical("y"),
            FeatureSpec::categorical("s", ["a", "b"]),
            FeatureSpec::categorical("c", ["u", "v", "w"]),
        ],
        "s",
        None,
    )
    .unwrap();
    let mut rng = stream(seed);
    let mut values = Array2::zeros((n, 4));
    for i in 0..n {
        let s = (i % 2) as f64;
        values[[i, 0]] = 2.0 * s + 0.3 * sample_normal(&mut rng);
        values[[i, 1]] = sample_normal(&mut rng);
        values[[i, 2]] = s;
        values[[i, 3]] = rng.random_range(0..3) as f64;
    }
    fit_transform(&Dataset::new(schema, values).unwrap()).unwrap()
}

fn small_vae(data: &EncodedDataset, seed: u64) -> (Vae, ParamStore) {
    let cfg = VaeConfig {
        d_token: 4,
        n_heads: 2,
        encoder_layers: 1,
        decoder_layers: 1,
        ffn_hidden: 8,
        head_hidden: 4,
    };
    Vae::build(data.schema(), cfg, seed)
}

fn state(params: ParamStore, data: &EncodedDataset, cfg: &TrainingConfig, dp: DpSgd) -> TrainState {
    let sizes = vec![
        data.groups().iter().filter(|&&g| g == 0).count(),
        data.groups().iter().filter(|&&g| g == 1).count(),
    ];
    let plan = plan_balanced_sampling(&sizes, cfg.batch_size).unwrap();
    TrainState::new(params, cfg, dp, plan)
}

fn phase1_cfg(epochs: usize) -> TrainingConfig {
    TrainingConfig {
        phase1_epochs: epochs,
        phase2_epochs: 1,
        batch_size: 40,
        learning_rate: 5e-3,
        seed: 11,
        ..TrainingConfig::default()
    }
}

#[test]
fn phase1_loss_decreases_without_noise() {
    let data = toy(200, 1);
    let (vae, params) = small_vae(&data, 2);
    let cfg = phase1_cfg(5);
    let mut st = state(params, &data, &cfg, DpSgd::fixed(2, 1e6, 0.0, 3).unwrap());
    train_phase1(&vae, &mut st, &data, &cfg).unwrap();
    let losses: Vec<f64> = st.log.iter().map(|l| l.loss).collect();
    assert_eq!(losses.len(), 5);
    let decreases = losses.windows(2).filter(|w| w[1] < w[0]).count();
    assert!(decreases >= 4, "{losses:?}");
}

#[test]
fn zero_epochs_keep_initial_parameters() {
    let data = toy(60, 1);
    let (vae, params) = small_vae(&data, 2);
    let cfg = phase1_cfg(0);
    let mut st = state(params.clone(), &data, &cfg, DpSgd::non_private(2));
    train_phase1(&vae, &mut st, &data, &cfg).unwrap();
    assert_eq!(st.params, params);
    assert!(st.log.is_empty());
}

#[test]
fn phase1_is_deterministic() {
    let data = toy(80, 4);
    let cfg = phase1_cfg(2);
    let run = || {
        let (vae, params) = small_vae(&data, 5);
        let mut st = state(params, &data, &cfg, DpSgd::fixed(2, 1.0, 0.8, 9).unwrap());
        train_phase1(&vae, &mut st, &data, &cfg).unwrap();
        st.params
    };
    assert_eq!(run(), run());
}

#[test]
fn swd_only_drift_is_bounded_by_step_size() {
    let data = toy(80, 6);
    let (vae, params) = small_vae(&data, 7);
    let cfg = phase1_cfg(0);
    let clip = 0.5;
    let lr = 0.05;
    let mut st = state(params.clone(), &data, &cfg, DpSgd::fixed(2, clip, 0.0, 1).unwrap());
    st.optimizer = Box::new(Sgd { lr });
    let fair = FairnessConfig {
        lambda: 0.0,
        stages: vec![Stage::Latent, Stage::Decoder],
        swd_projections: 16,
        ..FairnessConfig::default()
    };
    train_phase2(&vae, &mut st, &params, &data, &cfg, &fair).unwrap();
    let steps = st.log[0].batches as f64;
    let drift = st.params.distance(&params);
    assert!(drift <= lr * steps * clip + 1e-12, "{drift}");
}

fn group_cka(vae: &Vae, params: &ParamStore, data: &EncodedDataset) -> f64 {
    let groups = data.groups();
    let rows0: Vec<usize> = (0..data.n()).filter(|&i| groups[i] == 0).collect();
    let rows1: Vec<usize> = (0..data.n()).filter(|&i| groups[i] == 1).collect();
    let (a, _) = vae.encode_rows(params, data, &rows0).unwrap();
    let (b, _) = vae.encode_rows(params, data, &rows1).unwrap();
    cka_transposed(&a, &b).unwrap()
}

#[test]
fn disentanglement_raises_group_similarity() {
    let data = toy(200, 8);
    let (vae, params) = small_vae(&data, 9);
    let mut cfg = phase1_cfg(4);
    cfg.phase2_epochs = 4;
    let mut st = state(params, &data, &cfg, DpSgd::non_private(2));
    train_phase1(&vae, &mut st, &data, &cfg).unwrap();
    let theta0 = st.params.clone();
    let before = group_cka(&vae, &theta0, &data);
    let fair = FairnessConfig {
        lambda: 4.0,
        stages: vec![Stage::Latent],
        swd_projections: 16,
        ..FairnessConfig::default()
    };
    train_phase2(&vae, &mut st, &theta0, &data, &cfg, &fair).unwrap();
    let after = group_cka(&vae, &st.params, &data);
    assert!(after > before, "{before} -> {after}");
}

#[test]
fn phase2_is_deterministic_and_keeps_reference() {
    let data = toy(80, 10);
    let (vae, params) = small_vae(&data, 11);
    let cfg = phase1_cfg(0);
    let fair = FairnessConfig {
        lambda: 1.0,
        swd_projections: 8,
        ..FairnessConfig::default()
    };
    let run = || {
        let mut st = state(params.clone(), &data, &cfg, DpSgd::fixed(2, 1.0, 0.5, 2).unwrap());
        train_phase2(&vae, &mut st, &params, &data, &cfg, &fair).unwrap();
        st.params
    };
    let a = run();
    assert_eq!(a, run());
    assert!(a.distance(&params) > 0.0);
}
