#![allow(dead_code)]

use intermpl::model::{weighted_head_loss, Model, ModelConfig, ModelVariant};
use intermpl::nn::{Matrix, ParamSet};
use intermpl::rng::substream;
use rand::Rng;

pub const VARIANTS: [ModelVariant; 4] = [
    ModelVariant::Ctc,
    ModelVariant::InterCtc,
    ModelVariant::ScCtc,
    ModelVariant::HcCtc,
];

/// Two-layer, width-8 model with heads at layers 1 and 2 (one head for CTC).
pub fn tiny_config(variant: ModelVariant) -> ModelConfig {
    let heads = if variant == ModelVariant::Ctc { vec![2] } else { vec![1, 2] };
    let (levels, sizes) = match variant {
        ModelVariant::Ctc => (vec![0], vec![4]),
        ModelVariant::HcCtc => (vec![0, 1], vec![3, 5]),
        _ => (vec![0, 0], vec![4, 4]),
    };
    ModelConfig {
        layers: 2,
        hidden: 8,
        ff_hidden: 8,
        feature_dim: 3,
        head_layers: heads,
        variant,
        head_levels: levels,
        head_vocab_sizes: sizes,
    }
}

pub fn random_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect())
}

/// Glorot initialization with every value shifted by a small random offset so
/// that biases and conditioning weights are non-zero.
pub fn jittered_params<R: Rng>(model: &Model, rng: &mut R) -> ParamSet {
    let mut p = model.init_params(rng);
    for t in p.tensors_mut() {
        for v in t.values_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
    }
    p
}

/// Random targets per head, each of length 1..=2 so that 6 frames are always
/// enough.
pub fn random_targets<R: Rng>(config: &ModelConfig, rng: &mut R) -> Vec<Vec<usize>> {
    config
        .head_vocab_sizes
        .iter()
        .map(|&v| {
            let len = rng.random_range(1..=2);
            (0..len).map(|_| rng.random_range(1..=v)).collect()
        })
        .collect()
}

pub fn full_loss(model: &Model, params: &ParamSet, x: &Matrix, targets: &[Vec<usize>]) -> f64 {
    let out = model.forward(params, x).unwrap();
    let t: Vec<Option<&[usize]>> = targets.iter().map(|t| Some(t.as_slice())).collect();
    weighted_head_loss(&out, &t).unwrap().loss
}

/// Maximum relative error between the analytic parameter gradient of the full
/// head loss and central finite differences.
pub fn gradient_check(variant: ModelVariant, seed: u64) -> f64 {
    let mut rng = substream(seed, &format!("gradcheck/{variant}"));
    let model = Model::new(tiny_config(variant)).unwrap();
    let mut params = jittered_params(&model, &mut rng);
    let x = random_matrix(&mut rng, 6, 3, 1.0);
    let targets = random_targets(model.config(), &mut rng);

    params.zero_grad();
    let out = model.forward(&params, &x).unwrap();
    let t: Vec<Option<&[usize]>> = targets.iter().map(|t| Some(t.as_slice())).collect();
    let loss = weighted_head_loss(&out, &t).unwrap();
    model.backward(&out, &mut params, loss.logit_grads).unwrap();

    let h = 1e-5;
    let mut worst = 0.0f64;
    for ti in 0..params.len() {
        for vi in 0..params.tensors()[ti].len() {
            let analytic = params.tensors()[ti].grad()[vi];
            let orig = params.tensors()[ti].values()[vi];
            params.tensors_mut()[ti].values_mut()[vi] = orig + h;
            let up = full_loss(&model, &params, &x, &targets);
            params.tensors_mut()[ti].values_mut()[vi] = orig - h;
            let down = full_loss(&model, &params, &x, &targets);
            params.tensors_mut()[ti].values_mut()[vi] = orig;
            let numeric = (up - down) / (2.0 * h);
            let denom = analytic.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max((analytic - numeric).abs() / denom);
        }
    }
    worst
}
