//! Finite-difference oracle for the toy-model gradients.

use evmae_core::masking::{sample_tube_mask, PatchGrid, TubeMask};
use evmae_core::metrics::sequence_loss;
use evmae_core::toy::{ToyModel, ToyModelConfig};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
// Below this the difference is pure rounding of the finite-difference quotient.
pub const ABS_FLOOR: f64 = 1e-9;

fn forward_loss(model: &mut ToyModel, inputs: &[Array3<f64>], targets: &[Array2<f64>], mask: &TubeMask) -> f64 {
    let preds = model.predict_sequence(inputs).unwrap();
    sequence_loss(&preds, targets, mask, &model.grid).unwrap().loss
}

pub struct Problem {
    pub model: ToyModel,
    pub inputs: Vec<Array3<f64>>,
    pub targets: Vec<Array2<f64>>,
    pub mask: TubeMask,
}

pub fn problem(seed: u64, stages: usize, recurrent: bool, context: bool) -> Problem {
    let grid = PatchGrid::new(6, 6, 3).unwrap();
    let config = ToyModelConfig {
        patch: 3,
        embed_dim: 3,
        recurrent,
        neighbor_context: context,
        seed,
    };
    let channels = 3;
    let mut model = ToyModel::new(config, channels, grid).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    // Larger weights than the default init so tanh is exercised off its linear range.
    for v in model.params_mut() {
        *v *= 3.0;
    }
    let mask = sample_tube_mask(&grid, 0.5, seed as u32).unwrap();
    let inputs: Vec<Array3<f64>> = (0..stages)
        .map(|_| {
            let raw = Array3::from_shape_fn((channels - 1, 6, 6), |_| {
                if rng.random::<f64>() < 0.4 {
                    rng.random_range(0.0..4.0f64).floor()
                } else {
                    0.0
                }
            });
            let x32 = raw.mapv(|v| v as f32);
            evmae_core::masking::apply_mask(&x32, &mask, &grid).unwrap().mapv(f64::from)
        })
        .collect();
    let targets = (0..stages)
        .map(|_| Array2::from_shape_fn((6, 6), |_| rng.random_range(-1.0..1.0)))
        .collect();
    Problem { model, inputs, targets, mask }
}

/// Returns the worst relative error over parameters with non-negligible gradients.
pub fn check(mut p: Problem) -> f64 {
    let loss = p.model.backward_sequence(&p.inputs, &p.targets, &p.mask).unwrap();
    let analytic = p.model.grads().to_vec();
    assert!((loss - forward_loss(&mut p.model, &p.inputs, &p.targets, &p.mask)).abs() < 1e-12);

    let mut worst = 0.0f64;
    for i in 0..analytic.len() {
        let orig = p.model.params()[i];
        p.model.params_mut()[i] = orig + STEP;
        let up = forward_loss(&mut p.model, &p.inputs, &p.targets, &p.mask);
        p.model.params_mut()[i] = orig - STEP;
        let down = forward_loss(&mut p.model, &p.inputs, &p.targets, &p.mask);
        p.model.params_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * STEP);
        let diff = (analytic[i] - numeric).abs();
        let scale = analytic[i].abs().max(numeric.abs());
        let rel = if scale > 0.0 { diff / scale } else { 0.0 };
        assert!(
            diff <= ABS_FLOOR || rel < REL_TOL,
            "param {i}: analytic {} vs numeric {numeric} (rel {rel:.3e})",
            analytic[i]
        );
        // Relative error is only informative where the floor is small against the gradient.
        if scale >= ABS_FLOOR / REL_TOL {
            worst = worst.max(rel);
        }
    }
    worst
}
