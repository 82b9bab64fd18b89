//! Central-difference gradient checking.
//!
//! The numeric side only ever calls the forward pass, so it stays
//! independent of the backward code it is judging. Large inputs are
//! spot-checked at a deterministic sample of indices.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Scalar, Tape, Tensor, ValueId};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Perturbation step for the central difference.
    pub step: f64,
    /// Maximum accepted relative error.
    pub tolerance: f64,
    /// Floor for the relative-error denominator, guarding near-zero grads.
    pub denom_floor: f64,
    /// How many elements of each input to probe (0 = all).
    pub samples_per_input: usize,
    /// Seed for sample selection.
    pub seed: u64,
}

impl GradCheckConfig {
    /// Double-precision defaults: step 1e-5, relative tolerance 1e-4.
    pub fn double_precision() -> Self {
        GradCheckConfig {
            step: 1e-5,
            tolerance: 1e-4,
            denom_floor: 1e-6,
            samples_per_input: 0,
            seed: 0,
        }
    }

    /// Single-precision defaults: wider step and 1e-2 tolerance.
    pub fn single_precision() -> Self {
        GradCheckConfig {
            step: 1e-3,
            tolerance: 1e-2,
            denom_floor: 1e-4,
            samples_per_input: 0,
            seed: 0,
        }
    }

    pub fn with_samples(mut self, samples: usize, seed: u64) -> Self {
        self.samples_per_input = samples;
        self.seed = seed;
        self
    }
}

/// Worst mismatch found by a gradient check.
#[derive(Debug)]
pub struct GradMismatch {
    pub input_index: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

impl std::fmt::Display for GradMismatch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "input {} element {}: analytic {:.6e} vs numeric {:.6e} (rel {:.3e})",
            self.input_index, self.element, self.analytic, self.numeric, self.rel_error
        )
    }
}

/// Compare tape gradients against central differences for a scalar loss
/// built by `loss_fn` from the given inputs. Returns the worst offending
/// element on failure.
pub fn check_gradients<T, F>(
    inputs: &[Tensor<T>],
    cfg: GradCheckConfig,
    loss_fn: F,
) -> Result<f64, GradMismatch>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[ValueId]) -> ValueId,
{
    let eval = |tensors: &[Tensor<T>]| -> f64 {
        let mut tape = Tape::new();
        let ids: Vec<ValueId> = tensors.iter().map(|t| tape.input(t.clone())).collect();
        let loss = loss_fn(&mut tape, &ids);
        tape.value(loss).item().to_f64().unwrap()
    };

    // analytic pass
    let mut tape = Tape::new();
    let ids: Vec<ValueId> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let loss = loss_fn(&mut tape, &ids);
    tape.backward(loss).expect("gradient check backward failed");
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .zip(inputs)
        .map(|(&id, t)| match tape.grad(id) {
            Some(g) => g.iter().map(|v| v.to_f64().unwrap()).collect(),
            None => vec![0.0; t.len()],
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut worst = 0.0f64;
    let mut scratch: Vec<Tensor<T>> = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let indices: Vec<usize> = if cfg.samples_per_input == 0
            || input.len() <= cfg.samples_per_input
        {
            (0..input.len()).collect()
        } else {
            let mut all: Vec<usize> = (0..input.len()).collect();
            all.shuffle(&mut rng);
            all.truncate(cfg.samples_per_input);
            all
        };
        for &e in &indices {
            let original = scratch[k].data[e];
            let h = T::from_f64(cfg.step).unwrap();
            scratch[k].data[e] = original + h;
            let plus = eval(&scratch);
            scratch[k].data[e] = original - h;
            let minus = eval(&scratch);
            scratch[k].data[e] = original;
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let a = analytic[k][e];
            let denom = a.abs().max(numeric.abs()).max(cfg.denom_floor);
            let rel = (a - numeric).abs() / denom;
            worst = worst.max(rel);
            if rel > cfg.tolerance {
                return Err(GradMismatch {
                    input_index: k,
                    element: e,
                    analytic: a,
                    numeric,
                    rel_error: rel,
                });
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;
    use rand::Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: Shape) -> Tensor<f64> {
        let data = (0..shape.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::new(shape, data)
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let input = rand_tensor(&mut rng, Shape::new(2, 5, 4, 3));
            let weight = rand_tensor(&mut rng, Shape::new(3, 3, 3, 4));
            let bias = rand_tensor(&mut rng, Shape::new(1, 1, 1, 4));
            let proj = rand_tensor(&mut rng, Shape::new(2, 5, 4, 4));
            check_gradients(
                &[input, weight, bias],
                GradCheckConfig::double_precision(),
                |tape, ids| {
                    let out = tape.conv2d(ids[0], ids[1], ids[2], 1, 1);
                    let p = tape.input(proj.clone());
                    let prod = tape.mul(out, p);
                    tape.sum(prod)
                },
            )
            .unwrap_or_else(|m| panic!("seed {seed}: {m}"));
        }
    }

    #[test]
    fn conv_strided_gradients() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let input = rand_tensor(&mut rng, Shape::new(1, 6, 6, 2));
            let weight = rand_tensor(&mut rng, Shape::new(3, 3, 2, 3));
            let bias = rand_tensor(&mut rng, Shape::new(1, 1, 1, 3));
            check_gradients(
                &[input, weight, bias],
                GradCheckConfig::double_precision(),
                |tape, ids| {
                    let out = tape.conv2d(ids[0], ids[1], ids[2], 2, 1);
                    tape.sum(out)
                },
            )
            .unwrap_or_else(|m| panic!("seed {seed}: {m}"));
        }
    }

    #[test]
    fn conv_weight_grad_of_summed_output_is_input_correlation() {
        // with loss = sum(conv(x, w)), dL/dw[ky,kx,ic,oc] is the correlation
        // of the input with an all-ones upstream signal.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let input = rand_tensor(&mut rng, Shape::new(1, 4, 4, 1));
        let weight = rand_tensor(&mut rng, Shape::new(3, 3, 1, 1));
        let bias = Tensor::zeros(Shape::new(1, 1, 1, 1));
        check_gradients(
            &[input.clone(), weight, bias],
            GradCheckConfig::double_precision(),
            |tape, ids| {
                let out = tape.conv2d(ids[0], ids[1], ids[2], 1, 1);
                tape.sum(out)
            },
        )
        .unwrap();
    }

    #[test]
    fn transposed_conv_gradients() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
            let input = rand_tensor(&mut rng, Shape::new(2, 3, 4, 4));
            let weight = rand_tensor(&mut rng, Shape::new(2, 2, 2, 4));
            let bias = rand_tensor(&mut rng, Shape::new(1, 1, 1, 2));
            let proj_shape = Shape::new(2, 6, 8, 2);
            let proj = rand_tensor(&mut rng, proj_shape);
            check_gradients(
                &[input, weight, bias],
                GradCheckConfig::double_precision(),
                |tape, ids| {
                    let out = tape.conv_transpose2d(ids[0], ids[1], ids[2], 2);
                    let p = tape.input(proj.clone());
                    let prod = tape.mul(out, p);
                    tape.sum(prod)
                },
            )
            .unwrap_or_else(|m| panic!("seed {seed}: {m}"));
        }
    }

    #[test]
    fn avg_pool_gradients_including_replicate_pad() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
            // 5x7 forces replicate padding for k=4
            let input = rand_tensor(&mut rng, Shape::new(1, 5, 7, 2));
            let proj = rand_tensor(&mut rng, Shape::new(1, 2, 2, 2));
            check_gradients(
                &[input],
                GradCheckConfig::double_precision(),
                |tape, ids| {
                    let out = tape.avg_pool(ids[0], 4);
                    let p = tape.input(proj.clone());
                    let prod = tape.mul(out, p);
                    tape.sum(prod)
                },
            )
            .unwrap_or_else(|m| panic!("seed {seed}: {m}"));
        }
    }

    #[test]
    fn upsample_gradients() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
            let input = rand_tensor(&mut rng, Shape::new(1, 3, 4, 2));
            let proj = rand_tensor(&mut rng, Shape::new(1, 12, 16, 2));
            check_gradients(
                &[input],
                GradCheckConfig::double_precision(),
                |tape, ids| {
                    let out = tape.upsample_bilinear(ids[0], 4);
                    let p = tape.input(proj.clone());
                    let prod = tape.mul(out, p);
                    tape.sum(prod)
                },
            )
            .unwrap_or_else(|m| panic!("seed {seed}: {m}"));
        }
    }

    #[test]
    fn instance_norm_gradients() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
            let input = rand_tensor(&mut rng, Shape::new(2, 4, 3, 2));
            let proj = rand_tensor(&mut rng, Shape::new(2, 4, 3, 2));
            check_gradients(
                &[input],
                GradCheckConfig::double_precision(),
                |tape, ids| {
                    let out = tape.instance_norm(ids[0], 1e-5);
                    let p = tape.input(proj.clone());
                    let prod = tape.mul(out, p);
                    tape.sum(prod)
                },
            )
            .unwrap_or_else(|m| panic!("seed {seed}: {m}"));
        }
    }

    #[test]
    fn softplus_and_activation_gradients() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(600 + seed);
            let input = rand_tensor(&mut rng, Shape::new(1, 4, 4, 3));
            let proj = rand_tensor(&mut rng, Shape::new(1, 4, 4, 3));
            check_gradients(
                &[input],
                GradCheckConfig::double_precision(),
                |tape, ids| {
                    let a = tape.softplus(ids[0]);
                    let b = tape.leaky_relu(a, 0.2);
                    let p = tape.input(proj.clone());
                    let prod = tape.mul(b, p);
                    tape.sum(prod)
                },
            )
            .unwrap_or_else(|m| panic!("seed {seed}: {m}"));
        }
    }

    #[test]
    fn loss_gradients() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(700 + seed);
            let pred = rand_tensor(&mut rng, Shape::new(1, 4, 4, 2));
            let target = rand_tensor(&mut rng, Shape::new(1, 4, 4, 2));
            check_gradients(
                &[pred],
                GradCheckConfig::double_precision(),
                |tape, ids| {
                    let l1 = tape.l1_loss(ids[0], &target);
                    let asym = tape.asymmetric_sq_loss(ids[0], &target, 0.25);
                    let weighted = tape.scale(asym, 0.05);
                    tape.add(l1, weighted)
                },
            )
            .unwrap_or_else(|m| panic!("seed {seed}: {m}"));
        }
    }
}
