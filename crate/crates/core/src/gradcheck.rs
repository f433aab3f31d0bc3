//! Whole-model gradient verification: reverse-mode gradients of a scalar
//! probe loss against central finite differences, for weights and inputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::models::{build, ArchKind, ArchitectureConfig, ModelError, ModelParams, OutputMode, SplitInputs};
use crate::tensor::{Activation, Tape, Tensor5};

pub const FD_STEP: f64 = 1e-5;
/// Components smaller than this fraction of the largest gradient are compared
/// against it instead of against themselves; below it the central difference
/// is dominated by rounding.
pub const RELATIVE_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub kind: ArchKind,
    pub max_rel_weights: f64,
    pub max_rel_inputs: f64,
    pub checked: usize,
}

impl GradcheckReport {
    pub fn worst(&self) -> f64 {
        self.max_rel_weights.max(self.max_rel_inputs)
    }
}

/// Small randomly drawn problem for one architecture.
pub struct Probe {
    pub model: ModelParams,
    pub inputs: SplitInputs,
    /// Weights of the probe loss `Σ w · output`.
    pub weights: Tensor5,
}

fn random_tensor(dims: [usize; 5], rng: &mut ChaCha8Rng) -> Tensor5 {
    let n = dims.iter().product();
    Tensor5::from_dims(dims, (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect()).expect("valid dims")
}

impl Probe {
    pub fn draw(kind: ArchKind, seed: u64) -> Result<Self, ModelError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = ArchitectureConfig {
            kind,
            encoder_layers: rng.gen_range(1..=2),
            decoder_layers: rng.gen_range(1..=2),
            hidden: rng.gen_range(3..=5),
            // smooth activation: finite differences across a kink are meaningless
            activation: Activation::Tanh,
            output_mode: OutputMode::Joint,
            ..ArchitectureConfig::default()
        };
        let model = build(&cfg, rng.gen())?;
        let [m, c, o, n] = [rng.gen_range(1..=2), rng.gen_range(1..=2), rng.gen_range(1..=2), rng.gen_range(1..=3)];
        let inputs = SplitInputs {
            p: random_tensor([m, 1, 1, 1, 5], &mut rng),
            cl: random_tensor([1, c, 1, 1, 1], &mut rng),
            t: random_tensor([1, 1, o, 1, 1], &mut rng),
            q: random_tensor([m, 1, 1, n, 3], &mut rng),
        };
        let weights = random_tensor([m, c, o, n, model.config.outputs()], &mut rng);
        Ok(Self { model, inputs, weights })
    }

    pub fn loss(&self, model: &ModelParams, inputs: &SplitInputs) -> Result<f64, ModelError> {
        Ok(model.predict(inputs)?.mul(&self.weights)?.sum())
    }

    /// Analytic `(weight gradients, input gradients [p, cl, t, q])`.
    pub fn gradients(&self) -> Result<(Vec<Vec<f64>>, [Vec<f64>; 4]), ModelError> {
        let mut tape = Tape::new();
        let bound = self.model.bind(&mut tape);
        let vars = self.inputs.record(&mut tape);
        let out = self.model.forward(&mut tape, &bound, &vars)?;
        let w = tape.leaf(self.weights.clone());
        let prod = tape.mul(out, w)?;
        let loss = tape.sum(prod);
        let mut grads = tape.backward(loss)?;
        let inputs = [grads.take(vars.p), grads.take(vars.cl), grads.take(vars.t), grads.take(vars.q)];
        Ok((bound.collect(&mut grads), inputs))
    }
}

fn inputs_mut(inputs: &mut SplitInputs) -> [&mut Tensor5; 4] {
    [&mut inputs.p, &mut inputs.cl, &mut inputs.t, &mut inputs.q]
}

fn gradient_scale(pairs: &[(f64, f64)]) -> f64 {
    pairs.iter().fold(0.0_f64, |m, (a, n)| m.max(a.abs()).max(n.abs()))
}

fn max_relative(pairs: &[(f64, f64)], scale: f64) -> f64 {
    let floor = (RELATIVE_FLOOR * scale).max(f64::MIN_POSITIVE);
    pairs.iter().map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor)).fold(0.0, f64::max)
}

/// Every weight and every input coordinate of one drawn probe.
pub fn check_probe(probe: &Probe) -> Result<GradcheckReport, ModelError> {
    let (wg, ig) = probe.gradients()?;
    let mut model = probe.model.clone();
    let mut weight_pairs = Vec::new();
    for (block, grads) in wg.iter().enumerate() {
        for (i, &a) in grads.iter().enumerate() {
            let orig = model.params_mut()[block][i];
            model.params_mut()[block][i] = orig + FD_STEP;
            let up = probe.loss(&model, &probe.inputs)?;
            model.params_mut()[block][i] = orig - FD_STEP;
            let down = probe.loss(&model, &probe.inputs)?;
            model.params_mut()[block][i] = orig;
            weight_pairs.push((a, (up - down) / (2.0 * FD_STEP)));
        }
    }
    let mut inputs = probe.inputs.clone();
    let mut input_pairs = Vec::new();
    for (slot, grads) in ig.iter().enumerate() {
        for (i, &a) in grads.iter().enumerate() {
            let orig = inputs_mut(&mut inputs)[slot].values()[i];
            inputs_mut(&mut inputs)[slot].values_mut()[i] = orig + FD_STEP;
            let up = probe.loss(&probe.model, &inputs)?;
            inputs_mut(&mut inputs)[slot].values_mut()[i] = orig - FD_STEP;
            let down = probe.loss(&probe.model, &inputs)?;
            inputs_mut(&mut inputs)[slot].values_mut()[i] = orig;
            input_pairs.push((a, (up - down) / (2.0 * FD_STEP)));
        }
    }
    // one scale per probe: weights and inputs share the loss whose rounding sets the noise
    let scale = gradient_scale(&weight_pairs).max(gradient_scale(&input_pairs));
    Ok(GradcheckReport {
        kind: probe.model.config.kind,
        max_rel_weights: max_relative(&weight_pairs, scale),
        max_rel_inputs: max_relative(&input_pairs, scale),
        checked: weight_pairs.len() + input_pairs.len(),
    })
}

/// Worst case over `draws` probes of one architecture.
pub fn check_architecture(kind: ArchKind, draws: usize, seed: u64) -> Result<GradcheckReport, ModelError> {
    let mut worst = GradcheckReport { kind, max_rel_weights: 0.0, max_rel_inputs: 0.0, checked: 0 };
    for d in 0..draws {
        let r = check_probe(&Probe::draw(kind, crate::seed::derive_seed(seed, d as u64))?)?;
        worst.max_rel_weights = worst.max_rel_weights.max(r.max_rel_weights);
        worst.max_rel_inputs = worst.max_rel_inputs.max(r.max_rel_inputs);
        worst.checked += r.checked;
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_architecture_passes() {
        for kind in ArchKind::ALL {
            let r = check_architecture(kind, 5, 3).unwrap();
            assert!(r.worst() < 1e-6, "{r:?}");
            assert!(r.checked > 0);
        }
    }

    #[test]
    fn corrupted_gradient_is_caught() {
        let pairs = [(1.0, 1.0), (0.5, 0.5 + 1e-3)];
        assert!(max_relative(&pairs, gradient_scale(&pairs)) > 1e-6);
        assert_eq!(max_relative(&[(2.0, 2.0)], 2.0), 0.0);
        // tiny coordinates are judged against the probe scale
        assert!(max_relative(&[(1e-9, 2e-9)], 1.0) < 1e-4);
    }
}
