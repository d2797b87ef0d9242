//! Cross-group feature fusion.
//!
//! For destination group `k`, the `K` branch features `F¹..Fᴷ` (each `B×C`)
//! are concatenated along channels and re-embedded by a learnable
//! `(K·C)×C` matrix, then batch-normalized. The matrix starts as a stack of
//! scaled identities, so a fresh layer computes a weighted sum of the
//! groups with weight 0.9 on its own group.

use crate::autodiff::{ParamGroup, Parameter, Primitive, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Initial weight a destination group puts on its own features.
pub const SELF_WEIGHT: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Batch normalization over `C` features with running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub scale: Parameter,
    pub shift: Parameter,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BatchNorm {
    /// Identity transform in eval mode: the running variance starts at
    /// `1 − ε` so that `sqrt(var + ε)` is exactly one.
    pub fn new(channels: usize) -> Self {
        Self {
            scale: Parameter::new(Tensor::full(&[channels], 1.0), ParamGroup::Fusion),
            shift: Parameter::new(Tensor::zeros(&[channels]), ParamGroup::Fusion),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0 - BN_EPS; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    /// Folds one batch's statistics into the running estimates.
    pub fn update_running(&mut self, stats: &BatchStats) {
        let b = stats.batch as f64;
        let correction = if stats.batch > 1 { b / (b - 1.0) } else { 1.0 };
        for j in 0..self.channels() {
            self.running_mean[j] =
                (1.0 - BN_MOMENTUM) * self.running_mean[j] + BN_MOMENTUM * stats.mean[j];
            self.running_var[j] =
                (1.0 - BN_MOMENTUM) * self.running_var[j] + BN_MOMENTUM * stats.var[j] * correction;
        }
    }

    pub fn apply(
        &self,
        tape: &mut Tape,
        x: Var,
        scale: Var,
        shift: Var,
        mode: Mode,
    ) -> Result<(Var, Option<BatchStats>)> {
        match mode {
            Mode::Train => {
                let y = tape.apply(
                    Primitive::BatchNormTrain { eps: BN_EPS },
                    &[x, scale, shift],
                )?;
                let (mean, var) = tape
                    .batch_stats(y)
                    .expect("train batch norm saves statistics");
                let stats = BatchStats {
                    mean: mean.to_vec(),
                    var: var.to_vec(),
                    batch: tape.shape(x)[0],
                };
                Ok((y, Some(stats)))
            }
            Mode::Eval => {
                let y = tape.apply(
                    Primitive::BatchNormEval {
                        mean: self.running_mean.clone(),
                        var: self.running_var.clone(),
                        eps: BN_EPS,
                    },
                    &[x, scale, shift],
                )?;
                Ok((y, None))
            }
        }
    }
}

/// Per-feature batch mean and biased variance from one training forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub batch: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionLayer {
    pub weight: Parameter,
    pub bn: BatchNorm,
    groups: usize,
    channels: usize,
    destination: usize,
}

/// Tape handles for one bound [`FusionLayer`].
#[derive(Clone, Copy, Debug)]
pub struct FusionVars {
    pub weight: Var,
    pub scale: Var,
    pub shift: Var,
}

/// Mixing weights `α_i^k` of a fresh layer for destination `k`.
pub fn initial_alphas(groups: usize, destination: usize) -> Vec<f64> {
    if groups == 1 {
        return vec![1.0];
    }
    let other = (1.0 - SELF_WEIGHT) / (groups - 1) as f64;
    (0..groups)
        .map(|i| if i == destination { SELF_WEIGHT } else { other })
        .collect()
}

pub fn init_fusion_weights(
    groups: usize,
    channels: usize,
    destination: usize,
) -> Result<FusionLayer> {
    if groups < 1 || channels < 1 || destination >= groups {
        return Err(Error::Config(format!(
            "fusion layer needs K ≥ 1, C ≥ 1 and destination < K, got K={groups}, C={channels}, k={destination}"
        )));
    }
    let alphas = initial_alphas(groups, destination);
    let rows = groups * channels;
    let mut w = vec![0.0; rows * channels];
    for (i, a) in alphas.iter().enumerate() {
        for c in 0..channels {
            w[(i * channels + c) * channels + c] = *a;
        }
    }
    Ok(FusionLayer {
        weight: Parameter::new(Tensor::matrix(rows, channels, w)?, ParamGroup::Fusion),
        bn: BatchNorm::new(channels),
        groups,
        channels,
        destination,
    })
}

impl FusionLayer {
    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn destination(&self) -> usize {
        self.destination
    }

    pub fn bind(&self, tape: &mut Tape) -> FusionVars {
        FusionVars {
            weight: self.weight.bind(tape),
            scale: self.bn.scale.bind(tape),
            shift: self.bn.shift.bind(tape),
        }
    }
}

/// `BN(concat(F¹..Fᴷ) · W)`; in train mode also returns the batch statistics
/// the caller should fold into the layer's running estimates.
pub fn fuse(
    tape: &mut Tape,
    features: &[Var],
    layer: &FusionLayer,
    vars: &FusionVars,
    mode: Mode,
) -> Result<(Var, Option<BatchStats>)> {
    if features.len() != layer.groups {
        return Err(Error::shape(
            "fuse",
            format!(
                "layer fuses {} groups, got {} features",
                layer.groups,
                features.len()
            ),
        ));
    }
    let expected = tape.shape(features[0]).to_vec();
    if expected.len() != 2 || expected[1] != layer.channels {
        return Err(Error::GroupShape {
            group: 0,
            expected: vec![expected.first().copied().unwrap_or(0), layer.channels],
            found: expected,
        });
    }
    for (g, &f) in features.iter().enumerate().skip(1) {
        if tape.shape(f) != expected.as_slice() {
            return Err(Error::GroupShape {
                group: g,
                expected,
                found: tape.shape(f).to_vec(),
            });
        }
    }
    let joined = if features.len() == 1 {
        features[0]
    } else {
        tape.concat(features)?
    };
    let mixed = tape.matmul(joined, vars.weight)?;
    layer.bn.apply(tape, mixed, vars.scale, vars.shift, mode)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.random_range(-2.0..2.0)).collect(),
        )
        .unwrap()
    }

    fn run_eval(layer: &FusionLayer, feats: &[Tensor]) -> Tensor {
        let mut tape = Tape::new();
        let vars = layer.bind(&mut tape);
        let fs: Vec<Var> = feats.iter().map(|f| tape.constant(f.clone())).collect();
        let (y, stats) = fuse(&mut tape, &fs, layer, &vars, Mode::Eval).unwrap();
        assert!(stats.is_none());
        tape.value(y).clone()
    }

    #[test]
    fn initial_blocks() {
        let a = initial_alphas(3, 1);
        assert!((a[0] - 0.05).abs() < 1e-15 && a[1] == 0.9 && (a[2] - 0.05).abs() < 1e-15);
        assert_eq!(initial_alphas(2, 0)[0], 0.9);
        assert!((initial_alphas(2, 0)[1] - 0.1).abs() < 1e-15);
        assert_eq!(initial_alphas(1, 0), vec![1.0]);
        for k in 1..8 {
            for d in 0..k {
                let s: f64 = initial_alphas(k, d).iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }

        let layer = init_fusion_weights(3, 2, 1).unwrap();
        let w = layer.weight.value.data();
        // rows (i·C + c), column c carries α_i
        assert!((w[0] - 0.05).abs() < 1e-15 && w[1] == 0.0);
        assert_eq!(w[2 * 2], 0.9);
        assert_eq!(w[3 * 2 + 1], 0.9);
        assert!((w[5 * 2 + 1] - 0.05).abs() < 1e-15);
        assert_eq!(layer.weight.group, ParamGroup::Fusion);
    }

    #[test]
    fn invalid_configuration() {
        assert!(init_fusion_weights(0, 4, 0).is_err());
        assert!(init_fusion_weights(2, 0, 0).is_err());
        assert!(init_fusion_weights(2, 4, 2).is_err());
    }

    #[test]
    fn fresh_layer_is_the_weighted_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for k in [2usize, 3, 5] {
            for dest in 0..k {
                let layer = init_fusion_weights(k, 6, dest).unwrap();
                let feats: Vec<Tensor> = (0..k).map(|_| random(&mut rng, &[4, 6])).collect();
                let out = run_eval(&layer, &feats);
                let alphas = initial_alphas(k, dest);
                for idx in 0..24 {
                    let expect: f64 = (0..k).map(|i| alphas[i] * feats[i].data()[idx]).sum();
                    assert!((out.data()[idx] - expect).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn single_group_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let layer = init_fusion_weights(1, 5, 0).unwrap();
        let f = random(&mut rng, &[3, 5]);
        let out = run_eval(&layer, std::slice::from_ref(&f));
        for (a, b) in out.data().iter().zip(f.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_features_pass_through_any_convex_mix() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (k, c) = (4, 3);
        let mut layer = init_fusion_weights(k, c, 2).unwrap();
        // replace α with a random row-stochastic mix
        let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.1..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let w = layer.weight.value.data_mut();
        w.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..k {
            for ch in 0..c {
                w[(i * c + ch) * c + ch] = raw[i] / total;
            }
        }
        let f = random(&mut rng, &[5, c]);
        let out = run_eval(&layer, &vec![f.clone(); k]);
        for (a, b) in out.data().iter().zip(f.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mismatched_group_is_named() {
        let layer = init_fusion_weights(3, 4, 0).unwrap();
        let mut tape = Tape::new();
        let vars = layer.bind(&mut tape);
        let a = tape.constant(Tensor::zeros(&[2, 4]));
        let b = tape.constant(Tensor::zeros(&[3, 4]));
        let err = fuse(&mut tape, &[a, a, b], &layer, &vars, Mode::Eval).unwrap_err();
        assert!(matches!(err, Error::GroupShape { group: 2, .. }), "{err}");
    }

    #[test]
    fn output_shape_matches_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for (k, c, b) in [(1, 1, 1), (2, 3, 1), (3, 2, 7), (5, 4, 2)] {
            let layer = init_fusion_weights(k, c, k - 1).unwrap();
            let feats: Vec<Tensor> = (0..k).map(|_| random(&mut rng, &[b, c])).collect();
            assert_eq!(run_eval(&layer, &feats).shape(), &[b, c]);
        }
    }

    #[test]
    fn train_mode_reports_statistics_and_updates_running_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut layer = init_fusion_weights(2, 3, 0).unwrap();
        let mut tape = Tape::new();
        let vars = layer.bind(&mut tape);
        let fs: Vec<Var> = (0..2)
            .map(|_| tape.constant(random(&mut rng, &[8, 3])))
            .collect();
        let (y, stats) = fuse(&mut tape, &fs, &layer, &vars, Mode::Train).unwrap();
        let stats = stats.unwrap();
        assert_eq!(stats.batch, 8);
        // normalized output has zero batch mean
        for j in 0..3 {
            let m: f64 = tape.value(y).data().chunks(3).map(|r| r[j]).sum::<f64>() / 8.0;
            assert!(m.abs() < 1e-12);
        }
        let before = layer.bn.running_mean.clone();
        layer.bn.update_running(&stats);
        for j in 0..3 {
            assert!(
                (layer.bn.running_mean[j] - (0.9 * before[j] + 0.1 * stats.mean[j])).abs() < 1e-15
            );
        }
    }
}
