//! Optimization and evaluation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamGroup, Parameter, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::fusion::Mode;
use crate::geometry::{joint_errors, procrustes_align, recover_3d, Pose2p5D};
use crate::model::{model_forward, predict, ModelParams, SelectorInput};
use crate::selector::{harden, sample_gumbel, TemperatureSchedule};
use crate::synthdata::SyntheticSample;

/// Step size per parameter group.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearningRates {
    pub selector: f64,
    pub fusion: f64,
    pub backbone: f64,
}

impl LearningRates {
    /// Rates tuned for a pretrained full-size backbone.
    pub const REFERENCE: Self = Self {
        selector: 1e-1,
        fusion: 1e-2,
        backbone: 1e-4,
    };

    pub fn get(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Selector => self.selector,
            ParamGroup::Fusion => self.fusion,
            ParamGroup::Backbone => self.backbone,
        }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            selector: self.selector * factor,
            fusion: self.fusion * factor,
            backbone: self.backbone * factor,
        }
    }
}

/// [`LearningRates::REFERENCE`] divided by ten, which keeps small randomly
/// initialized networks stable.
impl Default for LearningRates {
    fn default() -> Self {
        Self::REFERENCE.scaled(0.1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    /// Weight of the relative-depth term in the loss.
    pub beta: f64,
    pub lr: LearningRates,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub schedule: TemperatureSchedule,
    pub seed: u64,
    /// Steps per loss-trace entry.
    pub log_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch: 32,
            beta: 20.0,
            lr: LearningRates::default(),
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            schedule: TemperatureSchedule::default(),
            seed: 0,
            log_interval: 100,
        }
    }
}

impl TrainConfig {
    /// Learning rates may be zero (frozen group) but not negative.
    pub fn validate(&self) -> Result<()> {
        let lr_ok = ParamGroup::ALL.iter().all(|&g| {
            let r = self.lr.get(g);
            r >= 0.0 && r.is_finite()
        });
        if !lr_ok {
            return Err(Error::Config(format!(
                "learning rates must be non-negative, got {:?}",
                self.lr
            )));
        }
        if !(self.beta > 0.0) {
            return Err(Error::Config(format!(
                "β must be positive, got {}",
                self.beta
            )));
        }
        if self.batch < 1 || self.log_interval < 1 {
            return Err(Error::Config(
                "batch size and log interval must be at least 1".into(),
            ));
        }
        let b1 = (0.0..1.0).contains(&self.adam_beta1);
        let b2 = (0.0..1.0).contains(&self.adam_beta2);
        if !(b1 && b2 && self.adam_eps > 0.0) {
            return Err(Error::Config(
                "Adam needs β₁, β₂ in [0, 1) and ε > 0".into(),
            ));
        }
        self.schedule.validate()
    }
}

/// Adam moments, one pair per parameter in [`ModelParams::parameters`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Parameter>) -> Self {
        let (m, v) = params
            .into_iter()
            .map(|p| {
                (
                    Tensor::zeros(p.value.shape()),
                    Tensor::zeros(p.value.shape()),
                )
            })
            .unzip();
        Self { m, v, step: 0 }
    }
}

/// Moments below the smallest normal `f64` are stored as zero. A moment that
/// decays through the subnormal range would otherwise slow every step by an
/// order of magnitude while moving its parameter by less than 1e-300.
fn flush_subnormal(x: f64) -> f64 {
    if x.abs() < f64::MIN_POSITIVE {
        0.0
    } else {
        x
    }
}

/// One bias-corrected Adam update from the accumulated `grad` of each
/// parameter, with the step size of the parameter's group.
pub fn adam_step(
    params: &mut [&mut Parameter],
    state: &mut AdamState,
    config: &TrainConfig,
) -> Result<()> {
    if params.len() != state.m.len() {
        return Err(Error::shape(
            "adam_step",
            format!(
                "{} parameters but {} moment slots",
                params.len(),
                state.m.len()
            ),
        ));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (config.adam_beta1, config.adam_beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for ((p, m), v) in params.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        if m.shape() != p.value.shape() {
            return Err(Error::shape(
                "adam_step",
                "moment shape differs from its parameter",
            ));
        }
        let lr = config.lr.get(p.group);
        let Parameter { value, grad, .. } = &mut **p;
        let (x, g) = (value.data_mut(), grad.data());
        let (m, v) = (m.data_mut(), v.data_mut());
        for i in 0..x.len() {
            m[i] = flush_subnormal(b1 * m[i] + (1.0 - b1) * g[i]);
            v[i] = flush_subnormal(b2 * v[i] + (1.0 - b2) * g[i] * g[i]);
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            x[i] -= lr * m_hat / (v_hat.sqrt() + config.adam_eps);
        }
    }
    Ok(())
}

/// Mean over the batch of `Σ_i |Δu| + |Δv| + β·|Δz_rel|` for `B×N×3` poses.
pub fn pose_loss(tape: &mut Tape, pred: Var, gt: Var, beta: f64) -> Result<Var> {
    let shape = tape.shape(pred).to_vec();
    if tape.shape(gt) != shape.as_slice() || shape.len() != 3 || shape[2] != 3 {
        return Err(Error::shape(
            "pose_loss",
            format!(
                "prediction {:?} and target {:?} must be equal B×N×3",
                shape,
                tape.shape(gt)
            ),
        ));
    }
    let diff = tape.sub(pred, gt)?;
    let abs = tape.abs(diff)?;
    let w = tape.constant(Tensor::vector(vec![1.0, 1.0, beta]));
    let wb = tape.broadcast(w, &shape)?;
    let weighted = tape.mul(abs, wb)?;
    let total = tape.sum(weighted)?;
    tape.scale(total, 1.0 / shape[0] as f64)
}

/// Stacks sample images into `B×side²`.
pub fn image_batch(samples: &[&SyntheticSample]) -> Result<Tensor> {
    let len = samples.first().map_or(0, |s| s.image.len());
    let mut data = Vec::with_capacity(samples.len() * len);
    for s in samples {
        if s.image.len() != len {
            return Err(Error::shape(
                "image_batch",
                "samples have different image sizes",
            ));
        }
        data.extend(s.image.iter().map(|&p| p as f64));
    }
    Tensor::new(vec![samples.len(), len], data)
}

/// Stacks 2.5D targets into `B×N×3`.
pub fn target_batch(samples: &[&SyntheticSample]) -> Result<Tensor> {
    let n = samples.first().map_or(0, |s| s.pose_2p5d.joints.len());
    let mut data = Vec::with_capacity(samples.len() * n * 3);
    for s in samples {
        if s.pose_2p5d.joints.len() != n {
            return Err(Error::shape(
                "target_batch",
                "samples have different joint counts",
            ));
        }
        data.extend(s.pose_2p5d.joints.iter().flatten());
    }
    Tensor::new(vec![samples.len(), n, 3], data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    /// `(steps completed, mean loss over the interval)`.
    pub trace: Vec<(usize, f64)>,
}

/// Trains in place. Batches are drawn with replacement; the batch indices
/// and selector noise come from one stream seeded by `config.seed`.
pub fn train(
    params: &mut ModelParams,
    data: &[SyntheticSample],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    train_with(params, data, config, |_, _| {})
}

/// [`train`] with a callback invoked on every trace entry.
pub fn train_with(
    params: &mut ModelParams,
    data: &[SyntheticSample],
    config: &TrainConfig,
    mut on_log: impl FnMut(usize, f64),
) -> Result<TrainOutcome> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let cfg = params.config.clone();
    if data[0].pose_2p5d.joints.len() != cfg.joints || data[0].image.len() != cfg.input_len() {
        return Err(Error::ConfigMismatch(format!(
            "data has {} joints and {} pixels, model expects {} and {}",
            data[0].pose_2p5d.joints.len(),
            data[0].image.len(),
            cfg.joints,
            cfg.input_len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = AdamState::new(params.parameters().into_iter().map(|(_, p)| p));
    let mut trace = Vec::new();
    let mut running = 0.0;
    let mut since = 0;
    for step in 0..config.steps {
        let batch: Vec<&SyntheticSample> = (0..config.batch)
            .map(|_| &data[rng.random_range(0..data.len())])
            .collect();
        let noise = sample_gumbel(&mut rng, cfg.joints, cfg.groups);
        let tau = config.schedule.temperature_at(step);
        let non_finite = |e: Error| match e {
            Error::NonFinite { op } => Error::NonFiniteLoss {
                step,
                detail: format!("{op} produced a non-finite value"),
            },
            other => other,
        };

        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, true);
        let x = tape.constant(image_batch(&batch)?);
        let y = tape.constant(target_batch(&batch)?);
        let out = model_forward(
            &mut tape,
            params,
            &bound,
            x,
            Mode::Train,
            SelectorInput::Relaxed { tau, noise: &noise },
        )
        .map_err(non_finite)?;
        let loss = pose_loss(&mut tape, out.pose, y, config.beta).map_err(non_finite)?;
        let value = tape.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                detail: format!("loss is {value}"),
            });
        }
        let grads = tape.backward(loss)?;
        let vars = bound.vars();
        let mut ps = params.parameters_mut();
        for (p, v) in ps.iter_mut().zip(&vars) {
            p.zero_grad();
            p.accumulate(&grads, *v);
        }
        adam_step(&mut ps, &mut adam, config)?;
        params.apply_bn_updates(&out.bn_updates);

        running += value;
        since += 1;
        if (step + 1) % config.log_interval == 0 || step + 1 == config.steps {
            let mean = running / since as f64;
            trace.push((step + 1, mean));
            on_log(step + 1, mean);
            running = 0.0;
            since = 0;
        }
    }
    Ok(TrainOutcome { trace })
}

/// Errors pooled over joints for one alignment variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorSummary {
    pub mean_epe_mm: f64,
    pub median_epe_mm: f64,
    pub auc: f64,
    pub pck: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mean_epe_mm: f64,
    pub median_epe_mm: f64,
    pub auc: f64,
    /// `(threshold mm, fraction of joints within it)`.
    pub pck: Vec<(f64, f64)>,
    /// Adjusted Rand index of the hardened selector against the planted groups.
    pub ari: f64,
    pub samples: usize,
    pub groups: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aligned: Option<ErrorSummary>,
}

/// Evenly spaced thresholds `start, start+step, …` up to `end` inclusive.
pub fn threshold_range(start: f64, end: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0 && end >= start && start >= 0.0 && end.is_finite()) {
        return Err(Error::Config(format!(
            "bad threshold range {start}:{end}:{step}"
        )));
    }
    let count = ((end - start) / step + 1e-9).floor() as usize + 1;
    Ok((0..count).map(|i| start + i as f64 * step).collect())
}

/// Default grid: 20 to 50 mm in 0.5 mm steps.
pub fn default_thresholds() -> Vec<f64> {
    threshold_range(20.0, 50.0, 0.5).expect("valid range")
}

fn check_thresholds(thresholds: &[f64]) -> Result<()> {
    if thresholds.is_empty() || thresholds.windows(2).any(|w| !(w[1] > w[0])) || thresholds[0] < 0.0
    {
        return Err(Error::Config(
            "thresholds must be non-negative and strictly increasing".into(),
        ));
    }
    Ok(())
}

/// Fraction of errors at or below each threshold.
pub fn pck_curve(errors: &[f64], thresholds: &[f64]) -> Vec<(f64, f64)> {
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len().max(1) as f64;
    thresholds
        .iter()
        .map(|&t| (t, sorted.partition_point(|&e| e <= t) as f64 / n))
        .collect()
}

/// Trapezoidal area under the curve divided by the threshold span; a
/// single-point curve returns its value.
pub fn auc(curve: &[(f64, f64)]) -> f64 {
    match curve {
        [] => 0.0,
        [(_, p)] => *p,
        _ => {
            let area: f64 = curve
                .windows(2)
                .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
                .sum();
            area / (curve[curve.len() - 1].0 - curve[0].0)
        }
    }
}

/// Lower median.
pub fn lower_median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted[(sorted.len() - 1) / 2]
}

pub fn summarize(errors: &[f64], thresholds: &[f64]) -> Result<ErrorSummary> {
    check_thresholds(thresholds)?;
    if errors.is_empty() {
        return Err(Error::Config("no errors to summarize".into()));
    }
    let pck = pck_curve(errors, thresholds);
    Ok(ErrorSummary {
        mean_epe_mm: errors.iter().sum::<f64>() / errors.len() as f64,
        median_epe_mm: lower_median(errors),
        auc: auc(&pck),
        pck,
    })
}

fn choose2(n: u64) -> f64 {
    (n * n.saturating_sub(1)) as f64 / 2.0
}

/// Pair-counting adjusted Rand index. Two single-cluster partitions
/// (no pair structure to compare) score 1.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(
            "adjusted_rand_index",
            format!("partitions of {} and {} elements", a.len(), b.len()),
        ));
    }
    let ka = a.iter().max().map_or(0, |m| m + 1);
    let kb = b.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![0u64; ka * kb];
    let mut rows = vec![0u64; ka];
    let mut cols = vec![0u64; kb];
    for (&x, &y) in a.iter().zip(b) {
        table[x * kb + y] += 1;
        rows[x] += 1;
        cols[y] += 1;
    }
    let index: f64 = table.iter().map(|&n| choose2(n)).sum();
    let sum_a: f64 = rows.iter().map(|&n| choose2(n)).sum();
    let sum_b: f64 = cols.iter().map(|&n| choose2(n)).sum();
    let total = choose2(a.len() as u64);
    let expected = if total > 0.0 {
        sum_a * sum_b / total
    } else {
        0.0
    };
    let max = (sum_a + sum_b) / 2.0;
    if max == expected {
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

/// Known-root evaluation: predictions are lifted to 3D with each sample's
/// true camera, scale and root depth.
pub fn evaluate(
    params: &ModelParams,
    data: &[SyntheticSample],
    planted: &[usize],
    thresholds: &[f64],
    align: bool,
) -> Result<MetricsReport> {
    check_thresholds(thresholds)?;
    if data.is_empty() {
        return Err(Error::Config("evaluation set is empty".into()));
    }
    let n = params.config.joints;
    let mut errors = Vec::with_capacity(data.len() * n);
    let mut aligned_errors = Vec::new();
    for chunk in data.chunks(64) {
        let refs: Vec<&SyntheticSample> = chunk.iter().collect();
        let pred = predict(params, &image_batch(&refs)?)?;
        for (s, joints) in chunk.iter().zip(pred.data().chunks(n * 3)) {
            let pose = Pose2p5D {
                joints: joints.chunks(3).map(|c| [c[0], c[1], c[2]]).collect(),
            };
            let lifted = recover_3d(&pose, &s.camera, s.s0, s.z_root)?;
            errors.extend(joint_errors(&lifted, &s.pose_3d));
            if align {
                let (a, _) = procrustes_align(&lifted, &s.pose_3d)?;
                aligned_errors.extend(joint_errors(&a, &s.pose_3d));
            }
        }
    }
    let main = summarize(&errors, thresholds)?;
    let groups = harden(&params.selector).assignment().to_vec();
    Ok(MetricsReport {
        mean_epe_mm: main.mean_epe_mm,
        median_epe_mm: main.median_epe_mm,
        auc: main.auc,
        pck: main.pck,
        ari: adjusted_rand_index(&groups, planted)?,
        samples: data.len(),
        groups,
        aligned: if align {
            Some(summarize(&aligned_errors, thresholds)?)
        } else {
            None
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::synthdata::{generate_in_memory, GeneratorConfig};

    fn loss_value(pred: Vec<f64>, gt: Vec<f64>, b: usize, n: usize, beta: f64) -> f64 {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::new(vec![b, n, 3], pred).unwrap());
        let g = tape.constant(Tensor::new(vec![b, n, 3], gt).unwrap());
        let l = pose_loss(&mut tape, p, g, beta).unwrap();
        tape.value(l).data()[0]
    }

    #[test]
    fn loss_examples() {
        assert_eq!(
            loss_value(vec![1.0, 2.0, 3.0], vec![1.0, 2.0, 3.0], 1, 1, 20.0),
            0.0
        );
        let l = loss_value(vec![1.0, 2.0, 0.5], vec![0.0, 0.0, 0.0], 1, 1, 20.0);
        assert!((l - 13.0).abs() < 1e-12);
        let l40 = loss_value(vec![1.0, 2.0, 0.5], vec![0.0, 0.0, 0.0], 1, 1, 40.0);
        assert!((l40 - 23.0).abs() < 1e-12);
        // batch mean
        let l = loss_value(vec![1.0, 0.0, 0.0, 3.0, 0.0, 0.0], vec![0.0; 6], 2, 1, 20.0);
        assert!((l - 2.0).abs() < 1e-12);
    }

    fn quadratic_config(lr: f64) -> TrainConfig {
        TrainConfig {
            lr: LearningRates {
                selector: lr,
                fusion: lr,
                backbone: lr,
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn first_adam_step_has_size_lr() {
        let mut p = Parameter::new(Tensor::vector(vec![0.0, 1.0, -2.0]), ParamGroup::Fusion);
        p.grad = Tensor::vector(vec![3.0, -0.5, 1e3]);
        let mut state = AdamState::new([&p]);
        let cfg = quadratic_config(0.01);
        adam_step(&mut [&mut p], &mut state, &cfg).unwrap();
        let expected = [
            0.0 - 0.01 * 3.0 / (3.0 + 1e-8),
            1.0 + 0.01 * 0.5 / (0.5 + 1e-8),
            -2.0 - 0.01 * 1e3 / (1e3 + 1e-8),
        ];
        for (a, b) in p.value.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(state.step, 1);
    }

    #[test]
    fn zero_gradient_changes_nothing() {
        let mut p = Parameter::new(Tensor::vector(vec![0.5, -1.5]), ParamGroup::Backbone);
        let before = p.value.clone();
        let mut state = AdamState::new([&p]);
        for _ in 0..10 {
            adam_step(&mut [&mut p], &mut state, &quadratic_config(0.1)).unwrap();
        }
        assert_eq!(p.value, before);
    }

    #[test]
    fn decayed_moments_flush_to_zero() {
        let mut p = Parameter::new(Tensor::vector(vec![0.5]), ParamGroup::Backbone);
        let mut state = AdamState::new([&p]);
        p.grad = Tensor::vector(vec![1e-300]);
        adam_step(&mut [&mut p], &mut state, &quadratic_config(0.1)).unwrap();
        p.grad = Tensor::vector(vec![0.0]);
        for _ in 0..300 {
            adam_step(&mut [&mut p], &mut state, &quadratic_config(0.1)).unwrap();
            assert!(!state.m[0].data()[0].is_subnormal());
            assert!(!state.v[0].data()[0].is_subnormal());
        }
        assert_eq!(state.m[0].data()[0], 0.0);
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let c = [1.5, -0.7, 3.0];
        let mut p = Parameter::new(Tensor::zeros(&[3]), ParamGroup::Backbone);
        let mut state = AdamState::new([&p]);
        let cfg = quadratic_config(1e-2);
        let mut converged = None;
        for step in 1..=5000 {
            let g: Vec<f64> = p
                .value
                .data()
                .iter()
                .zip(c)
                .map(|(x, c)| 2.0 * (x - c))
                .collect();
            p.grad = Tensor::vector(g);
            adam_step(&mut [&mut p], &mut state, &cfg).unwrap();
            if p.value
                .data()
                .iter()
                .zip(c)
                .all(|(x, c)| (x - c).abs() < 1e-3)
            {
                converged = Some(step);
                break;
            }
        }
        assert!(converged.is_some(), "ended at {:?}", p.value.data());
    }

    #[test]
    fn adam_rejects_mismatched_state() {
        let mut p = Parameter::new(Tensor::zeros(&[2]), ParamGroup::Backbone);
        let mut state = AdamState::new(std::iter::empty());
        assert!(adam_step(&mut [&mut p], &mut state, &TrainConfig::default()).is_err());
    }

    #[test]
    fn pck_and_auc_worked_example() {
        // One sample, 21 joints, one joint off by 30 mm.
        let mut errors = vec![0.0; 21];
        errors[7] = 30.0;
        let thresholds = threshold_range(20.0, 50.0, 5.0).unwrap();
        let s = summarize(&errors, &thresholds).unwrap();
        let p: Vec<f64> = s.pck.iter().map(|x| x.1).collect();
        assert_eq!(p, vec![20.0 / 21.0, 20.0 / 21.0, 1.0, 1.0, 1.0, 1.0, 1.0]);
        // trapezoid by hand: 5·(20/21) + 5·(20/21 + 1)/2 + 4·5·1, over 30 = 83/84
        assert!((s.auc - 83.0 / 84.0).abs() < 1e-12);
        assert!((s.mean_epe_mm - 30.0 / 21.0).abs() < 1e-12);
        assert_eq!(s.median_epe_mm, 0.0);
    }

    #[test]
    fn perfect_predictions() {
        let s = summarize(&[0.0; 42], &default_thresholds()).unwrap();
        assert_eq!(s.mean_epe_mm, 0.0);
        assert!(s.pck.iter().all(|p| p.1 == 1.0));
        assert_eq!(s.auc, 1.0);
        assert_eq!(default_thresholds().len(), 61);
    }

    #[test]
    fn lower_median_for_even_counts() {
        assert_eq!(lower_median(&[4.0, 1.0, 3.0, 2.0]), 2.0);
        assert_eq!(lower_median(&[5.0, 1.0, 3.0]), 3.0);
    }

    #[test]
    fn threshold_validation() {
        assert!(summarize(&[1.0], &[]).is_err());
        assert!(summarize(&[1.0], &[2.0, 2.0]).is_err());
        assert!(threshold_range(50.0, 20.0, 1.0).is_err());
        assert_eq!(
            threshold_range(0.0, 1.0, 0.25).unwrap(),
            vec![0.0, 0.25, 0.5, 0.75, 1.0]
        );
    }

    #[test]
    fn ari_examples() {
        let a = [0, 0, 1, 1, 2, 2];
        assert_eq!(adjusted_rand_index(&a, &a).unwrap(), 1.0);
        let relabeled = [2, 2, 0, 0, 1, 1];
        assert_eq!(adjusted_rand_index(&relabeled, &a).unwrap(), 1.0);
        let single = [0; 6];
        assert_eq!(adjusted_rand_index(&a, &single).unwrap(), 0.0);
        assert_eq!(adjusted_rand_index(&single, &a).unwrap(), 0.0);
        assert!(adjusted_rand_index(&a, &[0, 1]).is_err());
    }

    #[test]
    fn ari_reference_value() {
        // contingency [[2,0],[1,1]]: index 1, row pairs 2, column pairs 3, total 6
        // expected 1, max 2.5 → (1 − 1)/(2.5 − 1) = 0
        assert_eq!(
            adjusted_rand_index(&[0, 0, 1, 1], &[0, 0, 0, 1]).unwrap(),
            0.0
        );
        // contingency [[2,1],[0,3]]: index 1+3 = 4, rows 3+3 = 6, cols 1+6 = 7, total 15
        // expected 42/15 = 2.8, max 6.5 → 1.2/3.7
        let v = adjusted_rand_index(&[0, 0, 0, 1, 1, 1], &[0, 0, 1, 1, 1, 1]).unwrap();
        assert!((v - 1.2 / 3.7).abs() < 1e-12);
    }

    fn tiny_model(k: usize) -> ModelConfig {
        ModelConfig {
            joints: 21,
            groups: k,
            side: 16,
            shared_widths: vec![16],
            branch_widths: vec![8],
            grid: 4,
        }
    }

    fn tiny_data(count: usize, seed: u64) -> Vec<SyntheticSample> {
        generate_in_memory(count, seed, &GeneratorConfig::for_side(16).unwrap())
            .unwrap()
            .samples
    }

    #[test]
    fn zero_learning_rate_freezes_parameters() {
        let data = tiny_data(8, 1);
        let mut params = ModelParams::init(&tiny_model(2), 0).unwrap();
        let before: Vec<Tensor> = params
            .parameters()
            .iter()
            .map(|(_, p)| p.value.clone())
            .collect();
        let cfg = TrainConfig {
            steps: 5,
            batch: 4,
            lr: LearningRates::default().scaled(0.0),
            ..TrainConfig::default()
        };
        let out = train(&mut params, &data, &cfg).unwrap();
        let after: Vec<Tensor> = params
            .parameters()
            .iter()
            .map(|(_, p)| p.value.clone())
            .collect();
        assert_eq!(before, after);
        assert!(out.trace.iter().all(|(_, l)| l.is_finite()));
    }

    #[test]
    fn training_is_reproducible() {
        let data = tiny_data(8, 2);
        let cfg = TrainConfig {
            steps: 20,
            batch: 4,
            log_interval: 5,
            ..TrainConfig::default()
        };
        let run = || {
            let mut params = ModelParams::init(&tiny_model(3), 4).unwrap();
            let out = train(&mut params, &data, &cfg).unwrap();
            (params, out)
        };
        let (pa, oa) = run();
        let (pb, ob) = run();
        assert_eq!(pa, pb);
        assert_eq!(oa, ob);
        assert_eq!(
            oa.trace.iter().map(|t| t.0).collect::<Vec<_>>(),
            vec![5, 10, 15, 20]
        );
    }

    #[test]
    fn overfits_two_samples() {
        let data = tiny_data(2, 3);
        let mut params = ModelParams::init(&tiny_model(2), 5).unwrap();
        let cfg = TrainConfig {
            steps: 2000,
            batch: 2,
            log_interval: 1,
            lr: LearningRates::REFERENCE,
            ..TrainConfig::default()
        };
        let out = train(&mut params, &data, &cfg).unwrap();
        let first = out.trace[0].1;
        let last = out.trace.last().unwrap().1;
        assert!(last < 0.1 * first, "loss {first} → {last}");
    }

    #[test]
    fn training_rejects_mismatched_data() {
        let data = tiny_data(2, 3);
        let mut params = ModelParams::init(
            &ModelConfig {
                side: 8,
                ..tiny_model(2)
            },
            0,
        )
        .unwrap();
        assert!(matches!(
            train(&mut params, &data, &TrainConfig::default()),
            Err(Error::ConfigMismatch(_))
        ));
        assert!(train(&mut params, &[], &TrainConfig::default()).is_err());
    }

    #[test]
    fn evaluation_report_is_consistent() {
        let data = tiny_data(6, 9);
        let params = ModelParams::init(&tiny_model(3), 1).unwrap();
        let planted = crate::synthdata::PlantedGrouping::thumb_index_others();
        let r = evaluate(
            &params,
            &data,
            planted.labels(),
            &default_thresholds(),
            true,
        )
        .unwrap();
        assert_eq!(r.samples, 6);
        assert!(r.pck.windows(2).all(|w| w[0].1 <= w[1].1));
        assert!((r.auc - auc(&r.pck)).abs() < 1e-12);
        assert!((0.0..=1.0).contains(&r.auc));
        // fresh selector: every joint in group 0
        assert!(r.groups.iter().all(|&g| g == 0));
        assert_eq!(r.ari, 0.0);
        let aligned = r.aligned.unwrap();
        assert!(aligned.mean_epe_mm.is_finite() && aligned.pck.len() == r.pck.len());
    }
}
