//! Reverse-mode gradients checked against central differences.
//!
//! Each case draws random inputs, reduces the operation's output to a
//! scalar with fixed random weights, and compares the tape gradient of
//! every input with a finite-difference estimate. Instances where a relu or
//! abs input lies near its kink, or a batch variance lies near zero, are
//! redrawn.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{
    finite_difference_gradient, gradient_mismatch, Primitive, Tape, Tensor, Var,
};
use crate::error::Result;
use crate::fusion::{fuse, init_fusion_weights, FusionVars, Mode};
use crate::model::{
    combine_groups, decode_soft_argmax, model_forward, shared_extract, BoundParams, BranchOutput,
    ModelConfig, ModelParams, SelectorInput,
};
use crate::selector::{sample_gumbel, sample_relaxed};
use crate::training_eval::pose_loss;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tolerance {
    pub step: f64,
    pub rel: f64,
    pub abs: f64,
}

impl Default for Tolerance {
    fn default() -> Self {
        Self {
            step: 1e-5,
            rel: 1e-4,
            abs: 1e-7,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaseReport {
    pub name: &'static str,
    pub instances: usize,
    pub failures: usize,
    /// Largest relative error among entries outside tolerance.
    pub worst: Option<f64>,
}

impl CaseReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

struct Instance {
    inputs: Vec<Tensor>,
    build: Build,
}

fn eval_scalar(
    inst: &Instance,
    weights: &Option<Tensor>,
    values: &[Tensor],
    tracked: bool,
) -> Result<(Tape, Var, Vec<Var>)> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = values
        .iter()
        .map(|t| {
            if tracked {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        })
        .collect();
    let out = (inst.build)(&mut tape, &vars)?;
    let scalar = match weights {
        Some(w) => {
            let w = tape.constant(w.clone());
            let prod = tape.mul(out, w)?;
            tape.sum(prod)?
        }
        None => out,
    };
    Ok((tape, scalar, vars))
}

/// Instances with a relu or abs input closer than this to zero are redrawn.
const KINK_MARGIN: f64 = 1e-3;
/// Instances where train-mode batch norm sees a batch variance below this are
/// redrawn: near the epsilon the normalization curves too sharply for the step.
const VARIANCE_FLOOR: f64 = 1e-3;
const MAX_REDRAWS: usize = 100;

/// Whether central differences are meaningful at the instance's inputs.
fn well_conditioned(inst: &Instance) -> Result<bool> {
    let (tape, _, _) = eval_scalar(inst, &None, &inst.inputs, true)?;
    for e in tape.record() {
        if matches!(e.op, Primitive::Relu | Primitive::Abs)
            && tape
                .node_value(e.inputs[0])
                .data()
                .iter()
                .any(|x| x.abs() < KINK_MARGIN)
        {
            return Ok(false);
        }
        if let Some((_, var)) = tape.node_batch_stats(e.output) {
            if var.iter().any(|&v| v < VARIANCE_FLOOR) {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

/// Worst relative mismatch over all inputs of one instance.
fn check_instance(inst: &Instance, rng: &mut ChaCha8Rng, tol: &Tolerance) -> Result<Option<f64>> {
    let probe = eval_scalar(inst, &None, &inst.inputs, false)?;
    let out_shape = probe.0.shape(probe.1).to_vec();
    let weights = if out_shape.iter().product::<usize>() == 1 {
        None
    } else {
        Some(random(rng, &out_shape, -1.0, 1.0))
    };
    let (tape, scalar, vars) = eval_scalar(inst, &weights, &inst.inputs, true)?;
    let grads = tape.backward(scalar)?;
    let mut worst: Option<f64> = None;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v);
        let numeric = finite_difference_gradient(
            |x| {
                let mut values = inst.inputs.clone();
                values[i] = x.clone();
                let (t, s, _) = eval_scalar(inst, &weights, &values, false)?;
                Ok(t.value(s).data()[0])
            },
            &inst.inputs[i],
            tol.step,
        )?;
        if let Some(w) = gradient_mismatch(analytic.data(), numeric.data(), tol.rel, tol.abs) {
            worst = Some(worst.map_or(w, |x: f64| x.max(w)));
        }
    }
    Ok(worst)
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(lo..hi)).collect(),
    )
    .expect("sized")
}

/// Magnitudes in `[0.1, 2]` with random signs.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.1..2.0);
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("sized")
}

fn unary(inputs: Vec<Tensor>, f: fn(&mut Tape, Var) -> Result<Var>) -> Instance {
    Instance {
        inputs,
        build: Box::new(move |t, v| f(t, v[0])),
    }
}

fn binary(inputs: Vec<Tensor>, f: fn(&mut Tape, Var, Var) -> Result<Var>) -> Instance {
    Instance {
        inputs,
        build: Box::new(move |t, v| f(t, v[0], v[1])),
    }
}

type Maker = fn(&mut ChaCha8Rng) -> Instance;

/// The tiny end-to-end configuration.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        joints: 4,
        groups: 2,
        side: 8,
        shared_widths: vec![6],
        branch_widths: vec![5, 5],
        grid: 4,
    }
}

fn cases() -> Vec<(&'static str, Maker)> {
    vec![
        ("add", |r| {
            binary(
                vec![random(r, &[3, 4], -2.0, 2.0), random(r, &[3, 4], -2.0, 2.0)],
                Tape::add,
            )
        }),
        ("subtract", |r| {
            binary(
                vec![random(r, &[3, 4], -2.0, 2.0), random(r, &[3, 4], -2.0, 2.0)],
                Tape::sub,
            )
        }),
        ("multiply", |r| {
            binary(
                vec![random(r, &[3, 4], -2.0, 2.0), random(r, &[3, 4], -2.0, 2.0)],
                Tape::mul,
            )
        }),
        ("scale", |r| {
            let k = r.random_range(-3.0..3.0);
            Instance {
                inputs: vec![random(r, &[2, 5], -2.0, 2.0)],
                build: Box::new(move |t, v| t.scale(v[0], k)),
            }
        }),
        ("matmul", |r| {
            binary(
                vec![random(r, &[3, 4], -2.0, 2.0), random(r, &[4, 2], -2.0, 2.0)],
                Tape::matmul,
            )
        }),
        ("relu", |r| {
            unary(vec![away_from_zero(r, &[3, 4])], Tape::relu)
        }),
        ("exp", |r| {
            unary(vec![random(r, &[3, 4], -2.0, 2.0)], Tape::exp)
        }),
        ("log", |r| {
            unary(vec![random(r, &[3, 4], 0.2, 3.0)], Tape::log)
        }),
        ("softmax", |r| {
            unary(vec![random(r, &[3, 5], -3.0, 3.0)], Tape::softmax)
        }),
        ("concat", |r| Instance {
            inputs: vec![
                random(r, &[2, 1], -2.0, 2.0),
                random(r, &[2, 3], -2.0, 2.0),
                random(r, &[2, 2], -2.0, 2.0),
            ],
            build: Box::new(|t, v| t.concat(v)),
        }),
        ("slice", |r| {
            let start = r.random_range(0..4);
            let end = r.random_range(start + 1..=5);
            Instance {
                inputs: vec![random(r, &[3, 5], -2.0, 2.0)],
                build: Box::new(move |t, v| t.slice(v[0], start, end)),
            }
        }),
        ("sum", |r| {
            unary(vec![random(r, &[3, 4], -2.0, 2.0)], Tape::sum)
        }),
        ("mean", |r| {
            unary(vec![random(r, &[3, 4], -2.0, 2.0)], Tape::mean)
        }),
        ("abs", |r| {
            unary(vec![away_from_zero(r, &[3, 4])], Tape::abs)
        }),
        ("batch_norm_train", |r| Instance {
            inputs: vec![
                random(r, &[6, 3], -2.0, 2.0),
                random(r, &[3], 0.5, 2.0),
                random(r, &[3], -1.0, 1.0),
            ],
            build: Box::new(|t, v| {
                t.apply(crate::autodiff::Primitive::BatchNormTrain { eps: 1e-5 }, v)
            }),
        }),
        ("batch_norm_eval", |r| {
            let mean: Vec<f64> = (0..3).map(|_| r.random_range(-1.0..1.0)).collect();
            let var: Vec<f64> = (0..3).map(|_| r.random_range(0.2..2.0)).collect();
            Instance {
                inputs: vec![
                    random(r, &[4, 3], -2.0, 2.0),
                    random(r, &[3], 0.5, 2.0),
                    random(r, &[3], -1.0, 1.0),
                ],
                build: Box::new(move |t, v| {
                    t.apply(
                        crate::autodiff::Primitive::BatchNormEval {
                            mean: mean.clone(),
                            var: var.clone(),
                            eps: 1e-5,
                        },
                        v,
                    )
                }),
            }
        }),
        ("broadcast", |r| Instance {
            inputs: vec![random(r, &[3, 1], -2.0, 2.0), random(r, &[4], -2.0, 2.0)],
            build: Box::new(|t, v| {
                let a = t.broadcast(v[0], &[2, 3, 4])?;
                let b = t.broadcast(v[1], &[2, 3, 4])?;
                t.mul(a, b)
            }),
        }),
        ("reshape", |r| Instance {
            inputs: vec![random(r, &[2, 6], -2.0, 2.0)],
            build: Box::new(|t, v| {
                let x = t.reshape(v[0], &[3, 4])?;
                t.softmax(x)
            }),
        }),
        ("sample_relaxed", |r| {
            let tau = r.random_range(0.5..5.0);
            let noise = sample_gumbel(r, 4, 3);
            Instance {
                inputs: vec![random(r, &[4, 3], -2.0, 2.0)],
                build: Box::new(move |t, v| sample_relaxed(t, v[0], tau, &noise)),
            }
        }),
        ("fuse_train", |r| fuse_instance(r, Mode::Train)),
        ("fuse_eval", |r| fuse_instance(r, Mode::Eval)),
        ("decode_soft_argmax", |r| Instance {
            inputs: vec![
                random(r, &[6, 16], -3.0, 3.0),
                random(r, &[6, 16], -2.0, 2.0),
            ],
            build: Box::new(|t, v| {
                decode_soft_argmax(
                    t,
                    BranchOutput {
                        heatmaps: v[0],
                        depths: v[1],
                    },
                    4,
                    8,
                )
            }),
        }),
        ("combine_groups", |r| Instance {
            inputs: vec![
                random(r, &[2, 4, 3], -5.0, 5.0),
                random(r, &[2, 4, 3], -5.0, 5.0),
                random(r, &[2, 4, 3], -5.0, 5.0),
                random(r, &[4, 3], 0.0, 1.0),
            ],
            build: Box::new(|t, v| combine_groups(t, &v[..3], v[3])),
        }),
        ("pose_loss", |r| {
            let gt = random(r, &[2, 4, 3], -5.0, 5.0);
            let offset = away_from_zero(r, &[2, 4, 3]);
            let pred: Vec<f64> = gt
                .data()
                .iter()
                .zip(offset.data())
                .map(|(a, b)| a + b)
                .collect();
            let beta = r.random_range(1.0..30.0);
            Instance {
                inputs: vec![Tensor::new(vec![2, 4, 3], pred).expect("sized"), gt],
                build: Box::new(move |t, v| pose_loss(t, v[0], v[1], beta)),
            }
        }),
        ("shared_extract", |r| {
            let params = ModelParams::init(&tiny_model_config(), r.random()).expect("valid config");
            let mut inputs = vec![random(r, &[2, 64], 0.0, 1.0)];
            inputs.extend(
                params
                    .shared
                    .iter()
                    .flat_map(|d| [d.weight.value.clone(), d.bias.value.clone()]),
            );
            Instance {
                inputs,
                build: Box::new(move |t, v| {
                    // shared layers lead the parameter order; the rest stay fixed
                    let mut all: Vec<Var> = v[1..].to_vec();
                    for (_, p) in params.parameters().into_iter().skip(all.len()) {
                        all.push(t.constant(p.value.clone()));
                    }
                    let bound = BoundParams::from_vars(&params, &all)?;
                    shared_extract(t, &params, &bound, v[0])
                }),
            }
        }),
        ("model_forward", model_instance),
    ]
}

fn fuse_instance(r: &mut ChaCha8Rng, mode: Mode) -> Instance {
    let (k, c, b) = (3, 4, 5);
    let dest = r.random_range(0..k);
    let mut layer = init_fusion_weights(k, c, dest).expect("valid sizes");
    layer.bn.running_mean = (0..c).map(|_| r.random_range(-1.0..1.0)).collect();
    layer.bn.running_var = (0..c).map(|_| r.random_range(0.2..2.0)).collect();
    let mut inputs: Vec<Tensor> = (0..k).map(|_| random(r, &[b, c], -2.0, 2.0)).collect();
    let w: Vec<f64> = layer
        .weight
        .value
        .data()
        .iter()
        .map(|x| x + r.random_range(-0.3..0.3))
        .collect();
    inputs.push(Tensor::new(vec![k * c, c], w).expect("sized"));
    inputs.push(random(r, &[c], 0.5, 2.0));
    inputs.push(random(r, &[c], -1.0, 1.0));
    Instance {
        inputs,
        build: Box::new(move |t, v| {
            let vars = FusionVars {
                weight: v[k],
                scale: v[k + 1],
                shift: v[k + 2],
            };
            fuse(t, &v[..k], &layer, &vars, mode).map(|(y, _)| y)
        }),
    }
}

/// End-to-end loss through the tiny model in train mode with fixed noise.
fn model_instance(r: &mut ChaCha8Rng) -> Instance {
    let cfg = tiny_model_config();
    let mut params = ModelParams::init(&cfg, r.random()).expect("valid config");
    // move θ and the fusion mix off their symmetric starting points
    for p in params.parameters_mut() {
        if p.group != crate::autodiff::ParamGroup::Backbone {
            p.value
                .data_mut()
                .iter_mut()
                .for_each(|x| *x += r.random_range(-0.3..0.3));
        }
    }
    let batch = 8;
    let images = random(r, &[batch, cfg.input_len()], -4.0, 4.0);
    let targets = random(r, &[batch, cfg.joints, 3], 0.0, 8.0);
    let noise = sample_gumbel(r, cfg.joints, cfg.groups);
    let tau = r.random_range(0.5..5.0);
    let inputs = params
        .parameters()
        .iter()
        .map(|(_, p)| p.value.clone())
        .collect();
    Instance {
        inputs,
        build: Box::new(move |t, v| {
            let bound = BoundParams::from_vars(&params, v)?;
            let x = t.constant(images.clone());
            let y = t.constant(targets.clone());
            let out = model_forward(
                t,
                &params,
                &bound,
                x,
                Mode::Train,
                SelectorInput::Relaxed { tau, noise: &noise },
            )?;
            pose_loss(t, out.pose, y, 20.0)
        }),
    }
}

/// Names of every checked operation, in suite order.
pub fn case_names() -> Vec<&'static str> {
    cases().into_iter().map(|(n, _)| n).collect()
}

/// Runs every case on `instances` seeded random instances.
pub fn run_suite(seed: u64, instances: usize, tol: &Tolerance) -> Result<Vec<CaseReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();
    for (name, make) in cases() {
        let mut failures = 0;
        let mut worst: Option<f64> = None;
        for _ in 0..instances {
            let mut inst = make(&mut rng);
            for _ in 0..MAX_REDRAWS {
                if well_conditioned(&inst)? {
                    break;
                }
                inst = make(&mut rng);
            }
            if let Some(w) = check_instance(&inst, &mut rng, tol)? {
                failures += 1;
                worst = Some(worst.map_or(w, |x: f64| x.max(w)));
            }
        }
        reports.push(CaseReport {
            name,
            instances,
            failures,
            worst,
        });
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn a_wrong_gradient_is_caught() {
        // abs near its kink: the central difference straddles it and disagrees
        let inst = Instance {
            inputs: vec![Tensor::vector(vec![1e-9])],
            build: Box::new(|t, v| t.abs(v[0])),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let worst = check_instance(&inst, &mut rng, &Tolerance::default()).unwrap();
        assert!(worst.is_some());
    }

    #[test]
    fn cheap_cases_pass() {
        let reports = run_suite(3, 3, &Tolerance::default()).unwrap();
        assert_eq!(reports.len(), case_names().len());
        for r in reports {
            assert!(r.passed(), "{} worst {:?}", r.name, r.worst);
        }
    }
}
