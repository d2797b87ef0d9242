//! The grouped pose network.
//!
//! ```text
//! image ─ shared MLP ─┬─ branch 1 block ─┐          ┌─ block ─┐          ┌─ head 1 ─ decode ─┐
//!                     ├─ branch 2 block ─┤─ fuse ───┼─ block ─┤─ fuse ───┼─ head 2 ─ decode ─┤─ combine ─ pose
//!                     └─ branch K block ─┘          └─ block ─┘          └─ head K ─ decode ─┘
//! ```
//!
//! Each head emits, per joint, `G×G` heatmap logits and a `G×G` depth map.
//! One softmax over the heatmap cells gives both the soft-argmax pixel
//! location and the expected relative depth. The selector combines the
//! K decoded poses joint by joint.
//!
//! # Checkpoint format
//!
//! Little-endian:
//!
//! ```text
//! magic "GPCK" | version u32 (= 1) | config length u32 | config JSON
//! tensor count u32
//! per tensor: name length u16 | name (UTF-8) | rank u8 | dims u32… | values f64…
//! crc u32 of every preceding byte
//! ```
//!
//! Tensors are the trainable parameters (by name, see
//! [`ModelParams::parameters`]) followed by the batch-norm running
//! statistics.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamGroup, Parameter, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::fusion::{fuse, init_fusion_weights, BatchStats, FusionLayer, FusionVars, Mode};
use crate::io::{write_atomic, LeReader, LeWriter};
use crate::selector::{harden, init_logits, sample_relaxed, SelectorLogits};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"GPCK";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub joints: usize,
    pub groups: usize,
    pub side: usize,
    pub shared_widths: Vec<usize>,
    /// One block per entry; fusion follows every block.
    pub branch_widths: Vec<usize>,
    pub grid: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            joints: 21,
            groups: 3,
            side: 64,
            shared_widths: vec![512, 256],
            branch_widths: vec![256, 256],
            grid: 16,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.joints < 1 || self.groups < 1 || self.side < 1 {
            return bad(format!(
                "need N ≥ 1, K ≥ 1 and side ≥ 1 (N={}, K={}, side={})",
                self.joints, self.groups, self.side
            ));
        }
        if self.grid < 2 {
            return bad(format!(
                "heatmap grid must be at least 2, got {}",
                self.grid
            ));
        }
        if self
            .shared_widths
            .iter()
            .chain(&self.branch_widths)
            .any(|&w| w < 1)
        {
            return bad("layer widths must be at least 1".into());
        }
        Ok(())
    }

    pub fn fusion_points(&self) -> usize {
        self.branch_widths.len()
    }

    pub fn input_len(&self) -> usize {
        self.side * self.side
    }

    pub fn shared_out(&self) -> usize {
        self.shared_widths
            .last()
            .copied()
            .unwrap_or(self.input_len())
    }

    fn head_in(&self) -> usize {
        self.branch_widths
            .last()
            .copied()
            .unwrap_or(self.shared_out())
    }

    fn cells(&self) -> usize {
        self.grid * self.grid
    }
}

/// Fully connected layer, `weight: in×out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Parameter,
    pub bias: Parameter,
}

impl Dense {
    /// Uniform in `±1/sqrt(in)` for both weight and bias.
    fn init(rng: &mut ChaCha8Rng, input: usize, output: usize, group: ParamGroup) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        let mut draw = |n: usize| {
            (0..n)
                .map(|_| rng.random_range(-bound..bound))
                .collect::<Vec<_>>()
        };
        let w = Tensor::new(vec![input, output], draw(input * output)).expect("sized");
        let b = Tensor::new(vec![output], draw(output)).expect("sized");
        Self {
            weight: Parameter::new(w, group),
            bias: Parameter::new(b, group),
        }
    }
}

fn put(tape: &mut Tape, p: &Parameter, tracked: bool) -> Var {
    if tracked {
        p.bind(tape)
    } else {
        tape.constant(p.value.clone())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DenseVars {
    pub weight: Var,
    pub bias: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub shared: Vec<Dense>,
    /// `[group][block]`.
    pub branches: Vec<Vec<Dense>>,
    /// `[fusion point][destination group]`.
    pub fusion: Vec<Vec<FusionLayer>>,
    pub heads: Vec<Dense>,
    pub selector: SelectorLogits,
}

/// Parameters placed on a tape, mirroring [`ModelParams`].
#[derive(Clone, Debug)]
pub struct BoundParams {
    pub shared: Vec<DenseVars>,
    pub branches: Vec<Vec<DenseVars>>,
    pub fusion: Vec<Vec<FusionVars>>,
    pub heads: Vec<DenseVars>,
    pub theta: Var,
}

impl BoundParams {
    /// Reassembles handles given in [`ModelParams::parameters`] order.
    pub fn from_vars(params: &ModelParams, vars: &[Var]) -> Result<Self> {
        let expected = params.parameters().len();
        if vars.len() != expected {
            return Err(Error::shape(
                "bind",
                format!("{expected} parameters, got {} handles", vars.len()),
            ));
        }
        let mut it = vars.iter().copied();
        let mut next = || it.next().expect("length checked");
        let dense = |next: &mut dyn FnMut() -> Var| DenseVars {
            weight: next(),
            bias: next(),
        };
        let shared = params.shared.iter().map(|_| dense(&mut next)).collect();
        let branches = params
            .branches
            .iter()
            .map(|blocks| blocks.iter().map(|_| dense(&mut next)).collect())
            .collect();
        let fusion = params
            .fusion
            .iter()
            .map(|layers| {
                layers
                    .iter()
                    .map(|_| FusionVars {
                        weight: next(),
                        scale: next(),
                        shift: next(),
                    })
                    .collect()
            })
            .collect();
        let heads = params.heads.iter().map(|_| dense(&mut next)).collect();
        Ok(Self {
            shared,
            branches,
            fusion,
            heads,
            theta: next(),
        })
    }

    /// Handles in the order of [`ModelParams::parameters`].
    pub fn vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for d in &self.shared {
            out.extend([d.weight, d.bias]);
        }
        for blocks in &self.branches {
            for d in blocks {
                out.extend([d.weight, d.bias]);
            }
        }
        for layers in &self.fusion {
            for f in layers {
                out.extend([f.weight, f.scale, f.shift]);
            }
        }
        for d in &self.heads {
            out.extend([d.weight, d.bias]);
        }
        out.push(self.theta);
        out
    }
}

impl ModelParams {
    /// Fresh parameters. Branch and head weights are random; fusion starts
    /// at its scaled-identity mix and the selector at uniform logits.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut width = config.input_len();
        let mut shared = Vec::new();
        for &w in &config.shared_widths {
            shared.push(Dense::init(&mut rng, width, w, ParamGroup::Backbone));
            width = w;
        }
        let k = config.groups;
        let branches = (0..k)
            .map(|_| {
                let mut input = width;
                config
                    .branch_widths
                    .iter()
                    .map(|&w| {
                        let d = Dense::init(&mut rng, input, w, ParamGroup::Backbone);
                        input = w;
                        d
                    })
                    .collect()
            })
            .collect();
        let fusion = config
            .branch_widths
            .iter()
            .map(|&c| {
                (0..k)
                    .map(|dest| init_fusion_weights(k, c, dest))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let out = 2 * config.joints * config.cells();
        let heads = (0..k)
            .map(|_| Dense::init(&mut rng, config.head_in(), out, ParamGroup::Backbone))
            .collect();
        Ok(Self {
            config: config.clone(),
            shared,
            branches,
            fusion,
            heads,
            selector: init_logits(config.joints, k)?,
        })
    }

    /// Every trainable parameter with a stable name.
    pub fn parameters(&self) -> Vec<(String, &Parameter)> {
        let mut out = Vec::new();
        for (l, d) in self.shared.iter().enumerate() {
            out.push((format!("shared.{l}.weight"), &d.weight));
            out.push((format!("shared.{l}.bias"), &d.bias));
        }
        for (k, blocks) in self.branches.iter().enumerate() {
            for (b, d) in blocks.iter().enumerate() {
                out.push((format!("branch.{k}.{b}.weight"), &d.weight));
                out.push((format!("branch.{k}.{b}.bias"), &d.bias));
            }
        }
        for (p, layers) in self.fusion.iter().enumerate() {
            for (k, f) in layers.iter().enumerate() {
                out.push((format!("fusion.{p}.{k}.weight"), &f.weight));
                out.push((format!("fusion.{p}.{k}.bn_scale"), &f.bn.scale));
                out.push((format!("fusion.{p}.{k}.bn_shift"), &f.bn.shift));
            }
        }
        for (k, d) in self.heads.iter().enumerate() {
            out.push((format!("head.{k}.weight"), &d.weight));
            out.push((format!("head.{k}.bias"), &d.bias));
        }
        out.push(("selector.theta".to_string(), &self.selector.theta));
        out
    }

    /// Same order as [`ModelParams::parameters`].
    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = Vec::new();
        for d in &mut self.shared {
            out.extend([&mut d.weight, &mut d.bias]);
        }
        for blocks in &mut self.branches {
            for d in blocks {
                out.extend([&mut d.weight, &mut d.bias]);
            }
        }
        for layers in &mut self.fusion {
            for f in layers {
                out.extend([&mut f.weight, &mut f.bn.scale, &mut f.bn.shift]);
            }
        }
        for d in &mut self.heads {
            out.extend([&mut d.weight, &mut d.bias]);
        }
        out.push(&mut self.selector.theta);
        out
    }

    /// Places the parameters on `tape`; untracked binding is for inference.
    pub fn bind(&self, tape: &mut Tape, tracked: bool) -> BoundParams {
        let vars: Vec<Var> = self
            .parameters()
            .into_iter()
            .map(|(_, p)| put(tape, p, tracked))
            .collect();
        BoundParams::from_vars(self, &vars).expect("one handle per parameter")
    }

    /// Folds the batch statistics of a training forward pass into the
    /// fusion layers' running estimates.
    pub fn apply_bn_updates(&mut self, updates: &[Vec<BatchStats>]) {
        for (layers, stats) in self.fusion.iter_mut().zip(updates) {
            for (f, s) in layers.iter_mut().zip(stats) {
                f.bn.update_running(s);
            }
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|(_, p)| p.value.len()).sum()
    }
}

/// `images: B×side²` → `B×last shared width`.
pub fn shared_extract(
    tape: &mut Tape,
    params: &ModelParams,
    bound: &BoundParams,
    images: Var,
) -> Result<Var> {
    let shape = tape.shape(images);
    if shape.len() != 2 || shape[1] != params.config.input_len() {
        return Err(Error::shape(
            "shared_extract",
            format!("expected B×{}, got {:?}", params.config.input_len(), shape),
        ));
    }
    let mut h = images;
    for d in &bound.shared {
        let z = tape.linear(h, d.weight, d.bias)?;
        h = tape.relu(z)?;
    }
    Ok(h)
}

/// Runs every branch block and fuses across branches after each one.
/// Returns the K branch features and, in train mode, the batch-norm
/// statistics per fusion point and destination.
pub fn branches_forward(
    tape: &mut Tape,
    params: &ModelParams,
    bound: &BoundParams,
    shared: Var,
    mode: Mode,
) -> Result<(Vec<Var>, Vec<Vec<BatchStats>>)> {
    let k = params.config.groups;
    let mut features = vec![shared; k];
    let mut stats = Vec::new();
    for (b, (layers, vars)) in params.fusion.iter().zip(&bound.fusion).enumerate() {
        for (g, f) in features.iter_mut().enumerate() {
            let d = bound.branches[g][b];
            let z = tape.linear(*f, d.weight, d.bias)?;
            *f = tape.relu(z)?;
        }
        let mut fused = Vec::with_capacity(k);
        let mut point = Vec::new();
        for (layer, v) in layers.iter().zip(vars) {
            let (y, s) = fuse(tape, &features, layer, v, mode)?;
            fused.push(y);
            point.extend(s);
        }
        features = fused;
        if mode == Mode::Train {
            stats.push(point);
        }
    }
    Ok((features, stats))
}

/// Heatmap logits and depth maps of one branch, each `rows×G²` with one row
/// per (sample, joint) pair.
#[derive(Clone, Copy, Debug)]
pub struct BranchOutput {
    pub heatmaps: Var,
    pub depths: Var,
}

/// Splits a head output `B×(2·N·G²)` into heatmaps and depth maps.
pub fn split_head(tape: &mut Tape, head: Var, joints: usize, grid: usize) -> Result<BranchOutput> {
    let cells = grid * grid;
    let b = tape.shape(head)[0];
    let per_joint = tape.reshape(head, &[b * joints, 2 * cells])?;
    Ok(BranchOutput {
        heatmaps: tape.slice(per_joint, 0, cells)?,
        depths: tape.slice(per_joint, cells, 2 * cells)?,
    })
}

/// Cell-centre pixel coordinates `(u, v)` of a `G×G` grid, `G²×2`.
pub fn cell_centres(grid: usize, side: usize) -> Tensor {
    let step = side as f64 / grid as f64;
    let mut data = Vec::with_capacity(grid * grid * 2);
    for r in 0..grid {
        for c in 0..grid {
            data.push((c as f64 + 0.5) * step);
            data.push((r as f64 + 0.5) * step);
        }
    }
    Tensor::new(vec![grid * grid, 2], data).expect("sized")
}

/// Soft-argmax decoding to `rows×3` `(u, v, z_rel)`.
pub fn decode_soft_argmax(
    tape: &mut Tape,
    branch: BranchOutput,
    grid: usize,
    side: usize,
) -> Result<Var> {
    let cells = grid * grid;
    let hs = tape.shape(branch.heatmaps).to_vec();
    if hs.len() != 2 || hs[1] != cells || tape.shape(branch.depths) != hs.as_slice() {
        return Err(Error::shape(
            "decode_soft_argmax",
            format!(
                "heatmaps {:?} and depths {:?} must both be rows×{cells}",
                hs,
                tape.shape(branch.depths)
            ),
        ));
    }
    let p = tape.softmax(branch.heatmaps)?;
    let centres = tape.constant(cell_centres(grid, side));
    let uv = tape.matmul(p, centres)?;
    let weighted = tape.mul(p, branch.depths)?;
    let ones = tape.constant(Tensor::full(&[cells, 1], 1.0));
    let z = tape.matmul(weighted, ones)?;
    tape.concat(&[uv, z])
}

/// `pose_i = Σ_k S[i,k] · pose^k_i` for branch poses `B×N×3` and selector `N×K`.
pub fn combine_groups(tape: &mut Tape, branch_poses: &[Var], selector: Var) -> Result<Var> {
    let s = tape.shape(selector).to_vec();
    if s.len() != 2 || s[1] != branch_poses.len() || branch_poses.is_empty() {
        return Err(Error::shape(
            "combine_groups",
            format!("selector {:?} for {} branch poses", s, branch_poses.len()),
        ));
    }
    let shape = tape.shape(branch_poses[0]).to_vec();
    if shape.len() != 3 || shape[1] != s[0] || shape[2] != 3 {
        return Err(Error::shape(
            "combine_groups",
            format!("branch poses must be B×{}×3, got {:?}", s[0], shape),
        ));
    }
    let mut total: Option<Var> = None;
    for (k, &pose) in branch_poses.iter().enumerate() {
        if tape.shape(pose) != shape.as_slice() {
            return Err(Error::GroupShape {
                group: k,
                expected: shape,
                found: tape.shape(pose).to_vec(),
            });
        }
        let column = tape.slice(selector, k, k + 1)?;
        let weights = tape.broadcast(column, &shape)?;
        let term = tape.mul(weights, pose)?;
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    Ok(total.expect("at least one branch"))
}

/// How the selector enters a forward pass.
#[derive(Clone, Copy, Debug)]
pub enum SelectorInput<'a> {
    /// Concrete sample at temperature `tau` with the given Gumbel noise (`N×K`).
    Relaxed { tau: f64, noise: &'a Tensor },
    /// One-hot argmax of the logits.
    Hard,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `B×N×3` combined `(u, v, z_rel)`.
    pub pose: Var,
    /// Per branch, `B×N×3`.
    pub branch_poses: Vec<Var>,
    pub selector: Var,
    /// Train-mode batch statistics, `[fusion point][destination]`.
    pub bn_updates: Vec<Vec<BatchStats>>,
}

pub fn model_forward(
    tape: &mut Tape,
    params: &ModelParams,
    bound: &BoundParams,
    images: Var,
    mode: Mode,
    selector: SelectorInput,
) -> Result<ForwardOutput> {
    let cfg = &params.config;
    let batch = tape.shape(images)[0];
    let shared = shared_extract(tape, params, bound, images)?;
    let (features, bn_updates) = branches_forward(tape, params, bound, shared, mode)?;
    let mut branch_poses = Vec::with_capacity(cfg.groups);
    for (f, d) in features.iter().zip(&bound.heads) {
        let head = tape.linear(*f, d.weight, d.bias)?;
        let out = split_head(tape, head, cfg.joints, cfg.grid)?;
        let decoded = decode_soft_argmax(tape, out, cfg.grid, cfg.side)?;
        branch_poses.push(tape.reshape(decoded, &[batch, cfg.joints, 3])?);
    }
    let selector = match selector {
        SelectorInput::Relaxed { tau, noise } => sample_relaxed(tape, bound.theta, tau, noise)?,
        SelectorInput::Hard => tape.constant(harden(&params.selector).to_matrix()),
    };
    let pose = combine_groups(tape, &branch_poses, selector)?;
    Ok(ForwardOutput {
        pose,
        branch_poses,
        selector,
        bn_updates,
    })
}

/// Eval-mode prediction, `B×side²` images → `B×N×3`.
pub fn predict(params: &ModelParams, images: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let x = tape.constant(images.clone());
    let out = model_forward(
        &mut tape,
        params,
        &bound,
        x,
        Mode::Eval,
        SelectorInput::Hard,
    )?;
    Ok(tape.value(out.pose).clone())
}

fn running_stats(params: &ModelParams) -> Vec<(String, Vec<f64>)> {
    let mut out = Vec::new();
    for (p, layers) in params.fusion.iter().enumerate() {
        for (k, f) in layers.iter().enumerate() {
            out.push((
                format!("fusion.{p}.{k}.running_mean"),
                f.bn.running_mean.clone(),
            ));
            out.push((
                format!("fusion.{p}.{k}.running_var"),
                f.bn.running_var.clone(),
            ));
        }
    }
    out
}

fn encode_tensor(w: &mut LeWriter, name: &str, shape: &[usize], data: &[f64]) {
    w.bytes(&(name.len() as u16).to_le_bytes());
    w.bytes(name.as_bytes());
    w.u8(shape.len() as u8);
    for &d in shape {
        w.u32(d as u32);
    }
    for &v in data {
        w.f64(v);
    }
}

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    let config = serde_json::to_vec(&params.config).map_err(|e| Error::Format(e.to_string()))?;
    let mut w = LeWriter::default();
    w.bytes(MAGIC);
    w.u32(CHECKPOINT_VERSION);
    w.u32(config.len() as u32);
    w.bytes(&config);
    let named = params.parameters();
    let stats = running_stats(params);
    w.u32((named.len() + stats.len()) as u32);
    for (name, p) in &named {
        encode_tensor(&mut w, name, p.value.shape(), p.value.data());
    }
    for (name, v) in &stats {
        encode_tensor(&mut w, name, &[v.len()], v);
    }
    let crc = crc32fast::hash(&w.buf);
    w.u32(crc);
    write_atomic(path, |out| {
        out.write_all(&w.buf).map_err(|e| Error::io(path, e))
    })
}

fn truncated() -> Error {
    Error::Format("checkpoint is truncated".into())
}

/// Loads a checkpoint; nothing is returned unless every tensor is present
/// with the shape its configuration implies.
pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(Error::Format("not a checkpoint file (bad magic)".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let mut r = LeReader::new(body);
    r.take(4);
    let version = r.u32().ok_or_else(truncated)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "checkpoint version {version} is not supported (expected {CHECKPOINT_VERSION})"
        )));
    }
    if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().expect("4 bytes")) {
        return Err(Error::Format(
            "checkpoint checksum mismatch (corrupt or truncated)".into(),
        ));
    }
    let len = r.u32().ok_or_else(truncated)? as usize;
    let config: ModelConfig = serde_json::from_slice(r.take(len).ok_or_else(truncated)?)
        .map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
    let mut params = ModelParams::init(&config, 0)?;
    let count = r.u32().ok_or_else(truncated)? as usize;
    let mut tensors = std::collections::HashMap::new();
    for _ in 0..count {
        let n = u16::from_le_bytes(
            r.take(2)
                .ok_or_else(truncated)?
                .try_into()
                .expect("2 bytes"),
        ) as usize;
        let name = std::str::from_utf8(r.take(n).ok_or_else(truncated)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u8().ok_or_else(truncated)? as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|d| d as usize).ok_or_else(truncated))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| r.f64().ok_or_else(truncated))
            .collect::<Result<Vec<_>>>()?;
        if tensors.insert(name.clone(), (shape, data)).is_some() {
            return Err(Error::Format(format!("tensor {name} appears twice")));
        }
    }
    if r.remaining() != 0 {
        return Err(Error::Format("trailing bytes after the last tensor".into()));
    }
    let mut take = |name: &str, shape: &[usize]| -> Result<Vec<f64>> {
        match tensors.remove(name) {
            None => Err(Error::Format(format!("tensor {name} is missing"))),
            Some((s, _)) if s != shape => Err(Error::Format(format!(
                "tensor {name} has shape {s:?}, expected {shape:?}"
            ))),
            Some((_, d)) => Ok(d),
        }
    };
    let names: Vec<String> = params.parameters().into_iter().map(|(n, _)| n).collect();
    for (name, p) in names.iter().zip(params.parameters_mut()) {
        let shape = p.value.shape().to_vec();
        p.value = Tensor::new(shape.clone(), take(name, &shape)?)?;
        p.zero_grad();
    }
    for (pi, layers) in params.fusion.iter_mut().enumerate() {
        for (k, f) in layers.iter_mut().enumerate() {
            let c = f.bn.channels();
            f.bn.running_mean = take(&format!("fusion.{pi}.{k}.running_mean"), &[c])?;
            f.bn.running_var = take(&format!("fusion.{pi}.{k}.running_var"), &[c])?;
        }
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(Error::Format(format!("unexpected tensor {extra}")));
    }
    Ok(params)
}

/// Loads a checkpoint and checks it was built for `expected`.
pub fn load_checkpoint_for(path: &Path, expected: &ModelConfig) -> Result<ModelParams> {
    let params = load_checkpoint(path)?;
    if &params.config != expected {
        return Err(Error::ConfigMismatch(format!(
            "file has {:?}, run expects {:?}",
            params.config, expected
        )));
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::selector::BinarySelector;

    fn tiny(k: usize) -> ModelConfig {
        ModelConfig {
            joints: 4,
            groups: k,
            side: 8,
            shared_widths: vec![6],
            branch_widths: vec![5, 5],
            grid: 4,
        }
    }

    fn random_images(rng: &mut ChaCha8Rng, b: usize, side: usize) -> Tensor {
        Tensor::new(
            vec![b, side * side],
            (0..b * side * side).map(|_| rng.random::<f64>()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        for bad in [
            ModelConfig {
                joints: 0,
                ..tiny(2)
            },
            ModelConfig {
                groups: 0,
                ..tiny(2)
            },
            ModelConfig { grid: 1, ..tiny(2) },
            ModelConfig {
                shared_widths: vec![0],
                ..tiny(2)
            },
        ] {
            assert!(bad.validate().is_err());
        }
        assert_eq!(ModelConfig::default().fusion_points(), 2);
    }

    #[test]
    fn default_shared_output_width() {
        let cfg = ModelConfig::default();
        let mut params = ModelParams::init(&cfg, 0).unwrap();
        let last = params.shared.last_mut().unwrap();
        last.bias.value = Tensor::zeros(last.bias.value.shape());
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, false);
        let x = tape.constant(Tensor::zeros(&[1, 64 * 64]));
        let h = shared_extract(&mut tape, &params, &bound, x).unwrap();
        assert_eq!(tape.shape(h), &[1, 256]);
        assert!(tape.value(h).data().iter().all(|v| v.is_finite()));
        let bad = tape.constant(Tensor::zeros(&[1, 63]));
        assert!(shared_extract(&mut tape, &params, &bound, bad).is_err());
    }

    #[test]
    fn parameter_names_and_handles_align() {
        let mut params = ModelParams::init(&tiny(3), 1).unwrap();
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, true);
        let named: Vec<(String, Vec<usize>)> = params
            .parameters()
            .iter()
            .map(|(n, p)| (n.clone(), p.value.shape().to_vec()))
            .collect();
        let vars = bound.vars();
        assert_eq!(named.len(), vars.len());
        assert_eq!(params.parameters_mut().len(), vars.len());
        for ((_, shape), v) in named.iter().zip(&vars) {
            assert_eq!(tape.shape(*v), shape.as_slice());
        }
        let groups: Vec<ParamGroup> = params.parameters().iter().map(|(_, p)| p.group).collect();
        assert_eq!(*groups.last().unwrap(), ParamGroup::Selector);
        assert!(groups.contains(&ParamGroup::Fusion));
    }

    #[test]
    fn branch_count_matches_groups() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for k in [1, 3] {
            let params = ModelParams::init(&tiny(k), 2).unwrap();
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape, false);
            let x = tape.constant(random_images(&mut rng, 3, 8));
            let h = shared_extract(&mut tape, &params, &bound, x).unwrap();
            let (feats, stats) =
                branches_forward(&mut tape, &params, &bound, h, Mode::Eval).unwrap();
            assert_eq!(feats.len(), k);
            assert!(stats.is_empty());
            for f in feats {
                assert_eq!(tape.shape(f), &[3, 5]);
            }
        }
    }

    #[test]
    fn identical_branches_give_identical_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut params = ModelParams::init(&tiny(3), 3).unwrap();
        let first = params.branches[0].clone();
        for b in params.branches.iter_mut() {
            *b = first.clone();
        }
        let images = random_images(&mut rng, 4, 8);
        for mode in [Mode::Eval, Mode::Train] {
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape, false);
            let x = tape.constant(images.clone());
            let h = shared_extract(&mut tape, &params, &bound, x).unwrap();
            let (feats, _) = branches_forward(&mut tape, &params, &bound, h, mode).unwrap();
            let a = tape.value(feats[0]).data().to_vec();
            for f in &feats[1..] {
                let b = tape.value(*f).data();
                assert!(a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12));
            }
        }
    }

    fn decode_one(logits: Vec<f64>, depth: Vec<f64>, grid: usize, side: usize) -> Vec<f64> {
        let cells = grid * grid;
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::new(vec![1, cells], logits).unwrap());
        let d = tape.constant(Tensor::new(vec![1, cells], depth).unwrap());
        let out = decode_soft_argmax(
            &mut tape,
            BranchOutput {
                heatmaps: h,
                depths: d,
            },
            grid,
            side,
        )
        .unwrap();
        tape.value(out).data().to_vec()
    }

    #[test]
    fn soft_argmax_examples() {
        let p = decode_one(vec![0.0; 256], vec![0.0; 256], 16, 64);
        assert!((p[0] - 32.0).abs() < 1e-9 && (p[1] - 32.0).abs() < 1e-9);

        let mut logits = vec![0.0; 256];
        logits[3 * 16 + 5] = 50.0;
        let p = decode_one(logits, vec![0.0; 256], 16, 64);
        assert!((p[0] - 22.0).abs() < 1e-6, "u = {}", p[0]);
        assert!((p[1] - 14.0).abs() < 1e-6, "v = {}", p[1]);

        let p = decode_one(vec![0.0; 256], vec![-0.75; 256], 16, 64);
        assert!((p[2] + 0.75).abs() < 1e-12);
    }

    #[test]
    fn soft_argmax_stays_in_frame() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let scale = rng.random_range(0.1..200.0);
            let logits: Vec<f64> = (0..16).map(|_| rng.random_range(-scale..scale)).collect();
            let p = decode_one(logits, vec![0.0; 16], 4, 8);
            assert!((0.0..=8.0).contains(&p[0]) && (0.0..=8.0).contains(&p[1]));
        }
    }

    fn combine_values(poses: &[Vec<f64>], b: usize, n: usize, selector: Tensor) -> Vec<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = poses
            .iter()
            .map(|p| tape.constant(Tensor::new(vec![b, n, 3], p.clone()).unwrap()))
            .collect();
        let s = tape.constant(selector);
        let out = combine_groups(&mut tape, &vars, s).unwrap();
        tape.value(out).data().to_vec()
    }

    #[test]
    fn combine_examples() {
        let a = vec![10.0; 3];
        let b = vec![20.0; 3];
        let s = Tensor::matrix(1, 2, vec![0.7, 0.3]).unwrap();
        let out = combine_values(&[a.clone(), b.clone()], 1, 1, s);
        assert!(out.iter().all(|v| (v - 13.0).abs() < 1e-12));

        let s = Tensor::matrix(1, 2, vec![0.5, 0.5]).unwrap();
        let out = combine_values(&[a, b], 1, 1, s);
        assert!(out.iter().all(|v| (v - 15.0).abs() < 1e-12));
    }

    #[test]
    fn binary_combination_is_a_disjoint_union() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let (b, n, k) = (2, 7, 3);
            let poses: Vec<Vec<f64>> = (0..k)
                .map(|_| {
                    (0..b * n * 3)
                        .map(|_| rng.random_range(-50.0..50.0))
                        .collect()
                })
                .collect();
            let assignment: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
            let sel = BinarySelector::new(assignment.clone(), k).unwrap();
            let out = combine_values(&poses, b, n, sel.to_matrix());
            // rebuild from the partition
            let mut expected = vec![f64::NAN; b * n * 3];
            for (g, joints) in sel.partition().iter().enumerate() {
                for &i in joints {
                    for s in 0..b {
                        for c in 0..3 {
                            expected[(s * n + i) * 3 + c] = poses[g][(s * n + i) * 3 + c];
                        }
                    }
                }
            }
            assert_eq!(out, expected);
        }
    }

    #[test]
    fn eval_forward_is_deterministic_and_train_is_not() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut params = ModelParams::init(&tiny(2), 7).unwrap();
        params.selector.theta.value =
            Tensor::matrix(4, 2, vec![0.3, -0.2, 1.0, 0.4, -1.0, 0.1, 0.0, 0.5]).unwrap();
        let images = random_images(&mut rng, 3, 8);
        assert_eq!(
            predict(&params, &images).unwrap(),
            predict(&params, &images).unwrap()
        );

        let run = |noise: &Tensor| {
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape, true);
            let x = tape.constant(images.clone());
            let out = model_forward(
                &mut tape,
                &params,
                &bound,
                x,
                Mode::Train,
                SelectorInput::Relaxed { tau: 1.0, noise },
            )
            .unwrap();
            assert_eq!(out.bn_updates.len(), 2);
            assert_eq!(out.bn_updates[0].len(), 2);
            tape.value(out.pose).clone()
        };
        let n1 = crate::selector::sample_gumbel(&mut rng, 4, 2);
        let n2 = crate::selector::sample_gumbel(&mut rng, 4, 2);
        assert_ne!(run(&n1), run(&n2));
    }

    /// Shared → blocks → head → decode with no fusion and no selector.
    fn ungrouped(params: &ModelParams, images: &Tensor) -> Tensor {
        let cfg = &params.config;
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, false);
        let x = tape.constant(images.clone());
        let mut h = shared_extract(&mut tape, params, &bound, x).unwrap();
        for d in &bound.branches[0] {
            let z = tape.linear(h, d.weight, d.bias).unwrap();
            h = tape.relu(z).unwrap();
        }
        let head = tape
            .linear(h, bound.heads[0].weight, bound.heads[0].bias)
            .unwrap();
        let out = split_head(&mut tape, head, cfg.joints, cfg.grid).unwrap();
        let dec = decode_soft_argmax(&mut tape, out, cfg.grid, cfg.side).unwrap();
        tape.value(dec).clone()
    }

    #[test]
    fn single_group_matches_ungrouped_network() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let params = ModelParams::init(&tiny(1), 9).unwrap();
        let images = random_images(&mut rng, 5, 8);
        let grouped = predict(&params, &images).unwrap();
        let plain = ungrouped(&params, &images);
        assert_eq!(grouped.len(), plain.len());
        for (a, b) in grouped.data().iter().zip(plain.data()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut params = ModelParams::init(&tiny(3), 10).unwrap();
        params.selector.theta.value.data_mut()[5] = -0.123456789;
        params.fusion[1][2].bn.running_var[0] = 3.25;
        save_checkpoint(&params, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, params);
        for ((_, a), (_, b)) in back.parameters().iter().zip(params.parameters()) {
            let same = a
                .value
                .data()
                .iter()
                .zip(b.value.data())
                .all(|(x, y)| x.to_bits() == y.to_bits());
            assert!(same);
        }
        assert!(load_checkpoint_for(&path, &tiny(3)).is_ok());
    }

    #[test]
    fn checkpoint_rejects_truncation_and_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&ModelParams::init(&tiny(3), 11).unwrap(), &path).unwrap();
        assert!(matches!(
            load_checkpoint_for(&path, &tiny(2)),
            Err(Error::ConfigMismatch(_))
        ));

        let bytes = std::fs::read(&path).unwrap();
        let cut = dir.path().join("cut.ckpt");
        std::fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_checkpoint(&cut), Err(Error::Format(_))));

        let mut bumped = bytes.clone();
        bumped[4] = 2;
        std::fs::write(&cut, &bumped).unwrap();
        let err = load_checkpoint(&cut).unwrap_err().to_string();
        assert!(err.contains("version"), "{err}");

        std::fs::write(&cut, b"GPDS0000000000").unwrap();
        assert!(load_checkpoint(&cut).is_err());
    }
}
