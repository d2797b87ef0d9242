//! Procedural hand benchmark with planted joint groups.
//!
//! A 21-joint hand is articulated by one curl latent per planted group:
//! every flexion angle of the joints in a group is driven by that group's
//! latent (plus small independent jitter). The posed hand is rotated,
//! placed in front of a pinhole camera and rendered as amplitude-coded
//! Gaussian blobs.
//!
//! # File format
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! header:
//!   magic        4 bytes  "GPDS"
//!   version      u32      (= 1)
//!   count        u64      number of records
//!   joints       u32
//!   side         u32      image side in pixels
//!   fx fy px py  4 × f64
//!   groups       u32      number of planted groups
//!   labels       joints × u8
//!   seed         u64
//!   crc          u32      CRC-32 of every preceding header byte
//! record (repeated `count` times):
//!   image        side² × f32, row-major, intensities in [0, 1]
//!   pose_3d      joints × 3 × f64   (x, y, z) in mm, camera frame
//!   pose_2p5d    joints × 3 × f64   (u, v, z_rel)
//!   s0           f64      hand scale in mm
//!   z_root       f64      root depth in mm
//!   crc          u32      CRC-32 of the record bytes above
//! ```

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use nalgebra::{Rotation3, Unit, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::geometry::{project, CameraIntrinsics, Pose2p5D, Pose3D};
use crate::io::{read_up_to, write_atomic, LeReader, LeWriter};

pub const NUM_JOINTS: usize = 21;
/// Middle-finger MCP.
pub const ROOT_JOINT: usize = 9;
/// The hand scale is the distance between these two joints (middle MCP–PIP).
pub const SCALE_JOINTS: (usize, usize) = (9, 10);

pub const JOINT_NAMES: [&str; NUM_JOINTS] = [
    "wrist",
    "thumb_cmc",
    "thumb_mcp",
    "thumb_ip",
    "thumb_tip",
    "index_mcp",
    "index_pip",
    "index_dip",
    "index_tip",
    "middle_mcp",
    "middle_pip",
    "middle_dip",
    "middle_tip",
    "ring_mcp",
    "ring_pip",
    "ring_dip",
    "ring_tip",
    "pinky_mcp",
    "pinky_pip",
    "pinky_dip",
    "pinky_tip",
];

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"GPDS";
const BLOB_SIGMA: f64 = 1.5;
const MAX_RETRIES: usize = 1000;

/// Kinematic unit of a joint: 0 wrist+thumb, 1 index, 2 middle, 3 ring, 4 pinky.
pub fn unit_of_joint(joint: usize) -> usize {
    match joint {
        0..=4 => 0,
        j => 1 + (j - 5) / 4,
    }
}

/// Group label per joint. Planted groups are unions of kinematic units.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PlantedGrouping {
    labels: Vec<usize>,
    groups: usize,
}

impl PlantedGrouping {
    /// Supported splits:
    /// 1: one latent for the whole hand;
    /// 2: {wrist, thumb, index} / {middle, ring, pinky};
    /// 3: {wrist, thumb} / {index} / {middle, ring, pinky};
    /// 5: one group per kinematic unit.
    pub fn new(groups: usize) -> Result<Self> {
        let unit_groups: [usize; 5] = match groups {
            1 => [0, 0, 0, 0, 0],
            2 => [0, 0, 1, 1, 1],
            3 => [0, 1, 2, 2, 2],
            5 => [0, 1, 2, 3, 4],
            g => {
                return Err(Error::Config(format!(
                    "unsupported planted group count {g} (expected 1, 2, 3 or 5)"
                )))
            }
        };
        let labels = (0..NUM_JOINTS)
            .map(|j| unit_groups[unit_of_joint(j)])
            .collect();
        Ok(Self { labels, groups })
    }

    /// Thumb (with the wrist) / index / remaining fingers.
    pub fn thumb_index_others() -> Self {
        Self::new(3).expect("3 is supported")
    }

    fn from_labels(labels: Vec<usize>, groups: usize) -> Result<Self> {
        for g in 1..=groups.max(1) {
            if let Ok(p) = Self::new(g) {
                if p.labels == labels && p.groups == groups {
                    return Ok(p);
                }
            }
        }
        Err(Error::Format(format!(
            "unknown planted grouping {labels:?}"
        )))
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    fn unit_group(&self, unit: usize) -> usize {
        let joint = if unit == 0 { 0 } else { 5 + 4 * (unit - 1) };
        self.labels[joint]
    }
}

/// Hand template in the hand frame (mm): palm in the x–y plane, fingers
/// pointing toward −y, thumb toward −x, root (middle MCP) at the origin.
/// Flexion moves joints toward −z.
#[derive(Clone, Debug, PartialEq)]
pub struct HandSkeleton {
    pub wrist: [f64; 3],
    pub thumb_base: [f64; 3],
    pub thumb_pivot: [f64; 3],
    pub thumb_bones: [f64; 3],
    /// Angle of the thumb from −y toward −x, radians.
    pub thumb_direction: f64,
    pub finger_bases: [[f64; 3]; 4],
    pub finger_pivots: [[f64; 3]; 4],
    pub finger_bones: [[f64; 3]; 4],
    /// Splay of each finger from −y toward +x, radians.
    pub finger_splay: [f64; 4],
    /// Flexion per unit curl: wrist, thumb opposition, then three chain joints.
    pub thumb_range: [f64; 5],
    /// Flexion per unit curl: metacarpal, MCP, PIP, DIP.
    pub finger_range: [f64; 4],
}

impl Default for HandSkeleton {
    fn default() -> Self {
        let d = f64::to_radians;
        Self {
            wrist: [0.0, 85.0, 0.0],
            thumb_base: [-24.0, 58.0, 0.0],
            thumb_pivot: [-8.0, 75.0, 0.0],
            thumb_bones: [36.0, 30.0, 25.0],
            thumb_direction: d(50.0),
            finger_bases: [
                [-21.0, 3.0, 0.0],
                [0.0, 0.0, 0.0],
                [18.0, 3.0, 0.0],
                [34.0, 10.0, 0.0],
            ],
            finger_pivots: [
                [-9.0, 75.0, 0.0],
                [0.0, 75.0, 0.0],
                [8.0, 75.0, 0.0],
                [15.0, 75.0, 0.0],
            ],
            finger_bones: [
                [40.0, 24.0, 20.0],
                [45.0, 28.0, 22.0],
                [42.0, 27.0, 21.0],
                [32.0, 20.0, 18.0],
            ],
            finger_splay: [d(-8.0), 0.0, d(7.0), d(15.0)],
            thumb_range: [d(30.0), d(35.0), d(25.0), d(35.0), d(40.0)],
            finger_range: [d(12.0), d(50.0), d(70.0), d(40.0)],
        }
    }
}

fn rot(axis: Vector3<f64>, angle: f64) -> Rotation3<f64> {
    Rotation3::from_axis_angle(&Unit::new_normalize(axis), angle)
}

/// Serial chain of three bones starting at `base`.
fn chain(
    base: Vector3<f64>,
    direction: Vector3<f64>,
    axis: Vector3<f64>,
    bones: &[f64; 3],
    angles: [f64; 3],
    out: &mut [[f64; 3]],
) {
    let mut p = base;
    let mut bend = 0.0;
    out[0] = [p.x, p.y, p.z];
    for j in 0..3 {
        bend += angles[j];
        p += bones[j] * (rot(axis, bend) * direction);
        out[j + 1] = [p.x, p.y, p.z];
    }
}

/// Joint angles of one pose, per kinematic unit.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Articulation {
    pub curls: [f64; 5],
    /// Additive angle noise (radians) per unit; slots follow the unit's range layout.
    pub jitter: [[f64; 5]; 5],
}

impl HandSkeleton {
    /// Hand-frame joint positions for an articulation.
    pub fn forward_kinematics(&self, art: &Articulation) -> [[f64; 3]; NUM_JOINTS] {
        let mut joints = [[0.0; 3]; NUM_JOINTS];
        let x_axis = Vector3::x();

        // unit 0: wrist flex about the root, thumb opposition and flexion
        let c = art.curls[0];
        let jit = art.jitter[0];
        let angle = |slot: usize| c * self.thumb_range[slot] + jit[slot];
        let w = rot(x_axis, -angle(0)) * Vector3::from(self.wrist);
        joints[0] = [w.x, w.y, w.z];

        let (s, co) = self.thumb_direction.sin_cos();
        let dir0 = Vector3::new(-s, -co, 0.0);
        let axis0 = Vector3::new(-co, s, 0.0);
        let oppose = rot(Vector3::y(), angle(1));
        let pivot = Vector3::from(self.thumb_pivot);
        let base = pivot + oppose * (Vector3::from(self.thumb_base) - pivot);
        chain(
            base,
            oppose * dir0,
            oppose * axis0,
            &self.thumb_bones,
            [angle(2), angle(3), angle(4)],
            &mut joints[1..5],
        );

        for f in 0..4 {
            let unit = f + 1;
            let c = art.curls[unit];
            let jit = art.jitter[unit];
            let angle = |slot: usize| c * self.finger_range[slot] + jit[slot];
            let (s, co) = self.finger_splay[f].sin_cos();
            let dir0 = Vector3::new(s, -co, 0.0);
            let axis0 = Vector3::new(co, s, 0.0);
            // the root finger keeps its metacarpal fixed
            let meta = if unit == 2 { 0.0 } else { angle(0) };
            let flex = rot(x_axis, meta);
            let pivot = Vector3::from(self.finger_pivots[f]);
            let base = pivot + flex * (Vector3::from(self.finger_bases[f]) - pivot);
            let first = 5 + 4 * f;
            chain(
                base,
                flex * dir0,
                flex * axis0,
                &self.finger_bones[f],
                [angle(1), angle(2), angle(3)],
                &mut joints[first..first + 4],
            );
        }
        joints
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    pub side: usize,
    pub camera: CameraIntrinsics,
    pub planted: PlantedGrouping,
    pub skeleton: HandSkeleton,
    pub curl_range: (f64, f64),
    pub jitter_deg: f64,
    pub max_roll_deg: f64,
    pub max_tilt_deg: f64,
    pub z_root_range: (f64, f64),
    pub hand_scale_range: (f64, f64),
    pub root_jitter_px: f64,
    pub margin_px: f64,
}

impl GeneratorConfig {
    /// Defaults for a square image: focal length 100 px at side 64, scaled
    /// with the side, principal point at the image centre.
    pub fn for_side(side: usize) -> Result<Self> {
        if side < 8 {
            return Err(Error::Config(format!("image side {side} is too small")));
        }
        let f = 100.0 * side as f64 / 64.0;
        let c = side as f64 / 2.0;
        Ok(Self {
            side,
            camera: CameraIntrinsics::new(f, f, c, c)?,
            planted: PlantedGrouping::thumb_index_others(),
            skeleton: HandSkeleton::default(),
            curl_range: (0.0, 1.0),
            jitter_deg: 2.0,
            max_roll_deg: 15.0,
            max_tilt_deg: 15.0,
            z_root_range: (400.0, 600.0),
            hand_scale_range: (0.9, 1.1),
            root_jitter_px: 3.0,
            margin_px: 1.0,
        })
    }
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self::for_side(64).expect("64 is a valid side")
    }
}

/// One posed hand before rendering.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseDraw {
    pub pose: Pose3D,
    pub s0: f64,
    pub z_root: f64,
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Places hand-frame joints in the camera frame.
fn place(
    joints: &[[f64; 3]; NUM_JOINTS],
    scale: f64,
    rotation: &Rotation3<f64>,
    root: Vector3<f64>,
) -> Pose3D {
    Pose3D {
        joints: joints
            .iter()
            .map(|p| {
                let q = rotation * (scale * Vector3::from(*p)) + root;
                [q.x, q.y, q.z]
            })
            .collect(),
    }
}

fn in_frame(pose: &Pose2p5D, side: usize, margin: f64) -> bool {
    let hi = side as f64 - margin;
    pose.joints
        .iter()
        .all(|&[u, v, _]| u >= margin && u < hi && v >= margin && v < hi)
}

/// Draws one pose; rejects draws that leave the frame.
pub fn sample_pose<R: Rng + ?Sized>(rng: &mut R, config: &GeneratorConfig) -> Result<PoseDraw> {
    let jitter = Normal::new(0.0, config.jitter_deg.to_radians().max(0.0))
        .map_err(|e| Error::Config(format!("jitter: {e}")))?;
    let cam = &config.camera;
    for _ in 0..MAX_RETRIES {
        let latents: Vec<f64> = (0..config.planted.groups())
            .map(|_| uniform(rng, config.curl_range))
            .collect();
        let mut art = Articulation::default();
        for unit in 0..5 {
            art.curls[unit] = latents[config.planted.unit_group(unit)];
            for slot in 0..5 {
                art.jitter[unit][slot] = jitter.sample(rng);
            }
        }
        let roll = uniform(rng, (-config.max_roll_deg, config.max_roll_deg)).to_radians();
        let pitch = uniform(rng, (-config.max_tilt_deg, config.max_tilt_deg)).to_radians();
        let yaw = uniform(rng, (-config.max_tilt_deg, config.max_tilt_deg)).to_radians();
        let scale = uniform(rng, config.hand_scale_range);
        let z_root = uniform(rng, config.z_root_range);
        let du = uniform(rng, (-config.root_jitter_px, config.root_jitter_px));
        let dv = uniform(rng, (-config.root_jitter_px, config.root_jitter_px));

        let rotation = Rotation3::from_euler_angles(pitch, yaw, roll);
        let root = Vector3::new(du * z_root / cam.fx, dv * z_root / cam.fy, z_root);
        let local = config.skeleton.forward_kinematics(&art);
        let pose = place(&local, scale, &rotation, root);
        if pose.joints.iter().any(|p| p[2] <= 0.0) {
            continue;
        }
        let (a, b) = SCALE_JOINTS;
        let s0 = dist(pose.joints[a], pose.joints[b]);
        let z_root = pose.joints[ROOT_JOINT][2];
        let projected = project(&pose, cam, s0, z_root)?;
        if in_frame(&projected, config.side, config.margin_px) {
            return Ok(PoseDraw { pose, s0, z_root });
        }
    }
    Err(Error::Generator(MAX_RETRIES))
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Peak intensity of joint `i` among `n` joints.
pub fn blob_amplitude(i: usize, n: usize) -> f64 {
    let denom = n.saturating_sub(1).max(1) as f64;
    0.5 + 0.5 * i as f64 / denom
}

/// Renders joints `(u, v)` as clamped Gaussian blobs; pixel `(r, c)` is
/// sampled at its centre `(c + 0.5, r + 0.5)`.
pub fn render_blobs(points: &[[f64; 2]], side: usize) -> Result<Vec<f64>> {
    for (i, &[u, v]) in points.iter().enumerate() {
        if !(u >= 0.0 && u < side as f64 && v >= 0.0 && v < side as f64) {
            return Err(Error::OutOfFrame {
                joint: i,
                u,
                v,
                side,
            });
        }
    }
    let inv = 1.0 / (2.0 * BLOB_SIGMA * BLOB_SIGMA);
    let n = points.len();
    let mut image = vec![0.0; side * side];
    for (i, &[u, v]) in points.iter().enumerate() {
        let a = blob_amplitude(i, n);
        for r in 0..side {
            let dy = r as f64 + 0.5 - v;
            let row = &mut image[r * side..(r + 1) * side];
            let ey = dy * dy;
            for (c, px) in row.iter_mut().enumerate() {
                let dx = c as f64 + 0.5 - u;
                *px += a * (-(dx * dx + ey) * inv).exp();
            }
        }
    }
    image.iter_mut().for_each(|p| *p = p.clamp(0.0, 1.0));
    Ok(image)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    /// `side × side` intensities, row-major.
    pub image: Vec<f32>,
    pub pose_3d: Pose3D,
    pub pose_2p5d: Pose2p5D,
    pub camera: CameraIntrinsics,
    pub s0: f64,
    pub z_root: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetHeader {
    pub version: u32,
    pub count: u64,
    pub joints: usize,
    pub side: usize,
    pub camera: CameraIntrinsics,
    pub planted: PlantedGrouping,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub samples: Vec<SyntheticSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Generates sample `index` of the stream keyed by `seed`.
pub fn generate_sample(seed: u64, index: u64, config: &GeneratorConfig) -> Result<SyntheticSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let draw = sample_pose(&mut rng, config)?;
    let pose_2p5d = project(&draw.pose, &config.camera, draw.s0, draw.z_root)?;
    let points: Vec<[f64; 2]> = pose_2p5d.joints.iter().map(|p| [p[0], p[1]]).collect();
    let image = render_blobs(&points, config.side)?
        .into_iter()
        .map(|v| v as f32)
        .collect();
    Ok(SyntheticSample {
        image,
        pose_3d: draw.pose,
        pose_2p5d,
        camera: config.camera,
        s0: draw.s0,
        z_root: draw.z_root,
    })
}

/// In-memory dataset; the same `(count, seed, config)` always yields the
/// same samples as [`generate_dataset`] writes.
pub fn generate_in_memory(count: usize, seed: u64, config: &GeneratorConfig) -> Result<Dataset> {
    if count == 0 {
        return Err(Error::Config("dataset needs at least one sample".into()));
    }
    let samples = (0..count as u64)
        .map(|i| generate_sample(seed, i, config))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        header: header_for(count, seed, config),
        samples,
    })
}

fn header_for(count: usize, seed: u64, config: &GeneratorConfig) -> DatasetHeader {
    DatasetHeader {
        version: FORMAT_VERSION,
        count: count as u64,
        joints: NUM_JOINTS,
        side: config.side,
        camera: config.camera,
        planted: config.planted.clone(),
        seed,
    }
}

fn encode_header(h: &DatasetHeader) -> Vec<u8> {
    let mut w = LeWriter::default();
    w.bytes(MAGIC);
    w.u32(h.version);
    w.u64(h.count);
    w.u32(h.joints as u32);
    w.u32(h.side as u32);
    for v in [h.camera.fx, h.camera.fy, h.camera.px, h.camera.py] {
        w.f64(v);
    }
    w.u32(h.planted.groups() as u32);
    for &l in h.planted.labels() {
        w.u8(l as u8);
    }
    w.u64(h.seed);
    let crc = crc32fast::hash(&w.buf);
    w.u32(crc);
    w.buf
}

fn encode_record(s: &SyntheticSample) -> Vec<u8> {
    let mut w = LeWriter::default();
    for &p in &s.image {
        w.f32(p);
    }
    for j in s.pose_3d.joints.iter().chain(&s.pose_2p5d.joints) {
        for &c in j {
            w.f64(c);
        }
    }
    w.f64(s.s0);
    w.f64(s.z_root);
    let crc = crc32fast::hash(&w.buf);
    w.u32(crc);
    w.buf
}

fn record_len(joints: usize, side: usize) -> usize {
    side * side * 4 + joints * 6 * 8 + 16 + 4
}

/// Writes `count` samples to `out`; byte-identical for identical inputs.
pub fn generate_dataset(
    count: usize,
    seed: u64,
    out: &Path,
    config: &GeneratorConfig,
) -> Result<DatasetHeader> {
    if count == 0 {
        return Err(Error::Config("dataset needs at least one sample".into()));
    }
    let header = header_for(count, seed, config);
    write_atomic(out, |w| {
        w.write_all(&encode_header(&header))
            .map_err(|e| Error::io(out, e))?;
        for i in 0..count as u64 {
            let s = generate_sample(seed, i, config)?;
            w.write_all(&encode_record(&s))
                .map_err(|e| Error::io(out, e))?;
        }
        Ok(())
    })?;
    Ok(header)
}

fn decode_header<R: Read>(r: &mut R, path: &Path) -> Result<DatasetHeader> {
    let fixed = 4 + 4 + 8 + 4 + 4 + 32 + 4;
    let head = read_up_to(r, fixed).map_err(|e| Error::io(path, e))?;
    if head.len() < fixed {
        return Err(Error::Format("file too short for a dataset header".into()));
    }
    let mut rd = LeReader::new(&head);
    if rd.take(4) != Some(MAGIC.as_slice()) {
        return Err(Error::Format("not a dataset file (bad magic)".into()));
    }
    let version = rd.u32().unwrap();
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "dataset format version {version} is not supported (expected {FORMAT_VERSION})"
        )));
    }
    let count = rd.u64().unwrap();
    let joints = rd.u32().unwrap() as usize;
    let side = rd.u32().unwrap() as usize;
    let cam = [
        rd.f64().unwrap(),
        rd.f64().unwrap(),
        rd.f64().unwrap(),
        rd.f64().unwrap(),
    ];
    let groups = rd.u32().unwrap() as usize;
    if joints != NUM_JOINTS {
        return Err(Error::Format(format!(
            "dataset has {joints} joints, expected {NUM_JOINTS}"
        )));
    }
    let tail = read_up_to(r, joints + 8 + 4).map_err(|e| Error::io(path, e))?;
    if tail.len() < joints + 12 {
        return Err(Error::Format("truncated dataset header".into()));
    }
    let mut rt = LeReader::new(&tail);
    let labels: Vec<usize> = (0..joints).map(|_| rt.u8().unwrap() as usize).collect();
    let seed = rt.u64().unwrap();
    let crc = rt.u32().unwrap();
    let mut all = head.clone();
    all.extend_from_slice(&tail[..joints + 8]);
    if crc32fast::hash(&all) != crc {
        return Err(Error::Format("dataset header checksum mismatch".into()));
    }
    let camera = CameraIntrinsics::new(cam[0], cam[1], cam[2], cam[3])?;
    Ok(DatasetHeader {
        version,
        count,
        joints,
        side,
        camera,
        planted: PlantedGrouping::from_labels(labels, groups)?,
        seed,
    })
}

fn decode_record(bytes: &[u8], header: &DatasetHeader, index: usize) -> Result<SyntheticSample> {
    let bad = |detail: String| Error::Record { index, detail };
    let body = &bytes[..bytes.len() - 4];
    let crc = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    if crc32fast::hash(body) != crc {
        return Err(bad("checksum mismatch".into()));
    }
    let mut r = LeReader::new(body);
    let n = header.joints;
    let image: Vec<f32> = (0..header.side * header.side)
        .map(|_| r.f32().unwrap())
        .collect();
    let mut read_pose = || -> Vec<[f64; 3]> {
        (0..n)
            .map(|_| [r.f64().unwrap(), r.f64().unwrap(), r.f64().unwrap()])
            .collect()
    };
    let pose_3d = Pose3D {
        joints: read_pose(),
    };
    let pose_2p5d = Pose2p5D {
        joints: read_pose(),
    };
    let s0 = r.f64().unwrap();
    let z_root = r.f64().unwrap();
    debug_assert_eq!(r.remaining(), 0);

    if image.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(bad("image intensity outside [0, 1]".into()));
    }
    if !(s0 > 0.0) || !z_root.is_finite() {
        return Err(bad(format!("invalid scale {s0} or root depth {z_root}")));
    }
    let (a, b) = SCALE_JOINTS;
    if (dist(pose_3d.joints[a], pose_3d.joints[b]) - s0).abs() > 1e-9 {
        return Err(bad("hand scale disagrees with the MCP–PIP distance".into()));
    }
    let reprojected =
        project(&pose_3d, &header.camera, s0, z_root).map_err(|e| bad(e.to_string()))?;
    for (j, (p, q)) in reprojected.joints.iter().zip(&pose_2p5d.joints).enumerate() {
        if p.iter().zip(q).any(|(x, y)| !((x - y).abs() <= 1e-9)) {
            return Err(bad(format!(
                "joint {j}: stored 2.5D pose disagrees with the 3D pose"
            )));
        }
    }
    if !in_frame(&pose_2p5d, header.side, 0.0) {
        return Err(bad("a joint lies outside the image".into()));
    }
    Ok(SyntheticSample {
        image,
        pose_3d,
        pose_2p5d,
        camera: header.camera,
        s0,
        z_root,
    })
}

/// Streaming reader. Yields samples in stored order; after the first error
/// the iterator is exhausted.
pub struct DatasetReader {
    header: DatasetHeader,
    reader: BufReader<File>,
    next: usize,
    failed: bool,
}

impl DatasetReader {
    pub fn open(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut reader = BufReader::new(file);
        let header = decode_header(&mut reader, path)?;
        Ok(Self {
            header,
            reader,
            next: 0,
            failed: false,
        })
    }

    pub fn header(&self) -> &DatasetHeader {
        &self.header
    }
}

impl Iterator for DatasetReader {
    type Item = Result<SyntheticSample>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed || self.next as u64 >= self.header.count {
            return None;
        }
        let index = self.next;
        self.next += 1;
        let len = record_len(self.header.joints, self.header.side);
        let item = match read_up_to(&mut self.reader, len) {
            Err(e) => Err(Error::Record {
                index,
                detail: e.to_string(),
            }),
            Ok(bytes) if bytes.len() < len => Err(Error::Record {
                index,
                detail: format!("truncated: {} of {len} bytes", bytes.len()),
            }),
            Ok(bytes) => decode_record(&bytes, &self.header, index),
        };
        self.failed = item.is_err();
        Some(item)
    }
}

pub fn read_dataset(path: &Path) -> Result<DatasetReader> {
    DatasetReader::open(path)
}

/// Reads a whole dataset file, failing on the first bad record.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let reader = DatasetReader::open(path)?;
    let header = reader.header().clone();
    let samples = reader.collect::<Result<Vec<_>>>()?;
    Ok(Dataset { header, samples })
}
