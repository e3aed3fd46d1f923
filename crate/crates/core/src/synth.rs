//! Deterministic synthetic upper-body corpus: free motion driven by sums of
//! sinusoids, minimum-jerk reaches solved with two-link inverse kinematics,
//! and legible/predictable reach variants.
//!
//! Frames are produced in the sensor convention (metres, y up, z towards the
//! sensor, the user facing -z, so the user's right is +x). Noise is applied
//! as a small random tilt of every segment direction plus a root
//! translation, which keeps all segment lengths exact.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::nn::{derive_seed, Rng};
use crate::skeleton::{JointFrame, Point3, Recording, CHAIN, FPS, NUM_JOINTS, NUM_SEGMENTS};
use crate::target::{Target, TargetSet};

const RIGHT_SHOULDER: usize = 3;

/// Segment lengths and rest placement of the synthetic body.
#[derive(Debug, Clone, PartialEq)]
pub struct BodyModel {
    pub root_base: Point3,
    pub spine: f64,
    pub neck: f64,
    pub shoulder_half_width: f64,
    pub upper_arm: f64,
    pub forearm: f64,
    /// Positional noise standard deviation in metres.
    pub jitter: f64,
}

impl Default for BodyModel {
    fn default() -> Self {
        Self {
            root_base: [0.0, 0.9, 2.2],
            spine: 0.45,
            neck: 0.25,
            shoulder_half_width: 0.18,
            upper_arm: 0.30,
            forearm: 0.27,
            jitter: 0.002,
        }
    }
}

impl BodyModel {
    /// Lengths in [`CHAIN`] order.
    pub fn segment_lengths(&self) -> [f64; NUM_SEGMENTS] {
        [
            self.spine,
            self.neck,
            self.shoulder_half_width,
            self.shoulder_half_width,
            self.upper_arm,
            self.forearm,
            self.upper_arm,
            self.forearm,
        ]
    }

    pub fn reach_limits(&self) -> (f64, f64) {
        (
            (self.upper_arm - self.forearm).abs(),
            self.upper_arm + self.forearm,
        )
    }

    /// Right shoulder position with the torso upright at the rest root.
    pub fn rest_right_shoulder(&self) -> Point3 {
        let r = self.root_base;
        [r[0] + self.shoulder_half_width, r[1] + self.spine, r[2]]
    }

    pub fn rest_spine_top(&self) -> Point3 {
        let r = self.root_base;
        [r[0], r[1] + self.spine, r[2]]
    }
}

type Mat3 = [[f64; 3]; 3];

fn mat_vec(m: &Mat3, v: Point3) -> Point3 {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

fn rot_x(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]]
}

fn rot_y(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]]
}

fn rot_z(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

fn add(a: Point3, b: Point3) -> Point3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn sub(a: Point3, b: Point3) -> Point3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn scale(a: Point3, k: f64) -> Point3 {
    [a[0] * k, a[1] * k, a[2] * k]
}

fn dot(a: Point3, b: Point3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn norm(a: Point3) -> f64 {
    dot(a, a).sqrt()
}

fn unit(a: Point3) -> Point3 {
    scale(a, 1.0 / norm(a))
}

/// Arm segment direction: hanging down, raised forward by `flex` and
/// out to the side by `abduct`.
fn arm_direction(flex: f64, abduct: f64, side: f64) -> Point3 {
    [
        side * abduct.sin(),
        -abduct.cos() * flex.cos(),
        -abduct.cos() * flex.sin(),
    ]
}

/// Places every joint from the root and unit segment directions.
fn assemble(
    root: Point3,
    dirs: &[Point3; NUM_SEGMENTS],
    lengths: &[f64; NUM_SEGMENTS],
) -> Vec<Point3> {
    let mut joints = vec![[0.0; 3]; NUM_JOINTS];
    joints[0] = root;
    for (s, &(p, c)) in CHAIN.iter().enumerate() {
        joints[c] = add(joints[p], scale(dirs[s], lengths[s]));
    }
    joints
}

/// Tilts every direction by isotropic noise sized so the segment end moves
/// by about `jitter` metres; also shakes the root.
fn jitter_pose(
    root: &mut Point3,
    dirs: &mut [Point3; NUM_SEGMENTS],
    lengths: &[f64; NUM_SEGMENTS],
    jitter: f64,
    rng: &mut Rng,
) {
    if jitter == 0.0 {
        return;
    }
    for r in root.iter_mut() {
        *r += jitter * rng.normal();
    }
    for (d, &len) in dirs.iter_mut().zip(lengths) {
        let k = jitter / len;
        let noisy = [
            d[0] + k * rng.normal(),
            d[1] + k * rng.normal(),
            d[2] + k * rng.normal(),
        ];
        *d = unit(noisy);
    }
}

/// Sum of 2-4 sinusoids with incommensurate frequencies in [0.1, 0.8] Hz.
#[derive(Debug, Clone)]
struct Oscillator {
    base: f64,
    terms: Vec<(f64, f64, f64)>,
}

impl Oscillator {
    fn new(base: f64, half_range: f64, rng: &mut Rng) -> Self {
        let k = 2 + rng.below(3);
        let terms = (0..k)
            .map(|_| {
                let freq = rng.uniform(0.1, 0.8);
                // faster terms get smaller amplitudes to bound joint speed
                let amp = half_range / k as f64 * rng.uniform(0.5, 1.0) * (0.3 / freq).min(1.0);
                let phase = rng.uniform(0.0, std::f64::consts::TAU);
                (amp, freq, phase)
            })
            .collect();
        Self { base, terms }
    }

    fn at(&self, frame: usize) -> f64 {
        let secs = frame as f64 / FPS;
        self.base
            + self
                .terms
                .iter()
                .map(|(a, f, p)| a * (std::f64::consts::TAU * f * secs + p).sin())
                .sum::<f64>()
    }
}

struct ArmOscillators {
    upper_flex: Oscillator,
    upper_abduct: Oscillator,
    fore_flex: Oscillator,
    fore_abduct: Oscillator,
}

impl ArmOscillators {
    fn new(rng: &mut Rng) -> Self {
        Self {
            upper_flex: Oscillator::new(0.4, 1.1, rng),
            upper_abduct: Oscillator::new(0.2, 0.55, rng),
            fore_flex: Oscillator::new(2.0, 1.2, rng),
            fore_abduct: Oscillator::new(0.0, 0.4, rng),
        }
    }
}

/// Free upper-body motion of `n_frames` frames.
pub fn gen_free_motion(seed: u64, n_frames: usize) -> Recording {
    gen_free_motion_with(&BodyModel::default(), seed, n_frames, "free")
}

pub fn gen_free_motion_with(body: &BodyModel, seed: u64, n_frames: usize, id: &str) -> Recording {
    gen_motion(body, seed, n_frames, id, None)
}

/// Free motion in which the right hand instead moves between random
/// waypoints with minimum-jerk profiles, pausing at each.
pub fn gen_goal_motion(seed: u64, n_frames: usize) -> Recording {
    gen_goal_motion_with(&ReachSetup::default(), seed, n_frames, "goal")
}

pub fn gen_goal_motion_with(setup: &ReachSetup, seed: u64, n_frames: usize, id: &str) -> Recording {
    let start = sub(setup.start_hand, setup.body.rest_right_shoulder());
    let path = waypoint_path(start, n_frames, &mut Rng::from_stream(seed, "waypoints"));
    gen_motion(&setup.body, seed, n_frames, id, Some(&path))
}

/// Waypoint distance band from the shoulder, inside the arm's reach.
const WAYPOINT_REACH: (f64, f64) = (0.2, 0.53);

/// Random right-hand position relative to the shoulder, torso frame.
fn sample_waypoint(rng: &mut Rng) -> Point3 {
    loop {
        let p = [
            rng.uniform(-0.42, 0.18),
            rng.uniform(-0.48, 0.05),
            rng.uniform(-0.5, -0.1),
        ];
        if (WAYPOINT_REACH.0..=WAYPOINT_REACH.1).contains(&norm(p)) {
            return p;
        }
    }
}

/// Shoulder-relative hand offsets for `n` frames: moves of 100-200 frames
/// per metre between random waypoints, half of them with a lateral detour
/// of up to 12 cm, each followed by a hold of up to 50 frames.
fn waypoint_path(start: Point3, n: usize, rng: &mut Rng) -> Vec<Point3> {
    let mut out = Vec::with_capacity(n + 150);
    let mut here = start;
    while out.len() < n {
        let next = sample_waypoint(rng);
        let chord = sub(next, here);
        let frames = ((norm(chord) * rng.uniform(100.0, 200.0)).round() as usize).clamp(20, 90);
        let amp = if rng.uniform(0.0, 1.0) < 0.5 {
            rng.uniform(0.0, 0.12)
        } else {
            0.0
        };
        let side = if rng.uniform(0.0, 1.0) < 0.5 {
            1.0
        } else {
            -1.0
        };
        let horizontal = [-chord[2], 0.0, chord[0]];
        let lateral = if norm(horizontal) < 1e-9 {
            [0.0; 3]
        } else {
            scale(horizontal, side / norm(horizontal))
        };
        let segment: Vec<Point3> = (1..=frames)
            .map(|i| {
                let u = i as f64 / frames as f64;
                let bump = (std::f64::consts::PI * u).sin().powi(2);
                add(
                    add(here, scale(chord, min_jerk(u))),
                    scale(lateral, amp * bump),
                )
            })
            .collect();
        if segment.iter().any(|p| !(0.1..=0.55).contains(&norm(*p))) {
            continue;
        }
        out.extend(segment);
        out.extend(std::iter::repeat_n(next, rng.below(51)));
        here = next;
    }
    out.truncate(n);
    out
}

fn gen_motion(
    body: &BodyModel,
    seed: u64,
    n_frames: usize,
    id: &str,
    right_hand: Option<&[Point3]>,
) -> Recording {
    let mut rng = Rng::new(seed);
    let root_osc = [
        Oscillator::new(0.0, 0.03, &mut rng),
        Oscillator::new(0.0, 0.01, &mut rng),
        Oscillator::new(0.0, 0.03, &mut rng),
    ];
    let yaw = Oscillator::new(0.0, 0.35, &mut rng);
    let pitch = Oscillator::new(0.05, 0.15, &mut rng);
    let roll = Oscillator::new(0.0, 0.1, &mut rng);
    let nod = Oscillator::new(0.0, 0.15, &mut rng);
    let right = ArmOscillators::new(&mut rng);
    let left = ArmOscillators::new(&mut rng);
    let lengths = body.segment_lengths();
    let mut noise = Rng::from_stream(seed, "jitter");

    let frames = (0..n_frames)
        .map(|i| {
            let torso = mat_mul(
                &rot_y(yaw.at(i)),
                &mat_mul(&rot_x(-pitch.at(i)), &rot_z(roll.at(i))),
            );
            let up = mat_vec(&torso, [0.0, 1.0, 0.0]);
            let head = mat_vec(&mat_mul(&torso, &rot_x(-nod.at(i))), [0.0, 1.0, 0.0]);
            let arm = |osc: &ArmOscillators, side: f64| {
                let upper = arm_direction(osc.upper_flex.at(i), osc.upper_abduct.at(i), side);
                let fore = arm_direction(osc.fore_flex.at(i), osc.fore_abduct.at(i), side);
                (mat_vec(&torso, upper), mat_vec(&torso, fore))
            };
            let (ru, rf) = arm(&right, 1.0);
            let (lu, lf) = arm(&left, -1.0);
            let mut dirs = [
                up,
                head,
                mat_vec(&torso, [1.0, 0.0, 0.0]),
                mat_vec(&torso, [-1.0, 0.0, 0.0]),
                ru,
                rf,
                lu,
                lf,
            ];
            let mut root = add(
                body.root_base,
                [root_osc[0].at(i), root_osc[1].at(i), root_osc[2].at(i)],
            );
            if let Some(path) = right_hand {
                let shoulder = assemble(root, &dirs, &lengths)[RIGHT_SHOULDER];
                let hand = add(shoulder, mat_vec(&torso, path[i]));
                let elbow = solve_elbow(shoulder, hand, body.upper_arm, body.forearm)
                    .expect("waypoint paths stay within reach");
                dirs[4] = unit(sub(elbow, shoulder));
                dirs[5] = unit(sub(hand, elbow));
            }
            jitter_pose(&mut root, &mut dirs, &lengths, body.jitter, &mut noise);
            JointFrame {
                t: i as u64,
                joints: assemble(root, &dirs, &lengths),
            }
        })
        .collect();
    Recording {
        id: id.to_string(),
        fps: FPS,
        frames,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReachStyle {
    Predictable,
    Legible,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReachSpec {
    pub target: Point3,
    pub duration: usize,
    pub style: ReachStyle,
    /// Peak lateral detour of the legible style, metres.
    pub amplitude: f64,
}

/// Placement of a reach inside its recording.
#[derive(Debug, Clone, PartialEq)]
pub struct ReachSetup {
    pub body: BodyModel,
    /// Resting right-hand position before onset.
    pub start_hand: Point3,
    /// Still frames before the reach begins.
    pub pre_roll: usize,
    /// Frames held at the target afterwards.
    pub hold: usize,
}

impl Default for ReachSetup {
    fn default() -> Self {
        let body = BodyModel::default();
        let s = body.rest_right_shoulder();
        Self {
            start_hand: add(s, [0.06, -0.30, -0.28]),
            body,
            pre_roll: 60,
            hold: 60,
        }
    }
}

impl ReachSetup {
    /// Start pose for the legibility study: the hand rests low and close to
    /// the body, laterally halfway between the two targets.
    pub fn legibility() -> Self {
        let base = Self::default();
        let targets = legibility_targets(&base.body);
        let (a, b) = (targets.targets[0].pos, targets.targets[1].pos);
        let s = base.body.rest_right_shoulder();
        Self {
            start_hand: [0.5 * (a[0] + b[0]), s[1] - 0.32, s[2] - 0.16],
            ..base
        }
    }
}

/// Minimum-jerk position profile on [0, 1].
pub fn min_jerk(u: f64) -> f64 {
    let u = u.clamp(0.0, 1.0);
    u * u * u * (10.0 - 15.0 * u + 6.0 * u * u)
}

/// Horizontal unit vector perpendicular to the chord, on the side of the
/// target relative to the body midline.
fn detour_direction(start: Point3, target: Point3, midline_x: f64) -> Point3 {
    let chord = sub(target, start);
    let horizontal = [-chord[2], 0.0, chord[0]];
    let n = norm(horizontal);
    let lateral = if n < 1e-12 {
        [1.0, 0.0, 0.0]
    } else {
        scale(horizontal, 1.0 / n)
    };
    let side = if target[0] >= midline_x { 1.0 } else { -1.0 };
    if lateral[0] * side >= 0.0 {
        lateral
    } else {
        scale(lateral, -1.0)
    }
}

/// Noise-free hand position at reach phase `u` in [0, 1].
pub fn hand_path(setup: &ReachSetup, spec: &ReachSpec, u: f64) -> Point3 {
    let s = min_jerk(u);
    let mut p = add(
        setup.start_hand,
        scale(sub(spec.target, setup.start_hand), s),
    );
    if spec.style == ReachStyle::Legible {
        let lateral = detour_direction(
            setup.start_hand,
            spec.target,
            setup.body.rest_spine_top()[0],
        );
        let bump = (std::f64::consts::PI * u.clamp(0.0, 1.0)).sin().powi(2);
        p = add(p, scale(lateral, spec.amplitude * bump));
    }
    p
}

/// Two-link inverse kinematics for the right arm with the elbow dropped
/// below the shoulder-hand axis. Returns the elbow position.
pub fn solve_elbow(shoulder: Point3, hand: Point3, upper: f64, fore: f64) -> Result<Point3> {
    let axis = sub(hand, shoulder);
    let d = norm(axis);
    let (min, max) = ((upper - fore).abs(), upper + fore);
    if d > max || d < min || d == 0.0 {
        return Err(Error::TargetUnreachable {
            distance: d,
            min,
            max,
        });
    }
    let n = scale(axis, 1.0 / d);
    let a = (upper * upper - fore * fore + d * d) / (2.0 * d);
    let r = (upper * upper - a * a).max(0.0).sqrt();
    // down, tilted outwards (+x) and back (+z) so that a hand straight
    // below the shoulder does not flip the elbow
    let down = unit([0.35, -1.0, 0.25]);
    let mut w = sub(down, scale(n, dot(down, n)));
    if norm(w) < 1e-9 {
        w = sub([1.0, 0.0, 0.0], scale(n, n[0]));
    }
    let w = unit(w);
    Ok(add(shoulder, add(scale(n, a), scale(w, r))))
}

/// One reach: still pre-roll, minimum-jerk movement, hold at the target.
pub fn gen_reach(spec: &ReachSpec, seed: u64) -> Result<Recording> {
    gen_reach_with(&ReachSetup::default(), spec, seed, "reach")
}

pub fn gen_reach_with(
    setup: &ReachSetup,
    spec: &ReachSpec,
    seed: u64,
    id: &str,
) -> Result<Recording> {
    if spec.duration < 10 {
        return Err(Error::InvalidArgument(
            "reach duration must be at least 10 frames".into(),
        ));
    }
    if spec.amplitude.is_nan() || spec.amplitude < 0.0 {
        return Err(Error::InvalidArgument(
            "detour amplitude must be non-negative".into(),
        ));
    }
    let body = &setup.body;
    let lengths = body.segment_lengths();
    let shoulder = body.rest_right_shoulder();
    let total = setup.pre_roll + spec.duration + setup.hold;
    let mut noise = Rng::from_stream(seed, "jitter");
    // left arm hangs relaxed
    let left_upper = arm_direction(0.1, 0.1, -1.0);
    let left_fore = arm_direction(0.4, 0.05, -1.0);

    let mut frames = Vec::with_capacity(total);
    for i in 0..total {
        let u = (i as f64 - setup.pre_roll as f64) / spec.duration as f64;
        let hand = hand_path(setup, spec, u);
        let elbow = solve_elbow(shoulder, hand, body.upper_arm, body.forearm)?;
        let mut dirs = [
            [0.0, 1.0, 0.0],
            [0.0, 1.0, 0.0],
            [1.0, 0.0, 0.0],
            [-1.0, 0.0, 0.0],
            unit(sub(elbow, shoulder)),
            unit(sub(hand, elbow)),
            left_upper,
            left_fore,
        ];
        let mut root = body.root_base;
        jitter_pose(&mut root, &mut dirs, &lengths, body.jitter, &mut noise);
        frames.push(JointFrame {
            t: i as u64,
            joints: assemble(root, &dirs, &lengths),
        });
    }
    debug_assert_eq!(frames[0].joints[RIGHT_SHOULDER].len(), 3);
    Ok(Recording {
        id: id.to_string(),
        fps: FPS,
        frames,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scale {
    Desk,
    PaperShape,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusConfig {
    pub train_recordings: usize,
    pub test_recordings: usize,
    pub frames_per_recording: usize,
    pub reaches_per_target: usize,
    pub labeled_per_group: usize,
    pub reach_duration: usize,
    pub legible_amplitude: f64,
    pub exec: Execution,
}

impl CorpusConfig {
    pub fn for_scale(scale: Scale) -> Self {
        let base = Self {
            train_recordings: 10,
            test_recordings: 3,
            frames_per_recording: 3000,
            reaches_per_target: 10,
            labeled_per_group: 5,
            reach_duration: 40,
            legible_amplitude: 0.1,
            exec: Execution::default(),
        };
        match scale {
            Scale::Desk => base,
            // 90 minutes of training and 20 minutes of test motion at 30 fps
            Scale::PaperShape => Self {
                train_recordings: 54,
                test_recordings: 12,
                ..base
            },
        }
    }
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self::for_scale(Scale::Desk)
    }
}

/// A reach recording with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct ReachRecord {
    pub recording: Recording,
    pub target: usize,
    pub style: ReachStyle,
    pub onset: usize,
    pub duration: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReachEntry {
    pub file: String,
    pub target: usize,
    pub style: ReachStyle,
    pub onset: usize,
    pub duration: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReachManifest {
    pub reaches: Vec<ReachEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub train: Vec<Recording>,
    pub test: Vec<Recording>,
    pub targets: TargetSet,
    pub reaches: Vec<ReachRecord>,
    /// Two targets, one in front of each shoulder, for the legibility study.
    pub labeled_targets: TargetSet,
    pub labeled: Vec<ReachRecord>,
}

/// Four targets with every pairwise distance in [0.25, 0.30] m, placed as
/// a perturbed regular tetrahedron in front of the right shoulder.
pub fn reach_targets(body: &BodyModel, seed: u64) -> TargetSet {
    let mut rng = Rng::from_stream(seed, "targets");
    let shoulder = body.rest_right_shoulder();
    let centre = add(shoulder, [0.06, -0.16, -0.34]);
    let edge = 0.275;
    let circumradius = edge * 6f64.sqrt() / 4.0;
    let base: [Point3; 4] = [
        [1.0, 1.0, 1.0],
        [1.0, -1.0, -1.0],
        [-1.0, 1.0, -1.0],
        [-1.0, -1.0, 1.0],
    ];
    let yaw = rot_y(rng.uniform(-0.3, 0.3));
    loop {
        let positions: Vec<Point3> = base
            .iter()
            .map(|v| {
                let p = mat_vec(&yaw, scale(unit(*v), circumradius));
                let wobble = [
                    rng.uniform(-0.008, 0.008),
                    rng.uniform(-0.008, 0.008),
                    rng.uniform(-0.008, 0.008),
                ];
                add(add(centre, p), wobble)
            })
            .collect();
        let ok = (0..4).all(|i| {
            (i + 1..4).all(|j| {
                let d = norm(sub(positions[i], positions[j]));
                (0.25..=0.30).contains(&d)
            })
        });
        if ok {
            return TargetSet::uniform(
                positions
                    .into_iter()
                    .enumerate()
                    .map(|(i, pos)| Target {
                        name: format!("target_{}", i + 1),
                        pos,
                    })
                    .collect(),
                crate::target::DEFAULT_SIGMA,
            )
            .expect("distinct targets");
        }
    }
}

/// One target in front of each shoulder, both within the right arm's reach.
pub fn legibility_targets(body: &BodyModel) -> TargetSet {
    let right = body.rest_right_shoulder();
    let left = [
        right[0] - 2.0 * body.shoulder_half_width,
        right[1],
        right[2],
    ];
    TargetSet::uniform(
        vec![
            Target {
                name: "left".into(),
                pos: add(left, [0.08, -0.12, -0.38]),
            },
            Target {
                name: "right".into(),
                pos: add(right, [0.0, -0.12, -0.40]),
            },
        ],
        crate::target::DEFAULT_SIGMA,
    )
    .expect("distinct targets")
}

pub fn gen_corpus(config: &CorpusConfig, seed: u64) -> Result<Corpus> {
    let setup = ReachSetup::default();
    let body = &setup.body;
    let frames = config.frames_per_recording;
    // even recordings are purely oscillatory, odd ones goal-directed
    let motion = |split: &str, i: usize| {
        let s = derive_seed(seed, &format!("{split}/{i}"));
        let id = format!("{split}_{i:03}");
        if i.is_multiple_of(2) {
            gen_free_motion_with(body, s, frames, &id)
        } else {
            gen_goal_motion_with(&setup, s, frames, &id)
        }
    };
    let train = exec::map_range(config.exec, config.train_recordings, |i| motion("train", i));
    let test = exec::map_range(config.exec, config.test_recordings, |i| motion("test", i));

    let targets = reach_targets(body, seed);
    let jobs: Vec<(usize, usize)> = (0..targets.len())
        .flat_map(|t| (0..config.reaches_per_target).map(move |k| (t, k)))
        .collect();
    let reaches = exec::map_slice(config.exec, &jobs, |&(t, k)| {
        let spec = ReachSpec {
            target: targets.targets[t].pos,
            duration: config.reach_duration,
            style: ReachStyle::Predictable,
            amplitude: 0.0,
        };
        let id = format!("reach_t{}_{k:02}", t + 1);
        gen_reach_with(&setup, &spec, derive_seed(seed, &id), &id).map(|recording| ReachRecord {
            recording,
            target: t,
            style: ReachStyle::Predictable,
            onset: setup.pre_roll,
            duration: config.reach_duration,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let labeled_setup = ReachSetup::legibility();
    let labeled_targets = legibility_targets(body);
    let mut labeled_jobs = Vec::new();
    for t in 0..labeled_targets.len() {
        for style in [ReachStyle::Legible, ReachStyle::Predictable] {
            for k in 0..config.labeled_per_group {
                labeled_jobs.push((t, style, k));
            }
        }
    }
    let labeled = exec::map_slice(config.exec, &labeled_jobs, |&(t, style, k)| {
        let spec = ReachSpec {
            target: labeled_targets.targets[t].pos,
            duration: config.reach_duration,
            style,
            amplitude: config.legible_amplitude,
        };
        let style_name = match style {
            ReachStyle::Legible => "legible",
            ReachStyle::Predictable => "predictable",
        };
        let id = format!("{style_name}_{}_{k:02}", t + 1);
        gen_reach_with(&labeled_setup, &spec, derive_seed(seed, &id), &id).map(|recording| {
            ReachRecord {
                recording,
                target: t,
                style,
                onset: labeled_setup.pre_roll,
                duration: config.reach_duration,
            }
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    Ok(Corpus {
        train,
        test,
        targets,
        reaches,
        labeled_targets,
        labeled,
    })
}

fn write_reach_dir(dir: &Path, reaches: &[ReachRecord], targets: &TargetSet) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(reaches.len());
    for r in reaches {
        let file = format!("{}.jsonl", r.recording.id);
        r.recording.save_jsonl(&dir.join(&file))?;
        entries.push(ReachEntry {
            file,
            target: r.target,
            style: r.style,
            onset: r.onset,
            duration: r.duration,
        });
    }
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&ReachManifest { reaches: entries })?,
    )?;
    targets.save(&dir.join("targets.json"))
}

/// Writes `train/`, `test/`, `reaches/`, `labeled/` and `targets.json`.
pub fn write_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    for (sub, recs) in [("train", &corpus.train), ("test", &corpus.test)] {
        let d = dir.join(sub);
        std::fs::create_dir_all(&d)?;
        for r in recs {
            r.save_jsonl(&d.join(format!("{}.jsonl", r.id)))?;
        }
    }
    write_reach_dir(&dir.join("reaches"), &corpus.reaches, &corpus.targets)?;
    write_reach_dir(
        &dir.join("labeled"),
        &corpus.labeled,
        &corpus.labeled_targets,
    )?;
    corpus.targets.save(&dir.join("targets.json"))
}

/// Reads every `*.jsonl` file of a directory in file-name order.
pub fn read_recordings(dir: &Path) -> Result<Vec<Recording>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "jsonl"))
        .collect();
    paths.sort();
    paths.iter().map(|p| Recording::read_jsonl(p)).collect()
}

/// Reads a reach directory written by [`write_corpus`].
pub fn read_reaches(dir: &Path) -> Result<Vec<ReachRecord>> {
    let manifest: ReachManifest =
        serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
    manifest
        .reaches
        .iter()
        .map(|e| {
            Ok(ReachRecord {
                recording: Recording::read_jsonl(&dir.join(&e.file))?,
                target: e.target,
                style: e.style,
                onset: e.onset,
                duration: e.duration,
            })
        })
        .collect()
}
