//! Synthetic walking silhouettes with a controllable lateral-sway cue.
//!
//! A stick-and-capsule figure walks toward the camera, turns, and walks away.
//! The whole body sways sideways once per gait cycle with amplitude
//! `sway_amplitude` and the shoulder line tilts in proportion to
//! `asymmetry`. With both at zero every frame is mirror-symmetric about the
//! image's vertical center line.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ClassLabel, FrameSequence, Silhouette, FRAME_HEIGHT, FRAME_WIDTH};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum View {
    Front,
    Turning,
    Back,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseSpan {
    pub view: View,
    pub frames: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SwayProfile {
    /// Peak lateral body offset in pixels.
    pub sway_amplitude: f64,
    /// Shoulder-height imbalance in `[0, 1]`; 1 tilts the shoulders by 6 px.
    pub asymmetry: f64,
    /// Frames per gait cycle.
    pub period: usize,
    pub phase_plan: Vec<PhaseSpan>,
}

const MAX_TILT_PX: f64 = 6.0;
const MIN_FRAMES: usize = 8;

impl SwayProfile {
    /// Front, turning and back phases with the given frame budgets.
    pub fn three_phase(sway_amplitude: f64, asymmetry: f64, period: usize, budget: [usize; 3]) -> Self {
        SwayProfile {
            sway_amplitude,
            asymmetry,
            period,
            phase_plan: vec![
                PhaseSpan { view: View::Front, frames: budget[0] },
                PhaseSpan { view: View::Turning, frames: budget[1] },
                PhaseSpan { view: View::Back, frames: budget[2] },
            ],
        }
    }

    pub fn frame_count(&self) -> usize {
        self.phase_plan.iter().map(|p| p.frames).sum()
    }

    /// Frame indices where one phase ends and the next begins.
    pub fn phase_boundaries(&self) -> Vec<usize> {
        let mut out = Vec::new();
        let mut at = 0;
        for p in &self.phase_plan[..self.phase_plan.len().saturating_sub(1)] {
            at += p.frames;
            out.push(at);
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sway_amplitude >= 0.0 && self.sway_amplitude.is_finite()) {
            return Err(Error::arg(format!("sway_amplitude {} must be >= 0", self.sway_amplitude)));
        }
        if !(0.0..=1.0).contains(&self.asymmetry) {
            return Err(Error::arg(format!("asymmetry {} outside [0, 1]", self.asymmetry)));
        }
        if self.period < 4 {
            return Err(Error::arg(format!("period {} must be >= 4", self.period)));
        }
        if self.frame_count() < MIN_FRAMES {
            return Err(Error::arg(format!(
                "phase plan has {} frames, need at least {MIN_FRAMES}",
                self.frame_count()
            )));
        }
        Ok(())
    }

    /// View and within-phase progress in `(0, 1)` at frame `t`.
    fn view_at(&self, t: usize) -> (View, f64) {
        let mut start = 0;
        for p in &self.phase_plan {
            if t < start + p.frames {
                return (p.view, ((t - start) as f64 + 0.5) / p.frames as f64);
            }
            start += p.frames;
        }
        let last = self.phase_plan.last().expect("non-empty plan");
        (last.view, 1.0)
    }
}

/// Per-subject body proportions drawn from the sequence seed.
struct Body {
    half_width: f64,
    head_radius: f64,
    phase0: f64,
}

#[derive(Clone, Copy)]
struct Capsule {
    ax: f64,
    ay: f64,
    bx: f64,
    by: f64,
    radius: f64,
}

impl Capsule {
    fn contains(&self, px: f64, py: f64) -> bool {
        let (dx, dy) = (self.bx - self.ax, self.by - self.ay);
        let len2 = dx * dx + dy * dy;
        let t = if len2 > 0.0 { (((px - self.ax) * dx + (py - self.ay) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
        let (qx, qy) = (self.ax + t * dx - px, self.ay + t * dy - py);
        qx * qx + qy * qy <= self.radius * self.radius
    }

    fn bounds(&self) -> (f64, f64, f64, f64) {
        (
            self.ax.min(self.bx) - self.radius,
            self.ax.max(self.bx) + self.radius,
            self.ay.min(self.by) - self.radius,
            self.ay.max(self.by) + self.radius,
        )
    }
}

/// Offset waveform: constant-speed shifts between the two stance sides with
/// a short dwell at each extreme.
fn sway_wave(theta: f64) -> f64 {
    (1.6 * triangle_wave(theta)).clamp(-1.0, 1.0)
}

/// Triangle wave with the phase and range of `sin`.
fn triangle_wave(theta: f64) -> f64 {
    let x = (theta / (2.0 * PI) + 0.25).rem_euclid(1.0);
    1.0 - 4.0 * (x - 0.5).abs()
}

struct Canvas {
    frame: Silhouette,
}

impl Canvas {
    fn new() -> Self {
        Canvas { frame: Silhouette::empty(FRAME_HEIGHT, FRAME_WIDTH) }
    }

    fn fill(&mut self, bounds: (f64, f64, f64, f64), inside: impl Fn(f64, f64) -> bool) {
        let (x0, x1, y0, y1) = bounds;
        let xs = (x0.floor().max(0.0) as usize)..((x1.ceil() + 1.0).clamp(0.0, FRAME_WIDTH as f64) as usize);
        let ys = (y0.floor().max(0.0) as usize)..((y1.ceil() + 1.0).clamp(0.0, FRAME_HEIGHT as f64) as usize);
        for y in ys {
            for x in xs.clone() {
                if inside(x as f64 + 0.5, y as f64 + 0.5) {
                    self.frame.set(y, x, true);
                }
            }
        }
    }

    fn capsule(&mut self, c: Capsule) {
        self.fill(c.bounds(), |x, y| c.contains(x, y));
    }
}

const HEAD_Y: f64 = 13.0;
const SHOULDER_Y: f64 = 25.0;
const HIP_Y: f64 = 66.0;
const FOOT_Y: f64 = 122.0;
const HIP_SEP: f64 = 4.0;
const LEG_RADIUS: f64 = 3.0;
const ARM_RADIUS: f64 = 2.0;

fn render_frame(profile: &SwayProfile, body: &Body, t: usize) -> Silhouette {
    let (view, u) = profile.view_at(t);
    let theta = 2.0 * PI * t as f64 / profile.period as f64 + body.phase0;
    // Limbs swing at constant speed and pass the midline while the body is at
    // the far end of its sway.
    let step = triangle_wave(theta + PI / 2.0);

    // Turning shows the body side-on: a wider torso and the full stride and arm
    // swing, which the front and back views foreshorten.
    let (side, profile_limbs) = match view {
        View::Turning => (1.0 - (2.0 * u - 1.0).abs(), 1.0),
        _ => (0.0, 0.0),
    };
    // Lateral sway points along the camera axis in the side-on view.
    let cx = FRAME_WIDTH as f64 / 2.0 + (1.0 - side) * profile.sway_amplitude * sway_wave(theta);
    let tilt_sign = match view {
        View::Front => 1.0,
        View::Back => -1.0,
        View::Turning => (PI * u).cos(),
    };
    let hw = body.half_width + 8.0 * side;
    let stride = 3.0 + 12.0 * profile_limbs;
    let arm_swing = 1.5 + 6.0 * profile_limbs;
    let tilt = MAX_TILT_PX * profile.asymmetry * tilt_sign;

    let mut canvas = Canvas::new();
    let r = body.head_radius;
    canvas.fill((cx - r, cx + r, HEAD_Y - r, HEAD_Y + r), |x, y| (x - cx).powi(2) + (y - HEAD_Y).powi(2) <= r * r);
    canvas.fill((cx - 2.5, cx + 2.5, HEAD_Y, SHOULDER_Y + 3.0), |x, _| (x - cx).abs() <= 2.5);

    // Shoulder line from (cx - hw, SHOULDER_Y + tilt/2) to (cx + hw, SHOULDER_Y - tilt/2).
    let top = move |x: f64| SHOULDER_Y - 0.5 * tilt * (x - cx) / hw;
    canvas.fill((cx - hw, cx + hw, SHOULDER_Y - tilt.abs(), HIP_Y), |x, y| {
        (x - cx).abs() <= hw && y >= top(x) && y <= HIP_Y
    });

    for dir in [-1.0, 1.0] {
        let sx = cx + dir * (hw + 1.5);
        canvas.capsule(Capsule {
            ax: sx,
            ay: top(cx + dir * hw) + 3.0,
            bx: sx + dir * (1.0 + arm_swing * step),
            by: 60.0,
            radius: ARM_RADIUS,
        });
        let hx = cx + dir * HIP_SEP;
        canvas.capsule(Capsule { ax: hx, ay: HIP_Y, bx: hx + dir * stride * step, by: FOOT_Y, radius: LEG_RADIUS });
    }
    canvas.frame
}

/// Renders one synthetic sequence. Output is a pure function of
/// `(profile, seed)`; the seed only varies body proportions and the starting
/// point of the gait cycle.
pub fn generate_sequence(profile: &SwayProfile, seed: u64) -> Result<FrameSequence> {
    profile.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let body = Body {
        half_width: rng.random_range(8.5..9.5),
        head_radius: rng.random_range(6.5..7.5),
        phase0: rng.random_range(0.0..2.0 * PI),
    };
    let frames = (0..profile.frame_count()).map(|t| render_frame(profile, &body, t)).collect();
    Ok(FrameSequence {
        subject_id: format!("synth-{seed:016x}"),
        label: SynthConfig::default().label_for(profile.sway_amplitude),
        frames,
        profile: Some(profile.clone()),
    })
}

/// Sampling ranges for [`generate_dataset`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    /// Sway below `t_lo` is Negative.
    pub t_lo: f64,
    /// Sway above `t_hi` is Positive; `[t_lo, t_hi]` is Neutral.
    pub t_hi: f64,
    /// Per-class sway sampling bands, `[lo, hi]` in `ClassLabel` index order.
    pub bands: [[f64; 2]; 3],
    /// Asymmetry is `asymmetry_per_px * sway + U(0, asymmetry_noise)`, clamped to 1.
    pub asymmetry_per_px: f64,
    pub asymmetry_noise: f64,
    /// Standard deviation of Gaussian noise between a subject's labelled sway
    /// and the sway it is rendered with. Non-zero values make neighbouring
    /// classes overlap in appearance.
    #[serde(default)]
    pub sway_noise: f64,
    pub period: [usize; 2],
    pub front_frames: [usize; 2],
    pub turning_frames: [usize; 2],
    pub back_frames: [usize; 2],
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig::with_thresholds(3.0, 5.0)
    }
}

impl SynthConfig {
    /// Default bands that tile `[0, t_hi + 5]` at the given thresholds.
    pub fn with_thresholds(t_lo: f64, t_hi: f64) -> Self {
        SynthConfig {
            t_lo,
            t_hi,
            bands: [[0.0, t_lo], [t_lo, t_hi], [t_hi, t_hi + 5.0]],
            asymmetry_per_px: 0.08,
            asymmetry_noise: 0.05,
            sway_noise: 0.0,
            period: [8, 12],
            front_frames: [10, 16],
            turning_frames: [8, 12],
            back_frames: [10, 16],
        }
    }

    /// Clearly separated classes: sway 0–1 / 4 / 8–10 px.
    pub fn well_separated() -> Self {
        SynthConfig { bands: [[0.0, 1.0], [4.0, 4.0], [8.0, 10.0]], ..SynthConfig::default() }
    }

    pub fn label_for(&self, sway: f64) -> ClassLabel {
        if sway < self.t_lo {
            ClassLabel::Negative
        } else if sway <= self.t_hi {
            ClassLabel::Neutral
        } else {
            ClassLabel::Positive
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(0.0 <= self.t_lo && self.t_lo <= self.t_hi) {
            return bad(format!("thresholds must satisfy 0 <= t_lo <= t_hi, got {} / {}", self.t_lo, self.t_hi));
        }
        for (i, [lo, hi]) in self.bands.iter().copied().enumerate() {
            if !(0.0 <= lo && lo <= hi) {
                return bad(format!("band {i} [{lo}, {hi}] is not an interval of non-negative sway"));
            }
        }
        let [neg, neu, pos] = self.bands;
        let neg_ok = neg[1] < self.t_lo || (neg[1] == self.t_lo && neg[0] < neg[1]);
        let pos_ok = pos[0] > self.t_hi || (pos[0] == self.t_hi && pos[0] < pos[1]);
        if !neg_ok || neu[0] < self.t_lo || neu[1] > self.t_hi || !pos_ok {
            return bad(format!("bands {:?} disagree with thresholds {} / {}", self.bands, self.t_lo, self.t_hi));
        }
        for (name, [lo, hi]) in [
            ("period", self.period),
            ("front_frames", self.front_frames),
            ("turning_frames", self.turning_frames),
            ("back_frames", self.back_frames),
        ] {
            if lo > hi {
                return bad(format!("{name} range [{lo}, {hi}] is empty"));
            }
        }
        if !(self.sway_noise >= 0.0 && self.sway_noise.is_finite()) {
            return bad(format!("sway_noise must be a non-negative number, got {}", self.sway_noise));
        }
        if self.period[0] < 4 {
            return bad("period must be >= 4".into());
        }
        Ok(())
    }

    /// Sway drawn from the class band. Band ends that touch a threshold are
    /// treated as open so the drawn value always maps back to `label`.
    fn sample_sway<R: Rng>(&self, label: ClassLabel, rng: &mut R) -> f64 {
        let [lo, hi] = self.bands[label.index()];
        let u: f64 = rng.random();
        match label {
            _ if lo == hi => lo,
            ClassLabel::Negative => lo + (hi - lo) * u,
            ClassLabel::Positive => hi - (hi - lo) * u,
            ClassLabel::Neutral => lo + (hi - lo) * u,
        }
    }

    fn sample_profile<R: Rng>(&self, label: ClassLabel, rng: &mut R) -> SwayProfile {
        let mut sway = self.sample_sway(label, rng);
        if self.sway_noise > 0.0 {
            let n: f64 = rng.sample(rand_distr::StandardNormal);
            sway = (sway + self.sway_noise * n).max(0.0);
        }
        let noise = rng.random::<f64>() * self.asymmetry_noise;
        let asymmetry = (self.asymmetry_per_px * sway + noise).clamp(0.0, 1.0);
        let pick = |r: [usize; 2], rng: &mut R| rng.random_range(r[0]..=r[1]);
        let period = pick(self.period, rng);
        let budget = [pick(self.front_frames, rng), pick(self.turning_frames, rng), pick(self.back_frames, rng)];
        SwayProfile::three_phase(sway, asymmetry, period, budget)
    }
}

/// Generates `n_pos + n_neu + n_neg` labelled sequences with distinct subject
/// ids, in a seeded shuffled order.
pub fn generate_dataset(
    n_pos: usize,
    n_neu: usize,
    n_neg: usize,
    config: &SynthConfig,
    seed: u64,
) -> Result<Vec<FrameSequence>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut plan: Vec<ClassLabel> = std::iter::repeat_n(ClassLabel::Positive, n_pos)
        .chain(std::iter::repeat_n(ClassLabel::Neutral, n_neu))
        .chain(std::iter::repeat_n(ClassLabel::Negative, n_neg))
        .collect();
    plan.shuffle(&mut rng);
    plan.into_iter()
        .enumerate()
        .map(|(i, class)| {
            let profile = config.sample_profile(class, &mut rng);
            let mut seq = generate_sequence(&profile, rng.random())?;
            seq.label = class;
            seq.subject_id = format!("subject_{i:05}");
            Ok(seq)
        })
        .collect()
}
