//! Deterministic synthetic-corpus generator.
//!
//! Desk-scale substitute for real motion recordings: three motion families
//! (`reach`, `idle`, `bimanual`) crossed with parameterized user styles.
//! Trajectories are C1-smooth closed-form curves plus Gaussian jitter on
//! the hand channels; head directions are unit by construction. The same
//! `(config, seed)` pair always produces the same bytes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;

use super::{Coords, Frames, HandHeadFrame, Recording, RecordingMeta, SignalError};

pub const MOTION_FAMILIES: [&str; 3] = ["reach", "idle", "bimanual"];
pub const USER_STYLES: usize = 3;

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub family: String,
    /// User style index; mapped to label "u<style>".
    pub user_style: usize,
    pub frames: usize,
    pub fps: u32,
    /// Peak closed-form displacement of the moving hand along its primary
    /// axis, metres.
    pub amplitude: f64,
    /// Std-dev of the Gaussian jitter added to hand channels, metres.
    pub jitter_sigma: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            family: "idle".into(),
            user_style: 0,
            frames: 300,
            fps: 30,
            amplitude: 0.3,
            jitter_sigma: 0.004,
        }
    }
}

/// Per-style modulation of amplitude, frequency, and phase.
#[derive(Debug, Clone, Copy)]
struct Style {
    amp: f64,
    freq: f64,
    phase: f64,
}

fn style(user_style: usize) -> Style {
    let k = user_style as f64;
    Style {
        amp: 0.8 + 0.22 * k,
        freq: 0.85 + 0.18 * k,
        phase: 0.7 * k,
    }
}

// rest pose relative to the head: hands slightly down and forward
const L_REST: [f64; 3] = [-0.18, -0.42, 0.28];
const R_REST: [f64; 3] = [0.18, -0.42, 0.28];

fn smoothstep(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

/// Closed-form frame before jitter: `(lhand, rhand, head_dir)` at frame `k`.
/// Exposed so tests can compare the generated output against the curve.
pub fn closed_form_frame(
    config: &SynthConfig,
    k: usize,
) -> Result<([f64; 3], [f64; 3], [f64; 3]), SignalError> {
    let st = style(config.user_style);
    let t = k as f64 / config.fps as f64;
    let amp = config.amplitude * st.amp;
    match config.family.as_str() {
        "idle" => {
            // small slow sway around the rest pose
            let a = 0.05 * amp;
            let w = 2.0 * std::f64::consts::PI * 0.4 * st.freq;
            let dx = a * (w * t + st.phase).sin();
            let dy = 0.6 * a * (0.7 * w * t).sin();
            let l = [L_REST[0] + dx, L_REST[1] + dy, L_REST[2]];
            let r = [R_REST[0] - dx, R_REST[1] + dy, R_REST[2]];
            let dir = normalize([0.06 * (0.5 * w * t + st.phase).sin(), 0.04 * (0.3 * w * t).cos(), 1.0]);
            Ok((l, r, dir))
        }
        "reach" => {
            // right hand sweeps to a target and back; head turns toward it
            let period = 3.0 / st.freq;
            let cycle = (t / period + st.phase / (2.0 * std::f64::consts::PI)).fract();
            let s = if cycle < 0.5 {
                smoothstep(cycle * 2.0)
            } else {
                smoothstep((1.0 - cycle) * 2.0)
            };
            // primary axis is x: peak displacement = amp exactly
            let target = [amp, 0.55 * amp, 0.4 * amp];
            let r = [
                R_REST[0] + s * target[0],
                R_REST[1] + s * target[1],
                R_REST[2] + s * target[2],
            ];
            let l = L_REST;
            let gaze = [0.55 * s * target[0], 0.3 * s * target[1], 1.0];
            Ok((l, r, normalize(gaze)))
        }
        "bimanual" => {
            // antiphase horizontal oscillation of both hands
            let w = 2.0 * std::f64::consts::PI * 0.8 * st.freq;
            let s = (w * t + st.phase).sin();
            let l = [L_REST[0] - amp * s, L_REST[1] + 0.1 * amp * (2.0 * w * t).sin(), L_REST[2]];
            let r = [R_REST[0] + amp * s, R_REST[1] - 0.1 * amp * (2.0 * w * t).sin(), R_REST[2]];
            let dir = normalize([0.18 * s, 0.0, 1.0]);
            Ok((l, r, dir))
        }
        other => Err(SignalError::UnknownFamily(other.to_string())),
    }
}

/// Generate one labelled relative-coordinate recording.
pub fn synth_generate(config: &SynthConfig, seed: u64) -> Result<Recording, SignalError> {
    // validate the family before drawing anything
    closed_form_frame(config, 0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = rand_distr::Normal::new(0.0, 1.0).expect("unit normal");
    let mut frames = Vec::with_capacity(config.frames);
    for k in 0..config.frames {
        let (l, r, dir) = closed_form_frame(config, k)?;
        let mut ha = [l[0], l[1], l[2], r[0], r[1], r[2]];
        for v in ha.iter_mut() {
            let z: f64 = normal.sample(&mut rng);
            *v += config.jitter_sigma * z;
        }
        frames.push(HandHeadFrame { ha, he: dir });
    }
    Ok(Recording {
        meta: RecordingMeta {
            fps: config.fps,
            user: format!("u{}", config.user_style),
            activity: config.family.clone(),
            coords: Coords::Relative,
        },
        frames: Frames::Relative(frames),
    })
}
