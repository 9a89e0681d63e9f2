//! Hand-head signal model: frames, sequences, windowing, and conversion
//! from world to head-relative coordinates.
//!
//! One frame carries a 9-D sample: left and right hand positions relative
//! to the head (6 values, metres) plus the unit head-forward direction
//! (3 values). Head translation is deliberately not encoded; it only
//! enters through [`to_relative`].

mod io;
mod synth;

pub use io::{load_corpus, load_recording, save_recording};
pub use synth::{closed_form_frame, synth_generate, SynthConfig, MOTION_FAMILIES, USER_STYLES};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default sanity radius for relative hand coordinates, metres.
pub const DEFAULT_SANITY_RADIUS_M: f64 = 3.0;

#[derive(Debug, Error)]
pub enum SignalError {
    #[error("degenerate head direction (norm {norm:.3e} <= 1e-8)")]
    DegenerateDirection { norm: f64 },
    #[error("line {line}: {msg}")]
    FormatError { line: usize, msg: String },
    #[error("line {line}: unknown schema tag `{tag}`")]
    SchemaError { line: usize, tag: String },
    #[error("unknown motion family `{0}`")]
    UnknownFamily(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// One motion-capture frame in world coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldFrame {
    pub t: u64,
    pub head_pos: [f64; 3],
    pub head_dir: [f64; 3],
    pub lhand: [f64; 3],
    pub rhand: [f64; 3],
}

/// One frame in head-relative coordinates: `ha` = left then right hand
/// position minus head position; `he` = unit head direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HandHeadFrame {
    pub ha: [f64; 6],
    pub he: [f64; 3],
}

impl HandHeadFrame {
    /// True when every relative hand coordinate lies within `radius` metres.
    /// Violations are reported, never clipped.
    pub fn within_radius(&self, radius: f64) -> bool {
        self.ha.iter().all(|v| v.abs() <= radius)
    }

    /// Frame as 9 rows: lhand xyz, rhand xyz, head-direction xyz.
    pub fn to_row9(&self) -> [f64; 9] {
        [
            self.ha[0], self.ha[1], self.ha[2], self.ha[3], self.ha[4], self.ha[5],
            self.he[0], self.he[1], self.he[2],
        ]
    }

    pub fn from_row9(row: &[f64; 9]) -> Self {
        HandHeadFrame {
            ha: [row[0], row[1], row[2], row[3], row[4], row[5]],
            he: [row[6], row[7], row[8]],
        }
    }
}

/// Fixed-rate window of relative frames.
#[derive(Debug, Clone, PartialEq)]
pub struct HandHeadSequence {
    pub frames: Vec<HandHeadFrame>,
    pub fps: u32,
}

impl HandHeadSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Sequence as a `(9, n)` channel-major matrix.
    pub fn to_matrix(&self) -> ndarray::Array2<f64> {
        let n = self.frames.len();
        let mut m = ndarray::Array2::zeros((9, n));
        for (i, f) in self.frames.iter().enumerate() {
            for (r, v) in f.to_row9().iter().enumerate() {
                m[(r, i)] = *v;
            }
        }
        m
    }

    pub fn from_matrix(m: &ndarray::Array2<f64>, fps: u32) -> Self {
        assert_eq!(m.nrows(), 9, "expected 9 signal rows");
        let frames = (0..m.ncols())
            .map(|i| {
                let mut row = [0.0; 9];
                for r in 0..9 {
                    row[r] = m[(r, i)];
                }
                HandHeadFrame::from_row9(&row)
            })
            .collect();
        HandHeadSequence { frames, fps }
    }
}

/// Optional ground-truth labels attached to a recording.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Labels {
    pub user: String,
    pub activity: String,
}

/// One training/evaluation sample: an input window and the frames
/// immediately following it (no gap).
#[derive(Debug, Clone)]
pub struct Sample {
    pub input: HandHeadSequence,
    pub future: HandHeadSequence,
    pub labels: Option<Labels>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Coords {
    World,
    Relative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordingMeta {
    pub fps: u32,
    pub user: String,
    pub activity: String,
    pub coords: Coords,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Frames {
    World(Vec<WorldFrame>),
    Relative(Vec<HandHeadFrame>),
}

impl Frames {
    pub fn len(&self) -> usize {
        match self {
            Frames::World(v) => v.len(),
            Frames::Relative(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A labelled stream of frames plus metadata; the on-disk unit.
#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    pub meta: RecordingMeta,
    pub frames: Frames,
}

impl Recording {
    pub fn labels(&self) -> Labels {
        Labels { user: self.meta.user.clone(), activity: self.meta.activity.clone() }
    }

    /// Convert a world recording to relative coordinates (identity if
    /// already relative).
    pub fn into_relative(self) -> Result<Recording, SignalError> {
        match self.frames {
            Frames::Relative(_) => Ok(self),
            Frames::World(frames) => {
                let rel = frames.iter().map(to_relative).collect::<Result<Vec<_>, _>>()?;
                Ok(Recording {
                    meta: RecordingMeta { coords: Coords::Relative, ..self.meta },
                    frames: Frames::Relative(rel),
                })
            }
        }
    }

    /// Indices of frames whose hand coordinates exceed the sanity radius.
    pub fn sanity_violations(&self, radius: f64) -> Vec<usize> {
        match &self.frames {
            Frames::World(_) => Vec::new(),
            Frames::Relative(frames) => frames
                .iter()
                .enumerate()
                .filter(|(_, f)| !f.within_radius(radius))
                .map(|(i, _)| i)
                .collect(),
        }
    }
}

fn norm3(v: &[f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

/// Re-express a world frame with the head as origin; the head direction is
/// normalized to unit length.
pub fn to_relative(frame: &WorldFrame) -> Result<HandHeadFrame, SignalError> {
    let n = norm3(&frame.head_dir);
    if n <= 1e-8 {
        return Err(SignalError::DegenerateDirection { norm: n });
    }
    let mut ha = [0.0; 6];
    for i in 0..3 {
        ha[i] = frame.lhand[i] - frame.head_pos[i];
        ha[3 + i] = frame.rhand[i] - frame.head_pos[i];
    }
    let he = [frame.head_dir[0] / n, frame.head_dir[1] / n, frame.head_dir[2] / n];
    Ok(HandHeadFrame { ha, he })
}

/// Result of windowing a recording; `too_short` is a warning flag, not an
/// error, so short recordings fold quietly into multi-file pipelines.
#[derive(Debug, Clone)]
pub struct Windowed {
    pub samples: Vec<Sample>,
    pub too_short: bool,
}

/// Cut a relative recording into samples of `n` input frames plus the `dn`
/// frames immediately after, starting at multiples of `stride`. Windows
/// running past the end are dropped.
pub fn window(rec: &Recording, n: usize, dn: usize, stride: usize) -> Windowed {
    assert!(n >= 1 && stride >= 1, "window: need n >= 1 and stride >= 1");
    let frames = match &rec.frames {
        Frames::Relative(f) => f,
        Frames::World(_) => panic!("window: recording must be in relative coordinates"),
    };
    let need = n + dn;
    if frames.len() < need {
        return Windowed { samples: Vec::new(), too_short: true };
    }
    let labels = Some(rec.labels());
    let mut samples = Vec::new();
    let mut start = 0;
    while start + need <= frames.len() {
        samples.push(Sample {
            input: HandHeadSequence {
                frames: frames[start..start + n].to_vec(),
                fps: rec.meta.fps,
            },
            future: HandHeadSequence {
                frames: frames[start + n..start + need].to_vec(),
                fps: rec.meta.fps,
            },
            labels: labels.clone(),
        });
        start += stride;
    }
    Windowed { samples, too_short: false }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn wf(head: [f64; 3], dir: [f64; 3], l: [f64; 3], r: [f64; 3]) -> WorldFrame {
        WorldFrame { t: 0, head_pos: head, head_dir: dir, lhand: l, rhand: r }
    }

    #[test]
    fn to_relative_origin_at_head() {
        let f = wf([0.0; 3], [0.0, 0.0, 2.0], [0.3, 0.0, 0.0], [-0.3, 0.0, 0.0]);
        let r = to_relative(&f).unwrap();
        assert_eq!(r.ha, [0.3, 0.0, 0.0, -0.3, 0.0, 0.0]);
        assert_eq!(r.he, [0.0, 0.0, 1.0]);
    }

    #[test]
    fn to_relative_coincident_points() {
        let f = wf([1.0; 3], [1.0, 0.0, 0.0], [1.0; 3], [1.0; 3]);
        let r = to_relative(&f).unwrap();
        assert_eq!(r.ha, [0.0; 6]);
        assert_eq!(r.he, [1.0, 0.0, 0.0]);
    }

    #[test]
    fn to_relative_hand_computed() {
        // independent arithmetic: component-wise subtraction done by hand
        let f = wf(
            [0.5, 1.6, 0.2],
            [0.6, 0.0, 0.8],
            [0.8, 1.2, 0.2],
            [0.1, 1.3, 0.5],
        );
        let r = to_relative(&f).unwrap();
        let expect_ha = [0.3, -0.4, 0.0, -0.4, -0.3, 0.3];
        for (a, e) in r.ha.iter().zip(expect_ha) {
            assert!((a - e).abs() < 1e-12, "{a} vs {e}");
        }
        // (0.6, 0, 0.8) already unit
        for (a, e) in r.he.iter().zip([0.6, 0.0, 0.8]) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn to_relative_degenerate_direction() {
        let f = wf([0.0; 3], [0.0, 0.0, 1e-9], [0.0; 3], [0.0; 3]);
        assert!(matches!(
            to_relative(&f),
            Err(SignalError::DegenerateDirection { .. })
        ));
    }

    #[test]
    fn to_relative_translation_invariant() {
        // dyadic coordinates and offsets keep the float arithmetic exact
        let base = wf(
            [0.5, 1.625, 0.25],
            [0.0, 0.3, 1.0],
            [0.875, 1.25, 0.1875],
            [0.125, 1.375, 0.5],
        );
        let offset = [12.5, -3.25, 256.0];
        let shifted = wf(
            [base.head_pos[0] + offset[0], base.head_pos[1] + offset[1], base.head_pos[2] + offset[2]],
            base.head_dir,
            [base.lhand[0] + offset[0], base.lhand[1] + offset[1], base.lhand[2] + offset[2]],
            [base.rhand[0] + offset[0], base.rhand[1] + offset[1], base.rhand[2] + offset[2]],
        );
        let a = to_relative(&base).unwrap();
        let b = to_relative(&shifted).unwrap();
        assert_eq!(a.ha, b.ha, "relative hands must be exactly translation-invariant");
        assert_eq!(a.he, b.he);
    }

    fn rel_recording(len: usize) -> Recording {
        let frames = (0..len)
            .map(|i| HandHeadFrame {
                ha: [i as f64, 0.0, 0.0, -(i as f64), 0.0, 0.0],
                he: [0.0, 0.0, 1.0],
            })
            .collect();
        Recording {
            meta: RecordingMeta {
                fps: 30,
                user: "u0".into(),
                activity: "idle".into(),
                coords: Coords::Relative,
            },
            frames: Frames::Relative(frames),
        }
    }

    #[test]
    fn window_counts() {
        // valid starts are 0, 20, 40 (60 + 43 > 100)
        let w = window(&rel_recording(100), 40, 3, 20);
        assert_eq!(w.samples.len(), 3);
        assert!(!w.too_short);

        assert_eq!(window(&rel_recording(43), 40, 3, 1).samples.len(), 1);

        let short = window(&rel_recording(42), 40, 3, 1);
        assert_eq!(short.samples.len(), 0);
        assert!(short.too_short);
    }

    #[test]
    fn window_frames_contiguous() {
        let rec = rel_recording(100);
        let w = window(&rec, 40, 3, 20);
        let Frames::Relative(frames) = &rec.frames else { unreachable!() };
        for (k, s) in w.samples.iter().enumerate() {
            let start = k * 20;
            assert_eq!(s.input.frames[0], frames[start]);
            assert_eq!(s.input.frames[39], frames[start + 39]);
            assert_eq!(s.future.frames[0], frames[start + 40]);
            assert_eq!(s.future.frames[2], frames[start + 42]);
            assert_eq!(s.labels.as_ref().unwrap().user, "u0");
        }
    }

    #[test]
    fn row9_round_trip() {
        let f = HandHeadFrame { ha: [1.0, 2.0, 3.0, 4.0, 5.0, 6.0], he: [0.0, 1.0, 0.0] };
        assert_eq!(HandHeadFrame::from_row9(&f.to_row9()), f);
    }

    #[test]
    fn sanity_radius_flags_not_clips() {
        let mut rec = rel_recording(3);
        if let Frames::Relative(f) = &mut rec.frames {
            f[1].ha[0] = 5.0;
        }
        let bad = rec.sanity_violations(DEFAULT_SANITY_RADIUS_M);
        assert_eq!(bad, vec![1]);
        if let Frames::Relative(f) = &rec.frames {
            assert_eq!(f[1].ha[0], 5.0, "value must not be clipped");
        }
    }
}
