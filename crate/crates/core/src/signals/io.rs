//! Recording JSONL format.
//!
//! UTF-8, one JSON object per line. Line 1 is the header:
//! `{"type":"header","version":1,"fps":30,"user":"<id>","activity":"<label>","coords":"world"|"relative"}`
//! followed by one frame object per line, `world` or `relative` per the
//! header tag. All floats are decimal text in metres. Head directions are
//! re-normalized on load.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Coords, Frames, HandHeadFrame, Recording, RecordingMeta, SignalError, WorldFrame};

#[derive(Serialize, Deserialize)]
struct HeaderLine {
    #[serde(rename = "type")]
    kind: String,
    version: u32,
    fps: u32,
    user: String,
    activity: String,
    coords: String,
}

fn fmt_err(line: usize, e: impl std::fmt::Display) -> SignalError {
    SignalError::FormatError { line, msg: e.to_string() }
}

fn renorm(v: &mut [f64; 3], line: usize) -> Result<(), SignalError> {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    if n <= 1e-8 {
        return Err(fmt_err(line, "zero-length head direction"));
    }
    v[0] /= n;
    v[1] /= n;
    v[2] /= n;
    Ok(())
}

fn check_finite(vals: &[f64], line: usize) -> Result<(), SignalError> {
    if vals.iter().any(|v| !v.is_finite()) {
        return Err(fmt_err(line, "non-finite coordinate"));
    }
    Ok(())
}

pub fn load_recording(path: impl AsRef<Path>) -> Result<Recording, SignalError> {
    let file = File::open(path.as_ref())?;
    let mut lines = BufReader::new(file).lines().enumerate();

    let (_, first) = lines.next().ok_or_else(|| fmt_err(1, "empty file"))?;
    let first = first?;
    let header: HeaderLine = serde_json::from_str(&first).map_err(|e| fmt_err(1, e))?;
    if header.kind != "header" {
        return Err(fmt_err(1, format!("expected header line, got type `{}`", header.kind)));
    }
    if header.version != 1 {
        return Err(fmt_err(1, format!("unsupported version {}", header.version)));
    }
    let coords = match header.coords.as_str() {
        "world" => Coords::World,
        "relative" => Coords::Relative,
        other => return Err(SignalError::SchemaError { line: 1, tag: other.to_string() }),
    };
    let meta = RecordingMeta {
        fps: header.fps,
        user: header.user,
        activity: header.activity,
        coords,
    };

    let mut world = Vec::new();
    let mut relative = Vec::new();
    let mut expected_t: Option<u64> = None;
    for (idx, line) in lines {
        let lineno = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let t = match coords {
            Coords::World => {
                let mut f: WorldFrame = serde_json::from_str(&line).map_err(|e| fmt_err(lineno, e))?;
                check_finite(&f.head_pos, lineno)?;
                check_finite(&f.head_dir, lineno)?;
                check_finite(&f.lhand, lineno)?;
                check_finite(&f.rhand, lineno)?;
                renorm(&mut f.head_dir, lineno)?;
                let t = f.t;
                world.push(f);
                t
            }
            Coords::Relative => {
                let frame: RelLine = serde_json::from_str(&line).map_err(|e| fmt_err(lineno, e))?;
                check_finite(&frame.ha, lineno)?;
                check_finite(&frame.he, lineno)?;
                let mut he = frame.he;
                renorm(&mut he, lineno)?;
                relative.push(HandHeadFrame { ha: frame.ha, he });
                frame.t
            }
        };
        // frame indices must increase strictly by one
        if let Some(prev) = expected_t {
            if t != prev + 1 {
                return Err(fmt_err(lineno, format!("frame index {t} does not follow {prev}")));
            }
        }
        expected_t = Some(t);
    }

    let frames = match coords {
        Coords::World => Frames::World(world),
        Coords::Relative => Frames::Relative(relative),
    };
    Ok(Recording { meta, frames })
}

#[derive(Serialize, Deserialize)]
struct RelLine {
    t: u64,
    ha: [f64; 6],
    he: [f64; 3],
}

pub fn save_recording(rec: &Recording, path: impl AsRef<Path>) -> Result<(), SignalError> {
    let file = File::create(path.as_ref())?;
    let mut w = BufWriter::new(file);
    let header = HeaderLine {
        kind: "header".into(),
        version: 1,
        fps: rec.meta.fps,
        user: rec.meta.user.clone(),
        activity: rec.meta.activity.clone(),
        coords: match rec.meta.coords {
            Coords::World => "world".into(),
            Coords::Relative => "relative".into(),
        },
    };
    writeln!(w, "{}", serde_json::to_string(&header).unwrap())?;
    match &rec.frames {
        Frames::World(frames) => {
            for f in frames {
                writeln!(w, "{}", serde_json::to_string(f).unwrap())?;
            }
        }
        Frames::Relative(frames) => {
            for (i, f) in frames.iter().enumerate() {
                let line = RelLine { t: i as u64, ha: f.ha, he: f.he };
                writeln!(w, "{}", serde_json::to_string(&line).unwrap())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Load every `*.jsonl` recording under `dir` (or the single file itself),
/// sorted by file name for reproducible corpus order.
pub fn load_corpus(dir: impl AsRef<Path>) -> Result<Vec<Recording>, SignalError> {
    let dir = dir.as_ref();
    let mut paths = Vec::new();
    if dir.is_file() {
        paths.push(dir.to_path_buf());
    } else {
        for entry in std::fs::read_dir(dir)? {
            let p = entry?.path();
            if p.extension().is_some_and(|e| e == "jsonl") {
                paths.push(p);
            }
        }
        paths.sort();
    }
    paths.iter().map(load_recording).collect()
}
