use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bbox::BoundingBox;
use crate::error::{Result, TdaError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryEntry {
    /// 0-based; written 1-based.
    pub frame_index: usize,
    pub bbox: BoundingBox,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub track_id: u64,
    pub category: String,
    pub entries: Vec<TrajectoryEntry>,
}

/// Lines `frame,track_id,x,y,w,h,score,category`, frame 1-based. Floats use
/// the shortest round-trip representation.
pub fn write_trajectories(path: &Path, trajectories: &[Trajectory]) -> Result<()> {
    let mut s = String::new();
    for tr in trajectories {
        if tr.category.contains([',', '\n', '\r']) || tr.category.is_empty() {
            return Err(TdaError::Contract(format!(
                "category {:?} cannot be written",
                tr.category
            )));
        }
        for e in &tr.entries {
            let b = &e.bbox;
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                e.frame_index + 1,
                tr.track_id,
                b.x,
                b.y,
                b.w,
                b.h,
                e.score,
                tr.category
            );
        }
    }
    fs::write(path, s).map_err(|e| TdaError::io(path, e))
}

/// Groups entries by track id (in first-seen order).
pub fn read_trajectories(path: &Path) -> Result<Vec<Trajectory>> {
    let text = fs::read_to_string(path).map_err(|e| TdaError::io(path, e))?;
    let mut out: Vec<Trajectory> = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: String| TdaError::Parse {
            path: path.to_owned(),
            line: n + 1,
            msg,
        };
        let f: Vec<&str> = line.splitn(8, ',').collect();
        if f.len() != 8 {
            return Err(bad(format!("expected 8 fields, got {}", f.len())));
        }
        let frame: usize = f[0].parse().map_err(|e| bad(format!("frame: {e}")))?;
        if frame == 0 {
            return Err(bad("frames are 1-based".into()));
        }
        let track_id: u64 = f[1].parse().map_err(|e| bad(format!("track id: {e}")))?;
        let mut v = [0.0; 5];
        for (slot, s) in v.iter_mut().zip(&f[2..7]) {
            *slot = s.parse().map_err(|e| bad(format!("{s:?}: {e}")))?;
        }
        let bbox = BoundingBox::new(v[0], v[1], v[2], v[3]).map_err(|e| bad(e.to_string()))?;
        let entry = TrajectoryEntry {
            frame_index: frame - 1,
            bbox,
            score: v[4],
        };
        match out.iter_mut().find(|t| t.track_id == track_id) {
            Some(t) => {
                if t.entries.last().is_some_and(|l| l.frame_index >= entry.frame_index) {
                    return Err(bad(format!("track {track_id}: frames not increasing")));
                }
                t.entries.push(entry);
            }
            None => out.push(Trajectory {
                track_id,
                category: f[7].to_owned(),
                entries: vec![entry],
            }),
        }
    }
    Ok(out)
}
