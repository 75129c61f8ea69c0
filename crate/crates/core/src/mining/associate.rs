//! Tracking-by-detection over per-frame detection lists.
//!
//! Each frame, detections are matched to live tracks with cost
//! `1 - IoU(last box, detection)`. A pair is feasible when the categories
//! agree and the IoU reaches `iou_min`. Pairs that are the only feasible
//! option for both sides are committed directly; the rest is solved as a
//! minimum-cost assignment where leaving a row or column unmatched costs 1.

use serde::{Deserialize, Serialize};

use super::detector::Detection;
use super::hungarian;
use super::trajectory::{Trajectory, TrajectoryEntry};
use crate::bbox::{iou, BoundingBox};
use crate::config::MiningConfig;

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssociationParams {
    pub iou_min: f64,
    /// A track survives at most this many consecutive missed frames.
    pub max_gap: usize,
    /// Finished tracks with fewer entries are dropped.
    pub min_len: usize,
}

impl From<&MiningConfig> for AssociationParams {
    fn from(c: &MiningConfig) -> Self {
        Self {
            iou_min: c.iou_min,
            max_gap: c.max_gap,
            min_len: c.min_len,
        }
    }
}

fn feasible_iou(track: &(BoundingBox, &str), det: &Detection, iou_min: f64) -> Option<f64> {
    if !track.1.eq_ignore_ascii_case(&det.category) {
        return None;
    }
    let v = iou(&track.0, &det.bbox);
    (v > 0.0 && v >= iou_min).then_some(v)
}

/// `result[d]` is the track matched to detection `d`. The matching
/// maximizes summed IoU over feasible pairs.
pub fn match_frame(tracks: &[(BoundingBox, &str)], dets: &[Detection], iou_min: f64) -> Vec<Option<usize>> {
    let mut out = vec![None; dets.len()];
    let ious: Vec<Vec<Option<f64>>> = tracks
        .iter()
        .map(|t| dets.iter().map(|d| feasible_iou(t, d, iou_min)).collect())
        .collect();
    let row_deg: Vec<usize> = ious.iter().map(|r| r.iter().flatten().count()).collect();
    let col_deg: Vec<usize> = (0..dets.len())
        .map(|d| ious.iter().filter(|r| r[d].is_some()).count())
        .collect();

    let mut rows = Vec::new();
    let mut taken = vec![false; dets.len()];
    for (t, row) in ious.iter().enumerate() {
        match row.iter().position(Option::is_some) {
            Some(d) if row_deg[t] == 1 && col_deg[d] == 1 => {
                out[d] = Some(t);
                taken[d] = true;
            }
            Some(_) => rows.push(t),
            None => {}
        }
    }
    let cols: Vec<usize> = (0..dets.len()).filter(|&d| !taken[d] && col_deg[d] > 0).collect();
    if rows.is_empty() || cols.is_empty() {
        return out;
    }
    let n = rows.len().max(cols.len());
    let mut cost = vec![vec![1.0; n]; n];
    for (i, &t) in rows.iter().enumerate() {
        for (j, &d) in cols.iter().enumerate() {
            if let Some(v) = ious[t][d] {
                cost[i][j] = 1.0 - v;
            }
        }
    }
    for (i, j) in hungarian::solve(&cost).into_iter().enumerate() {
        if let (Some(&t), Some(&d)) = (rows.get(i), cols.get(j)) {
            if ious[t][d].is_some() {
                out[d] = Some(t);
            }
        }
    }
    out
}

#[derive(Clone, Debug)]
struct LiveTrack {
    traj: Trajectory,
    last_frame: usize,
}

/// Frame-by-frame association state.
#[derive(Clone, Debug)]
pub struct Associator {
    params: AssociationParams,
    live: Vec<LiveTrack>,
    done: Vec<Trajectory>,
    next_id: u64,
    next_frame: usize,
}

impl Associator {
    pub fn new(params: AssociationParams) -> Self {
        Self {
            params,
            live: Vec::new(),
            done: Vec::new(),
            next_id: 1,
            next_frame: 0,
        }
    }

    /// Ids and last boxes of the tracks that may still be matched at the
    /// next frame, in id order.
    pub fn candidates(&self) -> Vec<(u64, BoundingBox, &str)> {
        self.live
            .iter()
            .filter(|t| self.next_frame - t.last_frame - 1 <= self.params.max_gap)
            .map(|t| {
                let last = t.traj.entries.last().expect("live tracks are non-empty");
                (t.traj.track_id, last.bbox, t.traj.category.as_str())
            })
            .collect()
    }

    /// Consumes the detections of the next frame; returns the track id
    /// given to each detection.
    pub fn step(&mut self, dets: &[Detection]) -> Vec<u64> {
        let frame = self.next_frame;
        let max_gap = self.params.max_gap;
        let (keep, expired): (Vec<LiveTrack>, Vec<LiveTrack>) = std::mem::take(&mut self.live)
            .into_iter()
            .partition(|t| frame - t.last_frame - 1 <= max_gap);
        self.live = keep;
        self.done.extend(expired.into_iter().map(|t| t.traj));

        let boxes: Vec<(BoundingBox, &str)> = self
            .live
            .iter()
            .map(|t| (t.traj.entries.last().expect("non-empty").bbox, t.traj.category.as_str()))
            .collect();
        let matched = match_frame(&boxes, dets, self.params.iou_min);
        drop(boxes);

        let mut ids = Vec::with_capacity(dets.len());
        for (d, m) in dets.iter().zip(matched) {
            let entry = TrajectoryEntry {
                frame_index: frame,
                bbox: d.bbox,
                score: d.score,
            };
            match m {
                Some(t) => {
                    let track = &mut self.live[t];
                    track.traj.entries.push(entry);
                    track.last_frame = frame;
                    ids.push(track.traj.track_id);
                }
                None => {
                    let id = self.next_id;
                    self.next_id += 1;
                    self.live.push(LiveTrack {
                        traj: Trajectory {
                            track_id: id,
                            category: d.category.clone(),
                            entries: vec![entry],
                        },
                        last_frame: frame,
                    });
                    ids.push(id);
                }
            }
        }
        self.next_frame += 1;
        ids
    }

    /// Closes every track and drops those shorter than `min_len`.
    pub fn finish(mut self) -> Vec<Trajectory> {
        self.done.extend(self.live.into_iter().map(|t| t.traj));
        let mut out: Vec<Trajectory> = self
            .done
            .into_iter()
            .filter(|t| t.entries.len() >= self.params.min_len)
            .collect();
        out.sort_by_key(|t| t.track_id);
        out
    }
}

/// `frames[t]` holds the detections of frame `t`.
pub fn associate(frames: &[Vec<Detection>], params: &AssociationParams) -> Vec<Trajectory> {
    let mut a = Associator::new(*params);
    for dets in frames {
        a.step(dets);
    }
    a.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(x: f64, y: f64, t: usize) -> Detection {
        Detection {
            bbox: BoundingBox::new(x, y, 20.0, 20.0).unwrap(),
            score: 1.0,
            category: "square".into(),
            frame_index: t,
        }
    }

    fn params(min_len: usize) -> AssociationParams {
        AssociationParams {
            iou_min: 0.3,
            max_gap: 10,
            min_len,
        }
    }

    #[test]
    fn stationary_object_gives_one_track() {
        let frames: Vec<Vec<Detection>> = (0..10).map(|t| vec![det(5.0, 5.0, t)]).collect();
        let tr = associate(&frames, &params(1));
        assert_eq!(tr.len(), 1);
        assert_eq!(tr[0].entries.len(), 10);
        assert!(associate(&vec![vec![]; 10], &params(1)).is_empty());
    }

    #[test]
    fn distant_objects_keep_identities() {
        // The detection order flips every frame; ids must follow position.
        let frames: Vec<Vec<Detection>> = (0..10)
            .map(|t| {
                let a = det(t as f64, 0.0, t);
                let b = det(150.0 + t as f64, 100.0, t);
                if t % 2 == 0 {
                    vec![a, b]
                } else {
                    vec![b, a]
                }
            })
            .collect();
        let tr = associate(&frames, &params(1));
        assert_eq!(tr.len(), 2);
        for t in &tr {
            assert_eq!(t.entries.len(), 10);
            let x0 = t.entries[0].bbox.x;
            assert!(t.entries.iter().all(|e| (e.bbox.x - x0).abs() < 10.0));
        }
    }

    #[test]
    fn gap_limit_and_min_len() {
        let mut frames: Vec<Vec<Detection>> = vec![vec![]; 20];
        for t in [0, 1, 2, 14, 15] {
            frames[t] = vec![det(5.0, 5.0, t)];
        }
        // Missed frames 3..=13 are 11 > max_gap, so the object restarts.
        let tr = associate(&frames, &params(1));
        assert_eq!(tr.iter().map(|t| t.entries.len()).collect::<Vec<_>>(), vec![3, 2]);
        assert_eq!(associate(&frames, &params(3)).len(), 1);
        frames[13] = vec![det(5.0, 5.0, 13)];
        assert_eq!(associate(&frames, &params(1)).len(), 1);
    }

    #[test]
    fn categories_never_mix() {
        let mut other = det(5.0, 5.0, 1);
        other.category = "ellipse".into();
        let tr = associate(&[vec![det(5.0, 5.0, 0)], vec![other]], &params(1));
        assert_eq!(tr.len(), 2);
    }

    /// Best summed IoU over all partial matchings of feasible pairs.
    fn brute_force(tracks: &[(BoundingBox, &str)], dets: &[Detection], iou_min: f64) -> f64 {
        fn go(t: usize, tracks: &[(BoundingBox, &str)], dets: &[Detection], used: &mut [bool], iou_min: f64) -> f64 {
            if t == tracks.len() {
                return 0.0;
            }
            let mut best = go(t + 1, tracks, dets, used, iou_min);
            for d in 0..dets.len() {
                if used[d] {
                    continue;
                }
                if let Some(v) = feasible_iou(&tracks[t], &dets[d], iou_min) {
                    used[d] = true;
                    best = best.max(v + go(t + 1, tracks, dets, used, iou_min));
                    used[d] = false;
                }
            }
            best
        }
        go(0, tracks, dets, &mut vec![false; dets.len()], iou_min)
    }

    #[test]
    fn frame_matching_is_optimal() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..300 {
            let nt = rng.random_range(0..6);
            let nd = rng.random_range(0..6);
            let tracks: Vec<(BoundingBox, &str)> = (0..nt)
                .map(|_| {
                    let b = BoundingBox::new(rng.random_range(0.0..30.0), rng.random_range(0.0..30.0), 20.0, 20.0);
                    (b.unwrap(), "square")
                })
                .collect();
            let dets: Vec<Detection> = (0..nd)
                .map(|_| det(rng.random_range(0.0..30.0), rng.random_range(0.0..30.0), 0))
                .collect();
            let m = match_frame(&tracks, &dets, 0.3);
            let mut seen = std::collections::HashSet::new();
            let mut total = 0.0;
            for (d, t) in m.iter().enumerate() {
                if let Some(t) = t {
                    assert!(seen.insert(*t), "track matched twice");
                    total += feasible_iou(&tracks[*t], &dets[d], 0.3).expect("infeasible match");
                }
            }
            let best = brute_force(&tracks, &dets, 0.3);
            assert!((total - best).abs() < 1e-9, "{total} vs {best}");
        }
    }
}
