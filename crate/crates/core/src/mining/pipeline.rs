use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use log::{info, warn};
use rayon::prelude::*;

use super::associate::{associate, AssociationParams};
use super::crop::{crop_pair, PatchPair};
use super::detector::{Detection, Detector};
use super::trajectory::{write_trajectories, Trajectory};
use crate::config::MiningConfig;
use crate::error::{Result, TdaError};
use crate::generator::FrameTensor;
use crate::synth::{frame_file_name, save_png};

const DETECT_ATTEMPTS: usize = 3;

#[derive(Clone, Debug)]
pub struct MiningOutput {
    pub trajectories: Vec<Trajectory>,
    pub patches: Vec<PatchPair>,
}

fn detect_with_retry(detector: &dyn Detector, frame: &FrameTensor, prompt: &str) -> Result<Vec<Detection>> {
    let mut attempt = 0;
    loop {
        match detector.detect(frame, prompt) {
            Err(e) if e.is_retriable() && attempt + 1 < DETECT_ATTEMPTS => {
                attempt += 1;
                warn!("frame {}: {e}; retry {attempt}", frame.frame_index);
                std::thread::sleep(Duration::from_millis(100 << attempt));
            }
            other => return other,
        }
    }
}

/// Detections of every frame, detected concurrently.
pub fn detect_all(frames: &[FrameTensor], prompt: &str, detector: &dyn Detector) -> Result<Vec<Vec<Detection>>> {
    frames
        .par_iter()
        .map(|f| detect_with_retry(detector, f, prompt))
        .collect()
}

fn check_frames(frames: &[FrameTensor]) -> Result<()> {
    if frames.windows(2).any(|w| w[0].frame_index >= w[1].frame_index) {
        return Err(TdaError::Contract("frames must be ordered by frame index".into()));
    }
    Ok(())
}

/// Detect, associate and crop. Entries refer to positions in `frames`.
pub fn mine(frames: &[FrameTensor], prompt: &str, detector: &dyn Detector, cfg: &MiningConfig) -> Result<MiningOutput> {
    check_frames(frames)?;
    let dets = detect_all(frames, prompt, detector)?;
    let trajectories = associate(&dets, &AssociationParams::from(cfg));
    let jobs: Vec<(&Trajectory, usize)> = trajectories
        .iter()
        .flat_map(|t| (0..t.entries.len()).map(move |k| (t, k)))
        .collect();
    let patches = jobs
        .par_iter()
        .map(|(t, k)| {
            let e = &t.entries[*k];
            crop_pair(&frames[e.frame_index], &e.bbox, cfg.z_size, cfg.x_size, t.track_id)
        })
        .collect::<Result<_>>()?;
    Ok(MiningOutput { trajectories, patches })
}

#[derive(Clone, Debug)]
pub struct MiningSummary {
    pub trajectories: Vec<Trajectory>,
    pub trajectory_file: PathBuf,
    /// One directory per track holding `template/` and `search/` frames.
    pub track_dirs: Vec<PathBuf>,
    pub patch_count: usize,
}

pub fn track_dir_name(track_id: u64) -> String {
    format!("track_{track_id:04}")
}

/// Like [`mine`] but streams patches to `out/patches/track_NNNN/{template,search}/`
/// one trajectory at a time and writes `out/trajectories.txt`.
pub fn mine_to_dir(
    frames: &[FrameTensor],
    prompt: &str,
    detector: &dyn Detector,
    cfg: &MiningConfig,
    out: &Path,
) -> Result<MiningSummary> {
    check_frames(frames)?;
    let dets = detect_all(frames, prompt, detector)?;
    let trajectories = associate(&dets, &AssociationParams::from(cfg));
    fs::create_dir_all(out).map_err(|e| TdaError::io(out, e))?;
    let trajectory_file = out.join("trajectories.txt");
    write_trajectories(&trajectory_file, &trajectories)?;

    let mut track_dirs = Vec::with_capacity(trajectories.len());
    let mut patch_count = 0;
    for t in &trajectories {
        let dir = out.join("patches").join(track_dir_name(t.track_id));
        for sub in ["template", "search"] {
            let d = dir.join(sub);
            fs::create_dir_all(&d).map_err(|e| TdaError::io(&d, e))?;
        }
        t.entries.par_iter().try_for_each(|e| -> Result<()> {
            let p = crop_pair(&frames[e.frame_index], &e.bbox, cfg.z_size, cfg.x_size, t.track_id)?;
            let name = frame_file_name(e.frame_index);
            save_png(&dir.join("template").join(&name), &p.template)?;
            save_png(&dir.join("search").join(&name), &p.search)
        })?;
        patch_count += t.entries.len();
        track_dirs.push(dir);
    }
    info!(
        "mined {} trajectories, {patch_count} patch pairs from {} frames",
        trajectories.len(),
        frames.len()
    );
    Ok(MiningSummary {
        trajectories,
        trajectory_file,
        track_dirs,
        patch_count,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bbox::BoundingBox;
    use crate::mining::detector::OracleDetector;
    use crate::mining::trajectory::read_trajectories;
    use crate::tensor::Tensor;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn frames(n: usize) -> Vec<FrameTensor> {
        (0..n)
            .map(|t| FrameTensor::new(Tensor::full(&[3, 64, 64], 0.3), t).unwrap())
            .collect()
    }

    fn cfg(min_len: usize) -> MiningConfig {
        MiningConfig {
            min_len,
            z_size: 16,
            x_size: 32,
            ..MiningConfig::default()
        }
    }

    fn two_objects(n: usize, flicker: bool) -> OracleDetector {
        let a: Vec<BoundingBox> = (0..n)
            .map(|t| BoundingBox::new(2.0 + t as f64, 4.0, 10.0, 8.0).unwrap())
            .collect();
        let b: Vec<BoundingBox> = (0..n)
            .map(|_| BoundingBox::new(40.0, 40.0, 12.0, 12.0).unwrap())
            .collect();
        let mut d = OracleDetector::from_tracks(&[a, b], &["car".into(), "car".into()], 0.0, 0);
        if flicker {
            for objs in d.objects.iter_mut().skip(3) {
                objs.truncate(1);
            }
        }
        d
    }

    #[test]
    fn patch_count_is_frames_times_objects() {
        let out = mine(&frames(8), "car", &two_objects(8, false), &cfg(1)).unwrap();
        assert_eq!(out.trajectories.len(), 2);
        assert_eq!(out.patches.len(), 16);
        assert_eq!(out.patches[0].template.width(), 16);
        assert_eq!(out.patches[0].search.width(), 32);
    }

    #[test]
    fn short_flicker_is_dropped() {
        let out = mine(&frames(8), "car", &two_objects(8, true), &cfg(5)).unwrap();
        assert_eq!(out.trajectories.len(), 1);
        assert_eq!(out.patches.len(), 8);
    }

    #[test]
    fn directory_output_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let s = mine_to_dir(&frames(6), "car", &two_objects(6, false), &cfg(1), dir.path()).unwrap();
        assert_eq!(s.patch_count, 12);
        assert_eq!(read_trajectories(&s.trajectory_file).unwrap(), s.trajectories);
        let search = crate::synth::frame_paths(&s.track_dirs[0].join("search")).unwrap();
        assert_eq!(search.len(), 6);
    }

    struct Flaky(AtomicUsize);

    impl Detector for Flaky {
        fn detect(&self, _: &FrameTensor, _: &str) -> Result<Vec<Detection>> {
            if self.0.fetch_add(1, Ordering::SeqCst) == 0 {
                Err(TdaError::Transport("first call fails".into()))
            } else {
                Ok(Vec::new())
            }
        }
    }

    #[test]
    fn transport_errors_are_retried() {
        let d = Flaky(AtomicUsize::new(0));
        assert!(mine(&frames(1), "car", &d, &cfg(1)).unwrap().trajectories.is_empty());
        assert_eq!(d.0.load(Ordering::SeqCst), 2);
    }
}
