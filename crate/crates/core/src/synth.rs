//! Paired day/night synthetic sequences with planted moving objects.
//!
//! Objects are squares or ellipses moving at constant velocity over a
//! smooth sinusoidal background. The night member of a pair applies
//! `clip(b * day^gamma + N(0, sigma))` per pixel to the day frames, so both
//! members share their geometry and ground truth.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::bbox::BoundingBox;
use crate::config::SceneSpec;
use crate::discriminator::DomainLabel;
use crate::error::{Result, TdaError};
use crate::eval::{write_attributes, write_boxes, Attribute};
use crate::generator::FrameTensor;
use crate::tensor::Tensor;

const NOISE_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Shape {
    Square,
    Ellipse,
}

impl Shape {
    /// Category label used by detectors.
    pub fn name(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Ellipse => "ellipse",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedObject {
    pub shape: Shape,
    pub color: [f64; 3],
    pub start: BoundingBox,
    /// Velocity in px/frame.
    pub velocity: (f64, f64),
}

impl PlantedObject {
    pub fn box_at(&self, t: usize) -> BoundingBox {
        BoundingBox {
            x: self.start.x + self.velocity.0 * t as f64,
            y: self.start.y + self.velocity.1 * t as f64,
            ..self.start
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticSequence {
    pub frames: Vec<FrameTensor>,
    /// `ground_truth[object][frame]`; object 0 is the tracking target.
    pub ground_truth: Vec<Vec<BoundingBox>>,
    /// Category of each object.
    pub categories: Vec<String>,
    pub domain: DomainLabel,
}

impl SyntheticSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn target_boxes(&self) -> &[BoundingBox] {
        &self.ground_truth[0]
    }
}

pub fn validate_spec(spec: &SceneSpec) -> Result<()> {
    let bad = |m: &str| Err(TdaError::Contract(format!("scene spec: {m}")));
    if spec.width < 16 || spec.height < 16 {
        return bad("frames must be at least 16x16");
    }
    if spec.min_objects == 0 || spec.min_objects > spec.max_objects {
        return bad("need 1 <= min_objects <= max_objects");
    }
    let sizes = spec.min_object_size.is_finite() && spec.max_object_size.is_finite();
    if !sizes || spec.min_object_size <= 0.0 || spec.min_object_size > spec.max_object_size {
        return bad("need 0 < min_object_size <= max_object_size");
    }
    if spec.max_object_size > spec.width.min(spec.height) as f64 {
        return bad("objects larger than the frame");
    }
    if !spec.max_speed.is_finite() || spec.max_speed < 0.0 {
        return bad("max_speed must be finite and non-negative");
    }
    if !spec.gamma.is_finite() || spec.gamma < 1.0 {
        return bad("gamma must be >= 1");
    }
    if !(spec.brightness > 0.0 && spec.brightness <= 1.0) {
        return bad("brightness must lie in (0, 1]");
    }
    if !spec.noise_sigma.is_finite() || spec.noise_sigma < 0.0 {
        return bad("noise_sigma must be non-negative");
    }
    Ok(())
}

struct Background {
    base: [f64; 3],
    waves: Vec<(f64, f64, f64, [f64; 3])>,
}

impl Background {
    fn new(rng: &mut ChaCha8Rng) -> Self {
        let base = [0.0; 3].map(|_: f64| rng.random_range(0.3..0.6));
        let waves = (0..4)
            .map(|_| {
                let fx = rng.random_range(-0.25..0.25);
                let fy = rng.random_range(-0.25..0.25);
                let phase = rng.random_range(0.0..std::f64::consts::TAU);
                let amp = [0.0; 3].map(|_: f64| rng.random_range(0.0..0.06));
                (fx, fy, phase, amp)
            })
            .collect();
        Self { base, waves }
    }

    fn at(&self, c: usize, x: f64, y: f64) -> f64 {
        let mut v = self.base[c];
        for (fx, fy, phase, amp) in &self.waves {
            v += amp[c] * (fx * x + fy * y + phase).sin();
        }
        v
    }
}

fn plant_objects(spec: &SceneSpec, length: usize, rng: &mut ChaCha8Rng) -> Vec<PlantedObject> {
    let n = rng.random_range(spec.min_objects..=spec.max_objects);
    let (fw, fh) = (spec.width as f64, spec.height as f64);
    let span = (length - 1) as f64;
    (0..n)
        .map(|_| {
            let shape = if rng.random_bool(0.5) {
                Shape::Square
            } else {
                Shape::Ellipse
            };
            let mut size = || rng.random_range(spec.min_object_size..=spec.max_object_size);
            let (w, h) = match shape {
                Shape::Square => {
                    let s = size();
                    (s, s)
                }
                Shape::Ellipse => (size(), size()),
            };
            // Bound the speed so the whole trajectory stays inside the frame.
            let mut axis = |extent: f64, frame: f64| {
                let room = frame - extent;
                let vmax = if span > 0.0 {
                    spec.max_speed.min(room / span)
                } else {
                    0.0
                };
                let v = if vmax > 0.0 {
                    rng.random_range(-vmax..=vmax)
                } else {
                    0.0
                };
                let lo = if v < 0.0 { -v * span } else { 0.0 };
                let hi = room - if v > 0.0 { v * span } else { 0.0 };
                let start = if hi > lo { rng.random_range(lo..=hi) } else { lo };
                (start, v)
            };
            let (x, vx) = axis(w, fw);
            let (y, vy) = axis(h, fh);
            let color = [0.0; 3].map(|_: f64| rng.random_range(0.0..1.0));
            PlantedObject {
                shape,
                color,
                start: BoundingBox { x, y, w, h },
                velocity: (vx, vy),
            }
        })
        .collect()
}

fn covers(obj: &PlantedObject, b: &BoundingBox, px: f64, py: f64) -> bool {
    match obj.shape {
        Shape::Square => px >= b.x && px < b.x + b.w && py >= b.y && py < b.y + b.h,
        Shape::Ellipse => {
            let (cx, cy) = b.center();
            let dx = (px - cx) / (b.w / 2.0);
            let dy = (py - cy) / (b.h / 2.0);
            dx * dx + dy * dy <= 1.0
        }
    }
}

fn render(spec: &SceneSpec, bg: &Background, objects: &[PlantedObject], t: usize) -> Tensor {
    let (w, h) = (spec.width, spec.height);
    let mut data = vec![0.0; 3 * h * w];
    let boxes: Vec<BoundingBox> = objects.iter().map(|o| o.box_at(t)).collect();
    for y in 0..h {
        for x in 0..w {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let hit = objects.iter().zip(&boxes).rev().find(|(o, b)| covers(o, b, px, py));
            for c in 0..3 {
                let v = match hit {
                    Some((o, _)) => o.color[c],
                    None => bg.at(c, px, py),
                };
                data[(c * h + y) * w + x] = v.clamp(0.0, 1.0);
            }
        }
    }
    Tensor::from_vec(&[3, h, w], data).expect("sized")
}

/// Applies `clip(b * v^gamma + N(0, sigma))` to every value.
pub fn night_transform(day: &Tensor, spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Tensor {
    let noise = (spec.noise_sigma > 0.0).then(|| Normal::new(0.0, spec.noise_sigma).expect("sigma checked"));
    let data = day
        .data()
        .iter()
        .map(|&v| {
            let mut out = spec.brightness * v.powf(spec.gamma);
            if let Some(n) = &noise {
                out += n.sample(rng);
            }
            out.clamp(0.0, 1.0)
        })
        .collect();
    Tensor::from_vec(day.shape(), data).expect("same shape")
}

/// Renders a day sequence and its night counterpart from `(spec, seed)`.
pub fn generate_pair(spec: &SceneSpec, length: usize, seed: u64) -> Result<(SyntheticSequence, SyntheticSequence)> {
    validate_spec(spec)?;
    if length < 3 {
        return Err(TdaError::Contract(format!("sequence length {length} < 3")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bg = match spec.background_seed {
        Some(s) => Background::new(&mut ChaCha8Rng::seed_from_u64(s)),
        None => Background::new(&mut rng),
    };
    let objects = plant_objects(spec, length, &mut rng);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(seed ^ NOISE_STREAM);

    let mut day = Vec::with_capacity(length);
    let mut night = Vec::with_capacity(length);
    for t in 0..length {
        let d = render(spec, &bg, &objects, t);
        let n = night_transform(&d, spec, &mut noise_rng);
        day.push(FrameTensor::new(d, t)?);
        night.push(FrameTensor::new(n, t)?);
    }
    let ground_truth: Vec<Vec<BoundingBox>> = objects
        .iter()
        .map(|o| (0..length).map(|t| o.box_at(t)).collect())
        .collect();
    let categories: Vec<String> = objects.iter().map(|o| o.shape.name().to_owned()).collect();
    Ok((
        SyntheticSequence {
            frames: day,
            ground_truth: ground_truth.clone(),
            categories: categories.clone(),
            domain: DomainLabel::SourceDay,
        },
        SyntheticSequence {
            frames: night,
            ground_truth,
            categories,
            domain: DomainLabel::TargetNight,
        },
    ))
}

/// Seed of pair `index` in a dataset generated from `seed`.
pub fn pair_seed(seed: u64, index: usize) -> u64 {
    let mut z = seed.wrapping_add((index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn attributes_of(seq: &SyntheticSequence, spec: &SceneSpec) -> Vec<(Attribute, bool)> {
    let target = seq.target_boxes();
    let fast = target.windows(2).any(|w| {
        let (a, b) = (w[0].center(), w[1].center());
        (a.0 - b.0).hypot(a.1 - b.1) > 0.75 * spec.max_speed * std::f64::consts::SQRT_2
    });
    vec![
        (Attribute::Arc, false),
        (Attribute::Fm, fast),
        (Attribute::Iv, false),
        (Attribute::Lai, seq.domain == DomainLabel::TargetNight),
        (Attribute::Sv, false),
    ]
}

pub fn frame_file_name(t: usize) -> String {
    format!("{:06}.png", t + 1)
}

/// Writes one sequence under `root`:
/// `data_seq/<name>/000001.png ...`, `anno/<name>.txt` (target boxes),
/// `att/<name>.txt` and `objects/<name>.txt` (`frame,object,x,y,w,h,category`).
pub fn save_sequence(root: &Path, name: &str, seq: &SyntheticSequence, spec: &SceneSpec) -> Result<()> {
    let frame_dir = root.join("data_seq").join(name);
    for dir in [&frame_dir, &root.join("anno"), &root.join("att"), &root.join("objects")] {
        fs::create_dir_all(dir).map_err(|e| TdaError::io(dir, e))?;
    }
    for (t, f) in seq.frames.iter().enumerate() {
        save_png(&frame_dir.join(frame_file_name(t)), f)?;
    }
    write_boxes(&root.join("anno").join(format!("{name}.txt")), seq.target_boxes())?;
    write_attributes(&root.join("att").join(format!("{name}.txt")), &attributes_of(seq, spec))?;
    let mut objects = String::new();
    for t in 0..seq.len() {
        for (k, track) in seq.ground_truth.iter().enumerate() {
            let b = &track[t];
            objects.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                t + 1,
                k + 1,
                b.x,
                b.y,
                b.w,
                b.h,
                seq.categories[k]
            ));
        }
    }
    let path = root.join("objects").join(format!("{name}.txt"));
    fs::write(&path, objects).map_err(|e| TdaError::io(&path, e))
}

/// Generates `count` pairs into `out/day` and `out/night`; returns the
/// sequence names.
pub fn write_dataset(out: &Path, spec: &SceneSpec, count: usize, length: usize, seed: u64) -> Result<Vec<String>> {
    let mut names = Vec::with_capacity(count);
    for i in 0..count {
        let name = format!("seq{:04}", i + 1);
        let (day, night) = generate_pair(spec, length, pair_seed(seed, i))?;
        save_sequence(&out.join("day"), &name, &day, spec)?;
        save_sequence(&out.join("night"), &name, &night, spec)?;
        names.push(name);
    }
    Ok(names)
}

/// Reads an objects file back as `(tracks[object][frame], categories)`.
pub fn read_objects(path: &Path) -> Result<(Vec<Vec<BoundingBox>>, Vec<String>)> {
    let text = fs::read_to_string(path).map_err(|e| TdaError::io(path, e))?;
    let mut tracks: Vec<Vec<BoundingBox>> = Vec::new();
    let mut categories: Vec<String> = Vec::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bad = |msg: String| TdaError::Parse {
            path: path.to_owned(),
            line: n + 1,
            msg,
        };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(bad(format!("expected 7 fields, got {}", f.len())));
        }
        let frame: usize = f[0].parse().map_err(|e| bad(format!("frame: {e}")))?;
        let object: usize = f[1].parse().map_err(|e| bad(format!("object: {e}")))?;
        if frame == 0 || object == 0 {
            return Err(bad("frame and object numbers are 1-based".into()));
        }
        let mut v = [0.0; 4];
        for (slot, s) in v.iter_mut().zip(&f[2..6]) {
            *slot = s.parse().map_err(|e| bad(format!("{s:?}: {e}")))?;
        }
        let b = BoundingBox::new(v[0], v[1], v[2], v[3]).map_err(|e| bad(e.to_string()))?;
        if tracks.len() < object {
            tracks.resize(object, Vec::new());
            categories.resize(object, String::new());
        }
        if tracks[object - 1].len() != frame - 1 {
            return Err(bad(format!("object {object}: frame {frame} out of order")));
        }
        tracks[object - 1].push(b);
        categories[object - 1] = f[6].to_owned();
    }
    Ok((tracks, categories))
}

pub fn save_png(path: &Path, frame: &FrameTensor) -> Result<()> {
    let (h, w) = (frame.height(), frame.width());
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [0, 1, 2].map(|c| (frame.at(c, y, x) * 255.0).round().clamp(0.0, 255.0) as u8);
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    img.save(path)?;
    Ok(())
}

pub fn load_png(path: &Path, frame_index: usize) -> Result<FrameTensor> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = p.0[c] as f64 / 255.0;
        }
    }
    FrameTensor::new(Tensor::from_vec(&[3, h, w], data)?, frame_index)
}

/// Sorted frame image paths of a sequence directory.
pub fn frame_paths(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| TdaError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "png" || x == "jpg"))
        .collect();
    paths.sort();
    Ok(paths)
}

pub fn load_frames(dir: &Path) -> Result<Vec<FrameTensor>> {
    frame_paths(dir)?
        .iter()
        .enumerate()
        .map(|(t, p)| load_png(p, t))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::probe::{linear_probe, ProbeSettings};

    fn frame_stats(f: &FrameTensor) -> Vec<f64> {
        let d = f.pixels().data();
        let plane = d.len() / 3;
        let mut out = Vec::new();
        for c in 0..3 {
            let ch = &d[c * plane..(c + 1) * plane];
            let m = ch.iter().sum::<f64>() / plane as f64;
            let v = ch.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / plane as f64;
            out.push(m);
            out.push(v.sqrt());
        }
        out
    }

    #[test]
    fn identity_transform_reproduces_day() {
        let spec = SceneSpec {
            gamma: 1.0,
            brightness: 1.0,
            noise_sigma: 0.0,
            ..Default::default()
        };
        let (day, night) = generate_pair(&spec, 4, 11).unwrap();
        for (d, n) in day.frames.iter().zip(&night.frames) {
            assert_eq!(d.pixels(), n.pixels());
        }
    }

    #[test]
    fn default_night_is_darker_and_shares_ground_truth() {
        let spec = SceneSpec::default();
        let (day, night) = generate_pair(&spec, 5, 2).unwrap();
        assert_eq!(day.ground_truth, night.ground_truth);
        for (d, n) in day.frames.iter().zip(&night.frames) {
            assert!(n.pixels().mean() < d.pixels().mean());
        }
    }

    #[test]
    fn fixed_seed_is_bitwise_reproducible() {
        let spec = SceneSpec::default();
        let (a, b) = generate_pair(&spec, 6, 99).unwrap();
        let (c, d) = generate_pair(&spec, 6, 99).unwrap();
        for (x, y) in a.frames.iter().chain(&b.frames).zip(c.frames.iter().chain(&d.frames)) {
            assert_eq!(x.pixels(), y.pixels());
        }
        assert_eq!(a.ground_truth, c.ground_truth);
    }

    #[test]
    fn objects_follow_linear_motion_and_stay_inside() {
        let spec = SceneSpec::default();
        for seed in 0..50 {
            let (day, _) = generate_pair(&spec, 8, seed).unwrap();
            for track in &day.ground_truth {
                let v = (track[1].x - track[0].x, track[1].y - track[0].y);
                assert!(v.0.abs() <= spec.max_speed && v.1.abs() <= spec.max_speed);
                for (t, b) in track.iter().enumerate() {
                    assert!((b.x - (track[0].x + v.0 * t as f64)).abs() < 1e-9);
                    assert!(b.fraction_inside(64.0, 64.0) >= 0.5);
                }
            }
        }
    }

    #[test]
    fn zero_noise_transform_is_monotone() {
        let spec = SceneSpec {
            noise_sigma: 0.0,
            ..Default::default()
        };
        let values: Vec<f64> = (0..=100).map(|i| i as f64 / 100.0).collect();
        let t = Tensor::from_vec(&[101], values).unwrap();
        let out = night_transform(&t, &spec, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(out.data().windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn invalid_specs_are_contract_errors() {
        for spec in [
            SceneSpec {
                gamma: 0.5,
                ..Default::default()
            },
            SceneSpec {
                brightness: 0.0,
                ..Default::default()
            },
            SceneSpec {
                min_objects: 0,
                ..Default::default()
            },
            SceneSpec {
                max_object_size: 100.0,
                ..Default::default()
            },
        ] {
            assert!(matches!(generate_pair(&spec, 4, 0), Err(TdaError::Contract(_))));
        }
        assert!(generate_pair(&SceneSpec::default(), 2, 0).is_err());
    }

    #[test]
    fn raw_pixel_probe_separates_domains() {
        let spec = SceneSpec::default();
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for i in 0..100 {
            let (day, night) = generate_pair(&spec, 3, pair_seed(1, i)).unwrap();
            for f in &day.frames {
                xs.push(frame_stats(f));
                ys.push(true);
            }
            for f in &night.frames {
                xs.push(frame_stats(f));
                ys.push(false);
            }
        }
        let r = linear_probe(&xs, &ys, &ProbeSettings::default()).unwrap();
        assert!(r.accuracy >= 0.95, "{r:?}");
    }

    #[test]
    fn png_round_trip_quantizes_to_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let (day, _) = generate_pair(&SceneSpec::default(), 3, 4).unwrap();
        let p = dir.path().join("f.png");
        save_png(&p, &day.frames[0]).unwrap();
        let back = load_png(&p, 0).unwrap();
        assert!(back.pixels().max_abs_diff(day.frames[0].pixels()) <= 0.5 / 255.0 + 1e-12);
    }

    #[test]
    fn objects_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SceneSpec {
            min_objects: 2,
            max_objects: 3,
            ..SceneSpec::default()
        };
        let (day, _) = generate_pair(&spec, 4, 9).unwrap();
        save_sequence(dir.path(), "s", &day, &spec).unwrap();
        let (tracks, cats) = read_objects(&dir.path().join("objects").join("s.txt")).unwrap();
        assert_eq!(tracks, day.ground_truth);
        assert_eq!(cats, day.categories);
    }
}
