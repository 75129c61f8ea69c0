//! Text-conditioned detectors.

use std::io::Cursor;
use std::time::Duration;

use base64::Engine as _;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bbox::BoundingBox;
use crate::error::{Result, TdaError};
use crate::generator::FrameTensor;
use crate::synth::{pair_seed, SyntheticSequence};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BoundingBox,
    pub score: f64,
    pub category: String,
    pub frame_index: usize,
}

/// Lower-cased phrases of a prompt such as `"car . person, boat"`.
pub fn prompt_phrases(prompt: &str) -> Vec<String> {
    prompt
        .split(['.', ','])
        .map(|p| p.trim().to_lowercase())
        .filter(|p| !p.is_empty())
        .collect()
}

fn checked_phrases(prompt: &str) -> Result<Vec<String>> {
    let phrases = prompt_phrases(prompt);
    if phrases.is_empty() {
        return Err(TdaError::Contract("detection prompt is empty".into()));
    }
    Ok(phrases)
}

pub trait Detector: Sync {
    fn detect(&self, frame: &FrameTensor, prompt: &str) -> Result<Vec<Detection>>;
}

/// Reads planted objects and perturbs every coordinate with uniform noise
/// in `[-jitter, jitter]`, seeded per frame and object.
#[derive(Clone, Debug)]
pub struct OracleDetector {
    /// `objects[frame]` lists `(box, category)`.
    pub objects: Vec<Vec<(BoundingBox, String)>>,
    pub jitter: f64,
    pub seed: u64,
}

impl OracleDetector {
    /// One object per track, `tracks[object][frame]`.
    pub fn from_tracks(tracks: &[Vec<BoundingBox>], categories: &[String], jitter: f64, seed: u64) -> Self {
        let frames = tracks.iter().map(Vec::len).max().unwrap_or(0);
        let objects = (0..frames)
            .map(|t| {
                tracks
                    .iter()
                    .zip(categories)
                    .filter_map(|(tr, c)| tr.get(t).map(|b| (*b, c.clone())))
                    .collect()
            })
            .collect();
        Self { objects, jitter, seed }
    }

    pub fn from_sequence(seq: &SyntheticSequence, jitter: f64, seed: u64) -> Self {
        Self::from_tracks(&seq.ground_truth, &seq.categories, jitter, seed)
    }
}

impl Detector for OracleDetector {
    fn detect(&self, frame: &FrameTensor, prompt: &str) -> Result<Vec<Detection>> {
        let phrases = checked_phrases(prompt)?;
        let t = frame.frame_index;
        let Some(objects) = self.objects.get(t) else {
            return Ok(Vec::new());
        };
        let mut out = Vec::new();
        for (k, (b, category)) in objects.iter().enumerate() {
            if !phrases.contains(&category.to_lowercase()) {
                continue;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(pair_seed(pair_seed(self.seed, t), k));
            let j = self.jitter;
            let mut d = [0.0; 4];
            if j > 0.0 {
                for v in &mut d {
                    *v = rng.random_range(-j..=j);
                }
            }
            let (w, h) = (b.w + d[2], b.h + d[3]);
            out.push(Detection {
                bbox: BoundingBox {
                    x: b.x + d[0],
                    y: b.y + d[1],
                    w: if w > 0.0 { w } else { b.w },
                    h: if h > 0.0 { h } else { b.h },
                },
                score: 1.0,
                category: category.clone(),
                frame_index: t,
            });
        }
        Ok(out)
    }
}

#[derive(Serialize)]
struct DetectRequest<'a> {
    prompt: &'a str,
    frame_index: usize,
    image_png_base64: String,
}

#[derive(Deserialize)]
struct DetectRecord {
    x: f64,
    y: f64,
    w: f64,
    h: f64,
    score: f64,
    category: String,
}

/// Posts `{prompt, frame_index, image_png_base64}` as JSON to an endpoint
/// that answers with a JSON list of `{x, y, w, h, score, category}`.
#[derive(Clone, Debug)]
pub struct HttpDetector {
    pub endpoint: String,
    pub timeout: Duration,
    agent: ureq::Agent,
}

impl HttpDetector {
    pub fn new(endpoint: &str, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            endpoint: endpoint.to_owned(),
            timeout,
            agent,
        }
    }

    fn encode_png(frame: &FrameTensor) -> Result<Vec<u8>> {
        let (h, w) = (frame.height(), frame.width());
        let mut img = image::RgbImage::new(w as u32, h as u32);
        for (x, y, p) in img.enumerate_pixels_mut() {
            *p = image::Rgb(
                [0, 1, 2].map(|c| (frame.at(c, y as usize, x as usize) * 255.0).round().clamp(0.0, 255.0) as u8),
            );
        }
        let mut bytes = Vec::new();
        img.write_to(&mut Cursor::new(&mut bytes), image::ImageFormat::Png)?;
        Ok(bytes)
    }
}

impl Detector for HttpDetector {
    fn detect(&self, frame: &FrameTensor, prompt: &str) -> Result<Vec<Detection>> {
        let phrases = checked_phrases(prompt)?;
        let body = serde_json::to_string(&DetectRequest {
            prompt,
            frame_index: frame.frame_index,
            image_png_base64: base64::engine::general_purpose::STANDARD.encode(Self::encode_png(frame)?),
        })?;
        let mut resp = self
            .agent
            .post(&self.endpoint)
            .header("content-type", "application/json")
            .send(body)
            .map_err(|e| TdaError::Transport(format!("{}: {e}", self.endpoint)))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| TdaError::Transport(format!("{}: reading body: {e}", self.endpoint)))?;
        if status >= 500 {
            return Err(TdaError::Transport(format!("{}: status {status}", self.endpoint)));
        }
        if status != 200 {
            return Err(TdaError::Protocol(format!(
                "{}: status {status}: {text}",
                self.endpoint
            )));
        }
        let records: Vec<DetectRecord> =
            serde_json::from_str(&text).map_err(|e| TdaError::Protocol(format!("malformed detections: {e}")))?;
        let mut out = Vec::with_capacity(records.len());
        for r in records {
            let bbox = BoundingBox::new(r.x, r.y, r.w, r.h)
                .map_err(|_| TdaError::Protocol(format!("invalid box {},{},{},{}", r.x, r.y, r.w, r.h)))?;
            if !(0.0..=1.0).contains(&r.score) {
                return Err(TdaError::Protocol(format!("score {} outside [0, 1]", r.score)));
            }
            if !phrases.contains(&r.category.to_lowercase()) {
                continue;
            }
            out.push(Detection {
                bbox,
                score: r.score,
                category: r.category,
                frame_index: frame.frame_index,
            });
        }
        Ok(out)
    }
}
