//! Object-centred template and search crops.
//!
//! Coordinates are continuous: source pixel `(i, j)` covers
//! `[i, i+1) x [j, j+1)`, so its centre sits at `i + 0.5`. A crop window of
//! side `side` around `(cx, cy)` is resampled to `out x out` pixels; the
//! window centre lands exactly on the patch centre `out / 2`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bbox::BoundingBox;
use crate::error::{Result, TdaError};
use crate::generator::FrameTensor;
use crate::tensor::Tensor;

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropWindow {
    pub cx: f64,
    pub cy: f64,
    /// Side length of the window in source pixels.
    pub side: f64,
    /// Side length of the resampled patch.
    pub out: usize,
}

impl CropWindow {
    /// Template window: side `sqrt((w + p)(h + p))` with `p = (w + h) / 2`.
    pub fn template(bbox: &BoundingBox, z_size: usize) -> Self {
        let p = (bbox.w + bbox.h) / 2.0;
        let (cx, cy) = bbox.center();
        Self {
            cx,
            cy,
            side: ((bbox.w + p) * (bbox.h + p)).sqrt(),
            out: z_size,
        }
    }

    /// Search window: the template side scaled by `x_size / z_size`.
    pub fn search(bbox: &BoundingBox, z_size: usize, x_size: usize) -> Self {
        let t = Self::template(bbox, z_size);
        Self {
            side: t.side * (x_size as f64 / z_size as f64),
            out: x_size,
            ..t
        }
    }

    fn scale(&self) -> f64 {
        self.out as f64 / self.side
    }

    /// Source point to patch coordinates.
    pub fn to_patch(&self, x: f64, y: f64) -> (f64, f64) {
        let half = self.out as f64 / 2.0;
        ((x - self.cx) * self.scale() + half, (y - self.cy) * self.scale() + half)
    }

    /// Patch coordinates to source point.
    pub fn to_source(&self, u: f64, v: f64) -> (f64, f64) {
        let half = self.out as f64 / 2.0;
        (self.cx + (u - half) / self.scale(), self.cy + (v - half) / self.scale())
    }

    /// Bilinear resampling; samples that fall outside the frame take the
    /// channel mean of the frame.
    pub fn crop(&self, frame: &FrameTensor) -> Result<FrameTensor> {
        let (h, w) = (frame.height(), frame.width());
        let means = frame.channel_means();
        let n = self.out;
        let mut data = vec![0.0; 3 * n * n];
        let (plane_r, rest) = data.split_at_mut(n * n);
        let (plane_g, plane_b) = rest.split_at_mut(n * n);
        let planes = [plane_r, plane_g, plane_b];
        for j in 0..n {
            for i in 0..n {
                let (sx, sy) = self.to_source(i as f64 + 0.5, j as f64 + 0.5);
                let k = j * n + i;
                if !(sx >= 0.0 && sx < w as f64 && sy >= 0.0 && sy < h as f64) {
                    for c in 0..3 {
                        planes[c][k] = means[c];
                    }
                    continue;
                }
                let fx = (sx - 0.5).clamp(0.0, (w - 1) as f64);
                let fy = (sy - 0.5).clamp(0.0, (h - 1) as f64);
                let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
                let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
                let (ax, ay) = (fx - x0 as f64, fy - y0 as f64);
                for c in 0..3 {
                    let top = frame.at(c, y0, x0) * (1.0 - ax) + frame.at(c, y0, x1) * ax;
                    let bottom = frame.at(c, y1, x0) * (1.0 - ax) + frame.at(c, y1, x1) * ax;
                    planes[c][k] = (top * (1.0 - ay) + bottom * ay).clamp(0.0, 1.0);
                }
            }
        }
        FrameTensor::new(Tensor::from_vec(&[3, n, n], data)?, frame.frame_index)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchPair {
    pub template: FrameTensor,
    pub search: FrameTensor,
    pub source_box: BoundingBox,
    pub frame_index: usize,
    pub track_id: u64,
}

pub fn crop_pair(
    frame: &FrameTensor,
    bbox: &BoundingBox,
    z_size: usize,
    x_size: usize,
    track_id: u64,
) -> Result<PatchPair> {
    if !bbox.is_valid() {
        return Err(TdaError::Contract(format!(
            "degenerate box {},{},{},{}",
            bbox.x, bbox.y, bbox.w, bbox.h
        )));
    }
    if bbox.fraction_inside(frame.width() as f64, frame.height() as f64) <= 0.0 {
        return Err(TdaError::Contract("box does not intersect the frame".into()));
    }
    let (template, search) = rayon::join(
        || CropWindow::template(bbox, z_size).crop(frame),
        || CropWindow::search(bbox, z_size, x_size).crop(frame),
    );
    Ok(PatchPair {
        template: template?,
        search: search?,
        source_box: *bbox,
        frame_index: frame.frame_index,
        track_id,
    })
}

/// Bilinear resize of a whole frame to `size x size`.
pub fn resize_frame(frame: &FrameTensor, size: usize) -> Result<FrameTensor> {
    let (h, w) = (frame.height() as f64, frame.width() as f64);
    if frame.height() == size && frame.width() == size {
        return Ok(frame.clone());
    }
    let rows: Vec<Vec<[f64; 3]>> = (0..size)
        .into_par_iter()
        .map(|j| {
            (0..size)
                .map(|i| {
                    let fx = ((i as f64 + 0.5) * w / size as f64 - 0.5).clamp(0.0, w - 1.0);
                    let fy = ((j as f64 + 0.5) * h / size as f64 - 0.5).clamp(0.0, h - 1.0);
                    let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
                    let (x1, y1) = ((x0 + 1).min(w as usize - 1), (y0 + 1).min(h as usize - 1));
                    let (ax, ay) = (fx - x0 as f64, fy - y0 as f64);
                    [0, 1, 2].map(|c| {
                        let top = frame.at(c, y0, x0) * (1.0 - ax) + frame.at(c, y0, x1) * ax;
                        let bottom = frame.at(c, y1, x0) * (1.0 - ax) + frame.at(c, y1, x1) * ax;
                        (top * (1.0 - ay) + bottom * ay).clamp(0.0, 1.0)
                    })
                })
                .collect()
        })
        .collect();
    let mut data = vec![0.0; 3 * size * size];
    for (j, row) in rows.iter().enumerate() {
        for (i, px) in row.iter().enumerate() {
            for c in 0..3 {
                data[(c * size + j) * size + i] = px[c];
            }
        }
    }
    FrameTensor::new(Tensor::from_vec(&[3, size, size], data)?, frame.frame_index)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame_with_square(size: usize, x0: usize, y0: usize, side: usize) -> FrameTensor {
        let mut data = vec![0.2; 3 * size * size];
        for c in 0..3 {
            for y in y0..y0 + side {
                for x in x0..x0 + side {
                    data[(c * size + y) * size + x] = 0.9;
                }
            }
        }
        FrameTensor::new(Tensor::from_vec(&[3, size, size], data).unwrap(), 0).unwrap()
    }

    #[test]
    fn closed_form_side() {
        let b = BoundingBox::new(80.0, 80.0, 40.0, 40.0).unwrap();
        let z = CropWindow::template(&b, 127);
        assert_eq!(z.side, 80.0);
        assert_eq!((z.cx, z.cy), (100.0, 100.0));
        assert_eq!(CropWindow::search(&b, 127, 287).side, 80.0 * 287.0 / 127.0);
    }

    #[test]
    fn center_maps_to_patch_center() {
        let b = BoundingBox::new(80.0, 80.0, 40.0, 40.0).unwrap();
        for win in [CropWindow::template(&b, 127), CropWindow::search(&b, 127, 287)] {
            let (u, v) = win.to_patch(100.0, 100.0);
            assert_eq!((u, v), (win.out as f64 / 2.0, win.out as f64 / 2.0));
            assert_eq!(win.to_source(u, v), (100.0, 100.0));
        }
    }

    #[test]
    fn bright_square_centroid_lands_in_patch_center() {
        let f = frame_with_square(96, 30, 41, 12);
        let b = BoundingBox::new(30.0, 41.0, 12.0, 12.0).unwrap();
        let p = crop_pair(&f, &b, 31, 63, 1).unwrap();
        for patch in [&p.template, &p.search] {
            let n = patch.width();
            let (mut sx, mut sy, mut sw) = (0.0, 0.0, 0.0);
            for y in 0..n {
                for x in 0..n {
                    let v = patch.at(0, y, x) - 0.2;
                    sx += v * (x as f64 + 0.5);
                    sy += v * (y as f64 + 0.5);
                    sw += v;
                }
            }
            let half = n as f64 / 2.0;
            assert!((sx / sw - half).abs() < 0.5 && (sy / sw - half).abs() < 0.5);
        }
    }

    #[test]
    fn corner_padding_is_channel_mean() {
        let f = frame_with_square(64, 0, 0, 10);
        let means = f.channel_means();
        let b = BoundingBox::new(0.0, 0.0, 10.0, 10.0).unwrap();
        let p = crop_pair(&f, &b, 32, 64, 1).unwrap();
        assert_eq!(p.search.at(1, 0, 0), means[1]);
        assert_eq!(p.template.at(2, 0, 0), means[2]);
    }

    #[test]
    fn degenerate_and_outside_boxes_rejected() {
        let f = frame_with_square(32, 0, 0, 4);
        let flat = BoundingBox {
            x: 1.0,
            y: 1.0,
            w: 0.0,
            h: 3.0,
        };
        assert!(matches!(crop_pair(&f, &flat, 16, 32, 0), Err(TdaError::Contract(_))));
        let away = BoundingBox::new(100.0, 100.0, 4.0, 4.0).unwrap();
        assert!(crop_pair(&f, &away, 16, 32, 0).is_err());
    }

    #[test]
    fn resize_keeps_constant_frames() {
        let f = FrameTensor::new(Tensor::full(&[3, 20, 30], 0.4), 3).unwrap();
        let r = resize_frame(&f, 16).unwrap();
        assert_eq!(r.frame_index, 3);
        assert!(r.pixels().data().iter().all(|v| (v - 0.4).abs() < 1e-12));
    }
}
