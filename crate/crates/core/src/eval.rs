//! One-pass evaluation: precision, normalized precision and success curves.
//!
//! Threshold grids follow the usual OPE toolkit convention: CLE thresholds
//! 0..=50 px, normalized thresholds 0..=0.5 in steps of 0.01, IoU thresholds
//! 0..=1 in steps of 0.05. Comparisons are strict (`CLE < t`, `IoU > t`).
//! A missing or invalid predicted box scores CLE = inf and IoU = 0.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::bbox::{cle, iou, BoundingBox};
use crate::error::{Result, TdaError};

pub const NORM_PRECISION_NOTE: &str = "normalized precision: fraction of frames with ||(dcx / gt_w, dcy / gt_h)|| < t";

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Attribute {
    Arc,
    Fm,
    Iv,
    Lai,
    Sv,
}

impl Attribute {
    /// File order of attribute flags.
    pub const ALL: [Attribute; 5] = [
        Attribute::Arc,
        Attribute::Fm,
        Attribute::Iv,
        Attribute::Lai,
        Attribute::Sv,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Attribute::Arc => "ARC",
            Attribute::Fm => "FM",
            Attribute::Iv => "IV",
            Attribute::Lai => "LAI",
            Attribute::Sv => "SV",
        }
    }
}

impl FromStr for Attribute {
    type Err = TdaError;

    fn from_str(s: &str) -> Result<Self> {
        Attribute::ALL
            .into_iter()
            .find(|a| a.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| TdaError::Config(format!("unknown attribute {s:?} (expected ARC, FM, IV, LAI or SV)")))
    }
}

pub fn precision_thresholds() -> Vec<f64> {
    (0..=50).map(|i| i as f64).collect()
}

pub fn norm_precision_thresholds() -> Vec<f64> {
    (0..=50).map(|i| i as f64 / 100.0).collect()
}

pub fn success_thresholds() -> Vec<f64> {
    (0..=20).map(|i| i as f64 / 20.0).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnnotatedSequence {
    pub name: String,
    pub boxes: Vec<BoundingBox>,
    pub attributes: BTreeSet<Attribute>,
}

/// Per-sequence predictions of one tracker; `None` marks a missing box.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackerRun {
    pub name: String,
    pub sequences: BTreeMap<String, Vec<Option<BoundingBox>>>,
}

/// Per-frame errors of one sequence.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FrameScores {
    pub cle: Vec<f64>,
    /// `None` when the ground-truth box is degenerate.
    pub norm: Vec<Option<f64>>,
    pub iou: Vec<f64>,
}

impl FrameScores {
    pub fn extend(&mut self, other: FrameScores) {
        self.cle.extend(other.cle);
        self.norm.extend(other.norm);
        self.iou.extend(other.iou);
    }
}

fn usable(b: &Option<BoundingBox>) -> Option<&BoundingBox> {
    b.as_ref().filter(|b| b.is_valid())
}

pub fn frame_scores(pred: &[Option<BoundingBox>], gt: &[BoundingBox]) -> Result<FrameScores> {
    if pred.len() != gt.len() {
        return Err(TdaError::Contract(format!(
            "{} predictions for {} ground-truth frames",
            pred.len(),
            gt.len()
        )));
    }
    if gt.is_empty() {
        return Err(TdaError::Contract("empty comparison set".into()));
    }
    let mut s = FrameScores::default();
    for (p, g) in pred.iter().zip(gt) {
        let degenerate = !g.is_valid();
        match usable(p) {
            Some(p) => {
                s.cle.push(cle(p, g));
                s.iou.push(if degenerate { 0.0 } else { iou(p, g) });
                s.norm.push((!degenerate).then(|| {
                    let ((px, py), (gx, gy)) = (p.center(), g.center());
                    ((px - gx) / g.w).hypot((py - gy) / g.h)
                }));
            }
            None => {
                s.cle.push(f64::INFINITY);
                s.iou.push(0.0);
                s.norm.push((!degenerate).then_some(f64::INFINITY));
            }
        }
        if degenerate {
            log::warn!("degenerate ground-truth box {g:?} excluded from normalized precision");
        }
    }
    Ok(s)
}

/// Frame counts behind each curve point.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpeCounts {
    pub precision: Vec<usize>,
    pub norm_precision: Vec<usize>,
    pub success: Vec<usize>,
    pub frames: usize,
    pub norm_frames: usize,
}

impl OpeCounts {
    pub fn from_scores(s: &FrameScores) -> Self {
        let below = |vals: &mut dyn Iterator<Item = f64>, t: f64| vals.filter(|v| *v < t).count();
        let norm: Vec<f64> = s.norm.iter().flatten().copied().collect();
        Self {
            precision: precision_thresholds()
                .into_iter()
                .map(|t| below(&mut s.cle.iter().copied(), t))
                .collect(),
            norm_precision: norm_precision_thresholds()
                .into_iter()
                .map(|t| below(&mut norm.iter().copied(), t))
                .collect(),
            success: success_thresholds()
                .into_iter()
                .map(|t| s.iou.iter().filter(|v| **v > t).count())
                .collect(),
            frames: s.cle.len(),
            norm_frames: norm.len(),
        }
    }

    pub fn curves(&self) -> OpeCurves {
        let frac = |c: &[usize], n: usize| -> Vec<f64> {
            c.iter()
                .map(|&k| if n == 0 { 0.0 } else { k as f64 / n as f64 })
                .collect()
        };
        let success = frac(&self.success, self.frames);
        let auc = success.iter().sum::<f64>() / success.len() as f64;
        OpeCurves {
            precision: frac(&self.precision, self.frames),
            norm_precision: frac(&self.norm_precision, self.norm_frames),
            success,
            auc,
            frames: self.frames,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpeCurves {
    pub precision: Vec<f64>,
    pub norm_precision: Vec<f64>,
    pub success: Vec<f64>,
    pub auc: f64,
    pub frames: usize,
}

impl OpeCurves {
    /// Precision at 20 px.
    pub fn precision_at_20(&self) -> f64 {
        self.precision[20]
    }

    /// Normalized precision at 0.2.
    pub fn norm_precision_at_02(&self) -> f64 {
        self.norm_precision[20]
    }
}

pub fn precision_curve(pred: &[Option<BoundingBox>], gt: &[BoundingBox]) -> Result<Vec<f64>> {
    Ok(OpeCounts::from_scores(&frame_scores(pred, gt)?).curves().precision)
}

pub fn norm_precision_curve(pred: &[Option<BoundingBox>], gt: &[BoundingBox]) -> Result<Vec<f64>> {
    Ok(OpeCounts::from_scores(&frame_scores(pred, gt)?).curves().norm_precision)
}

pub fn success_curve(pred: &[Option<BoundingBox>], gt: &[BoundingBox]) -> Result<(Vec<f64>, f64)> {
    let c = OpeCounts::from_scores(&frame_scores(pred, gt)?).curves();
    Ok((c.success, c.auc))
}

fn pooled_scores<'a>(
    run: &TrackerRun,
    annotated: impl IntoIterator<Item = &'a AnnotatedSequence>,
) -> Result<Option<FrameScores>> {
    let mut all: Option<FrameScores> = None;
    for seq in annotated {
        let pred = run
            .sequences
            .get(&seq.name)
            .ok_or_else(|| TdaError::Contract(format!("tracker {} has no result for {}", run.name, seq.name)))?;
        all.get_or_insert_with(FrameScores::default)
            .extend(frame_scores(pred, &seq.boxes)?);
    }
    Ok(all)
}

/// Curves pooled over every frame of every annotated sequence.
pub fn overall_report(run: &TrackerRun, annotated: &[AnnotatedSequence]) -> Result<OpeCurves> {
    let scores = pooled_scores(run, annotated)?.ok_or_else(|| TdaError::Contract("empty comparison set".into()))?;
    Ok(OpeCounts::from_scores(&scores).curves())
}

#[derive(Clone, Debug, PartialEq)]
pub enum AttributeReport {
    Curves(OpeCurves),
    /// No sequence carries the attribute.
    Empty,
}

pub fn attribute_report(
    run: &TrackerRun,
    annotated: &[AnnotatedSequence],
    attribute: Attribute,
) -> Result<AttributeReport> {
    let subset = annotated.iter().filter(|s| s.attributes.contains(&attribute));
    Ok(match pooled_scores(run, subset)? {
        Some(s) => AttributeReport::Curves(OpeCounts::from_scores(&s).curves()),
        None => AttributeReport::Empty,
    })
}

// ---- ingestion ----

fn parse_box_line(line: &str) -> Option<[f64; 4]> {
    let vals: Vec<f64> = line
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .ok()?;
    (vals.len() == 4).then(|| [vals[0], vals[1], vals[2], vals[3]])
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let s = fs::read_to_string(path).map_err(|e| TdaError::io(path, e))?;
    Ok(s.lines().map(str::to_owned).collect())
}

/// Reads a ground-truth file: one `x,y,w,h` line per frame.
pub fn read_boxes(path: &Path) -> Result<Vec<BoundingBox>> {
    read_lines(path)?
        .iter()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let [x, y, w, h] = parse_box_line(l).ok_or_else(|| TdaError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: format!("expected x,y,w,h, got {l:?}"),
            })?;
            Ok(BoundingBox { x, y, w, h })
        })
        .collect()
}

/// Reads a result file; unparsable or invalid lines become `None`.
pub fn read_predictions(path: &Path) -> Result<Vec<Option<BoundingBox>>> {
    Ok(read_lines(path)?
        .iter()
        .map(|l| {
            parse_box_line(l)
                .map(|[x, y, w, h]| BoundingBox { x, y, w, h })
                .filter(BoundingBox::is_valid)
        })
        .collect())
}

fn box_lines<'a>(boxes: impl Iterator<Item = Option<&'a BoundingBox>>) -> String {
    let mut s = String::new();
    for b in boxes {
        match b {
            Some(b) => writeln!(s, "{},{},{},{}", b.x, b.y, b.w, b.h),
            None => writeln!(s, "nan,nan,nan,nan"),
        }
        .expect("string write");
    }
    s
}

pub fn write_boxes(path: &Path, boxes: &[BoundingBox]) -> Result<()> {
    fs::write(path, box_lines(boxes.iter().map(Some))).map_err(|e| TdaError::io(path, e))
}

pub fn write_predictions(path: &Path, boxes: &[Option<BoundingBox>]) -> Result<()> {
    fs::write(path, box_lines(boxes.iter().map(Option::as_ref))).map_err(|e| TdaError::io(path, e))
}

pub fn write_attributes(path: &Path, flags: &[(Attribute, bool)]) -> Result<()> {
    let line: Vec<&str> = Attribute::ALL
        .iter()
        .map(|a| {
            if flags.iter().any(|(f, on)| f == a && *on) {
                "1"
            } else {
                "0"
            }
        })
        .collect();
    fs::write(path, line.join(",") + "\n").map_err(|e| TdaError::io(path, e))
}

pub fn read_attributes(path: &Path) -> Result<BTreeSet<Attribute>> {
    let text = fs::read_to_string(path).map_err(|e| TdaError::io(path, e))?;
    let flags: Vec<&str> = text
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .collect();
    if flags.len() != Attribute::ALL.len() || flags.iter().any(|f| *f != "0" && *f != "1") {
        return Err(TdaError::Parse {
            path: path.to_path_buf(),
            line: 1,
            msg: format!("expected 5 binary flags, got {text:?}"),
        });
    }
    Ok(Attribute::ALL
        .into_iter()
        .zip(flags)
        .filter(|(_, f)| *f == "1")
        .map(|(a, _)| a)
        .collect())
}

fn txt_stems(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out: Vec<(String, PathBuf)> = fs::read_dir(dir)
        .map_err(|e| TdaError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "txt"))
        .filter_map(|p| Some((p.file_stem()?.to_str()?.to_owned(), p)))
        .collect();
    out.sort();
    Ok(out)
}

/// Loads `<gt>/anno/<seq>.txt` and, where present, `<gt>/att/<seq>.txt`.
pub fn load_annotated(gt: &Path) -> Result<Vec<AnnotatedSequence>> {
    txt_stems(&gt.join("anno"))?
        .into_iter()
        .map(|(name, path)| {
            let att = gt.join("att").join(format!("{name}.txt"));
            let attributes = if att.exists() {
                read_attributes(&att)?
            } else {
                BTreeSet::new()
            };
            Ok(AnnotatedSequence {
                boxes: read_boxes(&path)?,
                name,
                attributes,
            })
        })
        .collect()
}

/// Loads `<dir>/<seq>.txt` result files of one tracker.
pub fn load_run(dir: &Path, name: &str) -> Result<TrackerRun> {
    let mut sequences = BTreeMap::new();
    for (seq, path) in txt_stems(dir)? {
        sequences.insert(seq, read_predictions(&path)?);
    }
    Ok(TrackerRun {
        name: name.to_owned(),
        sequences,
    })
}

// ---- report files ----

#[derive(Clone, Debug, PartialEq)]
pub struct ReportFiles {
    pub curves_csv: PathBuf,
    pub summary_csv: PathBuf,
    pub plots: Vec<PathBuf>,
}

impl ReportFiles {
    pub fn all(&self) -> Vec<PathBuf> {
        let mut v = vec![self.curves_csv.clone(), self.summary_csv.clone()];
        v.extend(self.plots.iter().cloned());
        v
    }
}

const METRICS: [&str; 3] = ["precision", "norm_precision", "success"];

fn metric_curve<'a>(c: &'a OpeCurves, metric: &str) -> &'a [f64] {
    match metric {
        "precision" => &c.precision,
        "norm_precision" => &c.norm_precision,
        _ => &c.success,
    }
}

fn metric_grid(metric: &str) -> Vec<f64> {
    match metric {
        "precision" => precision_thresholds(),
        "norm_precision" => norm_precision_thresholds(),
        _ => success_thresholds(),
    }
}

pub fn curves_csv(results: &[(String, OpeCurves)]) -> String {
    let mut s = String::from("tracker,metric,threshold,value\n");
    for (name, c) in results {
        for m in METRICS {
            for (t, v) in metric_grid(m).iter().zip(metric_curve(c, m)) {
                writeln!(s, "{name},{m},{t},{v}").expect("string write");
            }
        }
    }
    s
}

pub fn summary_csv(results: &[(String, OpeCurves)]) -> String {
    let mut s = format!("# {NORM_PRECISION_NOTE}\ntracker,precision_20px,norm_precision_0.2,success_auc,frames\n");
    for (name, c) in results {
        writeln!(
            s,
            "{name},{},{},{},{}",
            c.precision_at_20(),
            c.norm_precision_at_02(),
            c.auc,
            c.frames
        )
        .expect("string write");
    }
    s
}

/// Parses a curves CSV back into per-tracker curves (AUC recomputed).
pub fn parse_curves_csv(text: &str) -> Result<Vec<(String, OpeCurves)>> {
    let mut order: Vec<String> = Vec::new();
    let mut map: BTreeMap<String, [Vec<f64>; 3]> = BTreeMap::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let parts: Vec<&str> = line.split(',').collect();
        let err = |msg: &str| TdaError::Parse {
            path: PathBuf::from("<curves>"),
            line: i + 1,
            msg: msg.to_owned(),
        };
        if parts.len() != 4 {
            return Err(err("expected 4 fields"));
        }
        let idx = METRICS
            .iter()
            .position(|m| *m == parts[1])
            .ok_or_else(|| err("unknown metric"))?;
        let v: f64 = parts[3].parse().map_err(|_| err("bad value"))?;
        if !map.contains_key(parts[0]) {
            order.push(parts[0].to_owned());
        }
        map.entry(parts[0].to_owned()).or_default()[idx].push(v);
    }
    Ok(order
        .into_iter()
        .map(|name| {
            let [precision, norm_precision, success] = map.remove(&name).unwrap_or_default();
            let auc = success.iter().sum::<f64>() / success.len().max(1) as f64;
            (
                name,
                OpeCurves {
                    precision,
                    norm_precision,
                    success,
                    auc,
                    frames: 0,
                },
            )
        })
        .collect())
}

const PALETTE: [&str; 6] = ["#d62728", "#1f77b4", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

fn svg_plot(title: &str, xlabel: &str, grid: &[f64], series: &[(String, &[f64])]) -> String {
    let (w, h, m) = (480.0, 360.0, 50.0);
    let xmax = grid.last().copied().unwrap_or(1.0).max(1e-12);
    let px = |x: f64| m + x / xmax * (w - 2.0 * m);
    let py = |y: f64| h - m - y * (h - 2.0 * m);
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#
    )
    .unwrap();
    writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#).unwrap();
    writeln!(s, r#"<text x="{}" y="20" text-anchor="middle">{title}</text>"#, w / 2.0).unwrap();
    writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{xlabel}</text>"#,
        w / 2.0,
        h - 12.0
    )
    .unwrap();
    writeln!(
        s,
        r#"<path d="M{} {} L{} {} L{} {}" fill="none" stroke="black"/>"#,
        px(0.0),
        py(1.0),
        px(0.0),
        py(0.0),
        px(xmax),
        py(0.0)
    )
    .unwrap();
    for k in 0..=4 {
        let y = k as f64 / 4.0;
        writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end">{y}</text>"#,
            px(0.0) - 4.0,
            py(y) + 4.0
        )
        .unwrap();
        let x = xmax * k as f64 / 4.0;
        writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{x}</text>"#,
            px(x),
            py(0.0) + 16.0
        )
        .unwrap();
    }
    for (i, (name, values)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = grid
            .iter()
            .zip(values.iter())
            .map(|(x, y)| format!("{:.2},{:.2}", px(*x), py(*y)))
            .collect();
        writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            pts.join(" ")
        )
        .unwrap();
        let ly = m + 16.0 * i as f64;
        writeln!(
            s,
            r#"<text x="{}" y="{ly}" fill="{color}">{name}</text>"#,
            w - m - 100.0
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    s
}

/// Writes `curves.csv`, `summary.csv` and one SVG plot per metric.
pub fn emit_report(out: &Path, results: &[(String, OpeCurves)]) -> Result<ReportFiles> {
    if results.is_empty() {
        return Err(TdaError::Contract("report needs at least one tracker".into()));
    }
    fs::create_dir_all(out).map_err(|e| TdaError::io(out, e))?;
    let write = |name: &str, body: String| -> Result<PathBuf> {
        let p = out.join(name);
        fs::write(&p, body).map_err(|e| TdaError::io(&p, e))?;
        Ok(p)
    };
    let curves_csv = write("curves.csv", curves_csv(results))?;
    let summary_csv = write("summary.csv", summary_csv(results))?;
    let mut plots = Vec::new();
    for (metric, title, xlabel) in [
        ("precision", "Precision plot", "CLE threshold (px)"),
        ("norm_precision", "Normalized precision plot", "normalized threshold"),
        ("success", "Success plot", "IoU threshold"),
    ] {
        let series: Vec<(String, &[f64])> = results
            .iter()
            .map(|(n, c)| {
                let label = match metric {
                    "success" => format!("{n} [{:.3}]", c.auc),
                    "precision" => format!("{n} [{:.3}]", c.precision_at_20()),
                    _ => format!("{n} [{:.3}]", c.norm_precision_at_02()),
                };
                (label, metric_curve(c, metric))
            })
            .collect();
        plots.push(write(
            &format!("{metric}.svg"),
            svg_plot(title, xlabel, &metric_grid(metric), &series),
        )?);
    }
    Ok(ReportFiles {
        curves_csv,
        summary_csv,
        plots,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x: f64, y: f64, w: f64, h: f64) -> BoundingBox {
        BoundingBox { x, y, w, h }
    }

    fn shifted(gt: &[BoundingBox], dx: &[f64]) -> Vec<Option<BoundingBox>> {
        gt.iter()
            .zip(dx)
            .map(|(g, d)| Some(b(g.x + d, g.y, g.w, g.h)))
            .collect()
    }

    #[test]
    fn perfect_predictions() {
        let gt = vec![b(0.0, 0.0, 10.0, 10.0); 5];
        let pred: Vec<_> = gt.iter().copied().map(Some).collect();
        let p = precision_curve(&pred, &gt).unwrap();
        assert_eq!(p[0], 0.0);
        assert!(p[1..].iter().all(|v| *v == 1.0));
        let n = norm_precision_curve(&pred, &gt).unwrap();
        assert!(n[1..].iter().all(|v| *v == 1.0));
        let (s, auc) = success_curve(&pred, &gt).unwrap();
        assert!(s[..20].iter().all(|v| *v == 1.0));
        assert_eq!(s[20], 0.0);
        assert_eq!(auc, 20.0 / 21.0);
    }

    #[test]
    fn counting_examples() {
        let gt = vec![b(0.0, 0.0, 10.0, 10.0); 4];
        let pred = shifted(&gt, &[0.0, 10.0, 25.0, 50.0]);
        assert_eq!(precision_curve(&pred, &gt).unwrap()[20], 0.5);

        let gt = vec![b(0.0, 0.0, 10.0, 10.0)];
        let half = shifted(&gt, &[5.0]);
        let s = frame_scores(&half, &gt).unwrap();
        assert_eq!(s.norm[0], Some(0.5));
    }

    #[test]
    fn mixed_ious_at_half() {
        let gt = vec![b(0.0, 0.0, 10.0, 10.0); 3];
        // Width w over a 10x10 box at the same origin gives IoU w/10.
        let pred = vec![
            Some(b(0.0, 0.0, 1.0, 10.0)),
            Some(b(0.0, 0.0, 6.0, 10.0)),
            Some(b(0.0, 0.0, 9.0, 10.0)),
        ];
        let (s, _) = success_curve(&pred, &gt).unwrap();
        assert_eq!(s[10], 2.0 / 3.0);
    }

    #[test]
    fn disjoint_and_missing() {
        let gt = vec![b(0.0, 0.0, 2.0, 2.0); 3];
        let pred = vec![Some(b(50.0, 50.0, 2.0, 2.0)), None, Some(b(0.0, 0.0, -1.0, 2.0))];
        let (s, auc) = success_curve(&pred, &gt).unwrap();
        assert!(s.iter().all(|v| *v == 0.0));
        assert_eq!(auc, 0.0);
        let sc = frame_scores(&pred, &gt).unwrap();
        assert!(sc.cle[1].is_infinite() && sc.cle[2].is_infinite());
    }

    #[test]
    fn contract_errors() {
        assert!(matches!(precision_curve(&[], &[]), Err(TdaError::Contract(_))));
        assert!(matches!(
            precision_curve(&[None], &[b(0.0, 0.0, 1.0, 1.0), b(0.0, 0.0, 1.0, 1.0)]),
            Err(TdaError::Contract(_))
        ));
    }

    #[test]
    fn degenerate_ground_truth_is_excluded_from_norm_precision() {
        let gt = vec![b(0.0, 0.0, 10.0, 10.0), b(0.0, 0.0, 0.0, 10.0)];
        let pred: Vec<_> = gt.iter().copied().map(Some).collect();
        let c = OpeCounts::from_scores(&frame_scores(&pred, &gt).unwrap());
        assert_eq!(c.norm_frames, 1);
        assert_eq!(c.curves().norm_precision[1], 1.0);
    }

    fn two_sequences() -> (TrackerRun, Vec<AnnotatedSequence>) {
        let g1 = vec![b(0.0, 0.0, 10.0, 10.0); 3];
        let g2 = vec![b(5.0, 5.0, 4.0, 8.0); 2];
        let run = TrackerRun {
            name: "t".into(),
            sequences: BTreeMap::from([
                ("a".to_string(), shifted(&g1, &[0.0, 30.0, 3.0])),
                ("b".to_string(), vec![None, Some(g2[1])]),
            ]),
        };
        let ann = vec![
            AnnotatedSequence {
                name: "a".into(),
                boxes: g1,
                attributes: BTreeSet::from([Attribute::Lai]),
            },
            AnnotatedSequence {
                name: "b".into(),
                boxes: g2,
                attributes: BTreeSet::from([Attribute::Lai, Attribute::Iv]),
            },
        ];
        (run, ann)
    }

    #[test]
    fn attribute_pooling_matches_manual_counts() {
        let (run, ann) = two_sequences();
        let AttributeReport::Curves(lai) = attribute_report(&run, &ann, Attribute::Lai).unwrap() else {
            panic!("expected curves");
        };
        assert_eq!(lai, overall_report(&run, &ann).unwrap());
        // Frame CLEs: 0, 30, 3, inf, 0.
        assert_eq!(lai.precision[20], 3.0 / 5.0);
        assert_eq!(lai.precision[1], 2.0 / 5.0);
        let AttributeReport::Curves(iv) = attribute_report(&run, &ann, Attribute::Iv).unwrap() else {
            panic!("expected curves");
        };
        assert_eq!(iv.frames, 2);
        assert_eq!(iv.precision[1], 0.5);
        assert_eq!(
            attribute_report(&run, &ann, Attribute::Sv).unwrap(),
            AttributeReport::Empty
        );
    }

    #[test]
    fn pooling_is_frame_weighted() {
        let (run, ann) = two_sequences();
        let all = overall_report(&run, &ann).unwrap();
        let parts: Vec<OpeCurves> = ann
            .iter()
            .map(|s| overall_report(&run, std::slice::from_ref(s)).unwrap())
            .collect();
        for i in 0..all.precision.len() {
            let w: f64 = parts.iter().map(|p| p.precision[i] * p.frames as f64).sum::<f64>() / 5.0;
            assert!((w - all.precision[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn report_round_trips_and_is_deterministic() {
        let (run, ann) = two_sequences();
        let curves = overall_report(&run, &ann).unwrap();
        let perfect =
            OpeCounts::from_scores(&frame_scores(&[Some(b(0.0, 0.0, 1.0, 1.0))], &[b(0.0, 0.0, 1.0, 1.0)]).unwrap())
                .curves();
        let results = vec![("mixed".to_string(), curves.clone()), ("perfect".to_string(), perfect)];
        let dir = tempfile::tempdir().unwrap();
        let files = emit_report(dir.path(), &results).unwrap();
        let text = fs::read_to_string(&files.curves_csv).unwrap();
        let back = parse_curves_csv(&text).unwrap();
        assert_eq!(back[0].1.precision, curves.precision);
        assert_eq!(back[0].1.norm_precision, curves.norm_precision);
        assert_eq!(back[0].1.success, curves.success);
        let summary = fs::read_to_string(&files.summary_csv).unwrap();
        assert!(summary.lines().any(|l| l == format!("perfect,1,1,{},1", 20.0 / 21.0)));
        let again = tempfile::tempdir().unwrap();
        let files2 = emit_report(again.path(), &results).unwrap();
        assert_eq!(
            fs::read(&files.curves_csv).unwrap(),
            fs::read(&files2.curves_csv).unwrap()
        );
        assert_eq!(files.plots.len(), 3);
    }

    #[test]
    fn ingestion_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        fs::create_dir_all(root.join("anno")).unwrap();
        fs::create_dir_all(root.join("att")).unwrap();
        let boxes = vec![b(1.5, 2.0, 3.25, 4.0), b(0.1, 0.2, 0.30000000000000004, 7.0)];
        write_boxes(&root.join("anno/s1.txt"), &boxes).unwrap();
        write_attributes(
            &root.join("att/s1.txt"),
            &[(Attribute::Lai, true), (Attribute::Fm, true)],
        )
        .unwrap();
        assert_eq!(fs::read_to_string(root.join("att/s1.txt")).unwrap(), "0,1,0,1,0\n");
        let ann = load_annotated(root).unwrap();
        assert_eq!(ann[0].boxes, boxes);
        assert_eq!(ann[0].attributes, BTreeSet::from([Attribute::Fm, Attribute::Lai]));

        let pred = vec![Some(boxes[0]), None];
        write_predictions(&root.join("p.txt"), &pred).unwrap();
        assert_eq!(read_predictions(&root.join("p.txt")).unwrap(), pred);
        fs::write(root.join("bad.txt"), "1,2,3\n").unwrap();
        assert!(matches!(
            read_boxes(&root.join("bad.txt")),
            Err(TdaError::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn attribute_names_parse() {
        assert_eq!("lai".parse::<Attribute>().unwrap(), Attribute::Lai);
        assert!("dark".parse::<Attribute>().is_err());
    }
}
