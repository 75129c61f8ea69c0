use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{anyhow, bail, Context};
use log::{info, warn};
use tda::checkpoint::Checkpoint;
use tda::config::{Config, SceneSpec};
use tda::eval::{
    attribute_report, emit_report, load_annotated, load_run, overall_report, parse_curves_csv, write_predictions,
    Attribute, AttributeReport, OpeCurves,
};
use tda::generator::FrameTensor;
use tda::mining::{mine_to_dir, resize_frame, Detector, HttpDetector, OracleDetector};
use tda::synth::{frame_paths, load_frames, load_png, read_objects, write_dataset};
use tda::training::{DirectorySource, Trainer};
use tda::TdaError;

use crate::manifest::{now_unix, Invocation, RunManifest};
use crate::{Cli, Command, DetectorKind, GlobalArgs};

pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_CONFIG: u8 = 3;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub error: anyhow::Error,
}

impl From<anyhow::Error> for CliError {
    fn from(error: anyhow::Error) -> Self {
        let code = match error.downcast_ref::<TdaError>() {
            Some(TdaError::Config(_)) => EXIT_CONFIG,
            _ => EXIT_FAILURE,
        };
        Self { code, error }
    }
}

impl From<TdaError> for CliError {
    fn from(e: TdaError) -> Self {
        anyhow::Error::from(e).into()
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError {
        code: EXIT_USAGE,
        error: anyhow!(msg.into()),
    }
}

fn config_error(e: impl std::fmt::Display) -> CliError {
    CliError {
        code: EXIT_CONFIG,
        error: anyhow!("{e}"),
    }
}

type Outcome = std::result::Result<(), CliError>;

struct Run {
    dir: PathBuf,
    config: Config,
    manifest: RunManifest,
}

/// Config precedence: `--config`, then the run's manifest snapshot, then
/// defaults; `--seed` overrides the result.
fn open_run(global: &GlobalArgs) -> std::result::Result<Run, CliError> {
    let dir = global
        .out
        .clone()
        .ok_or_else(|| usage("no run directory: pass --out or set TDA_RUN_DIR"))?;
    std::fs::create_dir_all(&dir)
        .with_context(|| format!("creating run directory {}", dir.display()))
        .map_err(CliError::from)?;
    let previous = RunManifest::load(&dir)?;
    let mut config = match (&global.config, &previous) {
        (Some(p), _) => Config::load(p).map_err(config_error)?,
        (None, Some(m)) => m.config.clone(),
        (None, None) => Config::default(),
    };
    if let Some(s) = global.seed {
        config.training.seed = s;
    }
    config.validate().map_err(config_error)?;
    let mut manifest = previous.unwrap_or_else(|| RunManifest::new(&dir, config.clone()));
    manifest.config = config.clone();
    manifest.seed = config.training.seed;
    Ok(Run { dir, config, manifest })
}

pub fn dispatch(cli: Cli) -> Outcome {
    let mut run = open_run(&cli.global)?;
    let started = now_unix();
    let (name, args) = describe(&cli.command);
    match cli.command {
        Command::Synth { spec, n, length } => synth(&mut run, spec, n, length)?,
        Command::Mine {
            video,
            prompt,
            detector,
            endpoint,
            timeout,
            objects,
            jitter,
            name,
        } => {
            let det: Box<dyn Detector> = match detector {
                DetectorKind::Http => {
                    let url = endpoint.ok_or_else(|| usage("--detector http needs --endpoint"))?;
                    if !(timeout.is_finite() && timeout > 0.0) {
                        return Err(usage("--timeout must be positive"));
                    }
                    Box::new(HttpDetector::new(&url, Duration::from_secs_f64(timeout)))
                }
                DetectorKind::Oracle => {
                    let path = match objects {
                        Some(p) => p,
                        None => infer_objects_file(&video).ok_or_else(|| {
                            usage("cannot locate the objects file for the oracle detector; pass --objects")
                        })?,
                    };
                    let (tracks, categories) = read_objects(&path)?;
                    Box::new(OracleDetector::from_tracks(
                        &tracks,
                        &categories,
                        jitter,
                        run.config.training.seed,
                    ))
                }
            };
            mine(&mut run, &video, &prompt, det.as_ref(), name)?
        }
        Command::Train { data, targets } => train(&mut run, data, targets)?,
        Command::Track {
            checkpoint,
            sequences,
            name,
        } => track(&mut run, checkpoint, sequences, &name)?,
        Command::Eval { gt, results, attribute } => {
            let attribute = attribute
                .map(|a| a.parse::<Attribute>().map_err(|e| usage(format!("--attribute: {e}"))))
                .transpose()?;
            eval(&mut run, gt, results, attribute)?
        }
        Command::Report { curves } => report(&mut run, curves)?,
    }
    run.manifest.invocations.push(Invocation {
        command: name,
        args,
        started_unix: started,
        finished_unix: now_unix(),
    });
    run.manifest.prune(&run.dir);
    run.manifest.save(&run.dir)?;
    Ok(())
}

fn describe(c: &Command) -> (String, Vec<String>) {
    let full = format!("{c:?}");
    let name = full
        .split(|ch: char| !ch.is_alphanumeric())
        .next()
        .unwrap_or("")
        .to_lowercase();
    (name, std::env::args().skip(1).collect())
}

fn synth(run: &mut Run, spec: Option<PathBuf>, n: Option<usize>, length: Option<usize>) -> Outcome {
    let scene: SceneSpec = match spec {
        Some(p) => {
            let text = std::fs::read_to_string(&p).map_err(|e| config_error(format!("{}: {e}", p.display())))?;
            toml::from_str(&text).map_err(|e| config_error(format!("{}: {e}", p.display())))?
        }
        None => run.config.scene.clone(),
    };
    tda::synth::validate_spec(&scene).map_err(config_error)?;
    run.config.scene = scene.clone();
    run.manifest.config.scene = scene.clone();
    let n = n.unwrap_or(run.config.data.pairs);
    let length = length.unwrap_or(run.config.data.sequence_length);
    if n == 0 {
        return Err(usage("--n must be positive"));
    }
    let out = run.dir.join("data");
    let names = write_dataset(&out, &scene, n, length, run.config.training.seed)?;
    info!(
        "wrote {} day/night pairs of {length} frames to {}",
        names.len(),
        out.display()
    );
    run.manifest.record(&run.dir, "dataset", &out);
    Ok(())
}

/// `<root>/data_seq/<name>` maps to `<root>/objects/<name>.txt`.
fn infer_objects_file(video: &Path) -> Option<PathBuf> {
    let name = video.file_name()?.to_str()?;
    let parent = video.parent()?;
    if parent.file_name()? != "data_seq" {
        return None;
    }
    let p = parent.parent()?.join("objects").join(format!("{name}.txt"));
    p.exists().then_some(p)
}

fn load_video(video: &Path) -> anyhow::Result<Vec<FrameTensor>> {
    if video.is_dir() {
        let frames = load_frames(video)?;
        if frames.is_empty() {
            bail!("no frame images in {}", video.display());
        }
        Ok(frames)
    } else {
        Ok(vec![load_png(video, 0)?])
    }
}

fn mine(run: &mut Run, video: &Path, prompt: &str, detector: &dyn Detector, name: Option<String>) -> Outcome {
    if tda::mining::prompt_phrases(prompt).is_empty() {
        return Err(usage("--prompt is empty"));
    }
    let name = match name {
        Some(n) => n,
        None => video
            .file_stem()
            .and_then(|s| s.to_str())
            .map(str::to_owned)
            .ok_or_else(|| usage("cannot derive a name from --video; pass --name"))?,
    };
    let frames = load_video(video)?;
    let out = run.dir.join("mined").join(&name);
    let summary = mine_to_dir(&frames, prompt, detector, &run.config.mining, &out)?;
    info!(
        "{name}: {} trajectories, {} patch pairs",
        summary.trajectories.len(),
        summary.patch_count
    );
    run.manifest.record(&run.dir, "trajectories", &summary.trajectory_file);
    let patches = out.join("patches");
    if patches.exists() {
        run.manifest.record(&run.dir, "patches", &patches);
    }
    Ok(())
}

/// Every `patches/track_*/search` directory below `root` with at least
/// three frames.
fn mined_target_dirs(root: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        if dir.file_name().is_some_and(|n| n == "search") {
            if frame_paths(&dir)?.len() >= 3 {
                out.push(dir);
            }
            continue;
        }
        for e in std::fs::read_dir(&dir).with_context(|| format!("listing {}", dir.display()))? {
            let p = e?.path();
            if p.is_dir() {
                stack.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}

fn train(run: &mut Run, data: Option<PathBuf>, targets: Vec<PathBuf>) -> Outcome {
    let data = data.unwrap_or_else(|| run.dir.join("data"));
    let cfg = &run.config;
    let mut source =
        DirectorySource::from_synth_dir(&data, cfg.data.sequence_length, cfg.data.batch_size, cfg.training.seed)?;
    if !targets.is_empty() {
        let mut dirs = Vec::new();
        for t in &targets {
            dirs.extend(mined_target_dirs(t)?);
        }
        if dirs.is_empty() {
            return Err(
                anyhow!("no mined search sequences with 3 or more frames under the --targets directories").into(),
            );
        }
        info!("training against {} mined target sequences", dirs.len());
        source.target_dirs = dirs;
        source.target_size = Some(cfg.generator.image_size);
    }
    if source.names.is_empty() {
        return Err(anyhow!("no annotated day sequences under {}", data.join("day").display()).into());
    }
    let mut trainer = Trainer::new(cfg)?;
    let (history, artifacts) = trainer.train(&source, Some(&run.dir))?;
    if let Some(last) = history.epochs.last() {
        info!("finished {} epochs; final l_gt {:.4}", history.epochs.len(), last.l_gt);
    }
    if let Some(h) = &artifacts.history_csv {
        run.manifest.record(&run.dir, "history", h);
    }
    for c in &artifacts.checkpoints {
        run.manifest.record(&run.dir, "checkpoint", c);
    }
    Ok(())
}

fn newest_checkpoint(run: &Run) -> Option<PathBuf> {
    let mut all: Vec<PathBuf> = std::fs::read_dir(run.dir.join("checkpoints"))
        .ok()?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    all.sort();
    all.pop()
}

fn sequence_dirs(root: &Path) -> anyhow::Result<Vec<(String, PathBuf)>> {
    let seq_root = root.join("data_seq");
    let mut out = Vec::new();
    for e in std::fs::read_dir(&seq_root).with_context(|| format!("listing {}", seq_root.display()))? {
        let p = e?.path();
        if p.is_dir() {
            if let Some(n) = p.file_name().and_then(|n| n.to_str()) {
                out.push((n.to_owned(), p.clone()));
            }
        }
    }
    out.sort();
    Ok(out)
}

fn track(run: &mut Run, checkpoint: Option<PathBuf>, sequences: Option<PathBuf>, name: &str) -> Outcome {
    let ckpt_path = checkpoint
        .or_else(|| newest_checkpoint(run))
        .ok_or_else(|| usage("no checkpoint in the run; pass --checkpoint"))?;
    let ckpt = Checkpoint::load(&ckpt_path)?;
    let trainer = Trainer::from_checkpoint(&ckpt)?;
    let size = trainer.generator.config().image_size;
    let root = sequences.unwrap_or_else(|| run.dir.join("data").join("night"));
    let out = run.dir.join("results").join(name);
    std::fs::create_dir_all(&out)
        .with_context(|| format!("creating {}", out.display()))
        .map_err(CliError::from)?;
    let seqs = sequence_dirs(&root)?;
    for (seq, dir) in &seqs {
        let frames = load_frames(dir)?;
        if frames.is_empty() {
            warn!("{seq}: no frames, skipped");
            continue;
        }
        let (h, w) = (frames[0].height() as f64, frames[0].width() as f64);
        let resized: Vec<FrameTensor> = frames
            .iter()
            .map(|f| resize_frame(f, size))
            .collect::<tda::Result<_>>()?;
        let boxes = trainer.generator.track_sequence(&trainer.gen_store, &resized)?;
        let (kx, ky) = (w / size as f64, h / size as f64);
        let preds: Vec<Option<tda::bbox::BoundingBox>> = boxes
            .iter()
            .map(|b| {
                let scaled = tda::bbox::BoundingBox {
                    x: b.x * kx,
                    y: b.y * ky,
                    w: b.w * kx,
                    h: b.h * ky,
                };
                scaled.is_valid().then_some(scaled)
            })
            .collect();
        let p = out.join(format!("{seq}.txt"));
        write_predictions(&p, &preds)?;
    }
    info!("tracked {} sequences with {}", seqs.len(), ckpt_path.display());
    run.manifest.record(&run.dir, "results", &out);
    Ok(())
}

/// A directory holding `.txt` files is one tracker; otherwise each
/// subdirectory is one.
fn load_results(dir: &Path) -> anyhow::Result<Vec<tda::eval::TrackerRun>> {
    let mut subdirs = Vec::new();
    let mut has_txt = false;
    for e in std::fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let p = e?.path();
        if p.is_dir() {
            subdirs.push(p);
        } else if p.extension().is_some_and(|x| x == "txt") {
            has_txt = true;
        }
    }
    let label = |p: &Path| p.file_name().and_then(|n| n.to_str()).unwrap_or("tracker").to_owned();
    if has_txt {
        return Ok(vec![load_run(dir, &label(dir))?]);
    }
    subdirs.sort();
    subdirs.iter().map(|d| Ok(load_run(d, &label(d))?)).collect()
}

fn eval(run: &mut Run, gt: Option<PathBuf>, results: Option<PathBuf>, attribute: Option<Attribute>) -> Outcome {
    let gt = gt.unwrap_or_else(|| run.dir.join("data").join("night"));
    let results = results.unwrap_or_else(|| run.dir.join("results"));
    let annotated = load_annotated(&gt)?;
    if annotated.is_empty() {
        return Err(anyhow!("no ground truth under {}", gt.join("anno").display()).into());
    }
    let runs = load_results(&results)?;
    if runs.is_empty() {
        return Err(anyhow!("no tracker results under {}", results.display()).into());
    }
    let out = match attribute {
        Some(a) => run.dir.join(format!("metrics_{}", a.name().to_lowercase())),
        None => run.dir.join("metrics"),
    };
    let mut curves: Vec<(String, OpeCurves)> = Vec::new();
    for r in &runs {
        let c = match attribute {
            None => overall_report(r, &annotated)?,
            Some(a) => match attribute_report(r, &annotated, a)? {
                AttributeReport::Curves(c) => c,
                AttributeReport::Empty => {
                    std::fs::create_dir_all(&out)
                        .with_context(|| format!("creating {}", out.display()))
                        .map_err(CliError::from)?;
                    let marker = out.join("empty.txt");
                    std::fs::write(&marker, format!("no sequence carries attribute {}\n", a.name()))
                        .with_context(|| format!("writing {}", marker.display()))
                        .map_err(CliError::from)?;
                    warn!("no sequence carries attribute {}", a.name());
                    run.manifest.record(&run.dir, "metrics", &marker);
                    return Ok(());
                }
            },
        };
        info!(
            "{}: precision@20 {:.3} norm precision@0.2 {:.3} success AUC {:.3}",
            r.name,
            c.precision_at_20(),
            c.norm_precision_at_02(),
            c.auc
        );
        curves.push((r.name.clone(), c));
    }
    let files = emit_report(&out, &curves)?;
    for f in files.all() {
        run.manifest.record(&run.dir, "metrics", &f);
    }
    Ok(())
}

fn report(run: &mut Run, curves: Option<PathBuf>) -> Outcome {
    let path = curves.unwrap_or_else(|| run.dir.join("metrics").join("curves.csv"));
    let text = std::fs::read_to_string(&path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(CliError::from)?;
    let parsed = parse_curves_csv(&text)?;
    if parsed.is_empty() {
        return Err(anyhow!("{} holds no curves", path.display()).into());
    }
    let files = emit_report(&run.dir.join("report"), &parsed)?;
    for f in files.all() {
        run.manifest.record(&run.dir, "report", &f);
    }
    Ok(())
}
