use std::borrow::Cow;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bbox::BoundingBox;
use crate::config::SceneSpec;
use crate::error::{Result, TdaError};
use crate::eval::read_boxes;
use crate::generator::FrameTensor;
use crate::mining::resize_frame;
use crate::synth::{generate_pair, load_frames, pair_seed};

/// An annotated day sequence.
#[derive(Clone, Debug)]
pub struct SourceSequence {
    pub frames: Vec<FrameTensor>,
    pub boxes: Vec<BoundingBox>,
}

/// Annotated source sequences plus unannotated target sequences.
#[derive(Clone, Debug, Default)]
pub struct DomainBatch {
    pub source: Vec<SourceSequence>,
    pub target: Vec<Vec<FrameTensor>>,
}

impl DomainBatch {
    pub fn validate(&self) -> Result<()> {
        if self.source.is_empty() || self.target.is_empty() {
            return Err(TdaError::Contract("batch needs source and target sequences".into()));
        }
        for s in &self.source {
            if s.frames.len() < 3 || s.frames.len() != s.boxes.len() {
                return Err(TdaError::Contract(format!(
                    "source sequence with {} frames and {} boxes",
                    s.frames.len(),
                    s.boxes.len()
                )));
            }
        }
        if self.target.iter().any(|t| t.len() < 3) {
            return Err(TdaError::Contract("target sequences need at least 3 frames".into()));
        }
        Ok(())
    }
}

/// Batches addressed by `(epoch, index)`; may be produced lazily.
pub trait BatchSource: Sync {
    fn batches_per_epoch(&self) -> usize;
    fn batch(&self, epoch: usize, index: usize) -> Result<Cow<'_, DomainBatch>>;
}

impl BatchSource for Vec<DomainBatch> {
    fn batches_per_epoch(&self) -> usize {
        self.len()
    }

    fn batch(&self, _epoch: usize, index: usize) -> Result<Cow<'_, DomainBatch>> {
        self.get(index)
            .map(Cow::Borrowed)
            .ok_or_else(|| TdaError::Contract(format!("batch {index} out of range")))
    }
}

fn epoch_order(items: &[usize], seed: u64, epoch: usize, stream: u64) -> Vec<usize> {
    let mut order = items.to_vec();
    let s = pair_seed(seed ^ stream, epoch);
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(s));
    order
}

fn chunk(order: &[usize], batch_size: usize, index: usize) -> &[usize] {
    let start = index * batch_size;
    &order[start.min(order.len())..(start + batch_size).min(order.len())]
}

/// Generates pairs on demand. Day and night members are drawn through two
/// independent per-epoch shuffles, so a batch does not pair a day sequence
/// with its own night rendering.
#[derive(Clone, Debug)]
pub struct SyntheticSource {
    pub spec: SceneSpec,
    pub length: usize,
    pub seed: u64,
    pub pairs: Vec<usize>,
    pub batch_size: usize,
}

impl SyntheticSource {
    pub fn source_sequence(&self, pair: usize) -> Result<SourceSequence> {
        let (day, _) = generate_pair(&self.spec, self.length, pair_seed(self.seed, pair))?;
        Ok(SourceSequence {
            boxes: day.target_boxes().to_vec(),
            frames: day.frames,
        })
    }

    pub fn target_sequence(&self, pair: usize) -> Result<Vec<FrameTensor>> {
        Ok(generate_pair(&self.spec, self.length, pair_seed(self.seed, pair))?
            .1
            .frames)
    }
}

impl BatchSource for SyntheticSource {
    fn batches_per_epoch(&self) -> usize {
        self.pairs.len().div_ceil(self.batch_size.max(1))
    }

    fn batch(&self, epoch: usize, index: usize) -> Result<Cow<'_, DomainBatch>> {
        let day = epoch_order(&self.pairs, self.seed, epoch, 0x5eed_0001);
        let night = epoch_order(&self.pairs, self.seed, epoch, 0x5eed_0002);
        Ok(Cow::Owned(DomainBatch {
            source: chunk(&day, self.batch_size, index)
                .iter()
                .map(|&p| self.source_sequence(p))
                .collect::<Result<_>>()?,
            target: chunk(&night, self.batch_size, index)
                .iter()
                .map(|&p| self.target_sequence(p))
                .collect::<Result<_>>()?,
        }))
    }
}

/// Reads sequences from a synthetic dataset directory: annotated day
/// sequences under `<root>/day` and target sequences from `target_dirs`.
#[derive(Clone, Debug)]
pub struct DirectorySource {
    pub day_root: PathBuf,
    pub names: Vec<String>,
    /// Directories of target frames (one sequence per directory).
    pub target_dirs: Vec<PathBuf>,
    /// Frames per training sequence; longer sequences are cut into windows.
    pub length: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Resize target frames to this square side (mined search patches are
    /// larger than training frames).
    pub target_size: Option<usize>,
}

impl DirectorySource {
    /// Uses `<root>/night/data_seq/*` as targets.
    pub fn from_synth_dir(root: &Path, length: usize, batch_size: usize, seed: u64) -> Result<Self> {
        let names = Self::day_names(&root.join("day"))?;
        let target_dirs = names
            .iter()
            .map(|n| root.join("night").join("data_seq").join(n))
            .collect();
        Ok(Self {
            day_root: root.join("day"),
            names,
            target_dirs,
            length,
            batch_size,
            seed,
            target_size: None,
        })
    }

    /// Sequence names under `<day_root>/anno`, sorted.
    pub fn day_names(day_root: &Path) -> Result<Vec<String>> {
        let anno = day_root.join("anno");
        let mut names: Vec<String> = std::fs::read_dir(&anno)
            .map_err(|e| TdaError::io(&anno, e))?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().extension().is_some_and(|x| x == "txt"))
            .filter_map(|e| e.path().file_stem().and_then(|s| s.to_str()).map(str::to_owned))
            .collect();
        names.sort();
        Ok(names)
    }

    fn load_source(&self, i: usize) -> Result<SourceSequence> {
        let name = &self.names[i];
        let mut frames = load_frames(&self.day_root.join("data_seq").join(name))?;
        let mut boxes = read_boxes(&self.day_root.join("anno").join(format!("{name}.txt")))?;
        frames.truncate(self.length);
        boxes.truncate(self.length);
        Ok(SourceSequence { frames, boxes })
    }

    fn load_target(&self, i: usize) -> Result<Vec<FrameTensor>> {
        let mut frames = load_frames(&self.target_dirs[i])?;
        frames.truncate(self.length);
        match self.target_size {
            Some(n) => frames.iter().map(|f| resize_frame(f, n)).collect(),
            None => Ok(frames),
        }
    }
}

impl BatchSource for DirectorySource {
    fn batches_per_epoch(&self) -> usize {
        if self.target_dirs.is_empty() {
            return 0;
        }
        self.names.len().div_ceil(self.batch_size.max(1))
    }

    fn batch(&self, epoch: usize, index: usize) -> Result<Cow<'_, DomainBatch>> {
        let src: Vec<usize> = (0..self.names.len()).collect();
        let day = epoch_order(&src, self.seed, epoch, 0x5eed_0001);
        let tgt: Vec<usize> = (0..self.target_dirs.len()).collect();
        let night = epoch_order(&tgt, self.seed, epoch, 0x5eed_0002);
        let picked = chunk(&day, self.batch_size, index);
        // Reuse target sequences cyclically when there are fewer of them.
        let targets: Vec<usize> = (0..picked.len())
            .map(|k| night[(index * self.batch_size + k) % night.len()])
            .collect();
        Ok(Cow::Owned(DomainBatch {
            source: picked.iter().map(|&i| self.load_source(i)).collect::<Result<_>>()?,
            target: targets.iter().map(|&i| self.load_target(i)).collect::<Result<_>>()?,
        }))
    }
}
