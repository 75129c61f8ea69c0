//! Desk-scale alignment experiment: how well a linear probe separates day
//! from night contexts before and after adversarial training.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{Result, TdaError};
use crate::probe::{linear_probe, ProbeResult, ProbeSettings};
use crate::training::{EpochSummary, SourceSequence, SyntheticSource, Trainer};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentSetup {
    /// Day/night pairs generated in total.
    pub pairs: usize,
    /// Pairs used for training; the rest hold out day sequences for `L_gt`.
    pub train_pairs: usize,
    /// Seed of the synthetic data (the model seed lives in the config).
    pub data_seed: u64,
    pub probe: ProbeSettings,
}

impl Default for AlignmentSetup {
    fn default() -> Self {
        Self {
            pairs: 400,
            train_pairs: 320,
            data_seed: 2024,
            probe: ProbeSettings::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentOutcome {
    pub probe_before: ProbeResult,
    pub probe_after: ProbeResult,
    pub heldout_l_gt_before: f64,
    pub heldout_l_gt_after: f64,
    pub epochs: Vec<EpochSummary>,
}

pub fn source(cfg: &Config, setup: &AlignmentSetup) -> SyntheticSource {
    SyntheticSource {
        spec: cfg.scene.clone(),
        length: cfg.data.sequence_length,
        seed: setup.data_seed,
        pairs: (0..setup.pairs).collect(),
        batch_size: cfg.data.batch_size,
    }
}

/// Probe accuracy on pooled contexts of every day and night sequence.
pub fn probe_contexts(trainer: &Trainer, data: &SyntheticSource, settings: &ProbeSettings) -> Result<ProbeResult> {
    let rows: Vec<(Vec<f64>, Vec<f64>)> = data
        .pairs
        .par_iter()
        .map(|&p| -> Result<_> {
            let day = data.source_sequence(p)?;
            let night = data.target_sequence(p)?;
            Ok((trainer.pooled_context(&day.frames)?, trainer.pooled_context(&night)?))
        })
        .collect::<Result<_>>()?;
    let mut xs = Vec::with_capacity(2 * rows.len());
    let mut ys = Vec::with_capacity(2 * rows.len());
    for (d, n) in rows {
        xs.push(d);
        ys.push(true);
        xs.push(n);
        ys.push(false);
    }
    linear_probe(&xs, &ys, settings)
}

/// Trains a fresh model from `cfg` on the first `train_pairs` pairs and
/// probes before and after.
pub fn run_alignment(cfg: &Config, setup: &AlignmentSetup) -> Result<AlignmentOutcome> {
    if setup.train_pairs == 0 || setup.train_pairs >= setup.pairs {
        return Err(TdaError::Config("need 0 < train_pairs < pairs".into()));
    }
    let all = source(cfg, setup);
    let train = SyntheticSource {
        pairs: (0..setup.train_pairs).collect(),
        ..all.clone()
    };
    let heldout: Vec<SourceSequence> = (setup.train_pairs..setup.pairs)
        .into_par_iter()
        .map(|p| all.source_sequence(p))
        .collect::<Result<_>>()?;

    let mut trainer = Trainer::new(cfg)?;
    let probe_before = probe_contexts(&trainer, &all, &setup.probe)?;
    let heldout_l_gt_before = trainer.supervised_loss(&heldout)?;
    let (history, _) = trainer.train(&train, None)?;
    Ok(AlignmentOutcome {
        probe_before,
        probe_after: probe_contexts(&trainer, &all, &setup.probe)?,
        heldout_l_gt_before,
        heldout_l_gt_after: trainer.supervised_loss(&heldout)?,
        epochs: history.epochs,
    })
}
