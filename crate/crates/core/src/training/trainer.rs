//! The alternating min-max loop.
//!
//! Each step first updates the discriminator on `E_D` with the generator's
//! outputs held constant, then updates the generator and head on `E_G`
//! through the freshly updated (and fixed) discriminator. Generator and
//! discriminator parameters live in separate stores, so one generator
//! forward pass per sequence serves both sub-steps: the discriminator
//! graph of the second sub-step hands the gradients at its inputs back to
//! the generator graph.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::data::{BatchSource, DomainBatch, SourceSequence};
use super::losses::adv_sum;
use super::optim::Adam;
use super::schedule::poly_lr;
use crate::autodiff::{Graph, GroupSet, ParamGroup, ParamStore, Var};
use crate::checkpoint::{Checkpoint, CHECKPOINT_FORMAT};
use crate::config::{AdvOn, Config};
use crate::discriminator::{Discriminator, DomainLabel, LogitVars};
use crate::error::{Result, TdaError};
use crate::generator::{FrameTensor, Generator};
use crate::synth::pair_seed;
use crate::tensor::Tensor;

/// Losses of one step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub epoch: usize,
    pub step: usize,
    pub e_d: f64,
    pub e_g: f64,
    pub l_gt: f64,
    pub l_g_feat: f64,
    pub l_g_ctx: f64,
    pub lr_d: f64,
}

impl LossReport {
    pub const CSV_HEADER: &'static str = "epoch,step,e_d,e_g,l_gt,l_g_feat,l_g_ctx,lr_d";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.epoch, self.step, self.e_d, self.e_g, self.l_gt, self.l_g_feat, self.l_g_ctx, self.lr_d
        )
    }
}

/// Parameter checksums around the two sub-steps of a step.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpdateAudit {
    pub generator_before_d: u64,
    pub generator_after_d: u64,
    pub discriminator_before_g: u64,
    pub discriminator_after_g: u64,
    pub backbone_before: u64,
    pub backbone_after: u64,
    pub backbone_frozen: bool,
}

impl UpdateAudit {
    /// Each sub-step touched only its own parameters, and a frozen
    /// backbone stayed put.
    pub fn isolated(&self) -> bool {
        self.generator_before_d == self.generator_after_d
            && self.discriminator_before_g == self.discriminator_after_g
            && (!self.backbone_frozen || self.backbone_before == self.backbone_after)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub report: LossReport,
    pub audit: UpdateAudit,
}

/// Means of the step reports of one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub steps: usize,
    pub e_d: f64,
    pub e_g: f64,
    pub l_gt: f64,
    pub l_g_feat: f64,
    pub l_g_ctx: f64,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingHistory {
    pub steps: Vec<LossReport>,
    pub epochs: Vec<EpochSummary>,
}

impl TrainingHistory {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(LossReport::CSV_HEADER);
        s.push('\n');
        for r in &self.steps {
            writeln!(s, "{}", r.csv_row()).expect("string write");
        }
        s
    }
}

/// Files written by [`Trainer::train`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingArtifacts {
    pub history_csv: Option<PathBuf>,
    pub checkpoints: Vec<PathBuf>,
}

/// One generator pass over a sequence, kept alive for both sub-steps.
struct GenPass<'s> {
    graph: Graph<'s>,
    /// Context rows shown to the discriminator.
    contexts: Vec<Var>,
    /// Tokens of the last temporal feature.
    feature: Var,
    l_gt: Option<Var>,
    label: DomainLabel,
}

impl GenPass<'_> {
    fn inputs(&self) -> (Vec<Tensor>, Tensor) {
        (
            self.contexts.iter().map(|v| self.graph.value(*v).clone()).collect(),
            self.graph.value(self.feature).clone(),
        )
    }
}

type Grads = Vec<Option<Tensor>>;

fn accumulate(acc: &mut Grads, add: Grads) {
    if acc.len() < add.len() {
        acc.resize(add.len(), None);
    }
    for (slot, g) in acc.iter_mut().zip(add) {
        if let Some(g) = g {
            match slot {
                Some(t) => t.add_assign(&g),
                None => *slot = Some(g),
            }
        }
    }
}

fn scale_grads(grads: &mut Grads, k: f64) {
    for t in grads.iter_mut().flatten() {
        t.data_mut().iter_mut().for_each(|v| *v *= k);
    }
}

fn finite(what: &'static str, step: usize, value: f64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(TdaError::NonFinite { what, step, value })
    }
}

pub struct Trainer {
    cfg: Config,
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub gen_store: ParamStore,
    pub disc_store: ParamStore,
    gen_opt: Adam,
    disc_opt: Adam,
    epoch: usize,
    step: usize,
}

impl Trainer {
    pub fn new(cfg: &Config) -> Result<Self> {
        cfg.validate()?;
        let mut gen_store = ParamStore::new();
        let mut disc_store = ParamStore::new();
        let seed = cfg.training.seed;
        let generator = Generator::new(&cfg.generator, &mut gen_store, pair_seed(seed, 0))?;
        let discriminator = Discriminator::new(
            &cfg.discriminator,
            cfg.generator.context_width,
            cfg.generator.feature_channels,
            &mut disc_store,
            pair_seed(seed, 1),
        )?;
        Ok(Self {
            cfg: cfg.clone(),
            generator,
            discriminator,
            gen_store,
            disc_store,
            gen_opt: Adam::default(),
            disc_opt: Adam::default(),
            epoch: 0,
            step: 0,
        })
    }

    /// Rebuilds a trainer from saved parameters (optimizer state restarts).
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut t = Self::new(&ckpt.config)?;
        t.gen_store.load_values(&ckpt.generator)?;
        t.disc_store.load_values(&ckpt.discriminator)?;
        t.epoch = ckpt.epoch;
        t.step = ckpt.step;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT,
            config: self.cfg.clone(),
            epoch: self.epoch,
            step: self.step,
            generator: self.gen_store.clone(),
            discriminator: self.disc_store.clone(),
        }
    }

    pub fn config(&self) -> &Config {
        &self.cfg
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Sets the epoch that decides whether the backbone is frozen.
    pub fn set_epoch(&mut self, epoch: usize) {
        self.epoch = epoch;
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn backbone_frozen(&self) -> bool {
        self.epoch < self.cfg.training.freeze_backbone_epochs
    }

    fn generator_groups(&self) -> GroupSet {
        if self.backbone_frozen() {
            GroupSet::generator().without(ParamGroup::Backbone)
        } else {
            GroupSet::generator()
        }
    }

    /// One discriminator update followed by one generator update.
    pub fn train_step(&mut self, batch: &DomainBatch, lr_d: f64) -> Result<StepOutcome> {
        batch.validate()?;
        let step = self.step;
        let tc = self.cfg.training.clone();
        let (use_feat, use_ctx) = (tc.align_features, tc.align_contexts);
        let gen_groups = self.generator_groups();
        let backbone = GroupSet::of(&[ParamGroup::Backbone]);
        let disc_only = GroupSet::of(&[ParamGroup::Discriminator]);

        let generator_before_d = self.gen_store.checksum(GroupSet::generator());
        let backbone_before = self.gen_store.checksum(backbone);

        let Self {
            generator,
            discriminator,
            gen_store,
            disc_store,
            gen_opt,
            disc_opt,
            ..
        } = self;
        let generator = &*generator;
        let discriminator = &*discriminator;

        // Generator forward, once per sequence.
        let mut samples: Vec<(&[FrameTensor], Option<&SourceSequence>, DomainLabel)> = Vec::new();
        for s in &batch.source {
            samples.push((&s.frames, Some(s), DomainLabel::SourceDay));
        }
        for t in &batch.target {
            samples.push((t, None, DomainLabel::TargetNight));
        }
        let gen_store_ref: &ParamStore = gen_store;
        let passes: Vec<GenPass> = samples
            .par_iter()
            .map(|(frames, src, label)| -> Result<GenPass> {
                let mut g = Graph::new(gen_store_ref, gen_groups);
                let trace = generator.forward_sequence(&mut g, frames)?;
                let l_gt = match src {
                    Some(s) => Some(generator.sequence_supervised_loss(&mut g, &trace, &s.boxes)?),
                    None => None,
                };
                let n = trace.contexts.len();
                Ok(GenPass {
                    contexts: trace.contexts[..n - 1].to_vec(),
                    feature: trace.features[n - 1],
                    l_gt,
                    label: *label,
                    graph: g,
                })
            })
            .collect::<Result<_>>()?;
        let inputs: Vec<(Vec<Tensor>, Tensor)> = passes.iter().map(GenPass::inputs).collect();

        let select = |out: &LogitVars| -> Vec<Var> {
            let mut v = Vec::new();
            if use_ctx {
                v.extend(&out.contexts);
            }
            if use_feat {
                v.push(out.feature);
            }
            v
        };

        // (a) discriminator sub-step on E_D.
        let mut e_d = 0.0;
        for _ in 0..tc.d_steps {
            let disc_ref: &ParamStore = disc_store;
            let per_sample: Vec<Option<(f64, usize, Grads)>> = passes
                .par_iter()
                .zip(inputs.par_iter())
                .map(|(p, (ctx, feat))| -> Result<Option<(f64, usize, Grads)>> {
                    let mut g = Graph::new(disc_ref, disc_only);
                    let rows: Vec<Var> = ctx.iter().map(|t| g.constant(t.clone())).collect();
                    let f = g.constant(feat.clone());
                    let out = discriminator.discriminate(&mut g, &rows, f)?;
                    let chosen = select(&out);
                    let Some(sum) = adv_sum(&mut g, &chosen, p.label.target(), tc.adv_loss)? else {
                        return Ok(None);
                    };
                    let grads = g.backward(sum);
                    Ok(Some((g.value(sum).item(), chosen.len(), g.param_grads(&grads))))
                })
                .collect::<Result<_>>()?;
            let (mut total, mut count, mut grads) = (0.0, 0usize, Grads::new());
            for (v, n, gr) in per_sample.into_iter().flatten() {
                total += v;
                count += n;
                accumulate(&mut grads, gr);
            }
            if count == 0 {
                break;
            }
            e_d = finite("e_d", step, total / count as f64)?;
            scale_grads(&mut grads, 1.0 / count as f64);
            disc_opt.step(disc_store, &grads, lr_d);
        }
        let generator_after_d = gen_store_ref.checksum(GroupSet::generator());

        // (b) generator sub-step on E_G through the fixed discriminator.
        let discriminator_before_g = disc_store.checksum(GroupSet::all());
        let w = tc.loss_weights;
        let adversarial = |label: DomainLabel| match tc.adv_on {
            AdvOn::Both => true,
            AdvOn::Target => label == DomainLabel::TargetNight,
        };
        let n_source = batch.source.len() as f64;
        let n_adv = passes.iter().filter(|p| adversarial(p.label)).count();
        let n_ctx: usize = passes
            .iter()
            .filter(|p| adversarial(p.label))
            .map(|p| discriminator.context_logit_count(p.contexts.len()))
            .sum();
        let k_feat = if use_feat && n_adv > 0 { 1.0 / n_adv as f64 } else { 0.0 };
        let k_ctx = if use_ctx && n_ctx > 0 { 1.0 / n_ctx as f64 } else { 0.0 };
        let disc_ref: &ParamStore = disc_store;

        let per_sample: Vec<(f64, f64, f64, Grads)> = passes
            .par_iter()
            .zip(inputs.par_iter())
            .map(|(p, (ctx, feat))| -> Result<(f64, f64, f64, Grads)> {
                let mut seeds: Vec<(Var, Tensor)> = Vec::new();
                let (mut feat_loss, mut ctx_loss) = (0.0, 0.0);
                if adversarial(p.label) && (k_feat > 0.0 || k_ctx > 0.0) {
                    let mut g = Graph::new(disc_ref, GroupSet::NONE);
                    let rows: Vec<Var> = ctx.iter().map(|t| g.variable(t.clone())).collect();
                    let f = g.variable(feat.clone());
                    let out = discriminator.discriminate(&mut g, &rows, f)?;
                    let t = p.label.flipped().target();
                    let mut parts = Vec::new();
                    if k_feat > 0.0 {
                        let s = adv_sum(&mut g, &[out.feature], t, tc.adv_loss)?.expect("one logit");
                        feat_loss = g.value(s).item();
                        parts.push(g.scale(s, w.w_feat * k_feat));
                    }
                    if k_ctx > 0.0 {
                        if let Some(s) = adv_sum(&mut g, &out.contexts, t, tc.adv_loss)? {
                            ctx_loss = g.value(s).item();
                            parts.push(g.scale(s, w.w_ctx * k_ctx));
                        }
                    }
                    if !parts.is_empty() {
                        let mut loss = parts[0];
                        for q in &parts[1..] {
                            loss = g.add(loss, *q)?;
                        }
                        let grads = g.backward(loss);
                        for (gv, dv) in p.contexts.iter().zip(&rows) {
                            if let Some(t) = grads.wrt(*dv) {
                                seeds.push((*gv, t.clone()));
                            }
                        }
                        if let Some(t) = grads.wrt(f) {
                            let tokens = p.feature;
                            seeds.push((tokens, t.clone()));
                        }
                    }
                }
                let mut l_gt = 0.0;
                if let Some(v) = p.l_gt {
                    l_gt = p.graph.value(v).item();
                    seeds.push((v, Tensor::full(p.graph.shape(v), w.w_gt / n_source)));
                }
                let grads = p.graph.backward_seeded(&seeds)?;
                Ok((l_gt, feat_loss, ctx_loss, p.graph.param_grads(&grads)))
            })
            .collect::<Result<_>>()?;

        let (mut l_gt, mut feat, mut ctx, mut grads) = (0.0, 0.0, 0.0, Grads::new());
        for (a, b, c, gr) in per_sample {
            l_gt += a;
            feat += b;
            ctx += c;
            accumulate(&mut grads, gr);
        }
        let l_gt = finite("l_gt", step, l_gt / n_source)?;
        let l_g_feat = finite("l_g_feat", step, feat * k_feat)?;
        let l_g_ctx = finite("l_g_ctx", step, ctx * k_ctx)?;
        let e_g = finite("e_g", step, w.w_gt * l_gt + w.w_feat * l_g_feat + w.w_ctx * l_g_ctx)?;
        drop(passes);
        gen_opt.step(gen_store, &grads, tc.gen_base_lr);

        let discriminator_after_g = disc_store.checksum(GroupSet::all());
        let audit = UpdateAudit {
            generator_before_d,
            generator_after_d,
            discriminator_before_g,
            discriminator_after_g,
            backbone_before,
            backbone_after: gen_store.checksum(backbone),
            backbone_frozen: !gen_groups.contains(ParamGroup::Backbone),
        };
        let report = LossReport {
            epoch: self.epoch,
            step,
            e_d,
            e_g,
            l_gt,
            l_g_feat,
            l_g_ctx,
            lr_d,
        };
        self.step += 1;
        Ok(StepOutcome { report, audit })
    }

    /// Runs every epoch over `data`, applying the poly schedule to the
    /// discriminator. With `out`, writes `history.csv` and one checkpoint
    /// per epoch under `out/checkpoints`.
    pub fn train(
        &mut self,
        data: &dyn BatchSource,
        out: Option<&Path>,
    ) -> Result<(TrainingHistory, TrainingArtifacts)> {
        let tc = self.cfg.training.clone();
        let per_epoch = data.batches_per_epoch();
        let total = tc.epochs * per_epoch;
        let mut history = TrainingHistory::default();
        let mut artifacts = TrainingArtifacts::default();
        let history_path = out.map(|o| o.join("history.csv"));
        if let Some(o) = out {
            std::fs::create_dir_all(o.join("checkpoints")).map_err(|e| TdaError::io(o, e))?;
        }
        let write_history = |h: &TrainingHistory| -> Result<()> {
            if let Some(p) = &history_path {
                std::fs::write(p, h.to_csv()).map_err(|e| TdaError::io(p, e))?;
            }
            Ok(())
        };
        if total == 0 {
            write_history(&history)?;
            artifacts.history_csv = history_path;
            return Ok((history, artifacts));
        }
        for epoch in 0..tc.epochs {
            self.epoch = epoch;
            let first = history.steps.len();
            for b in 0..per_epoch {
                let lr_d = poly_lr(self.step.min(total), total, tc.disc_base_lr, tc.lr_power)?;
                let batch = data.batch(epoch, b)?;
                let outcome = self.train_step(&batch, lr_d)?;
                history.steps.push(outcome.report);
            }
            let rows = &history.steps[first..];
            let mean = |f: fn(&LossReport) -> f64| rows.iter().map(f).sum::<f64>() / rows.len() as f64;
            self.epoch = epoch + 1;
            let checkpoint = match out {
                Some(o) => {
                    let p = o.join("checkpoints").join(format!("epoch_{:03}.json", epoch + 1));
                    self.checkpoint().save(&p)?;
                    artifacts.checkpoints.push(p.clone());
                    Some(p)
                }
                None => None,
            };
            let summary = EpochSummary {
                epoch,
                steps: rows.len(),
                e_d: mean(|r| r.e_d),
                e_g: mean(|r| r.e_g),
                l_gt: mean(|r| r.l_gt),
                l_g_feat: mean(|r| r.l_g_feat),
                l_g_ctx: mean(|r| r.l_g_ctx),
                checkpoint,
            };
            log::info!(
                "epoch {} e_d {:.4} e_g {:.4} l_gt {:.4} l_g_feat {:.4} l_g_ctx {:.4}",
                epoch + 1,
                summary.e_d,
                summary.e_g,
                summary.l_gt,
                summary.l_g_feat,
                summary.l_g_ctx
            );
            history.epochs.push(summary);
            write_history(&history)?;
        }
        artifacts.history_csv = history_path;
        Ok((history, artifacts))
    }

    /// Mean of the context rows the generator produces for a sequence.
    pub fn pooled_context(&self, frames: &[FrameTensor]) -> Result<Vec<f64>> {
        let (_, memory) = self.generator.generate_sequence(&self.gen_store, frames)?;
        Ok(memory.pooled())
    }

    /// Mean `L_gt` over annotated sequences, without updating anything.
    pub fn supervised_loss(&self, sequences: &[SourceSequence]) -> Result<f64> {
        if sequences.is_empty() {
            return Err(TdaError::Contract("no sequences to score".into()));
        }
        let losses: Vec<f64> = sequences
            .par_iter()
            .map(|s| -> Result<f64> {
                let mut g = Graph::new(&self.gen_store, GroupSet::NONE);
                let trace = self.generator.forward_sequence(&mut g, &s.frames)?;
                let l = self.generator.sequence_supervised_loss(&mut g, &trace, &s.boxes)?;
                Ok(g.value(l).item())
            })
            .collect::<Result<_>>()?;
        Ok(losses.iter().sum::<f64>() / losses.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{DiscriminatorKind, SceneSpec};
    use crate::training::data::SyntheticSource;

    fn tiny_config() -> Config {
        let mut cfg = Config::default();
        cfg.generator.image_size = 16;
        cfg.generator.grid_size = 2;
        cfg.generator.context_width = 8;
        cfg.generator.feature_channels = 8;
        cfg.generator.attention_heads = 2;
        cfg.discriminator.heads = 2;
        cfg.discriminator.token_expansion = 2;
        cfg.scene = SceneSpec {
            width: 16,
            height: 16,
            min_objects: 1,
            max_objects: 1,
            min_object_size: 4.0,
            max_object_size: 6.0,
            max_speed: 1.0,
            ..Default::default()
        };
        cfg.training.epochs = 2;
        cfg.training.freeze_backbone_epochs = 1;
        cfg.data.sequence_length = 4;
        cfg.data.batch_size = 2;
        cfg
    }

    fn tiny_source(cfg: &Config, pairs: usize) -> SyntheticSource {
        SyntheticSource {
            spec: cfg.scene.clone(),
            length: cfg.data.sequence_length,
            seed: 3,
            pairs: (0..pairs).collect(),
            batch_size: cfg.data.batch_size,
        }
    }

    /// The generator gradient assembled across the generator graph and the
    /// discriminator graph, against finite differences of the composed loss.
    #[test]
    fn generator_objective_gradient_through_discriminator() {
        let cfg = tiny_config();
        let t = Trainer::new(&cfg).unwrap();
        let batch = tiny_source(&cfg, 2).batch(0, 0).unwrap().into_owned();
        let seq = &batch.target[0];
        let kind = cfg.training.adv_loss;
        let adv = |g: &mut Graph, out: &LogitVars| -> Result<Var> {
            let s1 = adv_sum(g, &[out.feature], 1.0, kind)?.expect("one");
            let s2 = adv_sum(g, &out.contexts, 1.0, kind)?.expect("some");
            let a = g.scale(s1, 0.1);
            let b = g.scale(s2, 0.1 / out.contexts.len() as f64);
            g.add(a, b)
        };
        let objective = |store: &ParamStore| -> f64 {
            let mut g1 = Graph::new(store, GroupSet::NONE);
            let trace = t.generator.forward_sequence(&mut g1, seq).unwrap();
            let n = trace.contexts.len();
            let mut g2 = Graph::new(&t.disc_store, GroupSet::NONE);
            let rows: Vec<Var> = trace.contexts[..n - 1]
                .iter()
                .map(|v| g2.constant(g1.value(*v).clone()))
                .collect();
            let f = g2.constant(g1.value(trace.features[n - 1]).clone());
            let out = t.discriminator.discriminate(&mut g2, &rows, f).unwrap();
            let l = adv(&mut g2, &out).unwrap();
            g2.value(l).item()
        };

        let mut g1 = Graph::new(&t.gen_store, GroupSet::generator());
        let trace = t.generator.forward_sequence(&mut g1, seq).unwrap();
        let n = trace.contexts.len();
        let mut g2 = Graph::new(&t.disc_store, GroupSet::NONE);
        let rows: Vec<Var> = trace.contexts[..n - 1]
            .iter()
            .map(|v| g2.variable(g1.value(*v).clone()))
            .collect();
        let f = g2.variable(g1.value(trace.features[n - 1]).clone());
        let out = t.discriminator.discriminate(&mut g2, &rows, f).unwrap();
        let l = adv(&mut g2, &out).unwrap();
        let up = g2.backward(l);
        let mut seeds: Vec<(Var, Tensor)> = trace.contexts[..n - 1]
            .iter()
            .zip(&rows)
            .map(|(gv, dv)| (*gv, up.wrt(*dv).unwrap().clone()))
            .collect();
        seeds.push((trace.features[n - 1], up.wrt(f).unwrap().clone()));
        let analytic = g1.param_grads(&g1.backward_seeded(&seeds).unwrap());

        let mut work = t.gen_store.clone();
        let h = 1e-5;
        for id in t.gen_store.ids() {
            let len = t.gen_store.get(id).len();
            let a = analytic[id.index()]
                .as_ref()
                .map_or(vec![0.0; len], |x| x.data().to_vec());
            let mut num = Vec::with_capacity(len);
            for i in 0..len {
                let orig = t.gen_store.get(id).data()[i];
                work.get_mut(id).data_mut()[i] = orig + h;
                let up = objective(&work);
                work.get_mut(id).data_mut()[i] = orig - h;
                let down = objective(&work);
                work.get_mut(id).data_mut()[i] = orig;
                num.push((up - down) / (2.0 * h));
            }
            let err = crate::gradcheck::relative_error(&a, &num);
            assert!(err < 1e-4, "{}: {err}", t.gen_store.block(id).name);
        }
    }

    #[test]
    fn zero_learning_rates_leave_parameters_bitwise_unchanged() {
        let mut cfg = tiny_config();
        cfg.training.gen_base_lr = 0.0;
        cfg.training.freeze_backbone_epochs = 0;
        let mut t = Trainer::new(&cfg).unwrap();
        let (g0, d0) = (t.gen_store.clone(), t.disc_store.clone());
        let batch = tiny_source(&cfg, 2).batch(0, 0).unwrap().into_owned();
        t.train_step(&batch, 0.0).unwrap();
        assert_eq!(t.gen_store, g0);
        assert_eq!(t.disc_store, d0);
    }

    #[test]
    fn sub_steps_touch_only_their_parameters() {
        for kind in [DiscriminatorKind::Tcd, DiscriminatorKind::Pd] {
            let mut cfg = tiny_config();
            cfg.discriminator.kind = kind;
            let mut t = Trainer::new(&cfg).unwrap();
            let src = tiny_source(&cfg, 4);
            let d0 = t.disc_store.checksum(GroupSet::all());
            let out = t.train_step(&src.batch(0, 0).unwrap(), 0.005).unwrap();
            assert!(out.audit.isolated(), "{:?}", out.audit);
            assert!(out.audit.backbone_frozen);
            assert_ne!(d0, out.audit.discriminator_before_g);
            assert_ne!(out.audit.generator_after_d, t.gen_store.checksum(GroupSet::generator()));
            t.set_epoch(1);
            let out = t.train_step(&src.batch(0, 1).unwrap(), 0.005).unwrap();
            assert!(!out.audit.backbone_frozen);
            assert_ne!(out.audit.backbone_before, out.audit.backbone_after);
        }
    }

    #[test]
    fn empty_data_changes_nothing() {
        let cfg = tiny_config();
        let mut t = Trainer::new(&cfg).unwrap();
        let before = t.gen_store.clone();
        let dir = tempfile::tempdir().unwrap();
        let (h, a) = t.train(&Vec::<DomainBatch>::new(), Some(dir.path())).unwrap();
        assert!(h.steps.is_empty());
        assert_eq!(t.gen_store, before);
        let csv = std::fs::read_to_string(a.history_csv.unwrap()).unwrap();
        assert_eq!(csv, format!("{}\n", LossReport::CSV_HEADER));
    }

    #[test]
    fn fixed_seed_runs_have_identical_history() {
        let cfg = tiny_config();
        let run = || {
            let mut t = Trainer::new(&cfg).unwrap();
            t.train(&tiny_source(&cfg, 4), None).unwrap().0.to_csv()
        };
        let a = run();
        assert_eq!(a, run());
        assert_eq!(a.lines().count(), 1 + 2 * 2);
    }

    #[test]
    fn checkpoint_round_trip_restores_parameters() {
        let cfg = tiny_config();
        let mut t = Trainer::new(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (_, art) = t.train(&tiny_source(&cfg, 2), Some(dir.path())).unwrap();
        assert_eq!(art.checkpoints.len(), 2);
        let back = Trainer::from_checkpoint(&Checkpoint::load(&art.checkpoints[1]).unwrap()).unwrap();
        assert_eq!(back.gen_store, t.gen_store);
        assert_eq!(back.disc_store, t.disc_store);
    }
}
