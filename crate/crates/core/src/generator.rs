//! Temporal feature generator and tracker head.
//!
//! Per frame, a three-stage strided convolutional encoder produces a
//! `(C_f, g, g)` map. Its `g*g` tokens attend over the rows of the
//! temporal context memory (one row per earlier frame) and the attention
//! output is added back residually; with an empty memory the map passes
//! through unchanged. The result is the temporal feature of the frame. Its
//! global average, projected to the context width, becomes the next memory
//! row.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, GroupSet, ParamGroup, ParamStore, Var};
use crate::bbox::BoundingBox;
use crate::config::GeneratorConfig;
use crate::error::{Result, TdaError};
use crate::nn::{Conv2d, Linear, MultiHeadAttention, LN_EPS};
use crate::tensor::Tensor;

/// One RGB frame with values in `[0, 1]`, stored channel-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameTensor {
    pixels: Tensor,
    pub frame_index: usize,
}

impl FrameTensor {
    pub fn new(pixels: Tensor, frame_index: usize) -> Result<Self> {
        let s = pixels.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(TdaError::Shape(format!("frame must be (3, H, W), got {s:?}")));
        }
        if s[1] < 16 || s[2] < 16 {
            return Err(TdaError::Shape(format!("frame {s:?} smaller than 16x16")));
        }
        if !pixels.data().iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)) {
            return Err(TdaError::Contract("frame values must be finite and in [0, 1]".into()));
        }
        Ok(Self { pixels, frame_index })
    }

    pub fn pixels(&self) -> &Tensor {
        &self.pixels
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[2]
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.pixels.data()[(c * self.height() + y) * self.width() + x]
    }

    pub fn channel_means(&self) -> [f64; 3] {
        let n = self.height() * self.width();
        let d = self.pixels.data();
        [0, 1, 2].map(|c| d[c * n..(c + 1) * n].iter().sum::<f64>() / n as f64)
    }
}

/// The accumulated context rows `M`, one per processed frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemporalContextMemory {
    rows: Vec<Vec<f64>>,
    width: usize,
    pub normalized: bool,
}

impl TemporalContextMemory {
    pub fn width(&self) -> usize {
        self.width
    }

    /// `(t - 1, C)`.
    pub fn shape(&self) -> (usize, usize) {
        (self.rows.len(), self.width)
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    fn with_row(&self, row: Vec<f64>) -> Self {
        let mut rows = self.rows.clone();
        rows.push(row);
        Self {
            rows,
            width: self.width,
            normalized: self.normalized,
        }
    }

    /// Mean over rows: the pooled context vector of a sequence.
    pub fn pooled(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.width];
        for r in &self.rows {
            for (o, v) in out.iter_mut().zip(r) {
                *o += v;
            }
        }
        let n = self.rows.len().max(1) as f64;
        out.iter_mut().for_each(|v| *v /= n);
        out
    }
}

pub fn init_memory(context_width: usize) -> Result<TemporalContextMemory> {
    if context_width == 0 {
        return Err(TdaError::Config("context width must be positive".into()));
    }
    Ok(TemporalContextMemory {
        rows: Vec::new(),
        width: context_width,
        normalized: false,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemporalFeature {
    /// `(C_f, g, g)`.
    pub values: Tensor,
    pub frame_index: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackerOutput {
    /// `(g, g)` logits.
    pub classification_map: Tensor,
    /// `(4, g, g)`: center offsets and log-sizes in grid-stride units.
    pub regression_map: Tensor,
}

/// Graph handles for one generator step.
#[derive(Copy, Clone, Debug)]
pub struct StepVars {
    /// `(g*g, C_f)` tokens of the temporal feature.
    pub tokens: Var,
    /// `(1, C)` new memory row.
    pub context: Var,
}

/// Graph handles for a whole sequence.
#[derive(Clone, Debug, Default)]
pub struct SequenceTrace {
    pub features: Vec<Var>,
    pub contexts: Vec<Var>,
}

/// Training targets of the tracker head for one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadTargets {
    pub labels: Vec<f64>,
    pub regression: Vec<f64>,
    pub mask: Vec<bool>,
}

#[derive(Clone, Debug)]
pub struct Generator {
    cfg: GeneratorConfig,
    encoder: [Conv2d; 3],
    temporal: MultiHeadAttention,
    summarizer: Linear,
    cls: Linear,
    reg: Linear,
}

impl Generator {
    pub fn new(cfg: &GeneratorConfig, store: &mut ParamStore, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [c1, c2, cf] = cfg.encoder_channels();
        let bb = ParamGroup::Backbone;
        let encoder = [
            Conv2d::new(store, "gen.enc1", bb, 3, c1, 3, 2, 1, &mut rng),
            Conv2d::new(store, "gen.enc2", bb, c1, c2, 3, 2, 1, &mut rng),
            Conv2d::new(store, "gen.enc3", bb, c2, cf, 3, 2, 1, &mut rng),
        ];
        let tp = ParamGroup::Temporal;
        let temporal = MultiHeadAttention::new(
            store,
            "gen.temporal",
            tp,
            cf,
            cfg.context_width,
            cf,
            cfg.attention_heads,
            &mut rng,
        )?;
        let summarizer = Linear::new(store, "gen.summary", tp, cf, cfg.context_width, true, &mut rng);
        let hd = ParamGroup::Head;
        let cls = Linear::new(store, "head.cls", hd, cf, 1, true, &mut rng);
        let reg = Linear::new(store, "head.reg", hd, cf, 4, true, &mut rng);
        Ok(Self {
            cfg: cfg.clone(),
            encoder,
            temporal,
            summarizer,
            cls,
            reg,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    pub fn grid(&self) -> usize {
        self.cfg.grid_size
    }

    /// Pixels per feature cell.
    pub fn stride(&self) -> f64 {
        self.cfg.image_size as f64 / self.cfg.grid_size as f64
    }

    fn check_frame(&self, frame: &FrameTensor) -> Result<()> {
        let n = self.cfg.image_size;
        if frame.height() != n || frame.width() != n {
            return Err(TdaError::Shape(format!(
                "frame {}x{} does not match generator size {n}x{n}",
                frame.height(),
                frame.width()
            )));
        }
        Ok(())
    }

    /// Encoder output as `(g*g, C_f)` tokens.
    fn encode(&self, g: &mut Graph, frame: &FrameTensor) -> Result<Var> {
        self.check_frame(frame)?;
        let mut x = g.constant(frame.pixels().clone());
        for (i, conv) in self.encoder.iter().enumerate() {
            x = conv.forward(g, x)?;
            if i + 1 < self.encoder.len() {
                x = g.relu(x);
            }
        }
        let cf = self.cfg.feature_channels;
        let cells = self.grid() * self.grid();
        let flat = g.reshape(x, &[cf, cells])?;
        g.transpose(flat)
    }

    /// One application of `F_t = phi(I_t, M)` on the graph.
    pub fn step(&self, g: &mut Graph, frame: &FrameTensor, memory: &[Var]) -> Result<StepVars> {
        let enc = self.encode(g, frame)?;
        let tokens = if memory.is_empty() {
            enc
        } else {
            let m = g.concat_rows(memory)?;
            let attended = self.temporal.forward(g, enc, m)?;
            g.add(enc, attended)?
        };
        let pooled = g.mean_rows(tokens)?;
        let mut context = self.summarizer.forward(g, pooled)?;
        if self.cfg.normalize_context {
            context = g.layer_norm_rows(context, LN_EPS)?;
        }
        Ok(StepVars { tokens, context })
    }

    /// Runs every frame in order, appending each context row to the memory.
    pub fn forward_sequence(&self, g: &mut Graph, frames: &[FrameTensor]) -> Result<SequenceTrace> {
        let mut trace = SequenceTrace::default();
        for frame in frames {
            let s = self.step(g, frame, &trace.contexts)?;
            trace.features.push(s.tokens);
            trace.contexts.push(s.context);
        }
        Ok(trace)
    }

    /// Classification logits `(g*g, 1)` and regression `(g*g, 4)`.
    pub fn head(&self, g: &mut Graph, tokens: Var) -> Result<(Var, Var)> {
        let cells = self.grid() * self.grid();
        if g.shape(tokens) != [cells, self.cfg.feature_channels] {
            return Err(TdaError::Shape(format!(
                "head expects ({cells}, {}) tokens, got {:?}",
                self.cfg.feature_channels,
                g.shape(tokens)
            )));
        }
        Ok((self.cls.forward(g, tokens)?, self.reg.forward(g, tokens)?))
    }

    /// Gaussian label map and regression targets for a ground-truth box.
    pub fn head_targets(&self, target: &BoundingBox) -> HeadTargets {
        let n = self.grid();
        let s = self.stride();
        let (cx, cy) = target.center();
        let sigma = s;
        let mut labels = Vec::with_capacity(n * n);
        let mut regression = Vec::with_capacity(n * n * 4);
        let mut mask = Vec::with_capacity(n * n * 4);
        for i in 0..n {
            for j in 0..n {
                let (gx, gy) = ((j as f64 + 0.5) * s, (i as f64 + 0.5) * s);
                let d2 = (cx - gx).powi(2) + (cy - gy).powi(2);
                let label = (-d2 / (2.0 * sigma * sigma)).exp();
                labels.push(label);
                regression.extend_from_slice(&[(cx - gx) / s, (cy - gy) / s, (target.w / s).ln(), (target.h / s).ln()]);
                mask.extend_from_slice(&[label >= 0.5; 4]);
            }
        }
        HeadTargets {
            labels,
            regression,
            mask,
        }
    }

    /// `L_gt` for one frame: BCE on the label map plus smooth-L1 on the
    /// regression at positive cells.
    pub fn supervised_loss(&self, g: &mut Graph, tokens: Var, target: &BoundingBox) -> Result<Var> {
        let (cls, reg) = self.head(g, tokens)?;
        let t = self.head_targets(target);
        let l_cls = g.bce_with_logits(cls, &t.labels)?;
        let l_reg = g.smooth_l1_masked(reg, &t.regression, &t.mask)?;
        g.add(l_cls, l_reg)
    }

    /// Mean per-frame `L_gt` over a supervised sequence.
    pub fn sequence_supervised_loss(&self, g: &mut Graph, trace: &SequenceTrace, boxes: &[BoundingBox]) -> Result<Var> {
        if boxes.len() != trace.features.len() || boxes.is_empty() {
            return Err(TdaError::Contract(format!(
                "{} supervision boxes for {} frames",
                boxes.len(),
                trace.features.len()
            )));
        }
        let mut total: Option<Var> = None;
        for (tokens, b) in trace.features.iter().zip(boxes) {
            let l = self.supervised_loss(g, *tokens, b)?;
            total = Some(match total {
                Some(t) => g.add(t, l)?,
                None => l,
            });
        }
        Ok(g.scale(total.expect("non-empty"), 1.0 / boxes.len() as f64))
    }

    pub fn generate(
        &self,
        store: &ParamStore,
        frame: &FrameTensor,
        memory: &TemporalContextMemory,
    ) -> Result<(TemporalFeature, TemporalContextMemory)> {
        if memory.width() != self.cfg.context_width {
            return Err(TdaError::Shape(format!(
                "memory width {} does not match context width {}",
                memory.width(),
                self.cfg.context_width
            )));
        }
        let mut g = Graph::new(store, GroupSet::NONE);
        let rows: Vec<Var> = memory
            .rows()
            .iter()
            .map(|r| g.constant(Tensor::row(r.clone())))
            .collect();
        let s = self.step(&mut g, frame, &rows)?;
        let feature = self.tokens_to_feature(g.value(s.tokens), frame.frame_index);
        let mut next = memory.with_row(g.value(s.context).data().to_vec());
        next.normalized = self.cfg.normalize_context;
        Ok((feature, next))
    }

    /// Runs a whole sequence and returns per-frame features and the memory.
    pub fn generate_sequence(
        &self,
        store: &ParamStore,
        frames: &[FrameTensor],
    ) -> Result<(Vec<TemporalFeature>, TemporalContextMemory)> {
        let mut g = Graph::new(store, GroupSet::NONE);
        let trace = self.forward_sequence(&mut g, frames)?;
        let features = trace
            .features
            .iter()
            .zip(frames)
            .map(|(v, f)| self.tokens_to_feature(g.value(*v), f.frame_index))
            .collect();
        let mut memory = init_memory(self.cfg.context_width)?;
        for c in &trace.contexts {
            memory = memory.with_row(g.value(*c).data().to_vec());
        }
        memory.normalized = self.cfg.normalize_context;
        Ok((features, memory))
    }

    fn tokens_to_feature(&self, tokens: &Tensor, frame_index: usize) -> TemporalFeature {
        let n = self.grid();
        let values = tokens
            .transpose2()
            .reshaped(&[self.cfg.feature_channels, n, n])
            .expect("token count matches grid");
        TemporalFeature { values, frame_index }
    }

    fn feature_tokens(&self, feature: &TemporalFeature) -> Result<Tensor> {
        let n = self.grid();
        let cf = self.cfg.feature_channels;
        if feature.values.shape() != [cf, n, n] {
            return Err(TdaError::Shape(format!(
                "feature {:?} does not match ({cf}, {n}, {n})",
                feature.values.shape()
            )));
        }
        Ok(feature.values.clone().reshaped(&[cf, n * n])?.transpose2())
    }

    pub fn track_head(&self, store: &ParamStore, feature: &TemporalFeature) -> Result<TrackerOutput> {
        let n = self.grid();
        let mut g = Graph::new(store, GroupSet::NONE);
        let tokens = g.constant(self.feature_tokens(feature)?);
        let (cls, reg) = self.head(&mut g, tokens)?;
        Ok(TrackerOutput {
            classification_map: g.value(cls).clone().reshaped(&[n, n])?,
            regression_map: g.value(reg).transpose2().reshaped(&[4, n, n])?,
        })
    }

    /// Box at the highest-scoring cell, refined by its regression.
    pub fn decode(&self, out: &TrackerOutput) -> BoundingBox {
        let n = self.grid();
        let s = self.stride();
        let cls = out.classification_map.data();
        let best = (0..cls.len()).max_by(|a, b| cls[*a].total_cmp(&cls[*b])).unwrap_or(0);
        let (i, j) = (best / n, best % n);
        let r = |k: usize| out.regression_map.data()[k * n * n + best];
        let cx = (j as f64 + 0.5 + r(0)) * s;
        let cy = (i as f64 + 0.5 + r(1)) * s;
        let w = r(2).clamp(-6.0, 6.0).exp() * s;
        let h = r(3).clamp(-6.0, 6.0).exp() * s;
        BoundingBox {
            x: cx - w / 2.0,
            y: cy - h / 2.0,
            w,
            h,
        }
    }

    /// Decoded box of every frame of a sequence.
    pub fn track_sequence(&self, store: &ParamStore, frames: &[FrameTensor]) -> Result<Vec<BoundingBox>> {
        let (features, _) = self.generate_sequence(store, frames)?;
        features
            .iter()
            .map(|f| Ok(self.decode(&self.track_head(store, f)?)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_param_gradients, worst};

    pub(crate) fn micro_cfg() -> GeneratorConfig {
        GeneratorConfig {
            image_size: 16,
            context_width: 4,
            feature_channels: 4,
            grid_size: 2,
            attention_heads: 2,
            normalize_context: true,
        }
    }

    fn frame(seed: u64, size: usize, idx: usize) -> FrameTensor {
        let len = 3 * size * size;
        let data = (0..len)
            .map(|i| 0.5 + 0.5 * ((i as f64 * 0.37 + seed as f64 * 2.1).sin()))
            .collect();
        FrameTensor::new(Tensor::from_vec(&[3, size, size], data).unwrap(), idx).unwrap()
    }

    #[test]
    fn init_memory_shapes() {
        assert_eq!(init_memory(64).unwrap().shape(), (0, 64));
        assert_eq!(init_memory(8).unwrap().shape(), (0, 8));
        assert!(matches!(init_memory(0), Err(TdaError::Config(_))));
    }

    #[test]
    fn memory_grows_one_row_per_frame() {
        let mut store = ParamStore::new();
        let cfg = micro_cfg();
        let gen = Generator::new(&cfg, &mut store, 1).unwrap();
        let mut mem = init_memory(cfg.context_width).unwrap();
        for t in 0..5 {
            let (feat, next) = gen.generate(&store, &frame(t, 16, t as usize), &mem).unwrap();
            assert_eq!(next.shape(), (t as usize + 1, cfg.context_width));
            assert_eq!(feat.values.shape(), &[4, 2, 2]);
            assert!(next.normalized);
            mem = next;
        }
        assert_eq!(mem.len(), 5);
    }

    #[test]
    fn shape_mismatches_are_errors() {
        let mut store = ParamStore::new();
        let gen = Generator::new(&micro_cfg(), &mut store, 1).unwrap();
        let mem = init_memory(4).unwrap();
        assert!(matches!(
            gen.generate(&store, &frame(0, 32, 0), &mem),
            Err(TdaError::Shape(_))
        ));
        let wrong = init_memory(5).unwrap();
        assert!(matches!(
            gen.generate(&store, &frame(0, 16, 0), &wrong),
            Err(TdaError::Shape(_))
        ));
        let bad = TemporalFeature {
            values: Tensor::zeros(&[4, 3, 3]),
            frame_index: 0,
        };
        assert!(gen.track_head(&store, &bad).is_err());
    }

    #[test]
    fn sequence_and_stepwise_generation_agree() {
        let mut store = ParamStore::new();
        let gen = Generator::new(&micro_cfg(), &mut store, 9).unwrap();
        let frames: Vec<_> = (0..4).map(|t| frame(t, 16, t as usize)).collect();
        let (feats, mem) = gen.generate_sequence(&store, &frames).unwrap();
        let mut m = init_memory(4).unwrap();
        for (f, expect) in frames.iter().zip(&feats) {
            let (got, next) = gen.generate(&store, f, &m).unwrap();
            assert_eq!(&got, expect);
            m = next;
        }
        assert_eq!(m, mem);
    }

    #[test]
    fn head_on_zero_feature_is_finite_with_contract_shapes() {
        let mut store = ParamStore::new();
        let gen = Generator::new(&GeneratorConfig::default(), &mut store, 0).unwrap();
        let zero = TemporalFeature {
            values: Tensor::zeros(&[64, 8, 8]),
            frame_index: 0,
        };
        let out = gen.track_head(&store, &zero).unwrap();
        assert_eq!(out.classification_map.shape(), &[8, 8]);
        assert_eq!(out.regression_map.shape(), &[4, 8, 8]);
        assert!(out.classification_map.is_finite() && out.regression_map.is_finite());
    }

    #[test]
    fn head_targets_have_a_positive_cell() {
        let mut store = ParamStore::new();
        let gen = Generator::new(&GeneratorConfig::default(), &mut store, 0).unwrap();
        for (cx, cy) in [(32.0, 32.0), (3.0, 60.0), (16.0, 16.0)] {
            let t = gen.head_targets(&BoundingBox::from_center(cx, cy, 10.0, 12.0).unwrap());
            assert!(t.mask.iter().any(|m| *m));
            assert!(t.labels.iter().all(|l| (0.0..=1.0).contains(l)));
        }
    }

    #[test]
    fn decode_inverts_exact_targets() {
        let mut store = ParamStore::new();
        let gen = Generator::new(&GeneratorConfig::default(), &mut store, 0).unwrap();
        let target = BoundingBox::from_center(27.0, 41.0, 10.0, 14.0).unwrap();
        let t = gen.head_targets(&target);
        let out = TrackerOutput {
            classification_map: Tensor::from_vec(&[8, 8], t.labels.clone()).unwrap(),
            regression_map: Tensor::from_vec(&[64, 4], t.regression.clone())
                .unwrap()
                .transpose2()
                .reshaped(&[4, 8, 8])
                .unwrap(),
        };
        let got = gen.decode(&out);
        assert!(crate::bbox::cle(&got, &target) < 1e-9);
        assert!((got.w - 10.0).abs() < 1e-9 && (got.h - 14.0).abs() < 1e-9);
    }

    #[test]
    fn supervised_loss_gradients_match_finite_differences() {
        let mut store = ParamStore::new();
        let gen = Generator::new(&micro_cfg(), &mut store, 5).unwrap();
        let frames: Vec<_> = (0..3).map(|t| frame(t + 10, 16, t as usize)).collect();
        let boxes: Vec<_> = (0..3)
            .map(|t| BoundingBox::from_center(6.0 + t as f64, 8.0, 5.0, 4.0).unwrap())
            .collect();
        let build = |g: &mut Graph| {
            let trace = gen.forward_sequence(g, &frames)?;
            let l = gen.sequence_supervised_loss(g, &trace, &boxes)?;
            // Route the context rows into the loss too.
            let last = *trace.contexts.last().unwrap();
            let c = g.sigmoid(last);
            let c = g.mean(c);
            g.add(l, c)
        };
        let checks = check_param_gradients(&store, GroupSet::generator(), build, 1e-5).unwrap();
        assert!(worst(&checks) < 1e-4, "{checks:#?}");
        // Key biases shift every score of a query equally, so softmax ignores them.
        let dead = checks
            .iter()
            .filter(|c| c.analytic_norm == 0.0 && !c.name.ends_with("k.bias"));
        assert_eq!(dead.count(), 0, "{checks:#?}");
    }
}
