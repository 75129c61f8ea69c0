//! Domain discriminators over temporal contexts and temporal features.
//!
//! The temporal-consistent discriminator (TCD) walks the context rows in
//! order. Each row is lifted to `L` tokens of width `C`. At step `i` the
//! carried common feature and the new context meet in a cross-attention
//! block (queries from both, keys and values from the new context,
//! residual + layer norm), then a TC-adaptor gates the attended feature
//! per channel using a descriptor of how the previous and current attended
//! features differ (depthwise separable convolution over their channel
//! concatenation, global average pooling, feed-forward map). The gated
//! feature is classified and carried to the next step.
//!
//! The plain discriminator (PD) classifies every input independently with
//! a standard Transformer encoder block.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, GroupSet, ParamGroup, ParamId, ParamStore, Var};
use crate::config::{DiscriminatorConfig, DiscriminatorKind, GateActivation};
use crate::error::{Result, TdaError};
use crate::generator::{TemporalContextMemory, TemporalFeature};
use crate::nn::{LayerNorm, Linear, MultiHeadAttention};
use crate::tensor::Tensor;

const DISC: ParamGroup = ParamGroup::Discriminator;
const DW_KERNEL: usize = 3;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DomainLabel {
    SourceDay,
    TargetNight,
}

impl DomainLabel {
    /// BCE target: day is encoded as 1, night as 0.
    pub fn target(self) -> f64 {
        match self {
            DomainLabel::SourceDay => 1.0,
            DomainLabel::TargetNight => 0.0,
        }
    }

    /// The label that deceives the discriminator.
    pub fn flipped(self) -> Self {
        match self {
            DomainLabel::SourceDay => DomainLabel::TargetNight,
            DomainLabel::TargetNight => DomainLabel::SourceDay,
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Stage {
    Attended,
    Refined,
}

/// An `(L, C)` feature inside the discriminator chain.
#[derive(Clone, Debug, PartialEq)]
pub struct CommonFeature {
    pub values: Tensor,
    pub stage: Stage,
}

/// One logit per context step plus one for the temporal feature.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainLogitSeries {
    pub contexts: Vec<f64>,
    pub feature: f64,
}

impl DomainLogitSeries {
    pub fn len(&self) -> usize {
        self.contexts.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Context logits followed by the feature logit.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.contexts.clone();
        v.push(self.feature);
        v
    }
}

/// Graph handles of a logit series.
#[derive(Clone, Debug)]
pub struct LogitVars {
    pub contexts: Vec<Var>,
    pub feature: Var,
}

/// Lifts a `(1, C)` row to `(L, C)` tokens with a learned expansion.
#[derive(Clone, Debug)]
pub struct TokenLift {
    pub expand: Linear,
    pub tokens: usize,
    pub width: usize,
}

impl TokenLift {
    fn new(store: &mut ParamStore, name: &str, width: usize, tokens: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            expand: Linear::new(store, name, DISC, width, tokens * width, true, rng),
            tokens,
            width,
        }
    }

    pub fn forward(&self, g: &mut Graph, row: Var) -> Result<Var> {
        if g.shape(row) != [1, self.width] {
            return Err(TdaError::Shape(format!(
                "context row {:?} is not (1, {})",
                g.shape(row),
                self.width
            )));
        }
        let y = self.expand.forward(g, row)?;
        g.reshape(y, &[self.tokens, self.width])
    }
}

/// Projects `(N, C_f)` feature tokens to `(L, C)`: band-average the tokens
/// into `L` groups, then a linear map.
#[derive(Clone, Debug)]
pub struct FeatureProjector {
    pub proj: Linear,
    pub tokens: usize,
}

impl FeatureProjector {
    fn pool_matrix(&self, n: usize) -> Result<Tensor> {
        let l = self.tokens;
        if n < l {
            return Err(TdaError::Shape(format!("{n} feature tokens cannot fill {l} bands")));
        }
        let mut m = vec![0.0; l * n];
        let mut counts = vec![0usize; l];
        for t in 0..n {
            counts[t * l / n] += 1;
        }
        for t in 0..n {
            let band = t * l / n;
            m[band * n + t] = 1.0 / counts[band] as f64;
        }
        Tensor::from_vec(&[l, n], m)
    }

    pub fn forward(&self, g: &mut Graph, tokens: Var) -> Result<Var> {
        let (n, cf) = (g.shape(tokens)[0], g.shape(tokens)[1]);
        if cf != self.proj.d_in {
            return Err(TdaError::Shape(format!(
                "feature tokens have {cf} channels, projector expects {}",
                self.proj.d_in
            )));
        }
        let pool = g.constant(self.pool_matrix(n)?);
        let pooled = g.matmul(pool, tokens)?;
        self.proj.forward(g, pooled)
    }
}

/// `Norm(cur + Attn(query = [prev; cur], key = cur, value = cur))`, keeping
/// the rows that belong to `cur`.
#[derive(Clone, Debug)]
pub struct CrossAttend {
    pub attn: MultiHeadAttention,
    pub norm: LayerNorm,
}

impl CrossAttend {
    pub fn forward(&self, g: &mut Graph, prev: Var, cur: Var) -> Result<Var> {
        if g.shape(prev) != g.shape(cur) {
            return Err(TdaError::Shape(format!(
                "cross attention inputs differ: {:?} vs {:?}",
                g.shape(prev),
                g.shape(cur)
            )));
        }
        let l = g.shape(cur)[0];
        let query = g.concat_rows(&[prev, cur])?;
        let attended = self.attn.forward(g, query, cur)?;
        let own = g.slice_rows(attended, l, 2 * l)?;
        let sum = g.add(cur, own)?;
        self.norm.forward(g, sum)
    }
}

/// Channel gate from the difference descriptor of two attended features.
#[derive(Clone, Debug)]
pub struct TcAdaptor {
    pub dw_weight: ParamId,
    pub dw_bias: ParamId,
    pub pointwise: Linear,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub activation: GateActivation,
}

impl TcAdaptor {
    fn new(store: &mut ParamStore, name: &str, c: usize, act: GateActivation, rng: &mut ChaCha8Rng) -> Self {
        let bound = (6.0 / (DW_KERNEL + 1) as f64).sqrt();
        let dw: Vec<f64> = (0..2 * c * DW_KERNEL)
            .map(|_| rand::Rng::random_range(rng, -bound..=bound))
            .collect();
        Self {
            dw_weight: store.add(
                format!("{name}.dw.weight"),
                DISC,
                Tensor::from_vec(&[2 * c, DW_KERNEL], dw).expect("sized"),
            ),
            dw_bias: store.add(format!("{name}.dw.bias"), DISC, Tensor::zeros(&[2 * c])),
            pointwise: Linear::new(store, &format!("{name}.pw"), DISC, 2 * c, c, true, rng),
            ffn_in: Linear::new(store, &format!("{name}.ffn1"), DISC, c, c, true, rng),
            ffn_out: Linear::new(store, &format!("{name}.ffn2"), DISC, c, c, true, rng),
            activation: act,
        }
    }

    /// `(1, C)` gate `act(FFN(GAP(DWConv([prev | cur]))))`.
    pub fn gate(&self, g: &mut Graph, prev: Var, cur: Var) -> Result<Var> {
        if g.shape(prev) != g.shape(cur) {
            return Err(TdaError::Shape(format!(
                "adaptor inputs differ: {:?} vs {:?}",
                g.shape(prev),
                g.shape(cur)
            )));
        }
        let cat = g.concat_cols(&[prev, cur])?;
        let w = g.param(self.dw_weight);
        let b = g.param(self.dw_bias);
        let depthwise = g.dwconv_rows(cat, w, b, DW_KERNEL / 2)?;
        let mixed = self.pointwise.forward(g, depthwise)?;
        let descriptor = g.mean_rows(mixed)?;
        let h = self.ffn_in.forward(g, descriptor)?;
        let h = g.relu(h);
        let z = self.ffn_out.forward(g, h)?;
        Ok(match self.activation {
            GateActivation::Sigmoid => g.sigmoid(z),
            GateActivation::Identity => z,
        })
    }

    pub fn forward(&self, g: &mut Graph, prev: Var, cur: Var) -> Result<Var> {
        let gate = self.gate(g, prev, cur)?;
        g.mul_row(cur, gate)
    }
}

/// Affine map of the token average to one logit.
#[derive(Clone, Debug)]
pub struct DomainClassifier {
    pub linear: Linear,
}

impl DomainClassifier {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let avg = g.mean_rows(x)?;
        self.linear.forward(g, avg)
    }
}

#[derive(Clone, Debug)]
pub struct TcdNet {
    pub lift: TokenLift,
    pub project: FeatureProjector,
    pub cross: CrossAttend,
    pub adaptor: TcAdaptor,
    pub classifier: DomainClassifier,
}

impl TcdNet {
    fn new(
        store: &mut ParamStore,
        name: &str,
        cfg: &DiscriminatorConfig,
        c: usize,
        cf: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let l = cfg.token_expansion;
        Ok(Self {
            lift: TokenLift::new(store, &format!("{name}.lift"), c, l, rng),
            project: FeatureProjector {
                proj: Linear::new(store, &format!("{name}.project"), DISC, cf, c, true, rng),
                tokens: l,
            },
            cross: CrossAttend {
                attn: MultiHeadAttention::new(store, &format!("{name}.cross"), DISC, c, c, c, cfg.heads, rng)?,
                norm: LayerNorm::new(store, &format!("{name}.cross.norm"), DISC, c, true),
            },
            adaptor: TcAdaptor::new(store, &format!("{name}.adaptor"), c, cfg.gate_activation, rng),
            classifier: DomainClassifier {
                linear: Linear::new(store, &format!("{name}.classifier"), DISC, c, 1, true, rng),
            },
        })
    }
}

#[derive(Clone, Debug)]
pub struct PdNet {
    pub lift: TokenLift,
    pub project: FeatureProjector,
    pub attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub norm2: LayerNorm,
    pub classifier: DomainClassifier,
}

impl PdNet {
    fn new(
        store: &mut ParamStore,
        name: &str,
        cfg: &DiscriminatorConfig,
        c: usize,
        cf: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let l = cfg.token_expansion;
        Ok(Self {
            lift: TokenLift::new(store, &format!("{name}.lift"), c, l, rng),
            project: FeatureProjector {
                proj: Linear::new(store, &format!("{name}.project"), DISC, cf, c, true, rng),
                tokens: l,
            },
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), DISC, c, c, c, cfg.heads, rng)?,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), DISC, c, true),
            ffn_in: Linear::new(store, &format!("{name}.ffn1"), DISC, c, 2 * c, true, rng),
            ffn_out: Linear::new(store, &format!("{name}.ffn2"), DISC, 2 * c, c, true, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), DISC, c, true),
            classifier: DomainClassifier {
                linear: Linear::new(store, &format!("{name}.classifier"), DISC, c, 1, true, rng),
            },
        })
    }

    /// Encoder block plus classifier on `(L, C)` tokens.
    pub fn classify_tokens(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let a = self.attn.forward(g, x, x)?;
        let r = g.add(x, a)?;
        let x1 = self.norm1.forward(g, r)?;
        let h = self.ffn_in.forward(g, x1)?;
        let h = g.relu(h);
        let f = self.ffn_out.forward(g, h)?;
        let r2 = g.add(x1, f)?;
        let x2 = self.norm2.forward(g, r2)?;
        self.classifier.forward(g, x2)
    }
}

#[derive(Clone, Debug)]
enum Nets {
    Tcd { context: TcdNet, feature: Option<TcdNet> },
    Pd { context: PdNet, feature: Option<PdNet> },
}

/// Input of the plain discriminator.
#[derive(Clone, Debug)]
pub enum PlainInput<'a> {
    ContextRow(&'a [f64]),
    Feature(&'a TemporalFeature),
}

#[derive(Clone, Debug)]
pub struct Discriminator {
    cfg: DiscriminatorConfig,
    context_width: usize,
    feature_channels: usize,
    nets: Nets,
}

impl Discriminator {
    pub fn new(
        cfg: &DiscriminatorConfig,
        context_width: usize,
        feature_channels: usize,
        store: &mut ParamStore,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate(context_width)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c, cf) = (context_width, feature_channels);
        let nets = match cfg.kind {
            DiscriminatorKind::Tcd => Nets::Tcd {
                context: TcdNet::new(store, "disc", cfg, c, cf, &mut rng)?,
                feature: if cfg.shared {
                    None
                } else {
                    Some(TcdNet::new(store, "disc_feat", cfg, c, cf, &mut rng)?)
                },
            },
            DiscriminatorKind::Pd => Nets::Pd {
                context: PdNet::new(store, "pd", cfg, c, cf, &mut rng)?,
                feature: if cfg.shared {
                    None
                } else {
                    Some(PdNet::new(store, "pd_feat", cfg, c, cf, &mut rng)?)
                },
            },
        };
        Ok(Self {
            cfg: cfg.clone(),
            context_width,
            feature_channels,
            nets,
        })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.cfg
    }

    pub fn kind(&self) -> DiscriminatorKind {
        self.cfg.kind
    }

    /// The TCD network used for contexts (and for features when shared).
    pub fn tcd(&self) -> Option<&TcdNet> {
        match &self.nets {
            Nets::Tcd { context, .. } => Some(context),
            Nets::Pd { .. } => None,
        }
    }

    pub fn pd(&self) -> Option<&PdNet> {
        match &self.nets {
            Nets::Pd { context, .. } => Some(context),
            Nets::Tcd { .. } => None,
        }
    }

    /// Sets every classifier to zero weights and zero bias.
    pub fn zero_classifiers(&self, store: &mut ParamStore) {
        match &self.nets {
            Nets::Tcd { context, feature } => {
                for n in std::iter::once(context).chain(feature.as_ref()) {
                    n.classifier.linear.zero(store);
                }
            }
            Nets::Pd { context, feature } => {
                for n in std::iter::once(context).chain(feature.as_ref()) {
                    n.classifier.linear.zero(store);
                }
            }
        }
    }

    /// Minimum number of context rows [`Self::discriminate`] accepts.
    pub fn min_contexts(&self) -> usize {
        match self.cfg.kind {
            DiscriminatorKind::Tcd => 2,
            DiscriminatorKind::Pd => 1,
        }
    }

    /// Context logits emitted for `contexts` rows.
    pub fn context_logit_count(&self, contexts: usize) -> usize {
        match self.cfg.kind {
            DiscriminatorKind::Tcd => contexts.saturating_sub(1),
            DiscriminatorKind::Pd => contexts,
        }
    }

    /// Logits for a sequence of `(1, C)` context rows and the final
    /// `(N, C_f)` feature tokens.
    ///
    /// TCD emits `k - 1` context logits for `k` rows; PD emits `k`.
    pub fn discriminate(&self, g: &mut Graph, contexts: &[Var], feature: Var) -> Result<LogitVars> {
        match &self.nets {
            Nets::Tcd { context, feature: fnet } => {
                self.tcd_chain(g, context, fnet.as_ref().unwrap_or(context), contexts, feature)
            }
            Nets::Pd { context, feature: fnet } => {
                let fnet = fnet.as_ref().unwrap_or(context);
                let mut logits = Vec::with_capacity(contexts.len());
                for row in contexts {
                    let x = context.lift.forward(g, *row)?;
                    logits.push(context.classify_tokens(g, x)?);
                }
                let f = fnet.project.forward(g, feature)?;
                let feature = fnet.classify_tokens(g, f)?;
                Ok(LogitVars {
                    contexts: logits,
                    feature,
                })
            }
        }
    }

    fn tcd_chain(
        &self,
        g: &mut Graph,
        net: &TcdNet,
        fnet: &TcdNet,
        contexts: &[Var],
        feature: Var,
    ) -> Result<LogitVars> {
        if contexts.len() < 2 {
            return Err(TdaError::Contract(format!(
                "temporal-consistent discrimination needs at least 2 contexts, got {}",
                contexts.len()
            )));
        }
        let first = net.lift.forward(g, contexts[0])?;
        let mut carry = first;
        let mut prev_attended = first;
        let mut logits = Vec::with_capacity(contexts.len() - 1);
        for row in &contexts[1..] {
            let cur = net.lift.forward(g, *row)?;
            let attended = net.cross.forward(g, carry, cur)?;
            let refined = net.adaptor.forward(g, prev_attended, attended)?;
            logits.push(net.classifier.forward(g, refined)?);
            carry = refined;
            prev_attended = attended;
        }
        let f = fnet.project.forward(g, feature)?;
        let feature = if self.cfg.feature_separate {
            let attended = fnet.cross.forward(g, f, f)?;
            let refined = fnet.adaptor.forward(g, attended, attended)?;
            fnet.classifier.forward(g, refined)?
        } else {
            let attended = fnet.cross.forward(g, carry, f)?;
            let refined = fnet.adaptor.forward(g, prev_attended, attended)?;
            fnet.classifier.forward(g, refined)?
        };
        Ok(LogitVars {
            contexts: logits,
            feature,
        })
    }

    fn tcd_or_err(&self) -> Result<&TcdNet> {
        self.tcd()
            .ok_or_else(|| TdaError::Config("operation needs a temporal-consistent discriminator".into()))
    }

    fn check_tokens(&self, t: &Tensor) -> Result<()> {
        if t.shape() != [self.cfg.token_expansion, self.context_width] {
            return Err(TdaError::Shape(format!(
                "expected ({}, {}) tokens, got {:?}",
                self.cfg.token_expansion,
                self.context_width,
                t.shape()
            )));
        }
        Ok(())
    }

    pub fn cross_attend(&self, store: &ParamStore, prev: &Tensor, cur: &Tensor) -> Result<CommonFeature> {
        let net = self.tcd_or_err()?;
        self.check_tokens(prev)?;
        self.check_tokens(cur)?;
        let mut g = Graph::new(store, GroupSet::NONE);
        let (p, c) = (g.constant(prev.clone()), g.constant(cur.clone()));
        let out = net.cross.forward(&mut g, p, c)?;
        Ok(CommonFeature {
            values: g.value(out).clone(),
            stage: Stage::Attended,
        })
    }

    /// The `(1, C)` channel gate the adaptor would apply.
    pub fn tc_gate(&self, store: &ParamStore, prev: &CommonFeature, cur: &CommonFeature) -> Result<Tensor> {
        let net = self.tcd_or_err()?;
        self.check_tokens(&prev.values)?;
        self.check_tokens(&cur.values)?;
        let mut g = Graph::new(store, GroupSet::NONE);
        let (p, c) = (g.constant(prev.values.clone()), g.constant(cur.values.clone()));
        let gate = net.adaptor.gate(&mut g, p, c)?;
        Ok(g.value(gate).clone())
    }

    pub fn tc_adapt(&self, store: &ParamStore, prev: &CommonFeature, cur: &CommonFeature) -> Result<CommonFeature> {
        let net = self.tcd_or_err()?;
        self.check_tokens(&prev.values)?;
        self.check_tokens(&cur.values)?;
        let mut g = Graph::new(store, GroupSet::NONE);
        let (p, c) = (g.constant(prev.values.clone()), g.constant(cur.values.clone()));
        let out = net.adaptor.forward(&mut g, p, c)?;
        Ok(CommonFeature {
            values: g.value(out).clone(),
            stage: Stage::Refined,
        })
    }

    pub fn classify(&self, store: &ParamStore, common: &CommonFeature) -> Result<f64> {
        let net = self.tcd_or_err()?;
        self.check_tokens(&common.values)?;
        let mut g = Graph::new(store, GroupSet::NONE);
        let x = g.constant(common.values.clone());
        let logit = net.classifier.forward(&mut g, x)?;
        Ok(g.value(logit).item())
    }

    /// Lifts a memory row to the `(L, C)` token layout.
    pub fn lift_row(&self, store: &ParamStore, row: &[f64]) -> Result<Tensor> {
        let lift = match &self.nets {
            Nets::Tcd { context, .. } => &context.lift,
            Nets::Pd { context, .. } => &context.lift,
        };
        let mut g = Graph::new(store, GroupSet::NONE);
        let r = g.constant(Tensor::row(row.to_vec()));
        let out = lift.forward(&mut g, r)?;
        Ok(g.value(out).clone())
    }

    fn feature_tokens(&self, feature: &TemporalFeature) -> Result<Tensor> {
        let s = feature.values.shape();
        if s.len() != 3 || s[0] != self.feature_channels {
            return Err(TdaError::Shape(format!(
                "feature {s:?} does not have {} channels",
                self.feature_channels
            )));
        }
        Ok(feature.values.clone().reshaped(&[s[0], s[1] * s[2]])?.transpose2())
    }

    pub fn discriminate_sequence(
        &self,
        store: &ParamStore,
        memory: &TemporalContextMemory,
        feature: &TemporalFeature,
    ) -> Result<DomainLogitSeries> {
        if memory.len() < self.min_contexts() {
            return Err(TdaError::Contract(format!(
                "need at least {} contexts, got {}",
                self.min_contexts(),
                memory.len()
            )));
        }
        let mut g = Graph::new(store, GroupSet::NONE);
        let rows: Vec<Var> = memory
            .rows()
            .iter()
            .map(|r| g.constant(Tensor::row(r.clone())))
            .collect();
        let f = g.constant(self.feature_tokens(feature)?);
        let out = self.discriminate(&mut g, &rows, f)?;
        Ok(DomainLogitSeries {
            contexts: out.contexts.iter().map(|v| g.value(*v).item()).collect(),
            feature: g.value(out.feature).item(),
        })
    }

    pub fn plain_discriminate(&self, store: &ParamStore, input: PlainInput<'_>) -> Result<f64> {
        let Nets::Pd { context, feature } = &self.nets else {
            return Err(TdaError::Config("plain_discriminate needs kind = pd".into()));
        };
        let mut g = Graph::new(store, GroupSet::NONE);
        let logit = match input {
            PlainInput::ContextRow(row) => {
                let r = g.constant(Tensor::row(row.to_vec()));
                let x = context.lift.forward(&mut g, r)?;
                context.classify_tokens(&mut g, x)?
            }
            PlainInput::Feature(f) => {
                let net = feature.as_ref().unwrap_or(context);
                let t = g.constant(self.feature_tokens(f)?);
                let x = net.project.forward(&mut g, t)?;
                net.classify_tokens(&mut g, x)?
            }
        };
        Ok(g.value(logit).item())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_param_gradients, worst};

    fn micro(kind: DiscriminatorKind) -> (ParamStore, Discriminator) {
        let cfg = DiscriminatorConfig {
            kind,
            heads: 2,
            token_expansion: 3,
            ..Default::default()
        };
        let mut store = ParamStore::new();
        let d = Discriminator::new(&cfg, 4, 3, &mut store, 17).unwrap();
        (store, d)
    }

    fn rows(k: usize, c: usize, seed: f64) -> Vec<Tensor> {
        (0..k)
            .map(|i| Tensor::row((0..c).map(|j| ((i * c + j) as f64 * 0.91 + seed).sin()).collect()))
            .collect()
    }

    fn feature_tokens(n: usize, cf: usize) -> Tensor {
        Tensor::from_vec(&[n, cf], (0..n * cf).map(|i| (i as f64 * 0.53).cos()).collect()).unwrap()
    }

    fn chain_loss(d: &Discriminator, g: &mut Graph, rs: &[Tensor], f: &Tensor) -> Result<Var> {
        let vars: Vec<Var> = rs.iter().map(|r| g.constant(r.clone())).collect();
        let fv = g.constant(f.clone());
        let out = d.discriminate(g, &vars, fv)?;
        let mut all = out.contexts.clone();
        all.push(out.feature);
        let cat = g.concat_cols(&all)?;
        let targets: Vec<f64> = (0..all.len()).map(|i| (i % 2) as f64).collect();
        g.bce_with_logits(cat, &targets)
    }

    #[test]
    fn tcd_gradients_match_finite_differences() {
        let (store, d) = micro(DiscriminatorKind::Tcd);
        let rs = rows(4, 4, 0.3);
        let f = feature_tokens(4, 3);
        let checks = check_param_gradients(&store, GroupSet::all(), |g| chain_loss(&d, g, &rs, &f), 1e-5).unwrap();
        assert!(worst(&checks) < 1e-4, "{checks:#?}");
    }

    #[test]
    fn pd_gradients_match_finite_differences() {
        let (store, d) = micro(DiscriminatorKind::Pd);
        let rs = rows(3, 4, 1.3);
        let f = feature_tokens(4, 3);
        let checks = check_param_gradients(&store, GroupSet::all(), |g| chain_loss(&d, g, &rs, &f), 1e-5).unwrap();
        assert!(worst(&checks) < 1e-4, "{checks:#?}");
    }

    #[test]
    fn step_count_contract() {
        let (store, d) = micro(DiscriminatorKind::Tcd);
        let mut g = Graph::new(&store, GroupSet::NONE);
        let vars: Vec<Var> = rows(4, 4, 0.0).into_iter().map(|r| g.constant(r)).collect();
        let f = g.constant(feature_tokens(4, 3));
        let out = d.discriminate(&mut g, &vars, f).unwrap();
        assert_eq!(out.contexts.len() + 1, 4);
        assert!(matches!(
            d.discriminate(&mut g, &vars[..1], f),
            Err(TdaError::Contract(_))
        ));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let (store, d) = micro(DiscriminatorKind::Tcd);
        let a = Tensor::zeros(&[3, 4]);
        let b = Tensor::zeros(&[2, 4]);
        assert!(matches!(d.cross_attend(&store, &a, &b), Err(TdaError::Shape(_))));
        let (pd_store, pd) = micro(DiscriminatorKind::Pd);
        assert!(pd.cross_attend(&pd_store, &a, &a).is_err());
    }

    #[test]
    fn identity_gate_passes_ffn_output() {
        let cfg = DiscriminatorConfig {
            gate_activation: GateActivation::Identity,
            heads: 1,
            token_expansion: 2,
            ..Default::default()
        };
        let mut store = ParamStore::new();
        let d = Discriminator::new(&cfg, 2, 2, &mut store, 1).unwrap();
        let net = d.tcd().unwrap();
        net.adaptor.ffn_out.zero(&mut store);
        let cur = CommonFeature {
            values: Tensor::from_vec(&[2, 2], vec![1.0, -2.0, 3.0, 0.5]).unwrap(),
            stage: Stage::Attended,
        };
        let out = d.tc_adapt(&store, &cur, &cur).unwrap();
        assert!(out.values.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn separate_feature_discriminator_has_its_own_parameters() {
        let cfg = DiscriminatorConfig {
            shared: false,
            heads: 2,
            token_expansion: 2,
            ..Default::default()
        };
        let mut store = ParamStore::new();
        Discriminator::new(&cfg, 4, 4, &mut store, 1).unwrap();
        assert!(store.find("disc_feat.classifier.weight").is_some());
        assert!(store.find("disc.classifier.weight").is_some());
    }
}
