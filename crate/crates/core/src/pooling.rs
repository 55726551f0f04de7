//! Global pooling operators over a `(C, H, W)` feature map.
//!
//! Average, Linear, Exponential and LSE pool every channel independently.
//! Attention and PCAM compute a single spatial weight map at embedding level
//! (one weight per location, shared by all channels) and return the weighted
//! sum of embeddings. PCAM's weights are the sigmoid of the class activation
//! score `wᵀX_ij + b`, normalized to sum to one, where `(w, b)` are the same
//! classifier parameters that produce the final image logit.
//!
//! LSE-LBA pools a scalar saliency map rather than a feature map and is
//! exposed separately as [`lse_lba_score`].
//!
//! Every operator has an exact analytic backward pass.

use crate::error::{shape_err, Error, Result};
use crate::head::ClassifierHead;
use crate::tensor::{dot, logsumexp_unchecked, sigmoid, softmax_in_place, Grid, Rng, Tensor};

/// Channel sums with absolute value below this make Linear pooling fall back
/// to Average for that channel.
pub const LINEAR_DENOMINATOR_EPS: f64 = 1e-12;

/// Trainable parameters of attention pooling: `V` (L×C) and `w` (length L).
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub v: Tensor,
    pub w: Vec<f64>,
}

impl AttentionParams {
    pub fn new(v: Tensor, w: Vec<f64>) -> Result<Self> {
        match v.shape() {
            [l, _] if *l == w.len() => Ok(Self { v, w }),
            s => Err(shape_err(format!(
                "attention V must be L×C with L = {}, got {s:?}",
                w.len()
            ))),
        }
    }

    /// Uniform initialization in `[-1/√C, 1/√C]`.
    pub fn init(hidden: usize, channels: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (channels as f64).sqrt();
        let v = Tensor::uniform(&[hidden, channels], -bound, bound, rng);
        let w = (0..hidden).map(|_| rng.uniform(-bound, bound)).collect();
        Self { v, w }
    }

    pub fn hidden(&self) -> usize {
        self.w.len()
    }

    pub fn channels(&self) -> usize {
        self.v.shape()[1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PoolKind {
    Average,
    Linear,
    Exponential,
    Lse { gamma: f64 },
    LseLba { gamma0: f64, beta: f64 },
    Attention(AttentionParams),
    /// PCAM pooling driven by class `class` of the classifier head.
    Pcam { class: usize },
}

impl PoolKind {
    pub fn lse(gamma: f64) -> Result<Self> {
        if !(gamma > 0.0) || !gamma.is_finite() {
            return Err(Error::InvalidScale(gamma));
        }
        Ok(Self::Lse { gamma })
    }

    pub fn lse_lba(gamma0: f64, beta: f64) -> Result<Self> {
        if !(gamma0 >= 0.0) || !beta.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "LSE-LBA needs gamma0 >= 0 and finite beta, got ({gamma0}, {beta})"
            )));
        }
        Ok(Self::LseLba { gamma0, beta })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Average => "avg",
            Self::Linear => "linear",
            Self::Exponential => "exp",
            Self::Lse { .. } => "lse",
            Self::LseLba { .. } => "lselba",
            Self::Attention(_) => "attention",
            Self::Pcam { .. } => "pcam",
        }
    }

    fn validate(&self, channels: usize) -> Result<()> {
        match self {
            Self::Lse { gamma } if !(*gamma > 0.0) => Err(Error::InvalidScale(*gamma)),
            Self::Attention(p) if p.channels() != channels => Err(shape_err(format!(
                "attention V expects {} channels, feature map has {channels}",
                p.channels()
            ))),
            Self::Attention(p) if p.v.shape()[0] != p.w.len() => {
                Err(shape_err("attention V rows must equal len(w)"))
            }
            Self::LseLba { .. } => Err(Error::InvalidArgument(
                "LSE-LBA pools a saliency map; use lse_lba_score".into(),
            )),
            _ => Ok(()),
        }
    }
}

/// Parameter-free selector for a pooling kind; trainable parameters are
/// created by [`PoolSpec::instantiate`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PoolSpec {
    Average,
    Linear,
    Exponential,
    Lse { gamma: f64 },
    LseLba { gamma0: f64 },
    Attention { hidden: usize },
    Pcam,
}

/// Hidden width of attention pooling when none is given.
pub const DEFAULT_ATTENTION_HIDDEN: usize = 16;

impl PoolSpec {
    /// Parses a CLI kind name. `gamma` is LSE's sharpness, or LSE-LBA's
    /// lower bound `γ0`.
    pub fn parse(name: &str, gamma: Option<f64>) -> Result<Self> {
        let spec = match name {
            "avg" | "average" => Self::Average,
            "linear" => Self::Linear,
            "exp" | "exponential" => Self::Exponential,
            "lse" => Self::Lse {
                gamma: gamma.unwrap_or(1.0),
            },
            "lselba" | "lse-lba" => Self::LseLba {
                gamma0: gamma.unwrap_or(1.0),
            },
            "attention" => Self::Attention {
                hidden: DEFAULT_ATTENTION_HIDDEN,
            },
            "pcam" => Self::Pcam,
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown pooling kind {other:?} (expected avg|linear|exp|lse|lselba|attention|pcam)"
                )))
            }
        };
        spec.instantiate(1, &mut Rng::new(0))?;
        Ok(spec)
    }

    /// Builds the kind, drawing attention parameters from `rng`. LSE-LBA's
    /// `β` starts at 0.
    pub fn instantiate(&self, channels: usize, rng: &mut Rng) -> Result<PoolKind> {
        match *self {
            Self::Average => Ok(PoolKind::Average),
            Self::Linear => Ok(PoolKind::Linear),
            Self::Exponential => Ok(PoolKind::Exponential),
            Self::Lse { gamma } => PoolKind::lse(gamma),
            Self::LseLba { gamma0 } => PoolKind::lse_lba(gamma0, 0.0),
            Self::Attention { hidden } if hidden > 0 => {
                Ok(PoolKind::Attention(AttentionParams::init(hidden, channels, rng)))
            }
            Self::Attention { .. } => Err(Error::InvalidArgument("attention hidden width must be positive".into())),
            Self::Pcam => Ok(PoolKind::Pcam { class: 0 }),
        }
    }

    /// Canonical text form, e.g. `lse(10)`; inverse of [`PoolSpec::from_label`].
    pub fn label(&self) -> String {
        match self {
            Self::Average => "avg".into(),
            Self::Linear => "linear".into(),
            Self::Exponential => "exp".into(),
            Self::Lse { gamma } => format!("lse({gamma})"),
            Self::LseLba { gamma0 } => format!("lselba({gamma0})"),
            Self::Attention { hidden } => format!("attention({hidden})"),
            Self::Pcam => "pcam".into(),
        }
    }

    pub fn from_label(label: &str) -> Result<Self> {
        let (name, arg) = match label.split_once('(') {
            Some((n, rest)) => {
                let arg = rest
                    .strip_suffix(')')
                    .ok_or_else(|| Error::InvalidArgument(format!("bad pooling label {label:?}")))?;
                (n, Some(arg))
            }
            None => (label, None),
        };
        let bad = || Error::InvalidArgument(format!("bad pooling label {label:?}"));
        match (name, arg) {
            ("attention", Some(a)) => Ok(Self::Attention {
                hidden: a.parse().map_err(|_| bad())?,
            }),
            ("lse" | "lselba", Some(a)) => Self::parse(name, Some(a.parse().map_err(|_| bad())?)),
            (_, None) => Self::parse(name, None),
            _ => Err(bad()),
        }
    }
}

/// Spatial weights `w_ij`, nonnegative and summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMap(pub Grid<f64>);

impl WeightMap {
    pub fn sum(&self) -> f64 {
        self.0.data().iter().sum()
    }

    pub fn values(&self) -> &[f64] {
        self.0.data()
    }
}

/// Weight maps produced by a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub enum PoolWeights {
    /// LSE is not a weighted average of its inputs.
    None,
    /// One map per channel (Average, Linear, Exponential).
    PerChannel(Vec<WeightMap>),
    /// One map shared by all channels (Attention, PCAM).
    Shared(WeightMap),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pooled {
    pub embedding: Vec<f64>,
    pub weights: PoolWeights,
    /// Channels where Linear pooling fell back to Average.
    pub fallback_channels: Vec<usize>,
}

/// Output of [`pcam_weight_map`].
#[derive(Debug, Clone, PartialEq)]
pub struct PcamWeights {
    /// CAM scores `s_ij = wᵀX_ij + b`.
    pub scores: Grid<f64>,
    /// Un-normalized probabilities `p_ij = sigmoid(s_ij)`.
    pub probabilities: Grid<f64>,
    pub weights: WeightMap,
}

/// Gradients of kind-specific parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum ParamGrads {
    None,
    /// Gradients of the head class `(w, b)` used by PCAM.
    Head { d_w: Vec<f64>, d_b: f64 },
    Attention { d_v: Tensor, d_w: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoolGrads {
    pub d_input: Tensor,
    pub params: ParamGrads,
}

/// Forward pass of `kind` over the feature map `x`.
pub fn pool_forward(kind: &PoolKind, x: &Tensor, head: Option<&ClassifierHead>) -> Result<Pooled> {
    let (c, h, w) = x.dims3()?;
    kind.validate(c)?;
    if head.is_some() && !matches!(kind, PoolKind::Pcam { .. }) {
        return Err(Error::InvalidArgument(format!(
            "{} pooling takes no classifier head",
            kind.name()
        )));
    }
    let hw = h * w;
    let data = x.data();
    let per_channel = |f: &dyn Fn(&[f64]) -> (f64, Option<Vec<f64>>, bool)| {
        let mut embedding = Vec::with_capacity(c);
        let mut maps = Vec::with_capacity(c);
        let mut fallback = Vec::new();
        for (ch, values) in data.chunks_exact(hw).enumerate() {
            let (v, weights, fell_back) = f(values);
            embedding.push(v);
            if let Some(wts) = weights {
                maps.push(WeightMap(Grid::new(h, w, wts).expect("shape checked")));
            }
            if fell_back {
                fallback.push(ch);
            }
        }
        let weights = if maps.is_empty() {
            PoolWeights::None
        } else {
            PoolWeights::PerChannel(maps)
        };
        Pooled {
            embedding,
            weights,
            fallback_channels: fallback,
        }
    };

    let pooled = match kind {
        PoolKind::Average => per_channel(&|v| {
            let wts = vec![1.0 / hw as f64; hw];
            (mean(v), Some(wts), false)
        }),
        PoolKind::Linear => per_channel(&|v| {
            let s: f64 = v.iter().sum();
            if s.abs() < LINEAR_DENOMINATOR_EPS {
                (mean(v), Some(vec![1.0 / hw as f64; hw]), true)
            } else {
                let wts: Vec<f64> = v.iter().map(|&x| x / s).collect();
                (dot(&wts, v), Some(wts), false)
            }
        }),
        PoolKind::Exponential => per_channel(&|v| {
            let mut wts = v.to_vec();
            softmax_in_place(&mut wts, 1.0);
            (dot(&wts, v), Some(wts), false)
        }),
        PoolKind::Lse { gamma } => per_channel(&|v| {
            let lse = logsumexp_unchecked(v, *gamma);
            ((lse - (hw as f64).ln()) / gamma, None, false)
        }),
        PoolKind::Attention(params) => {
            let wts = attention_weights(params, x);
            shared_pool(x, wts)
        }
        PoolKind::Pcam { class } => {
            let head = head.ok_or_else(|| Error::InvalidArgument("PCAM pooling needs a head".into()))?;
            let cls = head.class(*class)?;
            let pw = pcam_weight_map(x, &cls.w, cls.b)?;
            shared_pool(x, pw.weights)
        }
        PoolKind::LseLba { .. } => unreachable!("rejected by validate"),
    };
    Ok(pooled)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn shared_pool(x: &Tensor, weights: WeightMap) -> Pooled {
    Pooled {
        embedding: weighted_embedding(x, weights.values()),
        weights: PoolWeights::Shared(weights),
        fallback_channels: Vec::new(),
    }
}

/// `Σ_ij w_ij X_ij`.
fn weighted_embedding(x: &Tensor, weights: &[f64]) -> Vec<f64> {
    x.data()
        .chunks_exact(weights.len())
        .map(|ch| dot(ch, weights))
        .collect()
}

/// Per-location CAM scores `wᵀX_ij + b`, flattened.
pub(crate) fn scores_flat(x: &Tensor, w: &[f64], b: f64) -> Vec<f64> {
    let hw = x.shape()[1] * x.shape()[2];
    let mut s = vec![b; hw];
    for (ch, &wc) in x.data().chunks_exact(hw).zip(w) {
        for (si, &xi) in s.iter_mut().zip(ch) {
            *si += wc * xi;
        }
    }
    s
}

/// Attention logits `a_ij = wᵀ tanh(V X_ij)` plus the hidden activations.
fn attention_logits(params: &AttentionParams, x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (c, h, w) = x.dims3().expect("validated");
    let hw = h * w;
    let l = params.hidden();
    let v = params.v.data();
    // hidden[n * l + k] = tanh(Σ_c V[k, c] X[c, n])
    let mut hidden = vec![0.0; hw * l];
    for k in 0..l {
        for ch in 0..c {
            let vk = v[k * c + ch];
            let xc = &x.data()[ch * hw..(ch + 1) * hw];
            for n in 0..hw {
                hidden[n * l + k] += vk * xc[n];
            }
        }
    }
    hidden.iter_mut().for_each(|u| *u = u.tanh());
    let logits = hidden.chunks_exact(l).map(|hn| dot(hn, &params.w)).collect();
    (logits, hidden)
}

fn attention_weights(params: &AttentionParams, x: &Tensor) -> WeightMap {
    let (_, h, w) = x.dims3().expect("validated");
    let (mut a, _) = attention_logits(params, x);
    softmax_in_place(&mut a, 1.0);
    WeightMap(Grid::new(h, w, a).expect("shape checked"))
}

/// PCAM weights `sigmoid(wᵀX_ij + b) / Σ sigmoid(wᵀX_ij + b)`.
pub fn pcam_weight_map(x: &Tensor, w: &[f64], b: f64) -> Result<PcamWeights> {
    let (c, h, wd) = x.dims3()?;
    if w.len() != c {
        return Err(shape_err(format!(
            "head weight has length {}, feature map has {c} channels",
            w.len()
        )));
    }
    let scores = scores_flat(x, w, b);
    let probs: Vec<f64> = scores.iter().map(|&s| sigmoid(s)).collect();
    let total: f64 = probs.iter().sum();
    let weights = if total > 1e-200 {
        probs.iter().map(|&p| p / total).collect()
    } else {
        // Every sigmoid underflowed: normalize in the log domain instead.
        let mut logp: Vec<f64> = scores.iter().map(|&s| -softplus(-s)).collect();
        softmax_in_place(&mut logp, 1.0);
        logp
    };
    Ok(PcamWeights {
        scores: Grid::new(h, wd, scores)?,
        probabilities: Grid::new(h, wd, probs)?,
        weights: WeightMap(Grid::new(h, wd, weights)?),
    })
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Backward pass: gradients of a scalar loss given `upstream = ∂L/∂embedding`.
pub fn pool_backward(
    kind: &PoolKind,
    x: &Tensor,
    head: Option<&ClassifierHead>,
    upstream: &[f64],
) -> Result<PoolGrads> {
    let (c, h, w) = x.dims3()?;
    kind.validate(c)?;
    if upstream.len() != c {
        return Err(shape_err(format!(
            "upstream gradient has length {}, expected {c}",
            upstream.len()
        )));
    }
    let hw = h * w;
    let mut d_input = Tensor::zeros(&[c, h, w]);
    let per_channel = |d_input: &mut Tensor, f: &dyn Fn(&[f64], f64, &mut [f64])| {
        for ((values, dst), &g) in x
            .data()
            .chunks_exact(hw)
            .zip(d_input.data_mut().chunks_exact_mut(hw))
            .zip(upstream)
        {
            f(values, g, dst);
        }
    };

    let params = match kind {
        PoolKind::Average => {
            per_channel(&mut d_input, &|_, g, dst| dst.fill(g / hw as f64));
            ParamGrads::None
        }
        PoolKind::Linear => {
            per_channel(&mut d_input, &|v, g, dst| {
                let s: f64 = v.iter().sum();
                if s.abs() < LINEAR_DENOMINATOR_EPS {
                    dst.fill(g / hw as f64);
                } else {
                    let q: f64 = v.iter().map(|x| x * x).sum();
                    for (d, &xi) in dst.iter_mut().zip(v) {
                        *d = g * (2.0 * xi / s - q / (s * s));
                    }
                }
            });
            ParamGrads::None
        }
        PoolKind::Exponential => {
            per_channel(&mut d_input, &|v, g, dst| {
                let mut wts = v.to_vec();
                softmax_in_place(&mut wts, 1.0);
                let pooled = dot(&wts, v);
                for ((d, &wi), &xi) in dst.iter_mut().zip(&wts).zip(v) {
                    *d = g * wi * (1.0 + xi - pooled);
                }
            });
            ParamGrads::None
        }
        PoolKind::Lse { gamma } => {
            per_channel(&mut d_input, &|v, g, dst| {
                dst.copy_from_slice(v);
                softmax_in_place(dst, *gamma);
                dst.iter_mut().for_each(|d| *d *= g);
            });
            ParamGrads::None
        }
        PoolKind::Attention(p) => attention_backward(p, x, upstream, &mut d_input),
        PoolKind::Pcam { class } => {
            let head = head.ok_or_else(|| Error::InvalidArgument("PCAM pooling needs a head".into()))?;
            let cls = head.class(*class)?;
            pcam_backward(x, &cls.w, cls.b, upstream, &mut d_input, true)?
        }
        PoolKind::LseLba { .. } => unreachable!("rejected by validate"),
    };
    Ok(PoolGrads { d_input, params })
}

/// Shared-weight pooling backward: returns `∂L/∂w_ij` before the weight
/// normalization, and adds the value-path term `w_ij·g` into `d_input`.
fn shared_value_path(x: &Tensor, weights: &[f64], upstream: &[f64], d_input: &mut Tensor) -> Vec<f64> {
    let hw = weights.len();
    let pooled = weighted_embedding(x, weights);
    let g_dot_pooled = dot(upstream, &pooled);
    // q_n = gᵀX_n
    let mut q = vec![0.0; hw];
    for ((ch, dst), &g) in x
        .data()
        .chunks_exact(hw)
        .zip(d_input.data_mut().chunks_exact_mut(hw))
        .zip(upstream)
    {
        for n in 0..hw {
            q[n] += g * ch[n];
            dst[n] += g * weights[n];
        }
    }
    // For w = softmax-like normalization of positive scores u: ∂L/∂u_n ∝ w_n (q_n - gᵀx).
    q.iter_mut().for_each(|qn| *qn -= g_dot_pooled);
    q
}

fn attention_backward(
    params: &AttentionParams,
    x: &Tensor,
    upstream: &[f64],
    d_input: &mut Tensor,
) -> ParamGrads {
    let (c, _, _) = x.dims3().expect("validated");
    let l = params.hidden();
    let (mut weights, hidden) = attention_logits(params, x);
    softmax_in_place(&mut weights, 1.0);
    let centered = shared_value_path(x, &weights, upstream, d_input);
    let hw = weights.len();

    let v = params.v.data();
    let mut d_v = vec![0.0; l * c];
    let mut d_w = vec![0.0; l];
    let mut du = vec![0.0; hw * l];
    for n in 0..hw {
        // ∂L/∂a_n for softmax weights
        let da = weights[n] * centered[n];
        let hn = &hidden[n * l..(n + 1) * l];
        for k in 0..l {
            d_w[k] += da * hn[k];
            du[n * l + k] = da * params.w[k] * (1.0 - hn[k] * hn[k]);
        }
    }
    let d_in = d_input.data_mut();
    for ch in 0..c {
        let xc = &x.data()[ch * hw..(ch + 1) * hw];
        let dxc = &mut d_in[ch * hw..(ch + 1) * hw];
        for k in 0..l {
            let vk = v[k * c + ch];
            let mut acc = 0.0;
            for n in 0..hw {
                let g = du[n * l + k];
                acc += g * xc[n];
                dxc[n] += vk * g;
            }
            d_v[k * c + ch] = acc;
        }
    }
    ParamGrads::Attention {
        d_v: Tensor::new(vec![l, c], d_v).expect("shape"),
        d_w,
    }
}

/// PCAM backward. With `weight_path = false` only the value path
/// `∂x/∂X_ij = w_ij` is propagated; used to check that both paths matter.
pub(crate) fn pcam_backward(
    x: &Tensor,
    w: &[f64],
    b: f64,
    upstream: &[f64],
    d_input: &mut Tensor,
    weight_path: bool,
) -> Result<ParamGrads> {
    let pw = pcam_weight_map(x, w, b)?;
    let weights = pw.weights.values();
    let centered = shared_value_path(x, weights, upstream, d_input);
    let hw = weights.len();
    let mut d_w = vec![0.0; w.len()];
    let mut d_b = 0.0;
    if !weight_path {
        return Ok(ParamGrads::Head { d_w, d_b });
    }
    // w_n = p_n / P with p_n = σ(s_n): ∂L/∂s_n = w_n (1 - p_n)(q_n - gᵀx).
    let ds: Vec<f64> = (0..hw)
        .map(|n| weights[n] * (1.0 - pw.probabilities.data()[n]) * centered[n])
        .collect();
    d_b = ds.iter().sum();
    for ((ch, dst), (dw, &wc)) in x
        .data()
        .chunks_exact(hw)
        .zip(d_input.data_mut().chunks_exact_mut(hw))
        .zip(d_w.iter_mut().zip(w))
    {
        *dw = dot(&ds, ch);
        for (d, &dsn) in dst.iter_mut().zip(&ds) {
            *d += dsn * wc;
        }
    }
    Ok(ParamGrads::Head { d_w, d_b })
}

/// Effective sharpness `γ0 + exp(β)` of LSE-LBA.
pub fn lse_lba_scale(gamma0: f64, beta: f64) -> f64 {
    gamma0 + beta.exp()
}

/// `s = 1/γ · log[ 1/(HW) Σ exp(γ S_ij) ]` with `γ = γ0 + exp(β)`.
pub fn lse_lba_score(saliency: &Grid<f64>, gamma0: f64, beta: f64) -> Result<f64> {
    let gamma = lse_lba_scale(gamma0, beta);
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(Error::InvalidScale(gamma));
    }
    let v = saliency.data();
    Ok((logsumexp_unchecked(v, gamma) - (v.len() as f64).ln()) / gamma)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LseLbaGrads {
    pub d_saliency: Grid<f64>,
    pub d_beta: f64,
}

/// Gradients of `upstream · lse_lba_score(S, γ0, β)` w.r.t. `S` and `β`.
pub fn lse_lba_backward(saliency: &Grid<f64>, gamma0: f64, beta: f64, upstream: f64) -> Result<LseLbaGrads> {
    let score = lse_lba_score(saliency, gamma0, beta)?;
    let gamma = lse_lba_scale(gamma0, beta);
    let mut soft = saliency.clone();
    softmax_in_place(soft.data_mut(), gamma);
    // ∂s/∂γ = (Σ softmax·S − s) / γ, ∂γ/∂β = exp(β)
    let weighted = dot(soft.data(), saliency.data());
    let d_gamma = (weighted - score) / gamma;
    soft.data_mut().iter_mut().for_each(|d| *d *= upstream);
    Ok(LseLbaGrads {
        d_saliency: soft,
        d_beta: upstream * d_gamma * beta.exp(),
    })
}
