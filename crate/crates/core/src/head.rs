//! Per-class classifier head: CAM score maps, probability maps, pooled image
//! logits and the within-batch balanced binary cross-entropy.
//!
//! For PCAM pooling each class `k` pools the feature map with weights derived
//! from its own `(w_k, b_k)` and then feeds the pooled embedding through the
//! same `(w_k, b_k)`. Other pooling kinds produce one embedding shared by all
//! classes; LSE-LBA pools each class's CAM score map directly into a logit.

use crate::error::{shape_err, Error, Result};
use crate::pooling::{
    lse_lba_backward, lse_lba_score, pcam_backward, pcam_weight_map, pool_backward, pool_forward,
    ParamGrads, PoolKind, WeightMap,
};
use crate::tensor::{dot, sigmoid, Grid, Rng, Tensor};

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` inside the loss.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct ClassWeights {
    pub w: Vec<f64>,
    pub b: f64,
}

/// One `(w_k, b_k)` pair per class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    classes: Vec<ClassWeights>,
}

impl ClassifierHead {
    pub fn new(classes: Vec<ClassWeights>) -> Result<Self> {
        let Some(first) = classes.first() else {
            return Err(Error::InvalidArgument("head needs at least one class".into()));
        };
        let c = first.w.len();
        if c == 0 || classes.iter().any(|k| k.w.len() != c) {
            return Err(shape_err("all head classes need weights of equal, positive length"));
        }
        if classes.iter().any(|k| !k.b.is_finite() || k.w.iter().any(|v| !v.is_finite())) {
            return Err(Error::InvalidArgument("head parameters must be finite".into()));
        }
        Ok(Self { classes })
    }

    pub fn zeros(num_classes: usize, channels: usize) -> Self {
        Self {
            classes: vec![
                ClassWeights {
                    w: vec![0.0; channels],
                    b: 0.0
                };
                num_classes
            ],
        }
    }

    /// Weights uniform in `[-1/√C, 1/√C]`, zero biases.
    pub fn init(num_classes: usize, channels: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (channels as f64).sqrt();
        let classes = (0..num_classes)
            .map(|_| ClassWeights {
                w: (0..channels).map(|_| rng.uniform(-bound, bound)).collect(),
                b: 0.0,
            })
            .collect();
        Self { classes }
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn channels(&self) -> usize {
        self.classes[0].w.len()
    }

    pub fn class(&self, k: usize) -> Result<&ClassWeights> {
        self.classes
            .get(k)
            .ok_or_else(|| Error::InvalidArgument(format!("class {k} out of range")))
    }

    pub fn classes(&self) -> &[ClassWeights] {
        &self.classes
    }

    pub fn classes_mut(&mut self) -> &mut [ClassWeights] {
        &mut self.classes
    }
}

/// Per-location logits `s_ij = wᵀX_ij + b`.
pub type ScoreMap = Grid<f64>;

/// Elementwise sigmoid of a [`ScoreMap`].
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap(Grid<f64>);

impl ProbabilityMap {
    pub fn from_scores(scores: &ScoreMap) -> Self {
        Self(scores.map(|&s| sigmoid(s)))
    }

    /// Wraps values that must already lie in `[0, 1]`.
    pub fn new(values: Grid<f64>) -> Result<Self> {
        if values.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument("probabilities must lie in [0, 1]".into()));
        }
        Ok(Self(values))
    }

    pub fn grid(&self) -> &Grid<f64> {
        &self.0
    }

    pub fn into_grid(self) -> Grid<f64> {
        self.0
    }

    pub fn dims(&self) -> (usize, usize) {
        self.0.dims()
    }
}

pub fn cam_score_map(x: &Tensor, w: &[f64], b: f64) -> Result<ScoreMap> {
    let (c, h, wd) = x.dims3()?;
    if w.len() != c {
        return Err(shape_err(format!(
            "class weight has length {}, feature map has {c} channels",
            w.len()
        )));
    }
    Grid::new(h, wd, crate::pooling::scores_flat(x, w, b))
}

/// PCAM head output for one class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassOutput {
    pub logit: f64,
    pub probability: f64,
    pub probability_map: ProbabilityMap,
    pub weights: WeightMap,
    pub embedding: Vec<f64>,
}

/// PCAM head: per class, pool with `pcam_weight_map(X, w_k, b_k)` and classify
/// the pooled embedding with the same `(w_k, b_k)`.
pub fn head_forward(x: &Tensor, head: &ClassifierHead) -> Result<Vec<ClassOutput>> {
    let (c, _, _) = x.dims3()?;
    if c != head.channels() {
        return Err(shape_err(format!(
            "head expects {} channels, feature map has {c}",
            head.channels()
        )));
    }
    head.classes()
        .iter()
        .map(|cls| {
            let pw = pcam_weight_map(x, &cls.w, cls.b)?;
            let embedding: Vec<f64> = x
                .data()
                .chunks_exact(pw.weights.values().len())
                .map(|ch| dot(ch, pw.weights.values()))
                .collect();
            let logit = dot(&cls.w, &embedding) + cls.b;
            Ok(ClassOutput {
                logit,
                probability: sigmoid(logit),
                probability_map: ProbabilityMap(pw.probabilities),
                weights: pw.weights,
                embedding,
            })
        })
        .collect()
}

/// Image-level logits for any pooling kind. For [`PoolKind::Pcam`] the class
/// index is ignored: every class pools with its own head parameters.
pub fn image_logits(kind: &PoolKind, x: &Tensor, head: &ClassifierHead) -> Result<Vec<f64>> {
    let (c, _, _) = x.dims3()?;
    if c != head.channels() {
        return Err(shape_err(format!(
            "head expects {} channels, feature map has {c}",
            head.channels()
        )));
    }
    match kind {
        PoolKind::Pcam { .. } => Ok(head_forward(x, head)?.into_iter().map(|o| o.logit).collect()),
        PoolKind::LseLba { gamma0, beta } => head
            .classes()
            .iter()
            .map(|cls| lse_lba_score(&cam_score_map(x, &cls.w, cls.b)?, *gamma0, *beta))
            .collect(),
        _ => {
            let pooled = pool_forward(kind, x, None)?.embedding;
            Ok(head
                .classes()
                .iter()
                .map(|cls| dot(&cls.w, &pooled) + cls.b)
                .collect())
        }
    }
}

/// Gradients of a scalar loss through [`image_logits`].
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrads {
    pub d_input: Tensor,
    pub d_w: Vec<Vec<f64>>,
    pub d_b: Vec<f64>,
    /// Present for attention pooling.
    pub d_attention: Option<(Tensor, Vec<f64>)>,
    /// Gradient of LSE-LBA's `β`; zero for other kinds.
    pub d_beta: f64,
}

pub fn image_logits_backward(
    kind: &PoolKind,
    x: &Tensor,
    head: &ClassifierHead,
    d_logits: &[f64],
) -> Result<HeadGrads> {
    let (c, h, w) = x.dims3()?;
    let k = head.num_classes();
    if d_logits.len() != k {
        return Err(shape_err(format!("expected {k} logit gradients, got {}", d_logits.len())));
    }
    let mut grads = HeadGrads {
        d_input: Tensor::zeros(&[c, h, w]),
        d_w: vec![vec![0.0; c]; k],
        d_b: vec![0.0; k],
        d_attention: None,
        d_beta: 0.0,
    };
    match kind {
        PoolKind::Pcam { .. } => {
            for (idx, (cls, &dl)) in head.classes().iter().zip(d_logits).enumerate() {
                let pw = pcam_weight_map(x, &cls.w, cls.b)?;
                let embedding: Vec<f64> = x
                    .data()
                    .chunks_exact(h * w)
                    .map(|ch| dot(ch, pw.weights.values()))
                    .collect();
                // logit = wᵀx + b, with x itself a function of (X, w, b)
                let upstream: Vec<f64> = cls.w.iter().map(|wc| dl * wc).collect();
                let ParamGrads::Head { d_w, d_b } =
                    pcam_backward(x, &cls.w, cls.b, &upstream, &mut grads.d_input, true)?
                else {
                    unreachable!("PCAM yields head gradients")
                };
                for ((g, pool_g), xe) in grads.d_w[idx].iter_mut().zip(&d_w).zip(&embedding) {
                    *g = pool_g + dl * xe;
                }
                grads.d_b[idx] = d_b + dl;
            }
        }
        PoolKind::LseLba { gamma0, beta } => {
            let hw = h * w;
            for (idx, (cls, &dl)) in head.classes().iter().zip(d_logits).enumerate() {
                let s = cam_score_map(x, &cls.w, cls.b)?;
                let lg = lse_lba_backward(&s, *gamma0, *beta, dl)?;
                let ds = lg.d_saliency.data();
                grads.d_beta += lg.d_beta;
                grads.d_b[idx] = ds.iter().sum();
                for (ch, (xc, dxc)) in x
                    .data()
                    .chunks_exact(hw)
                    .zip(grads.d_input.data_mut().chunks_exact_mut(hw))
                    .enumerate()
                {
                    grads.d_w[idx][ch] = dot(ds, xc);
                    for (d, &dsn) in dxc.iter_mut().zip(ds) {
                        *d += dsn * cls.w[ch];
                    }
                }
            }
        }
        _ => {
            let pooled = pool_forward(kind, x, None)?.embedding;
            let mut d_pooled = vec![0.0; c];
            for (idx, (cls, &dl)) in head.classes().iter().zip(d_logits).enumerate() {
                for ((dp, wc), (dw, xe)) in d_pooled
                    .iter_mut()
                    .zip(&cls.w)
                    .zip(grads.d_w[idx].iter_mut().zip(&pooled))
                {
                    *dp += dl * wc;
                    *dw = dl * xe;
                }
                grads.d_b[idx] = dl;
            }
            let pg = pool_backward(kind, x, None, &d_pooled)?;
            grads.d_input = pg.d_input;
            if let ParamGrads::Attention { d_v, d_w } = pg.params {
                grads.d_attention = Some((d_v, d_w));
            }
        }
    }
    Ok(grads)
}

/// Per-sample weights `ω_i`: `n/(2·n_pos)` for positives and `n/(2·n_neg)`
/// for negatives, or all ones when the batch holds a single label.
pub fn balance_weights(labels: &[bool]) -> Vec<f64> {
    let n = labels.len() as f64;
    let n_pos = labels.iter().filter(|&&y| y).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return vec![1.0; labels.len()];
    }
    let (wp, wn) = (n / (2.0 * n_pos as f64), n / (2.0 * n_neg as f64));
    labels.iter().map(|&y| if y { wp } else { wn }).collect()
}

/// Balanced BCE over one class of a batch. Returns the loss and its gradient
/// with respect to each (clamped) probability.
pub fn balanced_bce(probs: &[f64], labels: &[bool]) -> Result<(f64, Vec<f64>)> {
    if probs.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if probs.len() != labels.len() {
        return Err(shape_err(format!(
            "{} probabilities for {} labels",
            probs.len(),
            labels.len()
        )));
    }
    let n = probs.len() as f64;
    let omega = balance_weights(labels);
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(probs.len());
    for ((&p, &y), &om) in probs.iter().zip(labels).zip(&omega) {
        let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        if y {
            loss -= om * p.ln();
            grad.push(-om / (n * p));
        } else {
            loss -= om * (1.0 - p).ln();
            grad.push(om / (n * (1.0 - p)));
        }
    }
    Ok((loss / n, grad))
}

/// Balanced BCE evaluated from logits; the gradient is taken with respect to
/// the logits as `ω_i (p_i − y_i) / n`, which does not vanish when a
/// prediction saturates on the wrong side of the clamp.
pub fn balanced_bce_logits(logits: &[f64], labels: &[bool]) -> Result<(f64, Vec<f64>)> {
    let probs: Vec<f64> = logits.iter().map(|&z| sigmoid(z)).collect();
    let (loss, _) = balanced_bce(&probs, labels)?;
    let n = logits.len() as f64;
    let grad = balance_weights(labels)
        .iter()
        .zip(probs.iter().zip(labels))
        .map(|(om, (p, &y))| om * (p - if y { 1.0 } else { 0.0 }) / n)
        .collect();
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_diff, rel_err};
    use crate::pooling::AttentionParams;

    #[test]
    fn cam_score_map_examples() {
        let x = Tensor::uniform(&[3, 2, 2], -1.0, 1.0, &mut Rng::new(0));
        let s = cam_score_map(&x, &[0.0; 3], 3.0).unwrap();
        assert!(s.data().iter().all(|&v| v == 3.0));

        let x = Tensor::new(vec![1, 1, 2], vec![1.0, -1.0]).unwrap();
        assert_eq!(cam_score_map(&x, &[2.0], 0.0).unwrap().data(), &[2.0, -2.0]);
        assert!(cam_score_map(&x, &[2.0, 1.0], 0.0).is_err());
    }

    #[test]
    fn cam_score_map_matches_pixel_loop() {
        let mut rng = Rng::new(1);
        let x = Tensor::uniform(&[5, 3, 4], -2.0, 2.0, &mut rng);
        let w: Vec<f64> = (0..5).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let s = cam_score_map(&x, &w, 0.25).unwrap();
        for i in 0..3 {
            for j in 0..4 {
                let mut acc = 0.25;
                for c in 0..5 {
                    acc += w[c] * x.data()[c * 12 + i * 4 + j];
                }
                assert!((s.get(i, j) - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_head_gives_half() {
        let x = Tensor::uniform(&[4, 3, 3], -5.0, 5.0, &mut Rng::new(2));
        let out = head_forward(&x, &ClassifierHead::zeros(2, 4)).unwrap();
        assert!(out.iter().all(|o| o.probability == 0.5));
    }

    #[test]
    fn constant_embedding_pools_to_itself() {
        let v = [0.5, -1.0, 2.0];
        let mut data = Vec::new();
        for &vc in &v {
            data.extend(std::iter::repeat(vc).take(6));
        }
        let x = Tensor::new(vec![3, 2, 3], data).unwrap();
        let head = ClassifierHead::new(vec![ClassWeights { w: vec![0.3, 0.1, -0.2], b: 0.4 }]).unwrap();
        let out = &head_forward(&x, &head).unwrap()[0];
        for (a, b) in out.embedding.iter().zip(&v) {
            assert!((a - b).abs() < 1e-15);
        }
        let expected = sigmoid(0.3 * 0.5 - 0.1 - 0.4 + 0.4);
        assert!((out.probability - expected).abs() < 1e-15);
    }

    #[test]
    fn head_logit_composes_pcam_pooling() {
        let mut rng = Rng::new(3);
        let x = Tensor::uniform(&[4, 5, 5], -1.0, 1.0, &mut rng);
        let head = ClassifierHead::init(3, 4, &mut rng);
        let out = head_forward(&x, &head).unwrap();
        for (k, o) in out.iter().enumerate() {
            let pooled = pool_forward(&PoolKind::Pcam { class: k }, &x, Some(&head)).unwrap();
            let cls = head.class(k).unwrap();
            assert!((o.logit - (dot(&cls.w, &pooled.embedding) + cls.b)).abs() < 1e-12);
            assert!((o.weights.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn head_logit_is_permutation_invariant() {
        let mut rng = Rng::new(4);
        let (c, h, w) = (3, 4, 4);
        let x = Tensor::uniform(&[c, h, w], -1.0, 1.0, &mut rng);
        let head = ClassifierHead::init(2, c, &mut rng);
        let mut perm: Vec<usize> = (0..h * w).collect();
        rng.shuffle(&mut perm);
        let mut px = Tensor::zeros(&[c, h, w]);
        for ch in 0..c {
            for (n, &src) in perm.iter().enumerate() {
                px.data_mut()[ch * h * w + n] = x.data()[ch * h * w + src];
            }
        }
        let a = head_forward(&x, &head).unwrap();
        let b = head_forward(&px, &head).unwrap();
        for (u, v) in a.iter().zip(&b) {
            assert!((u.logit - v.logit).abs() < 1e-12);
        }
    }

    #[test]
    fn probability_map_bounds_and_monotone() {
        let s = Grid::from_rows(&[vec![-3.0, 0.0, 1.0, 40.0]]).unwrap();
        let p = ProbabilityMap::from_scores(&s);
        let v = p.grid().data();
        assert!(v.windows(2).all(|w| w[0] <= w[1]));
        assert!(v.iter().all(|x| (0.0..=1.0).contains(x)));
        assert!(ProbabilityMap::new(Grid::filled(1, 1, 1.5)).is_err());
    }

    #[test]
    fn balanced_bce_examples() {
        let (l, _) = balanced_bce(&[0.5, 0.5], &[true, false]).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-15);

        let (l, _) = balanced_bce(&[1.0 - 1e-7; 3], &[true; 3]).unwrap();
        assert!((l - 1e-7).abs() < 1e-12, "{l}");

        // ω_pos = 4/2 = 2, ω_neg = 4/6 = 2/3
        let oracle = 0.25 * (2.0 * -(0.9f64.ln()) + (2.0 / 3.0) * 3.0 * -(0.9f64.ln()));
        let (l, _) = balanced_bce(&[0.9, 0.1, 0.1, 0.1], &[true, false, false, false]).unwrap();
        assert!((l - oracle).abs() < 1e-15);
        assert!((l - 0.1054).abs() < 1e-4);

        assert!(balanced_bce(&[], &[]).is_err());
        assert!(balanced_bce(&[0.5], &[true, false]).is_err());
    }

    #[test]
    fn balanced_bce_gradient_matches_finite_differences() {
        let mut rng = Rng::new(5);
        for _ in 0..20 {
            let n = 2 + (rng.next_u64() % 10) as usize;
            let probs: Vec<f64> = (0..n).map(|_| rng.uniform(0.05, 0.95)).collect();
            let labels: Vec<bool> = (0..n).map(|_| rng.bernoulli(0.4)).collect();
            let (_, g) = balanced_bce(&probs, &labels).unwrap();
            for i in 0..n {
                let num = central_diff(
                    |t| {
                        let mut p = probs.clone();
                        p[i] = t;
                        balanced_bce(&p, &labels).unwrap().0
                    },
                    probs[i],
                );
                assert!(rel_err(g[i], num) < 1e-5);
            }
            // chain rule agrees with the logit form inside the clamp
            let logits: Vec<f64> = probs.iter().map(|p| (p / (1.0 - p)).ln()).collect();
            let (_, gl) = balanced_bce_logits(&logits, &labels).unwrap();
            for i in 0..n {
                let p = sigmoid(logits[i]);
                assert!((gl[i] - g[i] * p * (1.0 - p)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn unit_weights_reduce_to_mean_bce() {
        let probs = [0.2, 0.7, 0.9];
        let (l, _) = balanced_bce(&probs, &[false; 3]).unwrap();
        let direct = -probs.iter().map(|p| (1.0 - p).ln()).sum::<f64>() / 3.0;
        assert!((l - direct).abs() < 1e-15);
    }

    fn check_image_logits_backward(kind: &PoolKind, x: &Tensor, head: &ClassifierHead, dl: &[f64]) {
        let g = image_logits_backward(kind, x, head, dl).unwrap();
        let loss = |kind: &PoolKind, x: &Tensor, head: &ClassifierHead| {
            dot(&image_logits(kind, x, head).unwrap(), dl)
        };
        for i in 0..x.len() {
            let num = central_diff(
                |t| {
                    let mut xp = x.clone();
                    xp.data_mut()[i] = t;
                    loss(kind, &xp, head)
                },
                x.data()[i],
            );
            assert!(rel_err(g.d_input.data()[i], num) < 1e-5, "{} dX[{i}]", kind.name());
        }
        for k in 0..head.num_classes() {
            for c in 0..head.channels() {
                let num = central_diff(
                    |t| {
                        let mut hp = head.clone();
                        hp.classes_mut()[k].w[c] = t;
                        loss(kind, x, &hp)
                    },
                    head.classes()[k].w[c],
                );
                assert!(rel_err(g.d_w[k][c], num) < 1e-5, "{} dw", kind.name());
            }
            let num = central_diff(
                |t| {
                    let mut hp = head.clone();
                    hp.classes_mut()[k].b = t;
                    loss(kind, x, &hp)
                },
                head.classes()[k].b,
            );
            assert!(rel_err(g.d_b[k], num) < 1e-5, "{} db", kind.name());
        }
        if let PoolKind::LseLba { gamma0, beta } = kind {
            let num = central_diff(
                |t| loss(&PoolKind::LseLba { gamma0: *gamma0, beta: t }, x, head),
                *beta,
            );
            assert!(rel_err(g.d_beta, num) < 1e-5);
        }
    }

    #[test]
    fn image_logit_gradients_for_every_kind() {
        let mut rng = Rng::new(6);
        let x = Tensor::uniform(&[3, 3, 4], 0.05, 1.0, &mut rng);
        let head = ClassifierHead::init(2, 3, &mut rng);
        let dl = [0.7, -0.4];
        let kinds = [
            PoolKind::Average,
            PoolKind::Linear,
            PoolKind::Exponential,
            PoolKind::lse(3.0).unwrap(),
            PoolKind::lse_lba(1.0, 0.2).unwrap(),
            PoolKind::Attention(AttentionParams::init(4, 3, &mut rng)),
            PoolKind::Pcam { class: 0 },
        ];
        for kind in &kinds {
            check_image_logits_backward(kind, &x, &head, &dl);
        }
    }
}
