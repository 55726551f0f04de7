//! Central finite-difference checks of the full pooled-head loss.

use crate::error::Result;
use crate::head::{balanced_bce, balanced_bce_logits, image_logits, image_logits_backward, ClassifierHead};
use crate::pooling::{PoolKind, PoolSpec};
use crate::tensor::{sigmoid, Rng, Tensor};

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-5;

/// `(f(x+h) − f(x−h)) / 2h` with `h = FD_STEP`.
pub fn central_diff(mut f: impl FnMut(f64) -> f64, x: f64) -> f64 {
    (f(x + FD_STEP) - f(x - FD_STEP)) / (2.0 * FD_STEP)
}

/// `|a − n| / max(1, |a|, |n|)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

const BATCH: usize = 4;
const CLASSES: usize = 2;
const SHAPE: [usize; 3] = [4, 6, 6];

#[derive(Debug, Clone, PartialEq)]
pub struct GroupError {
    pub group: &'static str,
    pub count: usize,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub kind: &'static str,
    pub groups: Vec<GroupError>,
}

impl GradcheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_err).fold(0.0, f64::max)
    }
}

struct Instance {
    kind: PoolKind,
    head: ClassifierHead,
    inputs: Vec<Tensor>,
    labels: Vec<Vec<bool>>,
}

impl Instance {
    fn random(spec: &PoolSpec, seed: u64) -> Result<Self> {
        let mut rng = Rng::new(seed);
        // Linear pooling divides by the channel sum; keep it away from zero.
        let (lo, hi) = if matches!(spec, PoolSpec::Linear) {
            (0.1, 1.0)
        } else {
            (-1.0, 1.0)
        };
        let inputs = (0..BATCH).map(|_| Tensor::uniform(&SHAPE, lo, hi, &mut rng)).collect();
        let mut head = ClassifierHead::init(CLASSES, SHAPE[0], &mut rng);
        for cls in head.classes_mut() {
            cls.b = rng.uniform(-0.5, 0.5);
        }
        let kind = match spec.instantiate(SHAPE[0], &mut rng)? {
            PoolKind::LseLba { gamma0, .. } => PoolKind::lse_lba(gamma0, rng.uniform(-1.0, 1.0))?,
            k => k,
        };
        let labels = (0..CLASSES)
            .map(|_| (0..BATCH).map(|_| rng.bernoulli(0.5)).collect())
            .collect();
        Ok(Self {
            kind,
            head,
            inputs,
            labels,
        })
    }

    fn loss(&self, kind: &PoolKind, head: &ClassifierHead, inputs: &[Tensor]) -> f64 {
        let logits: Vec<Vec<f64>> = inputs
            .iter()
            .map(|x| image_logits(kind, x, head).expect("valid instance"))
            .collect();
        (0..CLASSES)
            .map(|k| {
                let probs: Vec<f64> = logits.iter().map(|l| sigmoid(l[k])).collect();
                balanced_bce(&probs, &self.labels[k]).expect("non-empty").0
            })
            .sum()
    }
}

/// Compares analytic gradients of the summed balanced BCE loss against
/// central differences for one random instance of `spec`.
pub fn gradcheck(spec: &PoolSpec, seed: u64) -> Result<GradcheckReport> {
    let inst = Instance::random(spec, seed)?;
    let (kind, head) = (&inst.kind, &inst.head);

    // analytic
    let logits: Vec<Vec<f64>> = inst
        .inputs
        .iter()
        .map(|x| image_logits(kind, x, head))
        .collect::<Result<_>>()?;
    let mut d_logits = vec![vec![0.0; CLASSES]; BATCH];
    for k in 0..CLASSES {
        let zk: Vec<f64> = logits.iter().map(|l| l[k]).collect();
        let (_, g) = balanced_bce_logits(&zk, &inst.labels[k])?;
        for (i, gi) in g.into_iter().enumerate() {
            d_logits[i][k] = gi;
        }
    }
    let mut d_inputs = Vec::with_capacity(BATCH);
    let mut d_w = vec![vec![0.0; SHAPE[0]]; CLASSES];
    let mut d_b = vec![0.0; CLASSES];
    let mut d_att: Option<(Vec<f64>, Vec<f64>)> = None;
    let mut d_beta = 0.0;
    for (x, dl) in inst.inputs.iter().zip(&d_logits) {
        let g = image_logits_backward(kind, x, head, dl)?;
        d_inputs.push(g.d_input);
        for k in 0..CLASSES {
            d_w[k].iter_mut().zip(&g.d_w[k]).for_each(|(a, b)| *a += b);
            d_b[k] += g.d_b[k];
        }
        if let Some((dv, dwa)) = g.d_attention {
            let acc = d_att.get_or_insert_with(|| (vec![0.0; dv.len()], vec![0.0; dwa.len()]));
            acc.0.iter_mut().zip(dv.data()).for_each(|(a, b)| *a += b);
            acc.1.iter_mut().zip(&dwa).for_each(|(a, b)| *a += b);
        }
        d_beta += g.d_beta;
    }

    let mut groups = Vec::new();
    let mut push = |group: &'static str, errs: Vec<f64>| {
        groups.push(GroupError {
            group,
            count: errs.len(),
            max_rel_err: errs.into_iter().fold(0.0, f64::max),
        })
    };

    let mut errs = Vec::new();
    for (b, dx) in d_inputs.iter().enumerate() {
        for i in 0..dx.len() {
            let num = central_diff(
                |t| {
                    let mut xs = inst.inputs.clone();
                    xs[b].data_mut()[i] = t;
                    inst.loss(kind, head, &xs)
                },
                inst.inputs[b].data()[i],
            );
            errs.push(rel_err(dx.data()[i], num));
        }
    }
    push("features", errs);

    let mut w_errs = Vec::new();
    let mut b_errs = Vec::new();
    for k in 0..CLASSES {
        for c in 0..SHAPE[0] {
            let num = central_diff(
                |t| {
                    let mut hp = head.clone();
                    hp.classes_mut()[k].w[c] = t;
                    inst.loss(kind, &hp, &inst.inputs)
                },
                head.classes()[k].w[c],
            );
            w_errs.push(rel_err(d_w[k][c], num));
        }
        let num = central_diff(
            |t| {
                let mut hp = head.clone();
                hp.classes_mut()[k].b = t;
                inst.loss(kind, &hp, &inst.inputs)
            },
            head.classes()[k].b,
        );
        b_errs.push(rel_err(d_b[k], num));
    }
    push("head.w", w_errs);
    push("head.b", b_errs);

    match kind {
        PoolKind::Attention(params) => {
            let (dv, dwa) = d_att.expect("attention gradients");
            let mut errs = Vec::new();
            for i in 0..params.v.len() {
                let num = central_diff(
                    |t| {
                        let mut p = params.clone();
                        p.v.data_mut()[i] = t;
                        inst.loss(&PoolKind::Attention(p), head, &inst.inputs)
                    },
                    params.v.data()[i],
                );
                errs.push(rel_err(dv[i], num));
            }
            push("attention.v", errs);
            let mut errs = Vec::new();
            for i in 0..params.w.len() {
                let num = central_diff(
                    |t| {
                        let mut p = params.clone();
                        p.w[i] = t;
                        inst.loss(&PoolKind::Attention(p), head, &inst.inputs)
                    },
                    params.w[i],
                );
                errs.push(rel_err(dwa[i], num));
            }
            push("attention.w", errs);
        }
        PoolKind::LseLba { gamma0, beta } => {
            let num = central_diff(
                |t| inst.loss(&PoolKind::LseLba { gamma0: *gamma0, beta: t }, head, &inst.inputs),
                *beta,
            );
            push("lselba.beta", vec![rel_err(d_beta, num)]);
        }
        _ => {}
    }

    Ok(GradcheckReport {
        kind: kind.name(),
        groups,
    })
}
