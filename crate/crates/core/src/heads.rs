//! Output heads: the sigmoid sentence classifier and the tag-id / relation
//! heads that sit beside the CRF in the multi-task setting.

use rand::Rng;

use crate::corpus::{ContextWindow, Relation, MAX_TAG_IDS_PER_WINDOW};
use crate::crf::{nll_and_gradient, CrfParameters};
use crate::encoder::{Linear, HIDDEN_WIDTH};
use crate::error::{Error, Result};
use crate::linalg::{join_name, log_sum_exp, sigmoid, Matrix, Parameters, Tensor};

pub const DECISION_THRESHOLD: f64 = 0.5;
/// Tag-id slots 0..=9 plus the none category.
pub const ID_CATEGORIES: usize = MAX_TAG_IDS_PER_WINDOW + 1;
pub const NO_ID_CATEGORY: usize = MAX_TAG_IDS_PER_WINDOW;
pub const RELATION_CATEGORIES: usize = Relation::ALL.len();

/// `d_out -> 512 -> 1` with a sigmoid on the output.
#[derive(Debug, Clone, PartialEq)]
pub struct SentenceClassifierHead {
    pub hidden: Linear,
    pub output: Linear,
}

impl SentenceClassifierHead {
    pub fn init(input: usize, rng: &mut impl Rng) -> Self {
        SentenceClassifierHead {
            hidden: Linear::init(input, HIDDEN_WIDTH, rng),
            output: Linear::init(HIDDEN_WIDTH, 1, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        SentenceClassifierHead {
            hidden: Linear::zeros(self.hidden.input_dim(), self.hidden.output_dim()),
            output: Linear::zeros(self.output.input_dim(), 1),
        }
    }

    fn hidden_activations(&self, pooled: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut pre = vec![0.0; self.hidden.output_dim()];
        self.hidden.forward(pooled, &mut pre);
        let act = pre.iter().map(|v| v.max(0.0)).collect();
        (pre, act)
    }

    pub fn logit(&self, pooled: &[f64]) -> f64 {
        let (_, act) = self.hidden_activations(pooled);
        let mut out = [0.0];
        self.output.forward(&act, &mut out);
        out[0]
    }

    /// Binary cross-entropy against `target`; accumulates parameter
    /// gradients and returns `(loss, d loss / d pooled)`.
    pub fn bce_and_gradient(&self, pooled: &[f64], target: bool, grads: &mut Self) -> (f64, Vec<f64>) {
        let (pre, act) = self.hidden_activations(pooled);
        let mut out = [0.0];
        self.output.forward(&act, &mut out);
        let z = out[0];
        let y = if target { 1.0 } else { 0.0 };
        // softplus(z) - y z, evaluated stably
        let loss = z.max(0.0) + (-z.abs()).exp().ln_1p() - y * z;
        let grad_z = sigmoid(z) - y;

        let mut grad_act = vec![0.0; act.len()];
        self.output
            .backward(&act, &[grad_z], &mut grads.output, Some(&mut grad_act));
        for (g, p) in grad_act.iter_mut().zip(&pre) {
            if *p <= 0.0 {
                *g = 0.0;
            }
        }
        let mut grad_pooled = vec![0.0; pooled.len()];
        self.hidden
            .backward(pooled, &grad_act, &mut grads.hidden, Some(&mut grad_pooled));
        (loss, grad_pooled)
    }
}

impl Parameters for SentenceClassifierHead {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.hidden.visit(&join_name(prefix, "hidden"), f);
        self.output.visit(&join_name(prefix, "output"), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        self.hidden.visit_mut(&join_name(prefix, "hidden"), f);
        self.output.visit_mut(&join_name(prefix, "output"), f);
    }
}

/// Probability that the pooled sentence contains a definition.
pub fn classify_sentence(pooled: &[f64], head: &SentenceClassifierHead) -> f64 {
    sigmoid(head.logit(pooled))
}

pub fn decide(probability: f64) -> bool {
    probability >= DECISION_THRESHOLD
}

/// Per-token affine heads for tag-id slots and relations.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiTaskHeads {
    pub id: Linear,
    pub relation: Linear,
}

impl MultiTaskHeads {
    pub fn init(input: usize, rng: &mut impl Rng) -> Self {
        MultiTaskHeads {
            id: Linear::init(input, ID_CATEGORIES, rng),
            relation: Linear::init(input, RELATION_CATEGORIES, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        MultiTaskHeads {
            id: Linear::zeros(self.id.input_dim(), ID_CATEGORIES),
            relation: Linear::zeros(self.relation.input_dim(), RELATION_CATEGORIES),
        }
    }

    /// Arg-max categories of both heads for every row of `x`.
    pub fn predict(&self, x: &Matrix) -> (Vec<usize>, Vec<usize>) {
        let argmax = |layer: &Linear, row: &[f64]| {
            let mut logits = vec![0.0; layer.output_dim()];
            layer.forward(row, &mut logits);
            let mut best = 0;
            for (c, v) in logits.iter().enumerate() {
                if *v > logits[best] {
                    best = c;
                }
            }
            best
        };
        (0..x.rows)
            .map(|i| (argmax(&self.id, x.row(i)), argmax(&self.relation, x.row(i))))
            .unzip()
    }
}

impl Parameters for MultiTaskHeads {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.id.visit(&join_name(prefix, "id"), f);
        self.relation.visit(&join_name(prefix, "relation"), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        self.id.visit_mut(&join_name(prefix, "id"), f);
        self.relation.visit_mut(&join_name(prefix, "relation"), f);
    }
}

/// Mean per-row softmax cross-entropy of `layer(x)`; accumulates parameter
/// gradients scaled by `weight` and adds `weight * d loss / d x` into
/// `grad_x`.
pub fn cross_entropy(
    layer: &Linear,
    x: &Matrix,
    targets: &[usize],
    weight: f64,
    grads: &mut Linear,
    grad_x: &mut Matrix,
) -> f64 {
    let n = x.rows;
    if n == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    let mut logits = vec![0.0; layer.output_dim()];
    for (i, &target) in targets.iter().enumerate() {
        layer.forward(x.row(i), &mut logits);
        let lse = log_sum_exp(logits.iter().copied());
        total += lse - logits[target];
        if weight == 0.0 {
            continue;
        }
        let grad_logits: Vec<f64> = logits
            .iter()
            .enumerate()
            .map(|(c, v)| {
                let p = (v - lse).exp();
                weight * (p - if c == target { 1.0 } else { 0.0 }) / n as f64
            })
            .collect();
        layer.backward(x.row(i), &grad_logits, grads, Some(grad_x.row_mut(i)));
    }
    total / n as f64
}

/// Weights of the three joint-loss terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub tag: f64,
    pub id: f64,
    pub relation: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            tag: 0.33,
            id: 0.33,
            relation: 0.33,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("tag", self.tag), ("id", self.id), ("relation", self.relation)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!(
                    "loss weight {name} must be finite and non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Unweighted per-head losses: CRF negative log-likelihood and the two mean
/// cross-entropies.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossComponents {
    pub tag: f64,
    pub id: f64,
    pub relation: f64,
}

pub fn multitask_loss(components: &LossComponents, weights: &LossWeights) -> f64 {
    weights.tag * components.tag + weights.id * components.id + weights.relation * components.relation
}

/// Joint loss of one sequence with gradients for the CRF, both heads and the
/// shared input rows.
#[derive(Debug, Clone)]
pub struct MultiTaskGradient {
    pub loss: f64,
    pub components: LossComponents,
    pub crf: CrfParameters,
    pub heads: MultiTaskHeads,
    pub input: Matrix,
}

pub fn multitask_objective(
    x: &Matrix,
    tags: &[usize],
    ids: &[usize],
    relations: &[usize],
    crf: &CrfParameters,
    heads: &MultiTaskHeads,
    weights: &LossWeights,
) -> Result<MultiTaskGradient> {
    if tags.len() != x.rows || ids.len() != x.rows || relations.len() != x.rows {
        return Err(Error::Shape(format!(
            "head targets of lengths {}/{}/{} for a sequence of length {}",
            tags.len(),
            ids.len(),
            relations.len(),
            x.rows
        )));
    }
    if let Some(bad) = ids.iter().find(|&&c| c >= ID_CATEGORIES) {
        return Err(Error::Shape(format!("tag-id category {bad} out of range")));
    }
    if let Some(bad) = relations.iter().find(|&&c| c >= RELATION_CATEGORIES) {
        return Err(Error::Shape(format!("relation category {bad} out of range")));
    }

    let tag_part = nll_and_gradient(x, tags, crf)?;
    let mut crf_grads = tag_part.params;
    crf_grads.weight.scale(weights.tag);
    crf_grads.bias.scale(weights.tag);
    let mut grad_x = tag_part.input;
    grad_x.data.iter_mut().for_each(|v| *v *= weights.tag);

    let mut head_grads = heads.zeros_like();
    let id_loss = cross_entropy(&heads.id, x, ids, weights.id, &mut head_grads.id, &mut grad_x);
    let rel_loss = cross_entropy(
        &heads.relation,
        x,
        relations,
        weights.relation,
        &mut head_grads.relation,
        &mut grad_x,
    );
    let components = LossComponents {
        tag: tag_part.loss,
        id: id_loss,
        relation: rel_loss,
    };
    Ok(MultiTaskGradient {
        loss: multitask_loss(&components, weights),
        components,
        crf: crf_grads,
        heads: head_grads,
        input: grad_x,
    })
}

/// Slot-to-tag-id table of one window.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TagIdSlots(pub Vec<u32>);

impl TagIdSlots {
    /// Ids for a window without gold annotation, unique across windows.
    pub fn fresh(window_id: usize) -> Self {
        let base = (window_id * MAX_TAG_IDS_PER_WINDOW) as u32;
        TagIdSlots((1..=MAX_TAG_IDS_PER_WINDOW as u32).map(|s| base + s).collect())
    }
}

/// Gold tag ids to id-head categories: distinct ids are numbered by first
/// occurrence within the window.
pub fn encode_tag_ids(tag_ids: &[Option<u32>]) -> Result<(Vec<usize>, TagIdSlots)> {
    let mut slots: Vec<u32> = Vec::new();
    let mut categories = Vec::with_capacity(tag_ids.len());
    for id in tag_ids {
        let category = match id {
            None => NO_ID_CATEGORY,
            Some(id) => match slots.iter().position(|s| s == id) {
                Some(slot) => slot,
                None => {
                    if slots.len() == MAX_TAG_IDS_PER_WINDOW {
                        return Err(Error::Shape(format!(
                            "more than {MAX_TAG_IDS_PER_WINDOW} distinct tag ids in one window"
                        )));
                    }
                    slots.push(*id);
                    slots.len() - 1
                }
            },
        };
        categories.push(category);
    }
    Ok((categories, TagIdSlots(slots)))
}

/// Predicted id-head categories to tag ids. The none category maps to `None`;
/// the remaining slots are renumbered by first occurrence and looked up in
/// `slots`.
pub fn assign_tag_ids(
    window: &ContextWindow,
    categories: &[usize],
    slots: &TagIdSlots,
) -> Result<Vec<Option<u32>>> {
    let n = window.tokens().count();
    if categories.len() != n {
        return Err(Error::Shape(format!(
            "{} id predictions for a window of {n} tokens",
            categories.len()
        )));
    }
    let mut order: Vec<usize> = Vec::new();
    let mut out = Vec::with_capacity(n);
    for &c in categories {
        if c == NO_ID_CATEGORY {
            out.push(None);
            continue;
        }
        if c > NO_ID_CATEGORY {
            return Err(Error::Shape(format!("tag-id category {c} out of range")));
        }
        let rank = match order.iter().position(|&s| s == c) {
            Some(r) => r,
            None => {
                order.push(c);
                order.len() - 1
            }
        };
        let id = slots.0.get(rank).copied().ok_or_else(|| {
            Error::Shape(format!("slot {rank} has no tag id in this window"))
        })?;
        out.push(Some(id));
    }
    Ok(out)
}

/// Relation categories back to relation labels.
pub fn relations_from_categories(categories: &[usize]) -> Vec<Relation> {
    categories
        .iter()
        .map(|&c| Relation::from_index(c).unwrap_or(Relation::None))
        .collect()
}
