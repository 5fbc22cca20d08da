//! Similarity router: one trainable embedding per teacher, routing by a
//! softmax over cosine similarities with the (optionally projected)
//! question embedding.
//!
//! Training combines two contrastive terms. The sample-LLM term pulls a
//! question toward a teacher that answered it correctly and away from one
//! that did not. The sample-sample term pulls questions of the same dataset
//! together in projection space; it only has something to train when the
//! projection is enabled.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint;
use crate::encoder::Embedding;
use crate::error::{Error, Result};
use crate::math;
use crate::optim::{AdamW, AdamWConfig};
use crate::purify::{Router, RoutingDistribution};
use crate::seed;

pub const DEFAULT_KEY_DIM: usize = 768;

/// Parameters laid out flat as `[K (n x key_dim) | P (key_dim x d)]`, the
/// projection block present only when `projection` is set.
#[derive(Debug, Clone, PartialEq)]
pub struct SimRouter {
    pub n: usize,
    pub key_dim: usize,
    pub d: usize,
    pub projection: bool,
    pub params: Vec<f64>,
    pub seed: u64,
}

impl SimRouter {
    /// Keys are unit-normalized Gaussians; the projection starts at the
    /// identity when square and at `N(0, 1/d)` otherwise.
    pub fn new(n: usize, key_dim: usize, d: usize, projection: bool, seed: u64) -> Result<Self> {
        if !projection && key_dim != d {
            return Err(Error::DimMismatch {
                expected: key_dim,
                got: d,
            });
        }
        let mut rng = seed::rng(seed, seed::INIT);
        let mut params = Vec::with_capacity(n * key_dim + if projection { key_dim * d } else { 0 });
        for _ in 0..n {
            let mut k: Vec<f64> = (0..key_dim)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            let norm = math::norm(&k);
            k.iter_mut().for_each(|x| *x /= norm);
            params.extend(k);
        }
        if projection {
            let scale = 1.0 / (d as f64).sqrt();
            for r in 0..key_dim {
                for c in 0..d {
                    params.push(if key_dim == d {
                        if r == c {
                            1.0
                        } else {
                            0.0
                        }
                    } else {
                        {
                            let z: f64 = StandardNormal.sample(&mut rng);
                            scale * z
                        }
                    });
                }
            }
        }
        Ok(Self {
            n,
            key_dim,
            d,
            projection,
            params,
            seed,
        })
    }

    pub fn key(&self, i: usize) -> &[f64] {
        &self.params[i * self.key_dim..(i + 1) * self.key_dim]
    }

    fn p_offset(&self) -> usize {
        self.n * self.key_dim
    }

    pub fn project(&self, q: &Embedding) -> Result<Vec<f64>> {
        if q.dim() != self.d {
            return Err(Error::DimMismatch {
                expected: self.d,
                got: q.dim(),
            });
        }
        if !self.projection {
            return Ok(q.values.clone());
        }
        let mut e = vec![0.0; self.key_dim];
        math::matvec(
            &self.params[self.p_offset()..],
            self.key_dim,
            self.d,
            &q.values,
            &mut e,
        );
        Ok(e)
    }

    pub fn similarities(&self, q: &Embedding) -> Result<Vec<f64>> {
        let e = self.project(q)?;
        Ok((0..self.n).map(|i| cos(&e, self.key(i))).collect())
    }

    /// Softmax over cosines; a zero question embedding routes uniformly.
    pub fn sim_route(&self, q: &Embedding) -> Result<RoutingDistribution> {
        let sims = self.similarities(q)?;
        RoutingDistribution::from_logits(&sims)
    }

    /// Sample-LLM loss for one question and its gradient.
    pub fn sample_llm_with_grad(
        &self,
        q: &Embedding,
        pos: usize,
        neg: usize,
        scale: f64,
        grad: Option<&mut [f64]>,
    ) -> Result<f64> {
        let e = self.project(q)?;
        let (sp, sn) = (cos(&e, self.key(pos)), cos(&e, self.key(neg)));
        let loss = sample_llm_loss(sp, sn);
        if let Some(g) = grad {
            // dL/ds+ = -σ(s- - s+), dL/ds- = σ(s- - s+)
            let w = scale * math::sigmoid(sn - sp);
            let mut de = vec![0.0; self.key_dim];
            for (k, coef) in [(pos, -w), (neg, w)] {
                let kd = self.key_dim;
                let (da, db) = cos_grad(&e, self.key(k));
                math::axpy(coef, &da, &mut de);
                math::axpy(coef, &db, &mut g[k * kd..(k + 1) * kd]);
            }
            self.backprop_projection(&de, &q.values, g);
        }
        Ok(loss)
    }

    /// Sample-sample loss for an anchor, one in-group positive and the
    /// out-group negatives, with its gradient.
    pub fn sample_sample_with_grad(
        &self,
        anchor: &Embedding,
        positive: &Embedding,
        negatives: &[&Embedding],
        scale: f64,
        mut grad: Option<&mut [f64]>,
    ) -> Result<f64> {
        if negatives.is_empty() {
            return Ok(0.0);
        }
        let ea = self.project(anchor)?;
        let others: Vec<(&Embedding, Vec<f64>)> = std::iter::once(positive)
            .chain(negatives.iter().copied())
            .map(|q| Ok((q, self.project(q)?)))
            .collect::<Result<_>>()?;
        let sims: Vec<f64> = others.iter().map(|(_, e)| cos(&ea, e)).collect();
        let loss = sample_sample_loss(sims[0], &sims[1..]);
        if let Some(g) = grad.as_deref_mut() {
            if self.projection {
                let mut coefs = math::softmax(&sims);
                coefs[0] -= 1.0;
                let mut dea = vec![0.0; self.key_dim];
                for ((q, e), c) in others.iter().zip(&coefs) {
                    let (da, db) = cos_grad(&ea, e);
                    math::axpy(scale * c, &da, &mut dea);
                    let deb: Vec<f64> = db.iter().map(|x| scale * c * x).collect();
                    self.backprop_projection(&deb, &q.values, g);
                }
                self.backprop_projection(&dea, &anchor.values, g);
            }
        }
        Ok(loss)
    }

    fn backprop_projection(&self, de: &[f64], q: &[f64], g: &mut [f64]) {
        if self.projection {
            let off = self.p_offset();
            math::outer_acc(&mut g[off..], self.d, 1.0, de, q);
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let header = json!({
            "kind": "sim-router",
            "n": self.n,
            "dim": self.key_dim,
            "proj_dim": if self.projection { Some(self.d) } else { None },
            "input_dim": self.d,
            "seed": self.seed,
        });
        checkpoint::write(path, &header, &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (h, params) = checkpoint::read_kind(path, "sim-router")?;
        let field = |k: &str| {
            h.get(k)
                .and_then(|v| v.as_u64())
                .ok_or_else(|| Error::Checkpoint(format!("missing {k}")))
        };
        let n = field("n")? as usize;
        let key_dim = field("dim")? as usize;
        let d = field("input_dim")? as usize;
        let projection = h.get("proj_dim").is_some_and(|v| !v.is_null());
        let expected = n * key_dim + if projection { key_dim * d } else { 0 };
        if params.len() != expected {
            return Err(Error::Checkpoint(
                "parameter count does not match header".into(),
            ));
        }
        Ok(Self {
            n,
            key_dim,
            d,
            projection,
            params,
            seed: field("seed")?,
        })
    }
}

impl Router for SimRouter {
    fn n_teachers(&self) -> usize {
        self.n
    }

    fn route(&self, q: &Embedding) -> Result<RoutingDistribution> {
        self.sim_route(q)
    }
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (math::norm(a), math::norm(b));
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        math::dot(a, b) / (na * nb)
    }
}

/// Partial derivatives of `cos(a, b)` with respect to `a` and `b`.
fn cos_grad(a: &[f64], b: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (na, nb) = (math::norm(a), math::norm(b));
    if na == 0.0 || nb == 0.0 {
        return (vec![0.0; a.len()], vec![0.0; b.len()]);
    }
    let c = math::dot(a, b) / (na * nb);
    let da = a
        .iter()
        .zip(b)
        .map(|(x, y)| y / (na * nb) - c * x / (na * na))
        .collect();
    let db = a
        .iter()
        .zip(b)
        .map(|(x, y)| x / (na * nb) - c * y / (nb * nb))
        .collect();
    (da, db)
}

/// `-ln(e^{s+} / (e^{s+} + e^{s-}))`
pub fn sample_llm_loss(s_pos: f64, s_neg: f64) -> f64 {
    math::log_sum_exp(&[s_pos, s_neg]) - s_pos
}

/// `-ln(e^{s+} / (e^{s+} + Σ e^{s-}))`; zero when there are no negatives.
pub fn sample_sample_loss(s_pos: f64, s_negs: &[f64]) -> f64 {
    if s_negs.is_empty() {
        return 0.0;
    }
    let mut all = Vec::with_capacity(s_negs.len() + 1);
    all.push(s_pos);
    all.extend_from_slice(s_negs);
    math::log_sum_exp(&all) - s_pos
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub key_dim: usize,
    pub projection: bool,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            key_dim: DEFAULT_KEY_DIM,
            projection: false,
            lr: 2e-5,
            weight_decay: 0.0,
            batch_size: 16,
            epochs: 5000,
            seed: 0,
        }
    }
}

/// One public-set question as the trainer sees it.
#[derive(Debug, Clone)]
pub struct SimExample<'a> {
    pub embedding: &'a Embedding,
    /// Dataset the question came from.
    pub group: &'a str,
    /// Binary score per teacher.
    pub correct: Vec<bool>,
}

/// Positive and negative teacher for one question, drawn uniformly among
/// the correct and incorrect teachers. `None` when either class is empty.
pub fn draw_pair(correct: &[bool], rng: &mut seed::Rng) -> Option<(usize, usize)> {
    let pos: Vec<usize> = (0..correct.len()).filter(|&i| correct[i]).collect();
    let neg: Vec<usize> = (0..correct.len()).filter(|&i| !correct[i]).collect();
    Some((*pos.choose(rng)?, *neg.choose(rng)?))
}

/// Order items so consecutive positions cycle through the groups, which
/// puts at least two groups in every batch whenever two exist.
fn interleave(items: &[SimExample<'_>], rng: &mut seed::Rng) -> Vec<usize> {
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, it) in items.iter().enumerate() {
        groups.entry(it.group).or_default().push(i);
    }
    let mut queues: Vec<Vec<usize>> = groups.into_values().collect();
    queues.shuffle(rng);
    for q in &mut queues {
        q.shuffle(rng);
        q.reverse();
    }
    let mut out = Vec::with_capacity(items.len());
    while out.len() < items.len() {
        for q in &mut queues {
            if let Some(i) = q.pop() {
                out.push(i);
            }
        }
    }
    out
}

/// Train both contrastive terms per batch. Returns the mean combined loss
/// per epoch.
pub fn train_sim(
    mut router: SimRouter,
    items: &[SimExample<'_>],
    config: &SimConfig,
) -> Result<(SimRouter, Vec<f64>)> {
    if items.is_empty() {
        return Err(Error::Empty("similarity router training set"));
    }
    if config.batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    if let Some(it) = items.iter().find(|it| it.correct.len() != router.n) {
        return Err(Error::LengthMismatch {
            what: "teacher scores vs router teachers",
            left: it.correct.len(),
            right: router.n,
        });
    }
    let mut opt = AdamW::new(
        AdamWConfig {
            lr: config.lr,
            weight_decay: config.weight_decay,
            ..AdamWConfig::default()
        },
        router.params.len(),
    );
    let mut order_rng = seed::rng(config.seed, seed::SHUFFLE);
    let mut tie_rng = seed::rng(config.seed, seed::TIES);
    let mut grad = vec![0.0; router.params.len()];
    let mut losses = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        let order = interleave(items, &mut order_rng);
        let pairs: Vec<Option<(usize, usize)>> = items
            .iter()
            .map(|it| draw_pair(&it.correct, &mut tie_rng))
            .collect();
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(config.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let llm: Vec<(usize, (usize, usize))> = batch
                .iter()
                .filter_map(|&i| pairs[i].map(|p| (i, p)))
                .collect();
            let mut loss = 0.0;
            if !llm.is_empty() {
                let scale = 1.0 / llm.len() as f64;
                for &(i, (p, n)) in &llm {
                    loss += scale
                        * router.sample_llm_with_grad(
                            items[i].embedding,
                            p,
                            n,
                            scale,
                            Some(&mut grad),
                        )?;
                }
            }
            let mut anchors = Vec::new();
            for &a in batch {
                let same: Vec<usize> = batch
                    .iter()
                    .copied()
                    .filter(|&j| j != a && items[j].group == items[a].group)
                    .collect();
                if let Some(&p) = same.choose(&mut tie_rng) {
                    let negs: Vec<&Embedding> = batch
                        .iter()
                        .filter(|&&j| items[j].group != items[a].group)
                        .map(|&j| items[j].embedding)
                        .collect();
                    anchors.push((a, p, negs));
                }
            }
            if !anchors.is_empty() {
                let scale = 1.0 / anchors.len() as f64;
                for (a, p, negs) in &anchors {
                    loss += scale
                        * router.sample_sample_with_grad(
                            items[*a].embedding,
                            items[*p].embedding,
                            negs,
                            scale,
                            Some(&mut grad),
                        )?;
                }
            }
            opt.step(&mut router.params, &grad, "similarity router")?;
            epoch_loss += loss;
            batches += 1;
        }
        losses.push(epoch_loss / batches as f64);
    }
    Ok((router, losses))
}
