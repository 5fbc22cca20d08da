//! Classifier router: a two-layer perceptron over the frozen question
//! embedding, softmax over teachers, trained with cross-entropy against the
//! optimal-teacher label.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint;
use crate::encoder::Embedding;
use crate::error::{Error, Result};
use crate::math;
use crate::optim::{AdamW, AdamWConfig};
use crate::purify::{Router, RoutingDistribution};
use crate::seed;

pub const DEFAULT_HIDDEN: usize = 128;

/// Parameters laid out flat as `[W1 (hidden x d) | b1 | W2 (n x hidden) | b2]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpRouter {
    pub d: usize,
    pub hidden: usize,
    pub n: usize,
    pub params: Vec<f64>,
    pub seed: u64,
    pub epochs_trained: usize,
}

impl MlpRouter {
    pub fn zeros(d: usize, hidden: usize, n: usize) -> Self {
        Self {
            d,
            hidden,
            n,
            params: vec![0.0; hidden * d + hidden + n * hidden + n],
            seed: 0,
            epochs_trained: 0,
        }
    }

    /// Uniform `±1/sqrt(fan_in)` for every weight and bias.
    pub fn new(d: usize, hidden: usize, n: usize, seed: u64) -> Self {
        let mut r = Self::zeros(d, hidden, n);
        r.seed = seed;
        let mut rng = seed::rng(seed, seed::INIT);
        let first = hidden * d + hidden;
        let (b1, b2) = (1.0 / (d as f64).sqrt(), 1.0 / (hidden as f64).sqrt());
        for (i, p) in r.params.iter_mut().enumerate() {
            let bound = if i < first { b1 } else { b2 };
            *p = rng.random_range(-bound..bound);
        }
        r
    }

    fn offsets(&self) -> [usize; 4] {
        let w1 = self.hidden * self.d;
        let b1 = w1 + self.hidden;
        let w2 = b1 + self.n * self.hidden;
        [w1, b1, w2, w2 + self.n]
    }

    fn check(&self, q: &Embedding) -> Result<()> {
        if q.dim() != self.d {
            return Err(Error::DimMismatch {
                expected: self.d,
                got: q.dim(),
            });
        }
        Ok(())
    }

    /// Pre-activation hidden layer and output logits.
    fn forward_raw(&self, q: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let [o1, o2, o3, _] = self.offsets();
        let p = &self.params;
        let mut h1 = vec![0.0; self.hidden];
        math::matvec(&p[..o1], self.hidden, self.d, q, &mut h1);
        math::axpy(1.0, &p[o1..o2], &mut h1);
        let a: Vec<f64> = h1.iter().map(|x| x.max(0.0)).collect();
        let mut logits = vec![0.0; self.n];
        math::matvec(&p[o2..o3], self.n, self.hidden, &a, &mut logits);
        math::axpy(1.0, &p[o3..], &mut logits);
        (h1, logits)
    }

    pub fn forward(&self, q: &Embedding) -> Result<RoutingDistribution> {
        self.check(q)?;
        let (_, logits) = self.forward_raw(&q.values);
        RoutingDistribution::from_logits(&logits)
    }

    /// Cross-entropy against `label`, adding `scale * dCE/dθ` into `grad`.
    pub fn ce_with_grad(
        &self,
        q: &Embedding,
        label: usize,
        scale: f64,
        grad: Option<&mut [f64]>,
    ) -> Result<f64> {
        self.check(q)?;
        let (h1, logits) = self.forward_raw(&q.values);
        let loss = math::log_sum_exp(&logits) - logits[label];
        if let Some(g) = grad {
            let [o1, o2, o3, _] = self.offsets();
            let mut dl = math::softmax(&logits);
            dl[label] -= 1.0;
            dl.iter_mut().for_each(|x| *x *= scale);
            let a: Vec<f64> = h1.iter().map(|x| x.max(0.0)).collect();
            math::outer_acc(&mut g[o2..o3], self.hidden, 1.0, &dl, &a);
            math::axpy(1.0, &dl, &mut g[o3..]);
            let mut dh = vec![0.0; self.hidden];
            math::matvec_t(&self.params[o2..o3], self.n, self.hidden, &dl, &mut dh);
            for (d, h) in dh.iter_mut().zip(&h1) {
                if *h <= 0.0 {
                    *d = 0.0;
                }
            }
            math::outer_acc(&mut g[..o1], self.d, 1.0, &dh, &q.values);
            math::axpy(1.0, &dh, &mut g[o1..o2]);
        }
        Ok(loss)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let header = json!({
            "kind": "cls-router",
            "d": self.d,
            "hidden": self.hidden,
            "n": self.n,
            "seed": self.seed,
            "epochs_trained": self.epochs_trained,
        });
        checkpoint::write(path, &header, &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (h, params) = checkpoint::read_kind(path, "cls-router")?;
        let field = |k: &str| {
            h.get(k)
                .and_then(|v| v.as_u64())
                .ok_or_else(|| Error::Checkpoint(format!("missing {k}")))
        };
        let mut r = Self::zeros(
            field("d")? as usize,
            field("hidden")? as usize,
            field("n")? as usize,
        );
        if params.len() != r.params.len() {
            return Err(Error::Checkpoint(
                "parameter count does not match header".into(),
            ));
        }
        r.params = params;
        r.seed = field("seed")?;
        r.epochs_trained = field("epochs_trained")? as usize;
        Ok(r)
    }
}

impl Router for MlpRouter {
    fn n_teachers(&self) -> usize {
        self.n
    }

    fn route(&self, q: &Embedding) -> Result<RoutingDistribution> {
        self.forward(q)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClsConfig {
    pub hidden: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for ClsConfig {
    fn default() -> Self {
        Self {
            hidden: DEFAULT_HIDDEN,
            lr: 5e-5,
            weight_decay: 0.0,
            batch_size: 16,
            epochs: 5000,
            seed: 0,
        }
    }
}

/// Train on `(embedding, optimal teacher)` pairs. Returns the mean
/// cross-entropy of every epoch.
pub fn train_cls(
    mut router: MlpRouter,
    data: &[(&Embedding, usize)],
    config: &ClsConfig,
) -> Result<(MlpRouter, Vec<f64>)> {
    if data.is_empty() {
        return Err(Error::Empty("router label set"));
    }
    if config.batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    if let Some((_, t)) = data.iter().find(|(_, t)| *t >= router.n) {
        return Err(Error::UnknownTeacher(t.to_string()));
    }
    let mut opt = AdamW::new(
        AdamWConfig {
            lr: config.lr,
            weight_decay: config.weight_decay,
            ..AdamWConfig::default()
        },
        router.params.len(),
    );
    let mut rng = seed::rng(config.seed, seed::SHUFFLE);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut grad = vec![0.0; router.params.len()];
    let mut losses = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let scale = 1.0 / chunk.len() as f64;
            for &i in chunk {
                let (q, t) = data[i];
                total += router.ce_with_grad(q, t, scale, Some(&mut grad))?;
            }
            opt.step(&mut router.params, &grad, "classifier router")?;
        }
        losses.push(total / data.len() as f64);
        router.epochs_trained += 1;
    }
    Ok((router, losses))
}
