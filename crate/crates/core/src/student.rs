//! The student: a small autoregressive token model and the distillation
//! objectives built on it.
//!
//! The model averages token embeddings over everything seen so far, passes
//! the mean through one affine map and `tanh`, and scores the next token
//! against the same embedding table (tied output). It is the smallest model
//! that still has a proper next-token distribution, so the token-level
//! losses mean exactly what they mean for a large model.
//!
//! All parameters live in one flat vector laid out as `[E | H | c]` with
//! `E: V x h`, `H: h x h` and `c: h`.

use std::collections::HashMap;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint;
use crate::corpus::{prompt_tokens, tokenize, Corpus, PromptTag, Question, Split, Vocab};
use crate::error::{Error, Result};
use crate::math;
use crate::optim::{AdamW, AdamWConfig};
use crate::purify::PurifiedRationale;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudentConfig {
    pub hidden: usize,
    pub vocab_buckets: u32,
    pub vocab_seed: u64,
}

impl Default for StudentConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            vocab_buckets: 4096,
            vocab_seed: 0,
        }
    }
}

impl StudentConfig {
    pub fn vocab(&self) -> Vocab {
        Vocab::new(self.vocab_buckets, self.vocab_seed)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudentModel {
    vocab: Vocab,
    hidden: usize,
    params: Vec<f64>,
}

impl StudentModel {
    /// Seeded initialization: `E ~ U(-0.1, 0.1)`, `H ~ U(±1/sqrt(h))`, `c = 0`.
    pub fn new(config: &StudentConfig, seed: u64) -> Self {
        let mut m = Self::zeros(config);
        let mut rng = seed::rng(seed, seed::INIT);
        let v = m.vocab_size();
        let h = m.hidden;
        let bound = 1.0 / (h as f64).sqrt();
        for (i, p) in m.params.iter_mut().enumerate() {
            if i < v * h {
                *p = rng.random_range(-0.1..0.1);
            } else if i < v * h + h * h {
                *p = rng.random_range(-bound..bound);
            }
        }
        m
    }

    /// All-zero parameters: every next-token distribution is uniform.
    pub fn zeros(config: &StudentConfig) -> Self {
        let vocab = config.vocab();
        let h = config.hidden.max(1);
        let n = vocab.size() * h + h * h + h;
        Self {
            vocab,
            hidden: h,
            params: vec![0.0; n],
        }
    }

    pub fn from_params(config: &StudentConfig, params: Vec<f64>) -> Result<Self> {
        let mut m = Self::zeros(config);
        if params.len() != m.params.len() {
            return Err(Error::LengthMismatch {
                what: "student parameters",
                left: m.params.len(),
                right: params.len(),
            });
        }
        m.params = params;
        Ok(m)
    }

    pub fn config(&self) -> StudentConfig {
        StudentConfig {
            hidden: self.hidden,
            vocab_buckets: self.vocab.buckets,
            vocab_seed: self.vocab.seed,
        }
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.size()
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn blocks(&self) -> (&[f64], &[f64], &[f64]) {
        let vh = self.vocab_size() * self.hidden;
        let (e, rest) = self.params.split_at(vh);
        let (hm, c) = rest.split_at(self.hidden * self.hidden);
        (e, hm, c)
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        let v = self.vocab_size();
        match tokens.iter().find(|&&t| t as usize >= v) {
            Some(&t) => Err(Error::Config(format!(
                "token {t} outside vocabulary of size {v}"
            ))),
            None => Ok(()),
        }
    }

    /// Hidden state `tanh(H x + c)` for the mean embedding `x` of `sum / m`.
    fn hidden_state(&self, sum: &[f64], m: usize, x: &mut [f64], z: &mut [f64]) {
        let (_, hm, c) = self.blocks();
        let h = self.hidden;
        let inv = if m == 0 { 0.0 } else { 1.0 / m as f64 };
        for (xi, si) in x.iter_mut().zip(sum) {
            *xi = si * inv;
        }
        math::matvec(hm, h, h, x, z);
        for (zi, ci) in z.iter_mut().zip(c) {
            *zi = (*zi + ci).tanh();
        }
    }

    /// Next-token distribution after `context`.
    pub fn next_token_probs(&self, context: &[u32]) -> Result<Vec<f64>> {
        self.check_tokens(context)?;
        let (e, _, _) = self.blocks();
        let h = self.hidden;
        let mut sum = vec![0.0; h];
        for &t in context {
            math::axpy(1.0, &e[t as usize * h..(t as usize + 1) * h], &mut sum);
        }
        let (mut x, mut z) = (vec![0.0; h], vec![0.0; h]);
        self.hidden_state(&sum, context.len(), &mut x, &mut z);
        let mut logits = vec![0.0; self.vocab_size()];
        math::matvec(e, self.vocab_size(), h, &z, &mut logits);
        math::softmax_in_place(&mut logits);
        Ok(logits)
    }

    /// `sum_i -ln p(target_i | context, target_<i)` in nats.
    pub fn nll_sequence(&self, context: &[u32], target: &[u32]) -> Result<f64> {
        self.nll_with_grad(context, target, 0.0, None)
    }

    /// As [`Self::nll_sequence`], additionally accumulating `scale * dNLL/dθ`
    /// into `grad` when given.
    pub fn nll_with_grad(
        &self,
        context: &[u32],
        target: &[u32],
        scale: f64,
        mut grad: Option<&mut [f64]>,
    ) -> Result<f64> {
        if target.is_empty() {
            return Err(Error::Empty("target sequence"));
        }
        self.check_tokens(context)?;
        self.check_tokens(target)?;
        let (e, hm, _) = self.blocks();
        let v = self.vocab_size();
        let h = self.hidden;
        let row = |t: u32| &e[t as usize * h..(t as usize + 1) * h];

        let mut sum = vec![0.0; h];
        for &t in context {
            math::axpy(1.0, row(t), &mut sum);
        }
        let (mut x, mut z) = (vec![0.0; h], vec![0.0; h]);
        let mut logits = vec![0.0; v];
        let mut du = vec![0.0; h];
        let mut dx = vec![0.0; h];
        // per-position gradient w.r.t. each averaged input embedding
        let mut g_in: Vec<f64> = if grad.is_some() {
            vec![0.0; target.len() * h]
        } else {
            Vec::new()
        };
        let mut nll = 0.0;

        for (i, &tok) in target.iter().enumerate() {
            let m = context.len() + i;
            self.hidden_state(&sum, m, &mut x, &mut z);
            math::matvec(e, v, h, &z, &mut logits);
            let lse = math::log_sum_exp(&logits);
            nll += lse - logits[tok as usize];

            if let Some(g) = grad.as_deref_mut() {
                let (ge, rest) = g.split_at_mut(v * h);
                let (gh, gc) = rest.split_at_mut(h * h);
                // dlogits = scale * (p - onehot), written back into `logits`
                for l in logits.iter_mut() {
                    *l = scale * (*l - lse).exp();
                }
                logits[tok as usize] -= scale;
                // output side of the tied table, and dz = E^T dlogits
                math::outer_acc(ge, h, 1.0, &logits, &z);
                math::matvec_t(e, v, h, &logits, &mut du);
                for (d, zi) in du.iter_mut().zip(&z) {
                    *d *= 1.0 - zi * zi;
                }
                math::outer_acc(gh, h, 1.0, &du, &x);
                math::axpy(1.0, &du, gc);
                if m > 0 {
                    math::matvec_t(hm, h, h, &du, &mut dx);
                    let gi = &mut g_in[i * h..(i + 1) * h];
                    for (o, d) in gi.iter_mut().zip(&dx) {
                        *o = d / m as f64;
                    }
                }
            }
            math::axpy(1.0, row(tok), &mut sum);
        }

        if let Some(g) = grad {
            // Token k of the target is averaged into positions k+1.., every
            // context token into all positions: accumulate suffix sums.
            let ge = &mut g[..v * h];
            let mut acc = vec![0.0; h];
            for i in (0..target.len()).rev() {
                math::axpy(1.0, &g_in[i * h..(i + 1) * h], &mut acc);
                let t = if i == 0 { None } else { Some(target[i - 1]) };
                if let Some(t) = t {
                    math::axpy(1.0, &acc, &mut ge[t as usize * h..(t as usize + 1) * h]);
                }
            }
            for &t in context {
                math::axpy(1.0, &acc, &mut ge[t as usize * h..(t as usize + 1) * h]);
            }
        }
        Ok(nll)
    }

    /// Length-normalized NLL of each option; the argmin is the prediction.
    pub fn option_scores(&self, q: &QuestionTokens) -> Result<Vec<f64>> {
        q.options
            .iter()
            .map(|o| Ok(self.nll_sequence(&q.predict_ctx, o)? / o.len() as f64))
            .collect()
    }

    /// Option index with the lowest length-normalized NLL; ties go to the
    /// lowest index.
    pub fn predict_option(&self, q: &QuestionTokens) -> Result<usize> {
        Ok(math::argmin(&self.option_scores(q)?))
    }
}

impl StudentModel {
    /// Write a checkpoint; `extra` lands in the header (training config,
    /// seed). Returns the checkpoint id.
    pub fn write(&self, path: &Path, extra: serde_json::Value) -> Result<String> {
        let cfg = self.config();
        let header = json!({
            "kind": "student",
            "hidden": cfg.hidden,
            "vocab_buckets": cfg.vocab_buckets,
            "vocab_seed": cfg.vocab_seed,
            "extra": extra,
        });
        let bytes = checkpoint::encode(&header, &self.params)?;
        std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
        Ok(checkpoint::id_of(&bytes))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (h, params) = checkpoint::read_kind(path, "student")?;
        let field = |k: &str| {
            h.get(k)
                .and_then(|v| v.as_u64())
                .ok_or_else(|| Error::Checkpoint(format!("missing {k}")))
        };
        let cfg = StudentConfig {
            hidden: field("hidden")? as usize,
            vocab_buckets: field("vocab_buckets")? as u32,
            vocab_seed: field("vocab_seed")?,
        };
        Self::from_params(&cfg, params)
    }
}

/// Tokens the student needs for one question, computed once.
#[derive(Debug, Clone, PartialEq)]
pub struct QuestionTokens {
    pub predict_ctx: Vec<u32>,
    pub rationale_ctx: Vec<u32>,
    pub options: Vec<Vec<u32>>,
    pub gold: usize,
}

impl QuestionTokens {
    pub fn new(q: &Question, vocab: &Vocab) -> Self {
        let options = q
            .options
            .iter()
            .map(|o| {
                let t = tokenize(o, vocab);
                // an option made only of punctuation still needs a target
                if t.is_empty() {
                    vec![Vocab::UNKFREE]
                } else {
                    t
                }
            })
            .collect();
        Self {
            predict_ctx: prompt_tokens(q, PromptTag::PredictOption, vocab),
            rationale_ctx: prompt_tokens(q, PromptTag::GenerateRationale, vocab),
            options,
            gold: q.gold_index,
        }
    }

    pub fn gold_tokens(&self) -> &[u32] {
        &self.options[self.gold]
    }
}

/// Tokenized view of a corpus.
#[derive(Debug, Clone)]
pub struct TokenizedCorpus {
    pub questions: Vec<QuestionTokens>,
    rationales: HashMap<(usize, usize), Vec<u32>>,
}

impl TokenizedCorpus {
    pub fn new(corpus: &Corpus, vocab: &Vocab) -> Self {
        let questions = corpus
            .questions()
            .iter()
            .map(|q| QuestionTokens::new(q, vocab))
            .collect();
        let mut rationales = HashMap::new();
        for qi in 0..corpus.questions().len() {
            for ti in 0..corpus.ensemble().len() {
                if let Some(r) = corpus.rationale(qi, ti) {
                    rationales.insert((qi, ti), tokenize(&r.rationale_text, vocab));
                }
            }
        }
        Self {
            questions,
            rationales,
        }
    }

    pub fn rationale(&self, qi: usize, ti: usize) -> Option<&[u32]> {
        self.rationales.get(&(qi, ti)).map(Vec::as_slice)
    }
}

pub fn loss_kd(l_pr: f64, l_dl: f64, lambda: f64) -> f64 {
    l_pr + lambda * l_dl
}

pub fn loss_mtkd(l_pr: f64, l_dl_per_teacher: &[f64], lambdas: &[f64]) -> Result<f64> {
    if l_dl_per_teacher.len() != lambdas.len() {
        return Err(Error::LengthMismatch {
            what: "per-teacher losses vs weights",
            left: l_dl_per_teacher.len(),
            right: lambdas.len(),
        });
    }
    let weighted: f64 = l_dl_per_teacher
        .iter()
        .zip(lambdas)
        .map(|(l, w)| w * l)
        .sum();
    Ok(l_pr + weighted)
}

pub fn loss_mtkd_kp(l_pr: f64, l_dl_kp: f64, lambda: f64) -> f64 {
    loss_kd(l_pr, l_dl_kp, lambda)
}

/// `λ_j = λ / n` for every teacher of an `n`-teacher ensemble.
pub fn lambda_schedule(lambda: f64, n: usize) -> Vec<f64> {
    vec![lambda / n as f64; n]
}

/// Mean prediction loss over a batch.
pub fn loss_pr(model: &StudentModel, batch: &[&QuestionTokens]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let mut total = 0.0;
    for q in batch {
        total += model.nll_sequence(&q.predict_ctx, q.gold_tokens())?;
    }
    Ok(total / batch.len() as f64)
}

/// Mean rationale loss over a batch; `rationales[i]` belongs to `batch[i]`.
pub fn loss_dl(
    model: &StudentModel,
    batch: &[&QuestionTokens],
    rationales: &[&[u32]],
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    if batch.len() != rationales.len() {
        return Err(Error::LengthMismatch {
            what: "batch vs rationales",
            left: batch.len(),
            right: rationales.len(),
        });
    }
    let mut total = 0.0;
    for (q, r) in batch.iter().zip(rationales) {
        total += model.nll_sequence(&q.rationale_ctx, r)?;
    }
    Ok(total / batch.len() as f64)
}

/// One distillation example: the question plus one rationale per weight slot.
#[derive(Debug, Clone)]
pub struct DistillExample<'a> {
    pub question: &'a QuestionTokens,
    pub rationales: Vec<&'a [u32]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchLoss {
    pub l_pr: f64,
    /// Unweighted sum of the per-slot rationale losses.
    pub l_dl: f64,
    pub total: f64,
}

/// `loss_mtkd` over a batch with one weight per rationale slot, and its
/// gradient accumulated into `grad` when given. With a single slot this is
/// exactly `loss_kd`.
pub fn batch_objective(
    model: &StudentModel,
    batch: &[DistillExample<'_>],
    lambdas: &[f64],
    mut grad: Option<&mut [f64]>,
) -> Result<BatchLoss> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let inv_b = 1.0 / batch.len() as f64;
    let mut pr = 0.0;
    let mut dl = vec![0.0; lambdas.len()];
    for ex in batch {
        if ex.rationales.len() != lambdas.len() {
            return Err(Error::LengthMismatch {
                what: "rationale slots vs weights",
                left: ex.rationales.len(),
                right: lambdas.len(),
            });
        }
        pr += model.nll_with_grad(
            &ex.question.predict_ctx,
            ex.question.gold_tokens(),
            inv_b,
            grad.as_deref_mut(),
        )?;
        for (j, r) in ex.rationales.iter().enumerate() {
            dl[j] += model.nll_with_grad(
                &ex.question.rationale_ctx,
                r,
                lambdas[j] * inv_b,
                grad.as_deref_mut(),
            )?;
        }
    }
    let l_pr = pr * inv_b;
    dl.iter_mut().for_each(|d| *d *= inv_b);
    Ok(BatchLoss {
        l_pr,
        l_dl: dl.iter().sum(),
        total: loss_mtkd(l_pr, &dl, lambdas)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub lambda: f64,
    /// Per-teacher weights for the all-teacher objective; `None` means `λ/n`.
    pub lambda_per_teacher: Option<Vec<f64>>,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            lambda: 4.0,
            lambda_per_teacher: None,
            learning_rate: 1e-2,
            weight_decay: 0.0,
            batch_size: 8,
            epochs: 10,
            seed: 0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) {
            return Err(Error::Config("lambda must be positive".into()));
        }
        if let Some(l) = &self.lambda_per_teacher {
            if l.iter().any(|x| !(*x > 0.0)) {
                return Err(Error::Config("per-teacher lambdas must be positive".into()));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.learning_rate,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }

    fn teacher_weights(&self, n: usize) -> Result<Vec<f64>> {
        match &self.lambda_per_teacher {
            Some(l) if l.len() == n => Ok(l.clone()),
            Some(l) => Err(Error::LengthMismatch {
                what: "lambda_per_teacher vs ensemble",
                left: l.len(),
                right: n,
            }),
            None => Ok(lambda_schedule(self.lambda, n)),
        }
    }
}

/// Which rationales the student learns from.
#[derive(Debug, Clone, Copy)]
pub enum Strategy<'a> {
    SingleTeacher(usize),
    AllTeachers,
    /// One purified rationale per training question, keyed by question id.
    Purified(&'a HashMap<String, PurifiedRationale>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub l_pr: f64,
    pub l_dl: f64,
    pub total: f64,
    pub wall_ms: u64,
}

/// Rationale slots and their weights for one training question.
fn slots<'a>(
    corpus: &Corpus,
    tokens: &'a TokenizedCorpus,
    strategy: &Strategy<'a>,
    qi: usize,
) -> Result<Vec<&'a [u32]>> {
    let missing = || Error::MissingRationale(corpus.questions()[qi].id.clone());
    match strategy {
        Strategy::SingleTeacher(t) => Ok(vec![tokens.rationale(qi, *t).ok_or_else(missing)?]),
        Strategy::AllTeachers => (0..corpus.ensemble().len())
            .map(|t| tokens.rationale(qi, t).ok_or_else(missing))
            .collect(),
        Strategy::Purified(map) => {
            let r = map.get(&corpus.questions()[qi].id).ok_or_else(missing)?;
            Ok(vec![r.tokens.as_slice()])
        }
    }
}

/// Train a fresh student on the corpus' train split.
pub fn train_distill(
    corpus: &Corpus,
    strategy: Strategy<'_>,
    student: &StudentConfig,
    config: &DistillConfig,
) -> Result<(StudentModel, Vec<EpochLog>)> {
    config.validate()?;
    let train = corpus.split_indices(Split::Train);
    if train.is_empty() {
        return Err(Error::Empty("train split"));
    }
    let mut model = StudentModel::new(student, config.seed);
    let tokens = TokenizedCorpus::new(corpus, model.vocab());
    let lambdas = match strategy {
        Strategy::AllTeachers => config.teacher_weights(corpus.ensemble().len())?,
        Strategy::SingleTeacher(t) if t >= corpus.ensemble().len() => {
            return Err(Error::UnknownTeacher(t.to_string()))
        }
        _ => vec![config.lambda],
    };
    let examples = train
        .iter()
        .map(|&qi| {
            Ok(DistillExample {
                question: &tokens.questions[qi],
                rationales: slots(corpus, &tokens, &strategy, qi)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut opt = AdamW::new(config.optimizer(), model.params().len());
    let mut rng = seed::rng(config.seed, seed::SHUFFLE);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut grad = vec![0.0; model.params().len()];
    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let mut sums = BatchLoss {
            l_pr: 0.0,
            l_dl: 0.0,
            total: 0.0,
        };
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<DistillExample> = chunk.iter().map(|&i| examples[i].clone()).collect();
            grad.iter_mut().for_each(|g| *g = 0.0);
            let loss = batch_objective(&model, &batch, &lambdas, Some(&mut grad))?;
            opt.step(model.params_mut(), &grad, "student")?;
            sums.l_pr += loss.l_pr;
            sums.l_dl += loss.l_dl;
            sums.total += loss.total;
            batches += 1;
        }
        let k = batches as f64;
        let entry = EpochLog {
            epoch,
            l_pr: sums.l_pr / k,
            l_dl: sums.l_dl / k,
            total: sums.total / k,
            wall_ms: start.elapsed().as_millis() as u64,
        };
        log::debug!(
            "epoch {epoch}: l_pr {:.4} l_dl {:.4} total {:.4}",
            entry.l_pr,
            entry.l_dl,
            entry.total
        );
        log.push(entry);
    }
    Ok((model, log))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> StudentConfig {
        StudentConfig {
            hidden: 6,
            vocab_buckets: 56,
            vocab_seed: 3,
        }
    }

    fn qt(ctx: &[u32], options: &[&[u32]], gold: usize) -> QuestionTokens {
        QuestionTokens {
            predict_ctx: ctx.to_vec(),
            rationale_ctx: ctx.iter().map(|t| t + 1).collect(),
            options: options.iter().map(|o| o.to_vec()).collect(),
            gold,
        }
    }

    #[test]
    fn uniform_model_nll_is_length_times_ln_v() {
        let m = StudentModel::zeros(&small());
        let ln_v = (m.vocab_size() as f64).ln();
        let nll = m.nll_sequence(&[1, 9, 10], &[11, 12, 13]).unwrap();
        assert!((nll - 3.0 * ln_v).abs() < 1e-9);
        assert!(matches!(m.nll_sequence(&[1], &[]), Err(Error::Empty(_))));
    }

    #[test]
    fn probabilities_sum_to_one() {
        let m = StudentModel::new(&small(), 4);
        for len in 0..20u32 {
            let ctx: Vec<u32> = (0..len).map(|i| 8 + (i * 7) % 56).collect();
            let p = m.next_token_probs(&ctx).unwrap();
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn nll_agrees_with_next_token_probs() {
        let m = StudentModel::new(&small(), 5);
        let ctx = [1, 20, 30];
        let target = [40, 41];
        let p0 = m.next_token_probs(&ctx).unwrap()[40];
        let p1 = m.next_token_probs(&[1, 20, 30, 40]).unwrap()[41];
        let nll = m.nll_sequence(&ctx, &target).unwrap();
        assert!((nll + p0.ln() + p1.ln()).abs() < 1e-12);
    }

    #[test]
    fn objective_arithmetic() {
        assert_eq!(loss_kd(1.0, 2.0, 4.0), 9.0);
        assert_eq!(loss_kd(0.7, 0.0, 4.0), 0.7);
        assert_eq!(loss_mtkd(1.0, &[1.0; 4], &[1.0; 4]).unwrap(), 5.0);
        assert_eq!(
            loss_mtkd(0.3, &[0.8], &[4.0]).unwrap(),
            loss_kd(0.3, 0.8, 4.0)
        );
        assert_eq!(loss_mtkd_kp(0.5, 1.0, 4.0), 4.5);
        assert!(loss_mtkd(1.0, &[1.0], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn lambda_schedule_matches_sweep_weights() {
        let expected = [4.0, 2.0, 1.33, 1.0];
        for (n, want) in (1..=4).zip(expected) {
            let w = lambda_schedule(4.0, n);
            assert_eq!(w.len(), n);
            assert!(((w[0] * 100.0).round() / 100.0 - want).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_pr_and_dl_are_means() {
        let m = StudentModel::zeros(&small());
        let ln_v = (m.vocab_size() as f64).ln();
        let q = qt(&[1, 9], &[&[10, 11], &[12]], 0);
        assert!((loss_pr(&m, &[&q]).unwrap() - 2.0 * ln_v).abs() < 1e-9);
        assert_eq!(loss_pr(&m, &[&q, &q]).unwrap(), loss_pr(&m, &[&q]).unwrap());
        let r = [20u32, 21, 22];
        assert!((loss_dl(&m, &[&q], &[&r]).unwrap() - 3.0 * ln_v).abs() < 1e-9);
        assert!(loss_dl(&m, &[&q], &[&[]]).is_err());

        let m = StudentModel::new(&small(), 1);
        let (a, b) = ([20u32][..].to_vec(), [21u32, 22, 23, 24].to_vec());
        let la = loss_dl(&m, &[&q], &[&a]).unwrap();
        let lb = loss_dl(&m, &[&q], &[&b]).unwrap();
        let both = loss_dl(&m, &[&q, &q], &[&a, &b]).unwrap();
        assert!((both - (la + lb) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn uniform_model_predicts_first_option_on_ties() {
        let m = StudentModel::zeros(&small());
        let q = qt(&[1], &[&[10], &[11], &[12]], 2);
        assert_eq!(m.predict_option(&q).unwrap(), 0);
        let single = qt(&[1], &[&[10]], 0);
        assert_eq!(m.predict_option(&single).unwrap(), 0);
    }

    #[test]
    fn one_step_decreases_single_sample_loss() {
        let mut m = StudentModel::new(&small(), 2);
        let q = qt(&[1, 9, 10], &[&[30, 31], &[32]], 0);
        let r = [40u32, 41, 42];
        let ex = [DistillExample {
            question: &q,
            rationales: vec![&r],
        }];
        let mut g = vec![0.0; m.params().len()];
        let before = batch_objective(&m, &ex, &[4.0], Some(&mut g))
            .unwrap()
            .total;
        let mut opt = AdamW::new(AdamWConfig::with_lr(1e-3), g.len());
        opt.step(m.params_mut(), &g, "student").unwrap();
        let after = batch_objective(&m, &ex, &[4.0], None).unwrap().total;
        assert!(after < before, "{after} !< {before}");
    }

    #[test]
    fn overfit_one_question_predicts_its_gold() {
        let mut m = StudentModel::new(&small(), 7);
        let q = qt(&[1, 9, 10, 5], &[&[30, 31], &[32, 33], &[34, 35]], 2);
        let ex = [DistillExample {
            question: &q,
            rationales: vec![],
        }];
        let mut opt = AdamW::new(AdamWConfig::with_lr(5e-2), m.params().len());
        let mut g = vec![0.0; m.params().len()];
        for _ in 0..200 {
            g.iter_mut().for_each(|x| *x = 0.0);
            batch_objective(&m, &ex, &[], Some(&mut g)).unwrap();
            opt.step(m.params_mut(), &g, "student").unwrap();
        }
        assert_eq!(m.predict_option(&q).unwrap(), 2);
    }

    #[test]
    fn nll_gradient_matches_finite_differences() {
        use crate::gradcheck;
        let m = StudentModel::new(&small(), 12);
        let ctx = [1u32, 20, 30, 20, 9];
        let target = [40u32, 41, 20, 63];
        let mut g = vec![0.0; m.params().len()];
        m.nll_with_grad(&ctx, &target, 1.0, Some(&mut g)).unwrap();
        let f = |p: &[f64]| {
            StudentModel::from_params(&small(), p.to_vec())
                .unwrap()
                .nll_sequence(&ctx, &target)
                .unwrap()
        };
        let err = gradcheck::check(f, m.params(), &g, 1e-5);
        assert!(err < 1e-4, "relative error {err}");
    }
}
