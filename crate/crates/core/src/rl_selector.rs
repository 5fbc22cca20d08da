//! Reinforcement-learned teacher selection, trained alternately with the
//! student.
//!
//! Each teacher i sees the state `s_i = [E(q), E(r_i) · 1{teacher i correct}]`
//! and scores it with `σ(W_i s_i + b_i)`; the highest score wins. The policy
//! of an action `a ∈ {0, 1}` is `a σ + (1 - a)(1 - σ)`. After every epoch of
//! distillation the selector is updated from the student's losses on each
//! recorded mini-batch.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint;
use crate::corpus::{Corpus, Split};
use crate::encoder::{CorpusEmbeddings, Embedding};
use crate::error::{Error, Result};
use crate::math;
use crate::optim::AdamW;
use crate::seed;
use crate::student::{
    batch_objective, DistillConfig, DistillExample, EpochLog, StudentConfig, StudentModel,
    TokenizedCorpus,
};

/// `[E(q), E(r) · 1{correct}]`.
pub fn build_state(q: &Embedding, r: &Embedding, correct: bool) -> Result<Vec<f64>> {
    if q.dim() != r.dim() {
        return Err(Error::DimMismatch {
            expected: q.dim(),
            got: r.dim(),
        });
    }
    let mut s = Vec::with_capacity(2 * q.dim());
    s.extend_from_slice(&q.values);
    if correct {
        s.extend_from_slice(&r.values);
    } else {
        s.resize(2 * q.dim(), 0.0);
    }
    Ok(s)
}

/// How the update differentiates the policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyGradient {
    /// `∇π`, as the update rule is written.
    #[default]
    Literal,
    /// `∇ ln π`, the usual REINFORCE estimator.
    LogProb,
}

/// `θ = {W: n x 2d, b: n}` stored flat as `[W | b]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectorParams {
    pub n: usize,
    pub d: usize,
    pub params: Vec<f64>,
}

impl SelectorParams {
    pub fn zeros(n: usize, d: usize) -> Self {
        Self {
            n,
            d,
            params: vec![0.0; n * 2 * d + n],
        }
    }

    /// `W ~ U(±scale)`, `b = 0`.
    pub fn random(n: usize, d: usize, scale: f64, seed: u64) -> Self {
        let mut p = Self::zeros(n, d);
        if scale > 0.0 {
            let mut rng = seed::rng(seed, seed::INIT);
            for w in &mut p.params[..n * 2 * d] {
                *w = rng.random_range(-scale..scale);
            }
        }
        p
    }

    fn state_dim(&self) -> usize {
        2 * self.d
    }

    fn w(&self, i: usize) -> &[f64] {
        let s = self.state_dim();
        &self.params[i * s..(i + 1) * s]
    }

    fn b(&self, i: usize) -> f64 {
        self.params[self.n * self.state_dim() + i]
    }

    pub fn logit(&self, i: usize, s: &[f64]) -> f64 {
        math::dot(self.w(i), s) + self.b(i)
    }

    pub fn score(&self, i: usize, s: &[f64]) -> f64 {
        math::sigmoid(self.logit(i, s))
    }

    /// `σ(W_i s_i + b_i)` for every teacher.
    pub fn scores(&self, states: &[Vec<f64>]) -> Result<Vec<f64>> {
        if states.len() != self.n {
            return Err(Error::LengthMismatch {
                what: "states vs teachers",
                left: states.len(),
                right: self.n,
            });
        }
        states
            .iter()
            .enumerate()
            .map(|(i, s)| {
                if s.len() != self.state_dim() {
                    return Err(Error::DimMismatch {
                        expected: self.state_dim(),
                        got: s.len(),
                    });
                }
                Ok(self.score(i, s))
            })
            .collect()
    }

    /// `π(s, a) = a σ + (1 - a)(1 - σ)` for teacher `i`.
    pub fn policy_prob(&self, i: usize, s: &[f64], a: u8) -> f64 {
        let sigma = self.score(i, s);
        if a == 1 {
            sigma
        } else {
            1.0 - sigma
        }
    }

    /// Add `coef · ∇θ π(s, a)` (or of `ln π`) for teacher `i` into `grad`.
    pub fn accumulate_grad(
        &self,
        i: usize,
        s: &[f64],
        a: u8,
        coef: f64,
        variant: PolicyGradient,
        grad: &mut [f64],
    ) {
        let sigma = self.score(i, s);
        let sign = if a == 1 { 1.0 } else { -1.0 };
        // dπ/dz = ±σ(1-σ); d ln π/dz = 1-σ for a=1 and -σ for a=0
        let dz = match variant {
            PolicyGradient::Literal => sign * sigma * (1.0 - sigma),
            PolicyGradient::LogProb => {
                if a == 1 {
                    1.0 - sigma
                } else {
                    -sigma
                }
            }
        };
        let sd = self.state_dim();
        math::axpy(coef * dz, s, &mut grad[i * sd..(i + 1) * sd]);
        grad[self.n * sd + i] += coef * dz;
    }
}

/// Highest-scoring teacher (lowest index on ties) and the one-hot actions.
pub fn select_teacher(params: &SelectorParams, states: &[Vec<f64>]) -> Result<(usize, Vec<u8>)> {
    let scores = params.scores(states)?;
    let best = math::argmax(&scores);
    let mut actions = vec![0u8; scores.len()];
    actions[best] = 1;
    Ok((best, actions))
}

/// One question's recorded decision.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeStep {
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<u8>,
}

/// `θ ← θ + β Σ_q Σ_i r ∇π(s_i, a_i)` over the steps of one mini-batch.
pub fn reinforce_update(
    params: &mut SelectorParams,
    steps: &[EpisodeStep],
    reward: f64,
    beta: f64,
    variant: PolicyGradient,
) -> Result<()> {
    if !reward.is_finite() {
        return Err(Error::NonFiniteGradient(format!(
            "selector reward {reward}"
        )));
    }
    let mut grad = vec![0.0; params.params.len()];
    for step in steps {
        for (i, (s, &a)) in step.states.iter().zip(&step.actions).enumerate() {
            params.accumulate_grad(i, s, a, reward, variant, &mut grad);
        }
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient(format!("selector parameter {i}")));
    }
    math::axpy(beta, &grad, &mut params.params);
    Ok(())
}

/// A trained selector together with the id of the student it was trained
/// alongside.
#[derive(Debug, Clone, PartialEq)]
pub struct RlSelector {
    pub params: SelectorParams,
    pub student_id: Option<String>,
}

impl RlSelector {
    pub fn states(
        &self,
        q: &Embedding,
        rationales: &[Option<&Embedding>],
        correct: &[bool],
    ) -> Result<Vec<Vec<f64>>> {
        let zero = Embedding::zeros(q.dim());
        rationales
            .iter()
            .zip(correct)
            .map(|(r, &c)| build_state(q, r.unwrap_or(&zero), c))
            .collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let header = json!({
            "kind": "rl-selector",
            "n": self.params.n,
            "d": self.params.d,
            "student_id": self.student_id,
        });
        checkpoint::write(path, &header, &self.params.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (h, params) = checkpoint::read_kind(path, "rl-selector")?;
        let field = |k: &str| {
            h.get(k)
                .and_then(|v| v.as_u64())
                .ok_or_else(|| Error::Checkpoint(format!("missing {k}")))
        };
        let mut p = SelectorParams::zeros(field("n")? as usize, field("d")? as usize);
        if params.len() != p.params.len() {
            return Err(Error::Checkpoint(
                "parameter count does not match header".into(),
            ));
        }
        p.params = params;
        Ok(Self {
            params: p,
            student_id: h
                .get("student_id")
                .and_then(|v| v.as_str())
                .map(str::to_string),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectorConfig {
    pub beta: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub gradient: PolicyGradient,
    /// Subtract the epoch's mean reward before each update. Rewards are
    /// negated losses and so always negative; without a baseline the literal
    /// update pushes down whichever teacher was chosen.
    pub baseline: bool,
    /// Half-width of the uniform initialization of `W`.
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for SelectorConfig {
    fn default() -> Self {
        Self {
            beta: 5e-5,
            epochs: 2,
            batch_size: 8,
            gradient: PolicyGradient::Literal,
            baseline: true,
            init_scale: 0.01,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectorEpochLog {
    pub epoch: usize,
    pub student: EpochLog,
    pub mean_reward: f64,
    /// How often each teacher was selected during the epoch.
    pub selections: Vec<usize>,
}

/// Alternate distillation and selector updates over the train split.
pub fn train_alternating(
    corpus: &Corpus,
    emb: &CorpusEmbeddings,
    student_cfg: &StudentConfig,
    distill: &DistillConfig,
    config: &SelectorConfig,
) -> Result<(StudentModel, RlSelector, Vec<SelectorEpochLog>)> {
    distill.validate()?;
    if config.batch_size == 0 {
        return Err(Error::Config(
            "selector batch_size must be at least 1".into(),
        ));
    }
    let train = corpus.split_indices(Split::Train);
    if train.is_empty() {
        return Err(Error::Empty("train split"));
    }
    let n = corpus.ensemble().len();
    let mut student = StudentModel::new(student_cfg, distill.seed);
    let tokens = TokenizedCorpus::new(corpus, student.vocab());
    let mut selector = RlSelector {
        params: SelectorParams::random(n, emb.dim(), config.init_scale, config.seed),
        student_id: None,
    };
    let mut opt = AdamW::new(distill.optimizer(), student.params().len());
    let mut grad = vec![0.0; student.params().len()];
    let mut rng = seed::rng(config.seed, seed::SHUFFLE);
    let mut order = train.clone();
    let lambda = [distill.lambda];
    let mut logs = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        // history: (question indices, chosen teachers, recorded steps)
        let mut history: Vec<(Vec<usize>, Vec<usize>, Vec<EpisodeStep>)> = Vec::new();
        let mut selections = vec![0usize; n];
        let (mut l_pr, mut l_dl, mut total) = (0.0, 0.0, 0.0);
        for chunk in order.chunks(config.batch_size) {
            let mut chosen = Vec::with_capacity(chunk.len());
            let mut steps = Vec::with_capacity(chunk.len());
            for &qi in chunk {
                let q = &corpus.questions()[qi];
                let correct: Vec<bool> = (0..n)
                    .map(|t| {
                        corpus
                            .rationale(qi, t)
                            .is_some_and(|r| r.predicted_index == q.gold_index)
                    })
                    .collect();
                let rembs: Vec<Option<&Embedding>> = (0..n).map(|t| emb.rationale(qi, t)).collect();
                let states = selector.states(emb.question(qi), &rembs, &correct)?;
                let (t, actions) = select_teacher(&selector.params, &states)?;
                selections[t] += 1;
                chosen.push(t);
                steps.push(EpisodeStep { states, actions });
            }
            let batch = examples(corpus, &tokens, chunk, &chosen)?;
            grad.iter_mut().for_each(|g| *g = 0.0);
            let loss = batch_objective(&student, &batch, &lambda, Some(&mut grad))?;
            opt.step(student.params_mut(), &grad, "student")?;
            l_pr += loss.l_pr;
            l_dl += loss.l_dl;
            total += loss.total;
            history.push((chunk.to_vec(), chosen, steps));
        }

        // r = -L_PR - L_DL on each recorded mini-batch under the current student
        let rewards = history
            .iter()
            .map(|(qs, chosen, _)| {
                let batch = examples(corpus, &tokens, qs, chosen)?;
                let loss = batch_objective(&student, &batch, &lambda, None)?;
                Ok(-loss.l_pr - loss.l_dl)
            })
            .collect::<Result<Vec<f64>>>()?;
        let mean_reward = rewards.iter().sum::<f64>() / rewards.len() as f64;
        for ((_, _, steps), r) in history.iter().zip(&rewards) {
            let r = if config.baseline { r - mean_reward } else { *r };
            reinforce_update(&mut selector.params, steps, r, config.beta, config.gradient)?;
        }

        let k = history.len() as f64;
        let student_log = EpochLog {
            epoch,
            l_pr: l_pr / k,
            l_dl: l_dl / k,
            total: total / k,
            wall_ms: start.elapsed().as_millis() as u64,
        };
        log::debug!(
            "selector epoch {epoch}: mean reward {mean_reward:.4}, selections {selections:?}"
        );
        logs.push(SelectorEpochLog {
            epoch,
            student: student_log,
            mean_reward,
            selections,
        });
    }
    Ok((student, selector, logs))
}

fn examples<'a>(
    corpus: &Corpus,
    tokens: &'a TokenizedCorpus,
    questions: &[usize],
    chosen: &[usize],
) -> Result<Vec<DistillExample<'a>>> {
    questions
        .iter()
        .zip(chosen)
        .map(|(&qi, &t)| {
            let r = tokens
                .rationale(qi, t)
                .ok_or_else(|| Error::MissingRationale(corpus.questions()[qi].id.clone()))?;
            Ok(DistillExample {
                question: &tokens.questions[qi],
                rationales: vec![r],
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;

    fn emb(v: &[f64]) -> Embedding {
        Embedding::new(v.to_vec())
    }

    #[test]
    fn state_zeroes_incorrect_rationales() {
        let q = emb(&[1.0, 0.0, 0.0, 0.0]);
        let r = emb(&[0.0, 1.0, 0.0, 0.0]);
        assert_eq!(
            build_state(&q, &r, false).unwrap(),
            vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]
        );
        assert_eq!(
            build_state(&q, &r, true).unwrap(),
            vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]
        );
        let s = build_state(&q, &emb(&[0.0; 4]), true).unwrap();
        assert!(s[4..].iter().all(|&x| x == 0.0));
        assert!(build_state(&q, &emb(&[0.0; 3]), true).is_err());
    }

    #[test]
    fn policy_values_and_complement() {
        let p = SelectorParams::zeros(2, 2);
        let s = [0.3, -0.2, 0.5, 0.1];
        assert_eq!(p.policy_prob(0, &s, 1), 0.5);
        assert_eq!(p.policy_prob(0, &s, 0), 0.5);
        let p = SelectorParams::random(2, 2, 0.8, 4);
        for i in 0..2 {
            assert_eq!(p.policy_prob(i, &s, 1) + p.policy_prob(i, &s, 0), 1.0);
        }
    }

    #[test]
    fn selection_rules() {
        let mut p = SelectorParams::zeros(3, 1);
        let states = vec![vec![0.0, 0.0]; 3];
        assert_eq!(select_teacher(&p, &states).unwrap(), (0, vec![1, 0, 0]));
        // biases give scores σ(b): pick the largest
        let off = 3 * 2;
        p.params[off..].copy_from_slice(&[-1.4, 2.2, -0.4]);
        assert_eq!(select_teacher(&p, &states).unwrap().0, 1);
        p.params[off + 1] += 0.5;
        assert_eq!(select_teacher(&p, &states).unwrap().0, 1);
    }

    #[test]
    fn zero_reward_changes_nothing() {
        let mut p = SelectorParams::random(2, 2, 0.5, 1);
        let before = p.clone();
        let step = EpisodeStep {
            states: vec![vec![0.1, 0.2, 0.3, 0.4]; 2],
            actions: vec![1, 0],
        };
        reinforce_update(&mut p, &[step], 0.0, 5e-5, PolicyGradient::Literal).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn positive_reward_raises_chosen_score() {
        let mut p = SelectorParams::random(2, 2, 0.5, 2);
        let s = vec![0.1, -0.2, 0.3, 0.4];
        let step = EpisodeStep {
            states: vec![s.clone(), s.clone()],
            actions: vec![1, 0],
        };
        let (a0, b0) = (p.score(0, &s), p.score(1, &s));
        reinforce_update(&mut p, &[step], 1.0, 1e-3, PolicyGradient::Literal).unwrap();
        assert!(p.score(0, &s) > a0);
        assert!(p.score(1, &s) < b0);
        assert!(reinforce_update(&mut p, &[], f64::NAN, 1e-3, PolicyGradient::Literal).is_err());
    }

    #[test]
    fn policy_gradients_match_finite_differences() {
        let p = SelectorParams::random(3, 3, 0.7, 9);
        let s = vec![0.4, -0.2, 0.9, 0.1, -0.7, 0.3];
        for variant in [PolicyGradient::Literal, PolicyGradient::LogProb] {
            for a in [0u8, 1] {
                let mut g = vec![0.0; p.params.len()];
                p.accumulate_grad(1, &s, a, 1.0, variant, &mut g);
                let f = |x: &[f64]| {
                    let q = SelectorParams {
                        params: x.to_vec(),
                        ..p.clone()
                    };
                    let pi = q.policy_prob(1, &s, a);
                    match variant {
                        PolicyGradient::Literal => pi,
                        PolicyGradient::LogProb => pi.ln(),
                    }
                };
                assert!(gradcheck::check(f, &p.params, &g, 1e-5) < 1e-4);
            }
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let s = RlSelector {
            params: SelectorParams::random(3, 4, 0.1, 1),
            student_id: Some("abc".into()),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sel.ckpt");
        s.write(&path).unwrap();
        assert_eq!(RlSelector::load(&path).unwrap(), s);
    }
}
