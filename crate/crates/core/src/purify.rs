//! The purification contract: reduce a question's n teacher rationales to
//! one, either by routing to a single teacher or by aggregation.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregator::Aggregator;
use crate::corpus::{tokenize, Corpus, Question, TeacherRationale, Vocab};
use crate::encoder::{CorpusEmbeddings, Embedding};
use crate::error::{Error, Result};
use crate::math;
use crate::rl_selector::RlSelector;

/// A probability vector over the teachers of an ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingDistribution {
    probs: Vec<f64>,
}

impl RoutingDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Empty("routing distribution"));
        }
        let sum: f64 = probs.iter().sum();
        if probs.iter().any(|p| !(*p >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("not a distribution: {probs:?}")));
        }
        Ok(Self { probs })
    }

    pub fn from_logits(logits: &[f64]) -> Result<Self> {
        Self::new(math::softmax(logits))
    }

    pub fn uniform(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Empty("ensemble"));
        }
        Ok(Self {
            probs: vec![1.0 / n as f64; n],
        })
    }

    pub fn one_hot(n: usize, i: usize) -> Self {
        let mut probs = vec![0.0; n];
        probs[i] = 1.0;
        Self { probs }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Most probable teacher, lowest index on ties.
    pub fn argmax(&self) -> usize {
        math::argmax(&self.probs)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Routed(usize),
    Aggregated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PurifiedRationale {
    pub source: Source,
    pub tokens: Vec<u32>,
    pub text: String,
}

impl PurifiedRationale {
    pub fn routed(teacher: usize, text: &str, vocab: &Vocab) -> Self {
        Self {
            source: Source::Routed(teacher),
            tokens: tokenize(text, vocab),
            text: text.to_string(),
        }
    }

    pub fn aggregated(text: String, vocab: &Vocab) -> Self {
        Self {
            source: Source::Aggregated,
            tokens: tokenize(&text, vocab),
            text,
        }
    }
}

/// Pick the rationale of the most probable teacher.
pub fn route_argmax(
    dist: &RoutingDistribution,
    rationales: &[&str],
    vocab: &Vocab,
) -> Result<PurifiedRationale> {
    if rationales.is_empty() {
        return Err(Error::Empty("ensemble"));
    }
    if dist.len() != rationales.len() {
        return Err(Error::LengthMismatch {
            what: "distribution vs rationales",
            left: dist.len(),
            right: rationales.len(),
        });
    }
    let i = dist.argmax();
    Ok(PurifiedRationale::routed(i, rationales[i], vocab))
}

/// The purification methods, by their command-line names.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Pl,
    Cls,
    Sim,
    Rl,
    Agg,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Pl,
        Method::Cls,
        Method::Sim,
        Method::Rl,
        Method::Agg,
    ];

    /// Whether a trained instance can route questions from another corpus.
    pub fn is_transferable(self) -> bool {
        matches!(self, Method::Pl | Method::Cls | Method::Sim)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Pl => "pl",
            Method::Cls => "cls",
            Method::Sim => "sim",
            Method::Rl => "rl",
            Method::Agg => "agg",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pl" => Ok(Method::Pl),
            "cls" | "classifier" => Ok(Method::Cls),
            "sim" | "similarity" => Ok(Method::Sim),
            "rl" | "selector" => Ok(Method::Rl),
            "agg" | "aggregate" | "aggregation" => Ok(Method::Agg),
            other => Err(Error::Config(format!("unknown method {other:?}"))),
        }
    }
}

/// Anything that maps a question embedding to a distribution over teachers.
pub trait Router: Sync {
    fn n_teachers(&self) -> usize;
    fn route(&self, q: &Embedding) -> Result<RoutingDistribution>;
}

/// Always routes to one teacher.
#[derive(Debug, Clone, Copy)]
pub struct ConstantRouter {
    pub n: usize,
    pub teacher: usize,
}

impl Router for ConstantRouter {
    fn n_teachers(&self) -> usize {
        self.n
    }

    fn route(&self, _q: &Embedding) -> Result<RoutingDistribution> {
        Ok(RoutingDistribution::one_hot(self.n, self.teacher))
    }
}

/// Everything a purifier may look at for one question.
#[derive(Debug, Clone)]
pub struct PurifyInput<'a> {
    pub question: &'a Question,
    pub q_emb: &'a Embedding,
    /// Ensemble order; `None` where the corpus has no rationale.
    pub rationales: Vec<Option<&'a TeacherRationale>>,
    pub rationale_embs: Vec<Option<&'a Embedding>>,
}

impl<'a> PurifyInput<'a> {
    pub fn from_corpus(corpus: &'a Corpus, emb: &'a CorpusEmbeddings, qi: usize) -> Self {
        let n = corpus.ensemble().len();
        Self {
            question: &corpus.questions()[qi],
            q_emb: emb.question(qi),
            rationales: (0..n).map(|t| corpus.rationale(qi, t)).collect(),
            rationale_embs: (0..n).map(|t| emb.rationale(qi, t)).collect(),
        }
    }

    fn rationale(&self, t: usize) -> Result<&'a TeacherRationale> {
        self.rationales
            .get(t)
            .copied()
            .flatten()
            .ok_or_else(|| Error::MissingRationale(self.question.id.clone()))
    }

    fn all_rationales(&self) -> Result<Vec<&'a TeacherRationale>> {
        (0..self.rationales.len())
            .map(|t| self.rationale(t))
            .collect()
    }
}

/// A trained purification method.
#[derive(Clone, Copy)]
pub enum Purifier<'a> {
    Router(&'a dyn Router),
    Selector(&'a RlSelector),
    Aggregator(&'a dyn Aggregator),
}

impl fmt::Debug for Purifier<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Purifier::Router(r) => write!(f, "Router(n={})", r.n_teachers()),
            Purifier::Selector(_) => f.write_str("Selector"),
            Purifier::Aggregator(_) => f.write_str("Aggregator"),
        }
    }
}

/// One routing decision, as written to the decisions log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingDecision {
    pub question_id: String,
    pub method: String,
    pub probs: Vec<f64>,
    pub chosen: usize,
}

/// Teacher choice for a routing-type purifier. Needs only the question
/// (plus, for the selector, every teacher's rationale embedding).
pub fn decide(
    purifier: Purifier<'_>,
    input: &PurifyInput<'_>,
) -> Result<Option<RoutingDistribution>> {
    match purifier {
        Purifier::Router(r) => r.route(input.q_emb).map(Some),
        Purifier::Selector(s) => {
            let correct: Vec<bool> = input
                .rationales
                .iter()
                .map(|r| r.is_some_and(|r| r.predicted_index == input.question.gold_index))
                .collect();
            let states = s.states(input.q_emb, &input.rationale_embs, &correct)?;
            let scores = s.params.scores(&states)?;
            let total: f64 = scores.iter().sum();
            let probs = if total > 0.0 {
                scores.iter().map(|x| x / total).collect()
            } else {
                vec![1.0 / scores.len() as f64; scores.len()]
            };
            // normalized scores keep the argmax of the raw scores
            RoutingDistribution::new(probs).map(Some)
        }
        Purifier::Aggregator(_) => Ok(None),
    }
}

/// Purify one question.
pub fn purify(
    purifier: Purifier<'_>,
    input: &PurifyInput<'_>,
    vocab: &Vocab,
) -> Result<PurifiedRationale> {
    match decide(purifier, input)? {
        Some(dist) => {
            // only the chosen teacher's rationale is needed
            let t = dist.argmax();
            Ok(PurifiedRationale::routed(
                t,
                &input.rationale(t)?.rationale_text,
                vocab,
            ))
        }
        None => {
            let Purifier::Aggregator(a) = purifier else {
                unreachable!("routing purifiers always decide")
            };
            let text = a.aggregate(input.question, &input.all_rationales()?)?;
            Ok(PurifiedRationale::aggregated(text, vocab))
        }
    }
}

/// Purify every question in `indices`, keyed by question id, together with
/// the routing decisions (empty for aggregation).
pub fn purify_questions(
    purifier: Purifier<'_>,
    method: Method,
    corpus: &Corpus,
    emb: &CorpusEmbeddings,
    indices: &[usize],
    vocab: &Vocab,
) -> Result<(HashMap<String, PurifiedRationale>, Vec<RoutingDecision>)> {
    let inputs: Vec<PurifyInput> = indices
        .iter()
        .map(|&qi| PurifyInput::from_corpus(corpus, emb, qi))
        .collect();
    if let Purifier::Aggregator(a) = purifier {
        let items = inputs
            .iter()
            .map(|i| Ok((i.question, i.all_rationales()?)))
            .collect::<Result<Vec<_>>>()?;
        let texts = a.aggregate_many(&items);
        let mut out = HashMap::new();
        for (input, text) in inputs.iter().zip(texts) {
            out.insert(
                input.question.id.clone(),
                PurifiedRationale::aggregated(text?, vocab),
            );
        }
        return Ok((out, Vec::new()));
    }
    let results: Vec<Result<(PurifiedRationale, RoutingDecision)>> = inputs
        .par_iter()
        .map(|input| {
            let dist = decide(purifier, input)?.expect("routing purifier");
            let t = dist.argmax();
            let r = PurifiedRationale::routed(t, &input.rationale(t)?.rationale_text, vocab);
            let d = RoutingDecision {
                question_id: input.question.id.clone(),
                method: method.to_string(),
                probs: dist.probs().to_vec(),
                chosen: t,
            };
            Ok((r, d))
        })
        .collect();
    let mut map = HashMap::new();
    let mut decisions = Vec::with_capacity(results.len());
    for r in results {
        let (p, d) = r?;
        map.insert(d.question_id.clone(), p);
        decisions.push(d);
    }
    Ok((map, decisions))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_routing_and_ties() {
        let vocab = Vocab::default();
        let texts = ["alpha one", "beta two", "gamma three"];
        let d = RoutingDistribution::new(vec![0.1, 0.7, 0.2]).unwrap();
        let r = route_argmax(&d, &texts, &vocab).unwrap();
        assert_eq!(r.source, Source::Routed(1));
        assert_eq!(r.text, "beta two");
        assert_eq!(r.tokens, tokenize("beta two", &vocab));

        let tie = RoutingDistribution::new(vec![0.5, 0.5]).unwrap();
        assert_eq!(
            route_argmax(&tie, &texts[..2], &vocab).unwrap().source,
            Source::Routed(0)
        );

        let one = RoutingDistribution::new(vec![1.0]).unwrap();
        assert_eq!(
            route_argmax(&one, &texts[2..], &vocab).unwrap().text,
            "gamma three"
        );
    }

    #[test]
    fn routing_errors() {
        let vocab = Vocab::default();
        let d = RoutingDistribution::new(vec![0.5, 0.5]).unwrap();
        assert!(matches!(
            route_argmax(&d, &["a"], &vocab),
            Err(Error::LengthMismatch { .. })
        ));
        assert!(matches!(
            route_argmax(&d, &[], &vocab),
            Err(Error::Empty(_))
        ));
        assert!(RoutingDistribution::new(vec![0.5, 0.6]).is_err());
        assert!(RoutingDistribution::new(vec![-0.1, 1.1]).is_err());
    }

    #[test]
    fn logit_shift_keeps_argmax() {
        let a = RoutingDistribution::from_logits(&[0.3, 1.2, -0.4]).unwrap();
        let b = RoutingDistribution::from_logits(&[100.3, 101.2, 99.6]).unwrap();
        assert_eq!(a.argmax(), b.argmax());
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.to_string().parse::<Method>().unwrap(), m);
        }
        assert!(!Method::Rl.is_transferable());
        assert!(!Method::Agg.is_transferable());
        assert!(Method::Sim.is_transferable());
    }
}
