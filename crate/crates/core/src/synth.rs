//! Synthetic multiple-choice corpora with controllable teacher behavior.
//!
//! A seeded "world" fixes a set of clusters (one dataset each), their topic
//! words and keys, and for every key a gold answer and a shared
//! misconception. Questions mention topic words and one key; the gold
//! option is the key's answer. Teachers answer according to a
//! [`TeacherBehavior`], so experiments can dial in specialization,
//! knowledge conflict or a single dominant teacher.

use std::collections::HashSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Question, Split, TeacherEnsemble, TeacherRationale};
use crate::error::Result;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TeacherBehavior {
    /// Correct on its own cluster; elsewhere repeats the key's misconception.
    Expert { cluster: usize },
    /// Follows teacher `of`, but where that teacher is correct falls for
    /// the key's misconception with probability `flip`.
    NoisyCopy { of: usize, flip: f64 },
    /// Always correct, with a short rationale.
    Oracle,
    /// Never correct, with `len` random words as rationale.
    Garbage { len: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub clusters: usize,
    pub keys_per_cluster: usize,
    pub topic_words: usize,
    pub answers: usize,
    pub options: usize,
    /// Questions in the unsplit training pool.
    pub pool: usize,
    pub test: usize,
    pub teachers: Vec<TeacherBehavior>,
    pub seed: u64,
}

impl SynthConfig {
    /// Three experts, each right only on its own cluster.
    pub fn specialization(seed: u64) -> Self {
        Self {
            clusters: 3,
            keys_per_cluster: 20,
            topic_words: 10,
            answers: 12,
            options: 4,
            pool: 750,
            test: 200,
            teachers: (0..3).map(|c| TeacherBehavior::Expert { cluster: c }).collect(),
            seed,
        }
    }

    /// Two complementary experts followed by a noisy copy of each.
    pub fn noisy_duplicates(seed: u64) -> Self {
        Self {
            clusters: 2,
            teachers: vec![
                TeacherBehavior::Expert { cluster: 0 },
                TeacherBehavior::Expert { cluster: 1 },
                TeacherBehavior::NoisyCopy { of: 0, flip: 0.5 },
                TeacherBehavior::NoisyCopy { of: 1, flip: 0.5 },
            ],
            ..Self::specialization(seed)
        }
    }

    /// One always-correct teacher and three that are never correct.
    pub fn dominance(seed: u64) -> Self {
        Self {
            teachers: vec![
                TeacherBehavior::Oracle,
                TeacherBehavior::Garbage { len: 30 },
                TeacherBehavior::Garbage { len: 30 },
                TeacherBehavior::Garbage { len: 30 },
            ],
            ..Self::specialization(seed)
        }
    }
}

/// The seeded vocabulary a corpus is drawn from.
#[derive(Debug, Clone)]
pub struct World {
    pub topics: Vec<Vec<String>>,
    pub keys: Vec<Vec<String>>,
    pub answers: Vec<String>,
    /// `(gold, misconception)` answer indices per `[cluster][key]`.
    pub key_answers: Vec<Vec<(usize, usize)>>,
    pub filler: Vec<String>,
}

const SYLLABLES: [&str; 20] = [
    "ba", "ko", "ri", "mu", "te", "la", "zo", "pi", "ne", "fu", "da", "go", "si", "va", "ru", "me",
    "to", "ki", "lo", "xa",
];

fn pseudo_words(rng: &mut seed::Rng, count: usize, used: &mut HashSet<String>) -> Vec<String> {
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let n = rng.random_range(2..=4);
        let w: String = (0..n).map(|_| *SYLLABLES.choose(rng).unwrap()).collect();
        if used.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

impl World {
    pub fn new(cfg: &SynthConfig) -> Self {
        let mut rng = seed::rng(cfg.seed, "synth-world");
        let mut used = HashSet::new();
        let topics = (0..cfg.clusters)
            .map(|_| pseudo_words(&mut rng, cfg.topic_words, &mut used))
            .collect();
        let keys = (0..cfg.clusters)
            .map(|_| pseudo_words(&mut rng, cfg.keys_per_cluster, &mut used))
            .collect();
        let answers = pseudo_words(&mut rng, cfg.answers.max(cfg.options), &mut used);
        let na = answers.len();
        let key_answers = (0..cfg.clusters)
            .map(|_| {
                (0..cfg.keys_per_cluster)
                    .map(|_| {
                        let gold = rng.random_range(0..na);
                        let mut wrong = rng.random_range(0..na - 1);
                        if wrong >= gold {
                            wrong += 1;
                        }
                        (gold, wrong)
                    })
                    .collect()
            })
            .collect();
        let filler = pseudo_words(&mut rng, 400, &mut used);
        Self {
            topics,
            keys,
            answers,
            key_answers,
            filler,
        }
    }
}

/// Generate the corpus: `pool` unsplit questions followed by `test` test
/// questions, clusters assigned round-robin.
pub fn generate(cfg: &SynthConfig) -> Result<Corpus> {
    let world = World::new(cfg);
    let mut rng = seed::rng(cfg.seed, "synth-questions");
    let mut questions = Vec::with_capacity(cfg.pool + cfg.test);
    let mut rationales = Vec::new();
    for i in 0..cfg.pool + cfg.test {
        let cluster = i % cfg.clusters;
        let split = (i >= cfg.pool).then_some(Split::Test);
        let id = format!("q{i:05}");
        let dataset = format!("c{cluster}");
        emit(cfg, &world, &mut rng, id, dataset, cluster, split, &mut questions, &mut rationales);
    }
    let ensemble = TeacherEnsemble::new((0..cfg.teachers.len()).map(|t| format!("t{t}")))?;
    Corpus::new(questions, rationales, Some(ensemble))
}

/// Questions drawn from one training cluster's distribution but labeled as
/// a separate dataset, for out-of-domain routing. `train` of them go to the
/// train split and the rest to test.
pub fn generate_ood(cfg: &SynthConfig, cluster: usize, train: usize, test: usize) -> Result<Corpus> {
    let world = World::new(cfg);
    let mut rng = seed::rng(cfg.seed, "synth-ood");
    let mut questions = Vec::new();
    let mut rationales = Vec::new();
    for i in 0..train + test {
        let split = Some(if i < train { Split::Train } else { Split::Test });
        let id = format!("ood{i:05}");
        emit(cfg, &world, &mut rng, id, "ood".into(), cluster, split, &mut questions, &mut rationales);
    }
    let ensemble = TeacherEnsemble::new((0..cfg.teachers.len()).map(|t| format!("t{t}")))?;
    Corpus::new(questions, rationales, Some(ensemble))
}

#[allow(clippy::too_many_arguments)]
fn emit(
    cfg: &SynthConfig,
    world: &World,
    rng: &mut seed::Rng,
    id: String,
    dataset: String,
    cluster: usize,
    split: Option<Split>,
    questions: &mut Vec<Question>,
    rationales: &mut Vec<TeacherRationale>,
) {
    let k = rng.random_range(0..cfg.keys_per_cluster);
    let key = &world.keys[cluster][k];
    let (gold, wrong) = world.key_answers[cluster][k];
    let topic = &world.topics[cluster];
    let t: Vec<&String> = topic.choose_multiple(rng, 4).collect();
    let text = format!("{} {} {} what goes with {} {}", t[0], t[1], t[2], key, t[3]);

    // options: gold, misconception, then random distinct answers
    let mut opts = vec![gold, wrong];
    while opts.len() < cfg.options {
        let a = rng.random_range(0..world.answers.len());
        if !opts.contains(&a) {
            opts.push(a);
        }
    }
    opts.shuffle(rng);
    let gold_index = opts.iter().position(|&a| a == gold).unwrap();
    let wrong_index = opts.iter().position(|&a| a == wrong).unwrap();
    let reason = topic.choose(rng).unwrap();

    let templated = |ans: usize| {
        format!("{} fits {} because {}", world.answers[opts[ans]], key, reason)
    };
    let mut predicted = Vec::with_capacity(cfg.teachers.len());
    for (ti, b) in cfg.teachers.iter().enumerate() {
        let (p, text) = match *b {
            TeacherBehavior::Expert { cluster: c } => {
                let p = if c == cluster { gold_index } else { wrong_index };
                (p, templated(p))
            }
            TeacherBehavior::NoisyCopy { of, flip } => {
                let base: usize = predicted[of];
                let p = if base == gold_index && rng.random_bool(flip) {
                    wrong_index
                } else {
                    base
                };
                (p, templated(p))
            }
            TeacherBehavior::Oracle => (
                gold_index,
                format!("{} fits {}", world.answers[gold], key),
            ),
            TeacherBehavior::Garbage { len } => {
                let others: Vec<usize> = (0..opts.len()).filter(|&o| o != gold_index).collect();
                let p = *others.choose(rng).unwrap();
                let words: Vec<&str> = (0..len)
                    .map(|_| world.filler.choose(rng).unwrap().as_str())
                    .collect();
                (p, words.join(" "))
            }
        };
        predicted.push(p);
        rationales.push(TeacherRationale {
            question_id: id.clone(),
            teacher_id: format!("t{ti}"),
            rationale_text: text,
            predicted_index: p,
            token_count: 0,
        });
    }
    questions.push(Question {
        id,
        dataset_id: dataset,
        text,
        options: opts.iter().map(|&a| world.answers[a].clone()).collect(),
        gold_index,
        split,
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{label_optimal_teacher, make_splits, SplitRatio};

    #[test]
    fn specialization_shape_and_labels() {
        let cfg = SynthConfig::specialization(1);
        let corpus = make_splits(&generate(&cfg).unwrap(), SplitRatio::default(), 1).unwrap();
        assert_eq!(corpus.split_indices(Split::Train).len(), 600);
        assert_eq!(corpus.split_indices(Split::Public).len(), 150);
        assert_eq!(corpus.split_indices(Split::Test).len(), 200);
        let labels = label_optimal_teacher(&corpus, corpus.ensemble());
        for (qi, l) in labels.iter().enumerate() {
            let cluster: usize = corpus.questions()[qi].dataset_id[1..].parse().unwrap();
            assert_eq!(l.optimal_teacher, Some(cluster));
        }
    }

    #[test]
    fn noisy_copies_are_never_better() {
        let corpus = generate(&SynthConfig::noisy_duplicates(2)).unwrap();
        for qi in 0..corpus.questions().len() {
            for (copy, of) in [(2, 0), (3, 1)] {
                if corpus.is_correct(qi, copy) {
                    assert!(corpus.is_correct(qi, of));
                }
                let a = corpus.rationale(qi, copy).unwrap().token_count;
                assert!(a >= corpus.rationale(qi, of).unwrap().token_count);
            }
        }
    }

    #[test]
    fn dominance_has_one_correct_teacher() {
        let corpus = generate(&SynthConfig::dominance(3)).unwrap();
        for qi in 0..corpus.questions().len() {
            assert!(corpus.is_correct(qi, 0));
            assert!((1..4).all(|t| !corpus.is_correct(qi, t)));
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate(&SynthConfig::specialization(9)).unwrap();
        let b = generate(&SynthConfig::specialization(9)).unwrap();
        assert_eq!(a.questions(), b.questions());
        assert_eq!(a.rationales(), b.rationales());
    }
}
