//! Knowledge purification for multi-teacher rationale distillation.
//!
//! A student trained on rationales from several teachers at once suffers
//! when those rationales disagree. This crate implements the purification
//! step that reduces n rationales to one per question (routers, a teacher
//! selector and an aggregator), the distillation objectives, a small
//! trainable student and the evaluation harness around them.

pub mod aggregator;
pub mod checkpoint;
pub mod cls_router;
pub mod config;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod math;
pub mod optim;
pub mod pl_rank;
pub mod purify;
pub mod rl_selector;
pub mod seed;
pub mod sim_router;
pub mod student;
pub mod synth;

pub use aggregator::{Aggregator, ExampleBank, MockAggregator, RemoteAggregator};
pub use cls_router::MlpRouter;
pub use config::RunConfig;
pub use corpus::{
    Corpus, PromptTag, Question, RouterLabel, Split, SplitRatio, TeacherEnsemble, TeacherRationale,
    Vocab,
};
pub use encoder::{CorpusEmbeddings, Embedding, EmbeddingProvider, EmbeddingStore, HashedEncoder};
pub use error::{Error, Result};
pub use eval::{EvalReport, MethodConfig, ReportRow};
pub use pl_rank::PLDatabase;
pub use purify::{Method, PurifiedRationale, Purifier, Router, RoutingDistribution};
pub use rl_selector::RlSelector;
pub use sim_router::SimRouter;
pub use student::{DistillConfig, StudentConfig, StudentModel};
