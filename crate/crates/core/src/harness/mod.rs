//! Verification and probing: synthetic mutual information, the QA span
//! decoder, a classification head, retrieval probes and a toy corpus.

mod corpus;
mod heads;
mod mi;
mod probe;

pub use corpus::TopicCorpus;
pub use heads::{
    classify, decode_from_probs, qa_span_decode, span_distributions, ClassifierHead,
    SpanDecoderHead, SpanDecoderParams, SpanPrediction,
};
pub use mi::{mi_synthetic_eval, sample_pairs, MiEvalConfig, MiPoint, MiReport, SyntheticJoint};
pub use probe::{
    chance_chi_square, mlm_probe, retrieval_probe, span_retrieval_scores, wilson_interval,
    ProbeReport,
};
