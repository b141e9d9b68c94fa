//! Beam-search generation, ROUGE scoring and dataset evaluation.

mod beam;
mod eval;
mod generate;
mod rouge;

pub use beam::{beam_search, greedy, has_repeated_ngram, length_score, BeamHypothesis, BeamOutput, DecodeConfig, StepModel};
pub use eval::{
    aggregate_path, evaluate, evaluate_records, generate_record, round1, write_eval_jsonl, EvalRecord, EvalReport,
    GenerationSettings,
};
pub use generate::{generate, prepare_context, FixedCandidate, GenerationContext, ModelStepper};
pub use rouge::{lcs_len, rouge_l, rouge_n, rouge_tokens, score_texts, RougeScore, TextScores};
