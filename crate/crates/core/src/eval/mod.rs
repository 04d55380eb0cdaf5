//! Evaluations over trained entity embeddings: entity typing, category
//! completion, entity linking, and question answering by retrieval, plus
//! the ranking metrics they share.

mod category;
mod linking;
mod metrics;
mod qa;
mod typing;

pub use category::{category_completion, CategoryConfig, CategoryReport, CategoryResult};
pub use linking::{linking_eval, mention_string, retrieval_accuracy, AliasTable, LinkingResult};
pub use metrics::{average_precision, average_precision_flags, typing_metrics, per_type_map, TypingMetrics};
pub use qa::{
    link_answer_strings, mine_hard_negatives, qa_examples, qa_exact_match, qa_pipeline, retrieval_loss, QaConfig,
    QaReport,
};
pub use typing::{
    evaluate_typing, probe_forward, train_probe, typing_data, ProbeConfig, TypingData, TypingEval, TypingProbe,
};
