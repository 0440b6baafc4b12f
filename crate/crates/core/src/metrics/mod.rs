//! Report-generation, classification and survival metrics. All functions are
//! pure.

pub mod classification;
pub mod nlg;
pub mod survival;

pub use classification::{accuracy, auc_binary, binary_and_multiclass_scores, ClassificationScores};
pub use nlg::{bleu_n, corpus_scores, meteor_exact, rouge_l, rouge_l_beta, NlgScore, NLG_COLUMNS, ROUGE_BETA};
pub use survival::{c_index, SurvivalRecord};
