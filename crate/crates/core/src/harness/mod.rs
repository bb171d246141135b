//! Experiment harness: trial records, the worker-pool runner and
//! report tables recomputed from persisted records.

mod experiment;
mod records;
mod report;
mod resources;
mod runner;

pub use experiment::{ExperimentConfig, TargetMode};
pub use records::{
    read_jsonl, read_mos_csv, Condition, DistinguishReason, FailureRecord, JsonlWriter, MosAspect, MosRecord, MosTrial,
    TdScore, TrialRecord, TrialScores,
};
pub use report::{
    read_rows, render_report, score_histograms, summarize, td_rows, transfer_matrix, trial_scores, write_rows,
    write_summary, HistogramRow, RocRow, Summary, SummaryRow, TdRow, NO_ATTACK,
};
pub use resources::{cvae_corpus, cvae_training_set, target_labels, CorpusSource, Resources};
pub use runner::{
    default_workers, load_records, ordered_pool, run_experiment, stable_hash, unit_seed, DeidOutput, RunOptions,
    RunReport, RunStatus, Session, REIDENTIFICATION,
};

#[cfg(test)]
mod tests;
