//! Word error rate, endpointer latency, decoding pipeline and tradeoff sweeps.

mod endpoint;
mod metrics;
mod pipeline;
mod recipe;
mod sweep;

pub use endpoint::{close_ms_to_frame, ep_latency, frame_energies, vad_endpoint, VadConfig};
pub use metrics::{edit_distance, percentile, wer, EditStats, WerSummary};
pub use pipeline::{
    best_tokens, decode_dataset, decode_utterance, metrics_csv, metrics_csv_row, records_for,
    rescore_decoded, summarize, DecodeConfig, DecodedUtterance, EvalRecord, FirstPass, Metrics,
    SecondPass, METRICS_HEADER,
};
pub use recipe::{
    build_rescore_bench, evaluate, generate_splits, read_decodes, rescore_saved, run_mwer,
    run_train_las, run_train_rnnt, write_decodes, write_lattices, BenchSection, DataSection,
    EvalSection, Evaluation, ExperimentConfig, LasSection, Models, RnntRun, RnntSection, Splits,
    SweepSection,
};
pub use sweep::{sweep_tradeoff, SweepConfig, SweepPoint, SweepResult};
