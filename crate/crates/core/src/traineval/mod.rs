//! Training, evaluation and the user/system simulation.

pub mod data;
pub mod events;
pub mod report;
pub mod simulate;
pub mod train;

pub use data::{
    load_embedding_table, load_session, load_sessions, make_examples, prepare_session, prompt_key,
    Ablation, EmbeddingTable, Example, PreparedSession, SessionData,
};
pub use events::{
    eval_shift_hold, find_silences, predict_turn, session_p_now, Confusion, ShiftHoldParams,
    ShiftHoldReport, SilenceEvent, TurnLabel,
};
pub use report::{recon_preference, EvalReport};
pub use simulate::{
    onset_stats, response_onsets, simulate_system, timeline_csv, utterances_from_activity,
    write_timeline, OnsetStats, Simulation, SimulationParams, TimelineRow,
};
pub use train::{
    curves_csv, eval_vap_loss, train, train_examples, EpochRecord, LossRecord, Precision,
    TrainConfig, TrainOutcome,
};
