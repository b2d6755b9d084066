//! Navigation metrics, trajectory corrections and the SR/OSR gap report.

pub mod correction;
pub mod metrics;
pub mod report;

pub use correction::{correct_crop, correct_return, Correction};
pub use metrics::{dtw, episode_metrics, ndtw, EpisodeResult, SUCCESS_RADIUS};
pub use report::{
    evaluate_episodes, gap_report, read_predictions, summarize, write_predictions, Aggregate, CorrectedSummary,
    EpisodeOutcome, GapReport, Prediction,
};
