//! Weight-decomposition analysis, direction eigenspectra, overfitting-gap
//! reports, and the paired signed-rank test.

pub mod gap;
pub mod spectrum;
pub mod wda;
pub mod wilcoxon;

pub use gap::{ema, ema_update, gap_report, GapReport, GapWeights, EMA_DECAY};
pub use spectrum::{eigenspectrum, spectrum_deviation};
pub use wda::{correlation_slope, delta_direction, delta_magnitude, layer_wda, model_wda, WdaPoint};
pub use wilcoxon::{exact_signed_rank_p, wilcoxon_signed_rank, PMethod, WilcoxonResult};
