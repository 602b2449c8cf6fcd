//! End-to-end orchestration, on-disk outputs and scene statistics.

mod config;
mod run;
mod stats;

pub use config::{ColorMatchConfig, Flags, PathsConfig, PipelineConfig, WeightOverrides};
pub use run::{
    mean_psnr, render_views, run_full, suffixed_name, ColorMatchSummary, FinalColorMode, Fidelity, LossSummary,
    OutputLock, Outputs, PipelineError, RenderedView, RunReport, StageRecord, StageStatus, LOCK_FILE, METRICS_FILE,
    PREPROCESSED_PLY, RENDERS_DIR, RENDER_SUFFIX, REPORT_FILE, STYLIZED_PLY,
};
pub use stats::{stats, Histogram, StatsReport, HISTOGRAM_BINS};

/// Thread count from `GSTYLE_THREADS`, installed as the global pool size.
pub fn configure_threads() -> crate::error::Result<usize> {
    if let Ok(v) = std::env::var("GSTYLE_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|n| *n > 0)
            .ok_or_else(|| crate::error::Error::Config(format!("GSTYLE_THREADS must be a positive integer, got '{v}'")))?;
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(rayon::current_num_threads())
}
