//! Configuration-driven experiments and their reports.

mod ablate;
mod config;
mod grid;
mod lottery;
mod probes;
mod report;
mod train;

use std::time::Instant;

pub use ablate::{band_plots, run_ablation};
pub use config::{ExperimentConfig, ExperimentKind, ProbeConfig, RunMode, RunSeeds, Thm5Config, Variant};
pub use grid::{
    cell_table, grid_cells, measure_ledger, run_cell, run_thm5_grid, run_trajectory, thm5_initial, Cell, CellLedger,
    CellRun, TrajPoint, Trajectory,
};
pub use lottery::{greedy_winners, lottery_seed, prune, run_lottery, LotteryOutcome};
pub use probes::{
    identity_trial, planar_oracle, psi_comparisons, run_bn_audit, run_falloff, run_psi_check, run_verify_thm1,
    IdentityTrial, PsiComparison,
};
pub use report::{emit_reports, render_svg, table_csv, Check, Plot, RunLog, SummaryRow, Table, SUMMARY_HEADER};
pub use train::{
    band_table, build_pair, detail_tables, run_train, summary_rows, train, train_all, train_plots, train_seed,
    EpochRecord, TrainRun, TrainSettings,
};

use crate::error::Result;

/// Validate `cfg`, run the experiment its kind selects and stamp the
/// wall-clock time.
pub fn run(cfg: &ExperimentConfig) -> Result<RunLog> {
    cfg.validate()?;
    let start = Instant::now();
    let mut log = match cfg.kind {
        ExperimentKind::VerifyThm1 => run_verify_thm1(cfg),
        ExperimentKind::Train => run_train(cfg),
        ExperimentKind::Thm5Grid => run_thm5_grid(cfg),
        ExperimentKind::AblateSize | ExperimentKind::AblateOverparam | ExperimentKind::AblateFinite => {
            run_ablation(cfg)
        }
        ExperimentKind::Lottery => run_lottery(cfg),
        ExperimentKind::BnAudit => run_bn_audit(cfg),
        ExperimentKind::PsiCheck => run_psi_check(cfg),
        ExperimentKind::FalloffProbe => run_falloff(cfg),
    }?;
    log.wall_clock_s = start.elapsed().as_secs_f64();
    Ok(log)
}
