//! Reduced gradient dynamics on the unit sphere, their convergence
//! constants, and monitors for the hypotheses those constants rest on.

mod falloff;
mod input;
mod ledger;
mod single;
mod two_layer;

pub use falloff::{quadratic_falloff_probe, FalloffFit, FalloffPoint};
pub use input::{corner_teacher, InputModel, WhiteInput};
pub use ledger::{thm4_constants, thm5_constants, Binding, ConstantLedger, CrossBounds, Thm4Ledger, Thm5Inputs};
pub use single::{step_single, SingleLayerState, SingleStep};
pub use two_layer::{
    init_two_layer, monitor_hypotheses, reduce_teacher, step_two_layer, HypothesisMonitor, TwoLayerState, TwoLayerStep,
};
