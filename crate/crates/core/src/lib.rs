//! Teacher-student ReLU networks: exact gradient decomposition, reduced
//! matrix dynamics with their convergence constants, BatchNorm conservation,
//! and the experiment drivers built on top of them.

pub mod beta;
pub mod dynamics;
pub mod error;
pub mod exp;
pub mod linalg;
pub mod metrics;
pub mod net;
pub mod rng;
pub mod teacher;

pub use error::{Error, Result};
pub use net::{BnMode, BnParams, Layer, Network, NetworkSpec};
pub use teacher::{
    make_student, make_teacher, teacher_labels, GausStream, StreamMode, StreamSpec, StudentInit, TeacherSpec,
};
