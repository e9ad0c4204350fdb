//! Fixtures shared by the benchmarks.

use tsrelu::dynamics::{init_two_layer, reduce_teacher, InputModel, TwoLayerState, WhiteInput};
use tsrelu::{make_student, make_teacher, GausStream, Network, StreamSpec, StudentInit, TeacherSpec};

/// The default training pair: a 20-10-15-20-25 teacher with 100 outputs and
/// a student `overparam` times wider, plus a batch of GAUS inputs.
pub fn training_pair(overparam: usize, batch: usize) -> (Network, Network, ndarray::Array2<f64>) {
    let teacher = make_teacher(&TeacherSpec::new(vec![20, 10, 15, 20, 25], 100, 1)).expect("valid teacher");
    let student = make_student(
        &teacher,
        &StudentInit {
            overparam,
            seed: 2,
            ..StudentInit::default()
        },
    )
    .expect("valid student");
    let x = GausStream::new(StreamSpec::gaus(20, 3))
        .expect("valid stream")
        .next_batch(batch);
    (teacher, student, x)
}

/// A 10-20-30 reduced two-layer state with the given over-parameterization.
pub fn two_layer(overparam: usize) -> (TwoLayerState, WhiteInput) {
    let teacher = make_teacher(&TeacherSpec::new(vec![10, 20], 30, 4)).expect("valid teacher");
    let (w, v) = reduce_teacher(&teacher).expect("two-layer teacher");
    let mut rng = tsrelu::rng::rng_for(5, "bench");
    let state = init_two_layer(w, v, overparam, 10.0, 1.0, &mut rng).expect("valid init");
    (state, WhiteInput::new(11, InputModel::Affine, 6).expect("valid input"))
}
