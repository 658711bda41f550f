//! Dense `{0,1}^{R×O×O}` encoding of ground states.

use ndarray::Array3;

use crate::domain::GroundState;

/// Encode a state as an adjacency tensor. Unary atoms sit on the diagonal of
/// their relation slice.
pub fn state_to_adjacency(state: &GroundState, num_relations: usize, num_objects: usize) -> Array3<f64> {
    let mut a = Array3::zeros((num_relations, num_objects, num_objects));
    for &(r, i, j) in &state.atoms {
        a[(r, i, j)] = 1.0;
    }
    a
}

/// Inverse of [`state_to_adjacency`]: entries ≥ 1/2 become atoms.
pub fn adjacency_to_state(a: &ndarray::ArrayView3<f64>) -> GroundState {
    let mut atoms = std::collections::BTreeSet::new();
    for ((r, i, j), &v) in a.indexed_iter() {
        if v >= 0.5 {
            atoms.insert((r, i, j));
        }
    }
    GroundState { atoms }
}
