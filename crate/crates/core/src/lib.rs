//! Operator-learning surrogate for unsteady hydrodynamics and particulate
//! transport in a hydrodynamic stormwater separator.
//!
//! Storm events are described by five loading parameters; a branch/trunk
//! operator network (optionally followed by a fully connected decoder) maps
//! loadings, particle class, time and position to velocity magnitude and
//! concentration. Ground truth comes from a deterministic reactor-plus-jet
//! oracle.

pub mod evaluation;
pub mod gradcheck;
pub mod hpo;
pub mod loading;
pub mod longterm;
pub mod models;
pub mod oracle;
pub mod seed;
pub mod sensitivity;
pub mod tensor;
pub mod training;
