//! Learning-guided variable fixing for sequential mixed-integer programs.
//!
//! An attention encoder-decoder predicts the binary decisions and the tight
//! constraints of lot-sizing and multi-stage knapsack instances; the
//! predictions are fixed, confidence first, in a relaxation and then in the
//! full model, backing off until the fixed model is feasible.

pub mod evaluation;
pub mod heuristics;
pub mod instances;
pub mod milp;
pub mod nn;
pub mod pipeline;
pub mod solver;
