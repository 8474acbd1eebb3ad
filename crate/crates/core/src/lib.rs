//! Pseudo-spectral simulation of two-dimensional periodic flow of a fluid
//! with an integral (fading-memory) constitutive law.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod age;
pub mod cli;
pub mod constitutive;
pub mod convergence;
pub mod diagnostics;
pub mod flow;
pub mod history;
pub mod spectral;
pub mod stress;
pub mod tensor;
