pub mod autodiff;
pub mod benchmark;
pub mod cli;
pub mod config;
pub mod curvature;
pub mod dynamics;
pub mod error;
pub mod matrix;
pub mod ocp;
pub mod qp;
pub mod sls;
pub mod sqp;
pub mod validation;
