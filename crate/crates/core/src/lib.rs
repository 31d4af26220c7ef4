pub mod algebra;
pub mod kernels;
pub mod nonlinearities;
pub mod quadrature;
pub mod weights;
pub mod problem;
pub mod discretization;
pub mod solver;
pub mod config;
pub mod report;
pub mod pipeline;
