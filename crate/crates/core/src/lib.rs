// `!(x > 0.0)` is used on purpose throughout so that NaN takes the error path
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod error;
pub mod init;
pub mod measures;
pub mod metrics;
pub mod optimizer;
pub mod rotation;
pub mod simgen;
pub mod whitening;
