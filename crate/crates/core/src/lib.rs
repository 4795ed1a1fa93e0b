#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adv_train;
pub mod attack;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod regularizers;
pub mod tensor;
pub mod train;
