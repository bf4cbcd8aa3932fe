//! Goal-conditioned waypoint navigation: a transformer policy over fused
//! appearance and depth patch tokens with tracking-guided attention, plus the
//! data, metrics, and closed-loop simulation around it.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod episodes;
pub mod format;
pub mod geom;
pub mod metrics;
pub mod perception;
pub mod policy;
pub mod sim;
pub mod tensor;
pub mod track_attention;
