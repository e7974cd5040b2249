//! Bi-level day-ahead energy management for island microgrid groups:
//! a price-setting microgrid operator above a renewable-and-storage
//! aggregator with integer battery-swap logistics, solved by an
//! upper-bound-tightened reformulation-and-decomposition scheme.

pub mod bnb;
pub mod decomp;
pub mod model;
pub mod qp;
pub mod uncertainty;
