//! Discretized model tables, the range coder and the bitstream container.

mod cdf;
mod container;
mod range_coder;

pub use cdf::{
    build_cdf, CdfTable, DiscreteModel, GaussianModel, LogitGridModel, PRECISION_BITS,
    SYMBOL_CAP, TAIL_MASS, TOTAL,
};
pub use container::{pack_container, unpack_container, Container, Header, HEADER_LEN, MAGIC, VERSION};
pub use range_coder::{rc_decode, rc_encode};
