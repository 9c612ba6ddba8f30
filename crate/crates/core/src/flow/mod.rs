mod flo;
mod tvl1;

pub use flo::{flo_from_bytes, flo_to_bytes, read_flo, write_flo};
pub use tvl1::{
    flow_stack, rgb_to_gray, tvl1, tvl1_with_energy, FlowField, FlowResult, TvL1Params,
};
