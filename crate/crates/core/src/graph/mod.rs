//! Network descriptions, the architecture zoo, static analyzers and the
//! executor that runs them.

pub mod analysis;
pub mod exec;
pub mod spec;
pub mod zoo;

pub use analysis::{
    count_params, infer_shapes, nominal_input_shapes, receptive_field, receptive_fields, summary,
    NodeShape, ReceptiveField,
};
pub use exec::{
    backward, class_probabilities, forward, init_params, loss_and_grad, Forward, Gradients,
};
pub use spec::{node_params, Family, GraphSpec, Head, Node, Op, ParamInfo, ParamRole};
pub use zoo::{
    build, build_3d_fused, build_c3d_like, build_i3d, build_inception_v1_2d, build_lstm,
    build_two_stream, scale_channels, temporal_footprint, ArchConfig, Streams, INCEPTION_TABLE,
};
