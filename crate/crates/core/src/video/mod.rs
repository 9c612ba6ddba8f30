mod clip;
mod frames_dir;
mod pnm;
mod synthetic;

pub use clip::{
    augment_train, batch_input, eval_preprocess, subsample_frames, AugmentConfig, VideoClip,
};
pub use frames_dir::{frame_name, read_frames_dir, write_frames_dir};
pub use pnm::{read_pnm, write_pgm, write_ppm};
pub use synthetic::{gen_synthetic_temporal, Geometry, Task, SYNTHETIC_FPS};
