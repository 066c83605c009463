//! Bi-directional recurrent video restoration with decoupled flare/haze
//! attention, plus its loss, augmentation, checkpointing and training loop.

mod augment;
mod checkpoint;
mod error;
mod flownet;
mod layers;
mod loss;
mod model;
mod train;

pub use augment::{augment, Augmentation};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use error::{NetError, Result};
pub use loss::{charbonnier, total_loss, LossBreakdown};
pub use model::{
    count_params, pad_replicate, stack_frames, ClipInput, ClipOutput, D2RNet, DamOutput, DamState, Direction,
    Intermediate, IntermediateFrame, MotionInput, Restored,
};
pub use train::{train, StepStats, TrainClip, TrainData, TrainOptions, TrainSummary, Trainer, METRICS_COLUMNS};

use ndarray::Array3;
use udcvr_tensor::Tensor;

pub(crate) fn tensor_of(a: &Array3<f32>) -> Tensor {
    let (c, h, w) = a.dim();
    Tensor::from_vec(&[c, h, w], a.iter().copied().collect())
}

pub(crate) fn array_of(t: &Tensor) -> Array3<f32> {
    let (c, h, w) = t.chw();
    Array3::from_shape_vec((c, h, w), t.data().to_vec()).expect("shape matches")
}
