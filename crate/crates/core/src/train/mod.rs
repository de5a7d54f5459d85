//! Desk-scale supervised training on synthetic scenes.

mod data;
mod loss;
mod metrics;
mod pnm;
mod trainer;

pub use data::{class_color, gen_synthetic_dataset, make_batch, Sample, SynthConfig, SynthDataset};
pub use loss::{cross_entropy_loss, IGNORE_INDEX};
pub use metrics::{argmax_labels, evaluate_miou, predict, ConfusionMatrix, EvalReport};
pub use pnm::{decode_pnm, encode_pgm, encode_ppm, read_pnm, write_pgm, write_ppm, PnmImage};
pub use trainer::{batch_indices, poly_lr, StepRecord, TrainConfig, TrainLog, Trainer};
