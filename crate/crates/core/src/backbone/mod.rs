//! The frozen environment the cells are searched in: synthetic data, the
//! two-level U-Net, the segmentation loss and patient-level Dice.

pub mod data;
pub mod loss;
pub mod pretrain;
pub mod unet;

pub use data::{generate_dataset, DataConfig, Dataset, Slice, Split, SynthVolume, CLASSES};
pub use loss::{loss, loss_and_grad, patient_dice, LossParts, PatientDice};
pub use pretrain::{evaluate_backbone, evaluate_split, pretrain_backbone, EvalReport, PretrainConfig, PretrainReport};
pub use unet::{EncodedSample, EncoderVars, Level, SkipMode, UNetBackbone, UNetChannels};
