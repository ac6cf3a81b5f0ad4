//! The Y-shaped network and the mechanics of joint training and block-prefix adaptation.

pub mod checkpoint;
pub mod network;
pub mod spec;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use network::{aux_accuracy, AuxOutput, BnPolicy, JointGraph, Model, ModelState, StepLosses, BN_MOMENTUM, STATE_FORMAT};
pub use spec::{Activation, BlockSpec, DiscriminatorSpec, ModelSpec};
