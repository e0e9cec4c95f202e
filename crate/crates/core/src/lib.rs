pub mod ablation;
pub mod autograd;
pub mod blocks;
pub mod cli;
pub mod cost;
pub mod erf;
pub mod error;
pub mod gradcheck;
pub mod mafpn;
pub mod model;
pub mod nn;
pub mod ops;
pub mod rep_conv;
pub mod tensor;
pub mod train;
pub mod verify;
pub mod weights;
