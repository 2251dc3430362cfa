pub mod bias;
pub mod bootstrap;
pub mod blocks;
pub mod cmse;
pub mod diff;
pub mod error;
pub mod estimate;
pub mod family;
pub mod model;
pub mod optim;
pub mod predict;
pub mod rng;
pub mod sim;
