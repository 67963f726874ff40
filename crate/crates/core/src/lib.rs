pub mod agents;
pub mod calibration;
pub mod ecn;
pub mod game;
pub mod lob;
pub mod policy;
pub mod rng;
pub mod sim;
