pub mod archive;
pub mod atmoe;
pub mod autograd;
pub mod backbone;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod hdm;
pub mod losses;
pub mod modality;
pub mod model;
pub mod nn;
pub mod optim;
pub mod oracles;
pub mod parallel;
pub mod params;
pub mod pife;
pub mod render;
pub mod sweep;
pub mod tensor;
pub mod trainer;
