pub mod encoders;
pub mod featpipe;
pub mod gradcore;
pub mod kv;
pub mod losses;
pub mod sampler;
pub mod synth;
pub mod recommend;
pub mod trainer;
pub mod cli;
