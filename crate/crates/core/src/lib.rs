pub mod align;
pub mod cli;
pub mod cscfg;
pub mod harness;
pub mod mapping;
pub mod model;
pub mod partition;
pub mod pipeline;
pub mod reconstruct;
pub mod sampler;
pub mod scoring;
