pub mod coherence;
pub mod corpus;
pub mod dialoguegat;
pub mod generator;
pub mod graphbuild;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod pretrain;
pub mod text;
