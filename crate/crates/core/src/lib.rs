pub mod autograd;
pub mod corpus;
pub mod digest;
pub mod harness;
pub mod model;
pub mod optim;
pub mod persistence;
pub mod rng;
pub mod tagger;
pub mod tokenizer;
pub mod trainer;
pub mod vocab;
