pub mod attr_vocab;
pub mod autodiff;
pub mod classifier;
pub mod encoders;
pub mod eval;
pub mod meta_net;
pub mod par;
pub mod prompt;
pub mod rng;
pub mod tokenizer;
