pub mod contrastive;
pub mod encoders;
pub mod eval;
pub mod geodata;
pub mod numerics;
pub mod seed;
pub mod training;
