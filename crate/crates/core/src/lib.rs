pub mod corpus;
pub mod curation;
pub mod evaluation;
pub mod mixer;
pub mod model;
pub mod synth;
pub mod training;
