pub mod collector;
pub mod corpus;
pub mod evaluator;
pub mod gateway;
pub mod pipeline;
pub mod replay;
pub mod reviser;
pub mod sandbox;
