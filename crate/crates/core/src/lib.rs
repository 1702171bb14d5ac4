pub mod corpus;
pub mod evaluation;
pub mod graph;
pub mod identifier;
pub mod knowledge;
pub mod llm;
pub mod pipeline;
pub mod reasoner;
pub mod retrieval;
pub mod text_index;
pub mod tools;
