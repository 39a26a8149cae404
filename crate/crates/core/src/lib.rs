//! Classical and proximal causal identification over acyclic directed mixed
//! graphs.

pub mod estimand;
pub mod graph;
pub mod id;
pub mod oracle;
pub mod proximal;
pub mod sim;
pub mod table;
pub mod verify;
