pub mod agents;
pub mod bench;
pub mod checkpoint;
pub mod llm_gateway;
pub mod orchestrator;
pub mod sim_bridge;
pub mod testkit;
mod sync;
