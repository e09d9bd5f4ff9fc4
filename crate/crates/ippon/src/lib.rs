//! IPPON: informative path planning for open-vocabulary object-goal
//! navigation. Bayesian 3D object-probability mapping, LLM-derived
//! semantic proximity guidance, ESDF traversability, and gain-to-cost
//! viewpoint selection, validated in synthetic multi-room scenes.

pub mod config;
pub mod esdf;
pub mod geometry;
pub mod grid;
pub mod guidance;
pub mod llm;
pub mod metrics;
pub mod planner;
pub mod scenes;
pub mod sim;
pub mod voxel_map;
