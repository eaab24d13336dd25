//! Hybrid MPC for a platoon of vehicles with gearboxes.

pub mod cli;
pub mod controllers;
pub mod error;
pub mod mip;
pub mod mld;
pub mod models;
pub mod mpc;
pub mod sim;
