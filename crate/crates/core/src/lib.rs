//! Quasi-steady-state simulation and stability analysis for radial feeders
//! with Volt-VAR/Volt-Watt inverters and adaptive voltage mitigation.

pub mod adaptive;
pub mod feeder;
pub mod inverter;
pub mod io;
pub mod observer;
pub mod par;
pub mod scenarios;
pub mod sim;
pub mod stability;
pub mod verification;
