//! Online identification of jammed on/off valves in a digital hydraulic
//! actuator from supply and chamber pressure measurements.

pub mod cli;
pub mod estimator;
pub mod model;
pub mod pipeline;
pub mod simulator;
pub mod trace_io;
