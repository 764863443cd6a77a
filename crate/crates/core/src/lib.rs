pub mod autodiff;
pub mod cli;
pub mod extract;
pub mod io;
pub mod losses;
mod mc_table;
pub mod model;
pub mod persistence;
pub mod pointcloud;
pub mod synthetic;
pub mod trainer;
pub mod verify;
