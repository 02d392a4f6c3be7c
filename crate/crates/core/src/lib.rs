pub mod geometry;
pub mod imaging;
pub mod noise;
pub mod renderer;
pub mod domain_rand;
pub mod icp;
pub mod nn;
pub mod policy;
pub mod tasks;
pub mod control;
