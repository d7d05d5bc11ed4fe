pub mod dataset;
pub mod features;
pub mod mpc;
pub mod plant;
pub mod qp;
pub mod runtime;
pub mod svr;
