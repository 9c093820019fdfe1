pub mod matcore;
pub mod riskfn;
pub mod stochsys;
pub mod certs;
pub mod riskctl;
