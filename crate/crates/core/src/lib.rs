pub mod bench;
pub mod channel;
pub mod error;
pub mod kinematics;
pub mod mm_surrogate;
pub mod numerics;
pub mod orchestrator;
pub mod ratecalc;
pub mod socp;
