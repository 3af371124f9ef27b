//! Update operators applied to frozen weight matrices.

pub mod boft;
pub mod hybrid;
pub mod lora;
pub mod unitary;

pub use boft::{
    boft_delta, boft_q_step, butterfly_compose, butterfly_matvec, butterfly_step_project,
    cayley_orthonormal, cayley_q_grad, BoftForm, BoftState, ButterflyLevel,
};
pub use hybrid::{hybrid_delta, hybrid_lambda, HybridState};
pub use lora::{lora_clamp, lora_delta, lora_ga_init, lora_grad_step, ClampOutcome, LoraAdapter};
pub use unitary::{
    skew_hermitian_grad, unitary_compose, unitary_exp_update, unitary_matvec,
    unitary_renormalize, UnitaryGrads, UnitaryParam,
};
