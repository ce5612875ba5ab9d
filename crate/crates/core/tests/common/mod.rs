#![allow(dead_code)]

pub mod gradcheck;

/// Process-wide setup shared by the integration tests.
pub fn init() {
    static ONCE: std::sync::Once = std::sync::Once::new();
    ONCE.call_once(qmat_core::tune_allocator);
}
