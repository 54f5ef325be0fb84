//! Acceptance checks for `slotfeat`; everything lives in `tests/acceptance.rs`.
