//! Acceptance suite for `culb`. Everything lives in `tests/acceptance.rs`;
//! run it with `cargo test -p culb-repro --test acceptance`.
