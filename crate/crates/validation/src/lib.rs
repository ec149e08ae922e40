//! Holds the workspace acceptance suite in `tests/acceptance.rs`; there is no
//! library code. Run it with `cargo test -p dynframe-validation`.
