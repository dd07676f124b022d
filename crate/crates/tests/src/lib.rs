//! Holds the acceptance suite in `tests/acceptance.rs`. The suite lives in
//! its own package so that, when it fails, cargo has already run the unit
//! and integration tests of every other crate.
