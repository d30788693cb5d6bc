//! Holds the `acceptance` test target. It lives in its own package so that a
//! failing criterion never prevents the library and CLI test suites from
//! running first under `cargo test --workspace`.
