//! Benchmark harnesses behind the `teachkit` binary.
//!
//! Each harness returns a serializable report; the binary writes it to
//! `--out`. [`acceptance`] strings them together into pass/fail lines.

pub mod acceptance;
pub mod classify_bench;
pub mod diversity_bench;
pub mod live_bench;
pub mod oracles;
pub mod seg_bench;
