//! Library side of the `flowserve` command: benchmark harness and batch
//! LIME, kept here so tests can drive them without a subprocess.

pub mod bench;
pub mod lime_batch;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;
