//! IO, configuration, external-agent wiring, and the pipeline driver for the
//! trajectory-calibration laboratory built on `steca-core`.

pub mod config;
pub mod external;
pub mod io;
pub mod pipeline;

/// Process exit codes used by the CLI.
pub mod exit {
    pub const OK: i32 = 0;
    pub const CONFIG: i32 = 2;
    pub const DEPENDENCY: i32 = 3;
    pub const STAGE: i32 = 4;
}
