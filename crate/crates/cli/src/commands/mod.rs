//! One module per experiment command. Each command exposes
//! `schema()` and `run(cfg, out_dir) -> Result<Vec<String>>`; the returned
//! strings name failed assertions (empty means everything held), which the
//! binary maps to the exit code.

pub mod kernel_check;
pub mod oversmoothing;
pub mod stability;
pub mod truncation;
pub mod forecast;
