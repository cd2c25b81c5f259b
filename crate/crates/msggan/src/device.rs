//! Compute device selection. The tensor backend is pure CPU today; the
//! registry keeps selection uniform with the other strategy families and
//! gives the `MSGGAN_DEVICE` environment variable a single decoding point.

use std::sync::Arc;

use crate::error::Result;
use crate::registry::Registry;

pub const DEVICE_ENV: &str = "MSGGAN_DEVICE";

pub trait Device: Send + Sync {
    fn name(&self) -> &'static str;
    fn description(&self) -> &'static str;
}

struct Cpu;

impl Device for Cpu {
    fn name(&self) -> &'static str {
        "cpu"
    }
    fn description(&self) -> &'static str {
        "single-threaded CPU (deterministic reference backend)"
    }
}

pub fn device_registry() -> Registry<dyn Device> {
    let mut r: Registry<dyn Device> = Registry::new("device");
    r.register("cpu", Arc::new(Cpu));
    r
}

/// Device named by `MSGGAN_DEVICE`, defaulting to cpu.
pub fn select_from_env() -> Result<Arc<dyn Device>> {
    let name = std::env::var(DEVICE_ENV).unwrap_or_else(|_| "cpu".into());
    device_registry().get(&name)
}
