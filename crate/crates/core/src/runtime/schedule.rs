use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleConfig {
    /// Chunk length `T`.
    pub horizon: usize,
    /// Ticks executed from a chunk before the next inference is triggered.
    pub exec_steps: usize,
    /// Committed actions handed to the next inference.
    pub prefix_len: usize,
    /// Nominal inference latency in ticks.
    pub latency_ticks: usize,
    pub control_rate_hz: f64,
    /// Draw each latency from `{latency − 1, latency}` instead of using it as is.
    pub jitter: bool,
    pub jitter_seed: u64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            horizon: 30,
            exec_steps: 15,
            prefix_len: 5,
            latency_ticks: 3,
            control_rate_hz: 30.0,
            jitter: false,
            jitter_seed: 0,
        }
    }
}

impl ScheduleConfig {
    pub fn tick_seconds(&self) -> f64 {
        1.0 / self.control_rate_hz
    }
}

/// Checks that asynchronous execution can never run out of actions.
pub fn validate_schedule(cfg: &ScheduleConfig) -> Result<()> {
    if cfg.exec_steps < 1 {
        return Err(Error::Layout("exec_steps must be at least 1".into()));
    }
    if cfg.exec_steps + cfg.prefix_len > cfg.horizon {
        return Err(Error::Layout(format!(
            "exec_steps {} + prefix_len {} exceeds horizon {}",
            cfg.exec_steps, cfg.prefix_len, cfg.horizon
        )));
    }
    if cfg.prefix_len < cfg.latency_ticks {
        return Err(Error::StarvationRisk { prefix: cfg.prefix_len, latency: cfg.latency_ticks });
    }
    if cfg.exec_steps < cfg.latency_ticks {
        return Err(Error::Layout(format!(
            "exec_steps {} is shorter than latency {}: the next trigger would precede the chunk's arrival",
            cfg.exec_steps, cfg.latency_ticks
        )));
    }
    if !(cfg.control_rate_hz > 0.0) {
        return Err(Error::Layout("control rate must be positive".into()));
    }
    Ok(())
}

/// Synchronous mode ignores the prefix; only the chunk must hold `T_e` steps.
pub(crate) fn validate_sync(cfg: &ScheduleConfig) -> Result<()> {
    if cfg.exec_steps < 1 || cfg.exec_steps > cfg.horizon {
        return Err(Error::Layout(format!(
            "exec_steps {} must lie in [1, horizon {}]",
            cfg.exec_steps, cfg.horizon
        )));
    }
    Ok(())
}
