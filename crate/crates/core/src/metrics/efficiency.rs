use std::path::PathBuf;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};

/// Cumulative energy counter of the platform.
pub trait PowerSampler {
    /// Energy consumed since an arbitrary origin, in joules.
    fn energy_joules(&mut self) -> Result<f64>;
}

/// Linux powercap (RAPL) package counter.
#[derive(Debug, Clone)]
pub struct RaplSampler {
    path: PathBuf,
    range_uj: Option<f64>,
    last_uj: Option<f64>,
    wraps: f64,
}

impl RaplSampler {
    pub const DEFAULT_PATH: &'static str = "/sys/class/powercap/intel-rapl:0/energy_uj";

    /// `None` when the counter is absent or unreadable.
    pub fn detect() -> Option<Self> {
        let path = PathBuf::from(Self::DEFAULT_PATH);
        std::fs::read_to_string(&path)
            .ok()?
            .trim()
            .parse::<f64>()
            .ok()?;
        let range_uj = std::fs::read_to_string(path.with_file_name("max_energy_range_uj"))
            .ok()
            .and_then(|s| s.trim().parse().ok());
        Some(Self {
            path,
            range_uj,
            last_uj: None,
            wraps: 0.0,
        })
    }
}

impl PowerSampler for RaplSampler {
    fn energy_joules(&mut self) -> Result<f64> {
        let text = std::fs::read_to_string(&self.path).map_err(|e| Error::io(&self.path, e))?;
        let uj: f64 = text
            .trim()
            .parse()
            .map_err(|e| Error::Data(format!("{}: {e}", self.path.display())))?;
        if let (Some(last), Some(range)) = (self.last_uj, self.range_uj) {
            if uj < last {
                self.wraps += range;
            }
        }
        self.last_uj = Some(uj);
        Ok((uj + self.wraps) * 1e-6)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Efficiency {
    pub fps: f64,
    pub seconds: f64,
    pub passes: usize,
    /// Absent without a power sampler.
    pub joules_per_frame: Option<f64>,
}

/// Times `n_passes` calls of `forward` after `warmup` untimed calls.
pub fn efficiency_benchmark(
    mut forward: impl FnMut() -> Result<()>,
    n_passes: usize,
    warmup: usize,
    mut sampler: Option<&mut dyn PowerSampler>,
) -> Result<Efficiency> {
    if n_passes == 0 {
        bail!(Config, "efficiency benchmark needs at least one pass");
    }
    for _ in 0..warmup {
        forward()?;
    }
    let e0 = match sampler.as_mut() {
        Some(s) => Some(s.energy_joules()?),
        None => None,
    };
    let start = Instant::now();
    for _ in 0..n_passes {
        forward()?;
    }
    let seconds = start.elapsed().as_secs_f64().max(f64::MIN_POSITIVE);
    let joules_per_frame = match (sampler, e0) {
        (Some(s), Some(e0)) => Some((s.energy_joules()? - e0) / n_passes as f64),
        _ => None,
    };
    Ok(Efficiency {
        fps: n_passes as f64 / seconds,
        seconds,
        passes: n_passes,
        joules_per_frame,
    })
}
