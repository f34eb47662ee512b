use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use crate::transport::{Role, SessionId};

/// Time source for phase measurements.
pub trait Clock: Send + Sync {
    /// Time elapsed since an arbitrary fixed origin.
    fn now(&self) -> Duration;
}

#[derive(Debug, Clone, Copy)]
pub struct MonotonicClock {
    origin: Instant,
}

impl Default for MonotonicClock {
    fn default() -> Self {
        Self { origin: Instant::now() }
    }
}

impl Clock for MonotonicClock {
    fn now(&self) -> Duration {
        self.origin.elapsed()
    }
}

/// Advances by a fixed step on every reading.
#[derive(Debug, Default)]
pub struct FakeClock {
    ticks: AtomicU64,
    step: Duration,
}

impl FakeClock {
    pub fn new(step: Duration) -> Self {
        Self {
            ticks: AtomicU64::new(0),
            step,
        }
    }
}

impl Clock for FakeClock {
    fn now(&self) -> Duration {
        self.step * self.ticks.fetch_add(1, Ordering::SeqCst) as u32
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Phase {
    /// Owner decrypting the blinded node.
    Decrypt,
    /// Owner garbling and answering the transfer request.
    Garble,
    /// Analyst transfer request, label receipt and evaluation.
    Evaluate,
    /// Integrity proof computation or verification.
    Verify,
    /// Server wall time of one comparison round.
    Round,
    /// Server wall time of a whole encryption session.
    Session,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PhaseSample {
    pub session: SessionId,
    pub round: u32,
    pub role: Role,
    pub phase: Phase,
    pub elapsed: Duration,
}

/// Shared sink for per-phase timings from all parties.
#[derive(Clone)]
pub struct Metrics {
    clock: Arc<dyn Clock>,
    samples: Arc<Mutex<Vec<PhaseSample>>>,
}

impl std::fmt::Debug for Metrics {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Metrics").field("samples", &self.len()).finish()
    }
}

impl Default for Metrics {
    fn default() -> Self {
        Self::with_clock(Arc::new(MonotonicClock::default()))
    }
}

impl Metrics {
    pub fn with_clock(clock: Arc<dyn Clock>) -> Self {
        Self {
            clock,
            samples: Arc::new(Mutex::new(Vec::new())),
        }
    }

    pub fn now(&self) -> Duration {
        self.clock.now()
    }

    pub fn record(&self, sample: PhaseSample) {
        self.samples.lock().unwrap_or_else(|e| e.into_inner()).push(sample);
    }

    pub fn samples(&self) -> Vec<PhaseSample> {
        self.samples.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }

    pub fn len(&self) -> usize {
        self.samples.lock().unwrap_or_else(|e| e.into_inner()).len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn clear(&self) {
        self.samples.lock().unwrap_or_else(|e| e.into_inner()).clear();
    }
}

/// Runs `f` and records its duration when a sink is present.
pub(crate) fn timed<T>(
    metrics: Option<&Metrics>,
    session: SessionId,
    round: u32,
    role: Role,
    phase: Phase,
    f: impl FnOnce() -> T,
) -> T {
    let Some(m) = metrics else {
        return f();
    };
    let start = m.now();
    let out = f();
    let elapsed = m.now().saturating_sub(start);
    m.record(PhaseSample {
        session,
        round,
        role,
        phase,
        elapsed,
    });
    out
}
