//! Process-wide counter of outbound network operations.
//!
//! Every networked code path (the HTTP backend, the external tool adapter,
//! real web fetching) records itself here before touching the wire. Offline
//! test suites assert the counter stays at zero across a full engine run,
//! which pins the guarantee that the scripted backend and fixture agents
//! never generate network traffic.

use std::sync::atomic::{AtomicUsize, Ordering};

static OUTBOUND_OPS: AtomicUsize = AtomicUsize::new(0);

/// Record one outbound network operation.
pub fn record_outbound() {
    OUTBOUND_OPS.fetch_add(1, Ordering::Relaxed);
}

/// Total outbound operations recorded by this process.
pub fn outbound_count() -> usize {
    OUTBOUND_OPS.load(Ordering::Relaxed)
}
