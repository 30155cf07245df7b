//! Simulated message transport with hierarchical locality.
//!
//! Units live on virtual nodes (SMP placement: a node is filled before the
//! next one is used); nodes sit on blades grouped into chassis, chassis into
//! groups. Every remote transfer is classified by the deepest hierarchy level
//! the two endpoints share and charged a linear latency `base + nbytes/bw` for
//! that class. Intra-node transfers in locality-aware mode bypass messaging
//! entirely and are served by `direct_copy`; everything else travels as
//! envelopes through one passive-target service worker per node, with FIFO
//! delivery per (origin, target) pair.

use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crate::error::{LaunchError, RtError};
use crate::gaspace::{RegionView, SegmentId, SegmentRegistry, UnitId};

/// Hierarchy distance between two units, ordered from cheapest to priciest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum HopClass {
    /// Same virtual node (shared memory).
    IntraNode,
    /// Different nodes on the same chassis (backplane).
    Rank1,
    /// Different chassis in the same group (copper).
    Rank2,
    /// Different groups (optical).
    Rank3,
}

impl HopClass {
    pub const ALL: [HopClass; 4] =
        [HopClass::IntraNode, HopClass::Rank1, HopClass::Rank2, HopClass::Rank3];

    fn index(self) -> usize {
        match self {
            HopClass::IntraNode => 0,
            HopClass::Rank1 => 1,
            HopClass::Rank2 => 2,
            HopClass::Rank3 => 3,
        }
    }
}

/// How remote transfers are routed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RoutingMode {
    /// Same-node blocking transfers use direct memory copies; everything else
    /// goes through the message transport.
    LocalityAware,
    /// All transfers go through the message transport, intra-node ones charged
    /// at the `IntraNode` class. Models a locality-oblivious RMA baseline.
    Oblivious,
}

impl RoutingMode {
    pub fn as_str(self) -> &'static str {
        match self {
            RoutingMode::LocalityAware => "locality_aware",
            RoutingMode::Oblivious => "oblivious",
        }
    }

    pub fn parse(s: &str) -> Option<RoutingMode> {
        match s.to_ascii_lowercase().as_str() {
            "locality_aware" => Some(RoutingMode::LocalityAware),
            "oblivious" => Some(RoutingMode::Oblivious),
            _ => None,
        }
    }
}

impl std::fmt::Display for RoutingMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for RoutingMode {
    type Err = String;

    fn from_str(s: &str) -> Result<RoutingMode, String> {
        RoutingMode::parse(s)
            .ok_or_else(|| format!("unknown routing mode {s:?}; use locality_aware or oblivious"))
    }
}

/// Static machine shape: how units map onto nodes, chassis, and groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Topology {
    pub num_units: u32,
    pub node_size: u32,
    pub blades_per_chassis: u32,
    pub chassis_per_group: u32,
}

impl Topology {
    pub fn new(
        num_units: u32,
        node_size: u32,
        blades_per_chassis: u32,
        chassis_per_group: u32,
    ) -> Result<Topology, LaunchError> {
        if num_units == 0 {
            return Err(LaunchError::InvalidConfig("num_units must be >= 1".into()));
        }
        if node_size == 0 || blades_per_chassis == 0 || chassis_per_group == 0 {
            return Err(LaunchError::InvalidConfig(
                "node_size, blades_per_chassis, and chassis_per_group must be >= 1".into(),
            ));
        }
        Ok(Topology { num_units, node_size, blades_per_chassis, chassis_per_group })
    }

    /// Node hosting a unit (units fill node 0 first, then node 1, ...).
    pub fn node_of(&self, unit: UnitId) -> u32 {
        unit.0 / self.node_size
    }

    pub fn chassis_of_node(&self, node: u32) -> u32 {
        node / self.blades_per_chassis
    }

    pub fn group_of_chassis(&self, chassis: u32) -> u32 {
        chassis / self.chassis_per_group
    }

    pub fn num_nodes(&self) -> u32 {
        (self.num_units + self.node_size - 1) / self.node_size
    }

    /// Deepest shared level between two units.
    pub fn classify(&self, a: UnitId, b: UnitId) -> HopClass {
        let (na, nb) = (self.node_of(a), self.node_of(b));
        if na == nb {
            return HopClass::IntraNode;
        }
        let (ca, cb) = (self.chassis_of_node(na), self.chassis_of_node(nb));
        if ca == cb {
            return HopClass::Rank1;
        }
        if self.group_of_chassis(ca) == self.group_of_chassis(cb) {
            return HopClass::Rank2;
        }
        HopClass::Rank3
    }

    pub fn same_node(&self, a: UnitId, b: UnitId) -> bool {
        self.node_of(a) == self.node_of(b)
    }
}

/// Linear per-message cost model: `base[class] + nbytes * inv_bandwidth[class]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatencyModel {
    /// Per-class base latency in seconds, indexed by `HopClass`.
    pub base_s: [f64; 4],
    /// Per-class inverse bandwidth in seconds per byte.
    pub invbw_s_per_byte: [f64; 4],
}

impl Default for LatencyModel {
    fn default() -> Self {
        // Base latencies 0.5/2/4/8 us; inverse bandwidths 0.1/0.5/0.7/1.0 ns per byte.
        LatencyModel {
            base_s: [0.5e-6, 2.0e-6, 4.0e-6, 8.0e-6],
            invbw_s_per_byte: [0.1e-9, 0.5e-9, 0.7e-9, 1.0e-9],
        }
    }
}

impl LatencyModel {
    /// Charge for one message of `nbytes` payload at hop class `class`.
    pub fn cost(&self, class: HopClass, nbytes: u64) -> Duration {
        let i = class.index();
        let secs = self.base_s[i] + nbytes as f64 * self.invbw_s_per_byte[i];
        Duration::from_secs_f64(secs)
    }

    pub fn validate(&self) -> Result<(), LaunchError> {
        for v in self.base_s.iter().chain(self.invbw_s_per_byte.iter()) {
            if !v.is_finite() || *v < 0.0 {
                return Err(LaunchError::InvalidConfig(
                    "latency parameters must be finite and >= 0".into(),
                ));
            }
        }
        for i in 0..3 {
            if self.base_s[i] > self.base_s[i + 1]
                || self.invbw_s_per_byte[i] > self.invbw_s_per_byte[i + 1]
            {
                return Err(LaunchError::InvalidConfig(
                    "latency parameters must be non-decreasing from intra-node to rank-3".into(),
                ));
            }
        }
        Ok(())
    }
}

/// One simulated message.
#[derive(Debug)]
pub struct Envelope {
    pub kind: EnvelopeKind,
    pub origin: UnitId,
    pub target: UnitId,
    pub segment: SegmentId,
    pub offset: u64,
    pub nbytes: u64,
    /// Request sequence number per (origin, target); replies carry the seq of
    /// the request they answer.
    pub seq: u64,
}

#[derive(Debug)]
pub enum EnvelopeKind {
    Put { payload: Vec<u8> },
    GetRequest,
    GetReply { result: Result<Vec<u8>, String> },
    Ack { result: Result<(), String> },
}

impl Envelope {
    fn payload_len(&self) -> u64 {
        match &self.kind {
            EnvelopeKind::Put { payload } => payload.len() as u64,
            EnvelopeKind::GetReply { result: Ok(payload) } => payload.len() as u64,
            _ => 0,
        }
    }

    fn is_request(&self) -> bool {
        matches!(self.kind, EnvelopeKind::Put { .. } | EnvelopeKind::GetRequest)
    }
}

/// Runtime-wide transport counters (test and benchmark oracles).
#[derive(Debug, Default)]
pub struct Counters {
    envelopes: AtomicU64,
    direct_copies: AtomicU64,
    flushes: AtomicU64,
    charged_nanos: AtomicU64,
}

/// Point-in-time copy of the transport counters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CounterSnapshot {
    pub envelopes: u64,
    pub direct_copies: u64,
    pub flushes: u64,
    pub charged_nanos: u64,
}

impl Counters {
    pub fn snapshot(&self) -> CounterSnapshot {
        CounterSnapshot {
            envelopes: self.envelopes.load(Ordering::SeqCst),
            direct_copies: self.direct_copies.load(Ordering::SeqCst),
            flushes: self.flushes.load(Ordering::SeqCst),
            charged_nanos: self.charged_nanos.load(Ordering::SeqCst),
        }
    }
}

/// Once tripped, every blocked collective or flush bails out with `Aborted`.
#[derive(Debug, Default)]
pub struct AbortFlag {
    tripped: AtomicBool,
    reason: Mutex<Option<String>>,
}

impl AbortFlag {
    pub fn trip(&self, reason: String) {
        if !self.tripped.swap(true, Ordering::SeqCst) {
            *lock_clean(&self.reason) = Some(reason);
        }
    }

    pub fn is_tripped(&self) -> bool {
        self.tripped.load(Ordering::SeqCst)
    }

    pub fn as_error(&self) -> RtError {
        let reason = lock_clean(&self.reason).clone().unwrap_or_else(|| "aborted".into());
        RtError::Aborted(reason)
    }
}

/// Lock that shrugs off poisoning (an aborted peer must not wedge teardown).
pub(crate) fn lock_clean<T>(m: &Mutex<T>) -> std::sync::MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|p| p.into_inner())
}

#[derive(Debug, Default)]
struct Lane {
    /// Highest request seq toward this target that has locally completed.
    done: u64,
    /// Delivery errors by request seq, drained by wait/blocking ops.
    failures: HashMap<u64, String>,
    /// Get-reply payloads by request seq, drained by wait/blocking gets.
    payloads: HashMap<u64, Vec<u8>>,
}

/// Per-origin completion tracking for in-flight requests, keyed by target.
#[derive(Debug, Default)]
pub(crate) struct CompletionBoard {
    lanes: Mutex<HashMap<UnitId, Lane>>,
    cv: Condvar,
}

enum Settlement {
    Put(Result<(), String>),
    Get(Result<Vec<u8>, String>),
}

impl CompletionBoard {
    fn settle(&self, from: UnitId, seq: u64, outcome: Settlement) {
        let mut lanes = lock_clean(&self.lanes);
        let lane = lanes.entry(from).or_default();
        lane.done = lane.done.max(seq);
        match outcome {
            Settlement::Put(Ok(())) => {}
            Settlement::Put(Err(reason)) => {
                lane.failures.insert(seq, reason);
            }
            Settlement::Get(Ok(payload)) => {
                lane.payloads.insert(seq, payload);
            }
            Settlement::Get(Err(reason)) => {
                lane.failures.insert(seq, reason);
            }
        }
        self.cv.notify_all();
    }

    fn await_done(&self, target: UnitId, upto: u64, abort: &AbortFlag) -> Result<(), RtError> {
        // Replies to microsecond-scale charges usually land within a few
        // scheduler yields; spin briefly before paying for a condvar park.
        for _ in 0..64 {
            if self.completed(target, upto) {
                return Ok(());
            }
            thread::yield_now();
        }
        let mut lanes = lock_clean(&self.lanes);
        loop {
            if lanes.entry(target).or_default().done >= upto {
                return Ok(());
            }
            if abort.is_tripped() {
                return Err(abort.as_error());
            }
            let (guard, _) = self
                .cv
                .wait_timeout(lanes, Duration::from_millis(25))
                .unwrap_or_else(|p| p.into_inner());
            lanes = guard;
        }
    }

    fn completed(&self, target: UnitId, seq: u64) -> bool {
        let mut lanes = lock_clean(&self.lanes);
        lanes.entry(target).or_default().done >= seq
    }

    fn has_failure(&self, target: UnitId, seq: u64) -> bool {
        let mut lanes = lock_clean(&self.lanes);
        lanes.entry(target).or_default().failures.contains_key(&seq)
    }

    fn take_failure(&self, target: UnitId, seq: u64) -> Option<String> {
        let mut lanes = lock_clean(&self.lanes);
        lanes.entry(target).or_default().failures.remove(&seq)
    }

    fn take_payload(&self, target: UnitId, seq: u64) -> Option<Vec<u8>> {
        let mut lanes = lock_clean(&self.lanes);
        lanes.entry(target).or_default().payloads.remove(&seq)
    }
}

enum WorkerMsg {
    Deliver(Envelope),
    Shutdown,
}

/// Shared transport state: topology, latency model, node workers, counters.
pub(crate) struct Fabric {
    pub(crate) topology: Topology,
    pub(crate) latency: LatencyModel,
    pub(crate) registry: Arc<SegmentRegistry>,
    pub(crate) abort: Arc<AbortFlag>,
    pub(crate) counters: Counters,
    boards: Vec<CompletionBoard>,
    node_tx: Vec<Sender<WorkerMsg>>,
}

impl Fabric {
    /// Build the fabric and start one service worker per node.
    pub(crate) fn start(
        topology: Topology,
        latency: LatencyModel,
        registry: Arc<SegmentRegistry>,
        abort: Arc<AbortFlag>,
    ) -> (Arc<Fabric>, Vec<JoinHandle<()>>) {
        let nodes = topology.num_nodes() as usize;
        let mut node_tx = Vec::with_capacity(nodes);
        let mut node_rx = Vec::with_capacity(nodes);
        for _ in 0..nodes {
            let (tx, rx) = mpsc::channel();
            node_tx.push(tx);
            node_rx.push(rx);
        }
        let boards = (0..topology.num_units).map(|_| CompletionBoard::default()).collect();
        let fabric = Arc::new(Fabric {
            topology,
            latency,
            registry,
            abort,
            counters: Counters::default(),
            boards,
            node_tx,
        });
        let mut workers = Vec::with_capacity(nodes);
        for (node, rx) in node_rx.into_iter().enumerate() {
            let fab = Arc::clone(&fabric);
            let handle = thread::Builder::new()
                .name(format!("node-worker-{node}"))
                .spawn(move || serve(&fab, rx))
                .expect("spawn node worker");
            workers.push(handle);
        }
        (fabric, workers)
    }

    /// Enqueue an envelope for delivery at the target unit's node.
    pub(crate) fn send(&self, env: Envelope) {
        self.counters.envelopes.fetch_add(1, Ordering::SeqCst);
        let node = self.topology.node_of(env.target) as usize;
        // A send after worker shutdown has no observers; drop it silently.
        let _ = self.node_tx[node].send(WorkerMsg::Deliver(env));
    }

    /// Block until every request this origin sent to `target` (seq <= upto)
    /// has locally completed.
    pub(crate) fn flush(&self, origin: UnitId, target: UnitId, upto: u64) -> Result<(), RtError> {
        self.counters.flushes.fetch_add(1, Ordering::SeqCst);
        if upto == 0 {
            return Ok(());
        }
        self.boards[origin.0 as usize].await_done(target, upto, &self.abort)
    }

    pub(crate) fn op_completed(&self, origin: UnitId, target: UnitId, seq: u64) -> bool {
        self.boards[origin.0 as usize].completed(target, seq)
    }

    /// Non-draining check: did this request complete with a delivery error?
    pub(crate) fn op_failed(&self, origin: UnitId, target: UnitId, seq: u64) -> bool {
        self.boards[origin.0 as usize].has_failure(target, seq)
    }

    pub(crate) fn take_failure(&self, origin: UnitId, target: UnitId, seq: u64) -> Option<String> {
        self.boards[origin.0 as usize].take_failure(target, seq)
    }

    pub(crate) fn take_payload(&self, origin: UnitId, target: UnitId, seq: u64) -> Option<Vec<u8>> {
        self.boards[origin.0 as usize].take_payload(target, seq)
    }

    /// Direct shared-memory write `src -> region`; the locality-aware
    /// intra-node path. Refused across nodes.
    pub(crate) fn direct_copy_in(
        &self,
        origin: UnitId,
        target: UnitId,
        view: &RegionView,
        src: &[u8],
    ) -> Result<(), RtError> {
        self.ensure_direct_allowed(origin, target)?;
        self.counters.direct_copies.fetch_add(1, Ordering::SeqCst);
        view.write_bytes(src);
        Ok(())
    }

    /// Direct shared-memory read `region -> dst`.
    pub(crate) fn direct_copy_out(
        &self,
        origin: UnitId,
        target: UnitId,
        view: &RegionView,
        dst: &mut [u8],
    ) -> Result<(), RtError> {
        self.ensure_direct_allowed(origin, target)?;
        self.counters.direct_copies.fetch_add(1, Ordering::SeqCst);
        view.read_bytes(dst);
        Ok(())
    }

    fn ensure_direct_allowed(&self, origin: UnitId, target: UnitId) -> Result<(), RtError> {
        if !self.topology.same_node(origin, target) {
            return Err(RtError::DirectCopyRefused { origin, target });
        }
        Ok(())
    }

    /// Ask every node worker to exit once its queue is drained, then join.
    pub(crate) fn shutdown(&self, workers: Vec<JoinHandle<()>>) {
        for tx in &self.node_tx {
            let _ = tx.send(WorkerMsg::Shutdown);
        }
        for w in workers {
            let _ = w.join();
        }
    }
}

/// Passive-target service loop: one per node. Applies every inbound envelope
/// in FIFO order, charging the simulated wire latency before the effect.
fn serve(fabric: &Fabric, rx: Receiver<WorkerMsg>) {
    // Request streams must arrive with consecutive seqs per (origin, target).
    let mut expected: HashMap<(UnitId, UnitId), u64> = HashMap::new();
    while let Ok(msg) = rx.recv() {
        let env = match msg {
            WorkerMsg::Deliver(env) => env,
            WorkerMsg::Shutdown => break,
        };
        let class = fabric.topology.classify(env.origin, env.target);
        let charge = fabric.latency.cost(class, env.payload_len());
        precise_wait(charge);
        fabric
            .counters
            .charged_nanos
            .fetch_add(charge.as_nanos().min(u64::MAX as u128) as u64, Ordering::SeqCst);

        if env.is_request() {
            let want = expected.entry((env.origin, env.target)).or_insert(1);
            if env.seq != *want {
                fabric.abort.trip(format!(
                    "transport FIFO violation: {} -> {} got seq {}, expected {}",
                    env.origin, env.target, env.seq, *want
                ));
                continue;
            }
            *want += 1;
        }

        match env.kind {
            EnvelopeKind::Put { payload } => {
                let result = fabric
                    .registry
                    .resolve(env.segment, env.target, env.offset, payload.len() as u64)
                    .map(|view| view.write_bytes(&payload))
                    .map_err(|e| e.to_string());
                fabric.send(Envelope {
                    kind: EnvelopeKind::Ack { result },
                    origin: env.target,
                    target: env.origin,
                    segment: env.segment,
                    offset: env.offset,
                    nbytes: env.nbytes,
                    seq: env.seq,
                });
            }
            EnvelopeKind::GetRequest => {
                let result = fabric
                    .registry
                    .resolve(env.segment, env.target, env.offset, env.nbytes)
                    .map(|view| {
                        let mut buf = vec![0u8; env.nbytes as usize];
                        view.read_bytes(&mut buf);
                        buf
                    })
                    .map_err(|e| e.to_string());
                fabric.send(Envelope {
                    kind: EnvelopeKind::GetReply { result },
                    origin: env.target,
                    target: env.origin,
                    segment: env.segment,
                    offset: env.offset,
                    nbytes: env.nbytes,
                    seq: env.seq,
                });
            }
            EnvelopeKind::Ack { result } => {
                // env.target is the unit that issued the request.
                fabric.boards[env.target.0 as usize].settle(
                    env.origin,
                    env.seq,
                    Settlement::Put(result),
                );
            }
            EnvelopeKind::GetReply { result } => {
                fabric.boards[env.target.0 as usize].settle(
                    env.origin,
                    env.seq,
                    Settlement::Get(result),
                );
            }
        }
    }
}

/// Wait `d` of wall time with ~microsecond precision. Short waits spin (they
/// are far below a scheduler quantum); long ones sleep for the bulk first.
pub(crate) fn precise_wait(d: Duration) {
    if d.is_zero() {
        return;
    }
    let deadline = Instant::now() + d;
    loop {
        let now = Instant::now();
        if now >= deadline {
            return;
        }
        let remaining = deadline - now;
        if remaining > Duration::from_micros(400) {
            thread::sleep(remaining - Duration::from_micros(200));
        } else {
            std::hint::spin_loop();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn topo(units: u32, ns: u32, bpc: u32, cpg: u32) -> Topology {
        Topology::new(units, ns, bpc, cpg).unwrap()
    }

    #[test]
    fn classify_same_node_sixteen_wide() {
        let t = topo(32, 16, 16, 2);
        assert_eq!(t.classify(UnitId(0), UnitId(15)), HopClass::IntraNode);
        assert_eq!(t.classify(UnitId(0), UnitId(16)), HopClass::Rank1);
    }

    #[test]
    fn classify_minimal_hierarchy_walks_all_tiers() {
        // One unit per node, two nodes per chassis, two chassis per group:
        // units 0..4 share group 0, units 4..8 group 1.
        let t = topo(8, 1, 2, 2);
        assert_eq!(t.classify(UnitId(0), UnitId(0)), HopClass::IntraNode);
        assert_eq!(t.classify(UnitId(0), UnitId(1)), HopClass::Rank1);
        assert_eq!(t.classify(UnitId(0), UnitId(2)), HopClass::Rank2);
        assert_eq!(t.classify(UnitId(0), UnitId(3)), HopClass::Rank2);
        assert_eq!(t.classify(UnitId(0), UnitId(4)), HopClass::Rank3);
        assert_eq!(t.classify(UnitId(0), UnitId(7)), HopClass::Rank3);
    }

    /// Independent arithmetic over the raw division chain, checked against
    /// `classify` for every pair.
    fn classify_brute(t: &Topology, a: u32, b: u32) -> HopClass {
        let na = a / t.node_size;
        let nb = b / t.node_size;
        let ca = na / t.blades_per_chassis;
        let cb = nb / t.blades_per_chassis;
        let ga = ca / t.chassis_per_group;
        let gb = cb / t.chassis_per_group;
        if na == nb {
            HopClass::IntraNode
        } else if ca == cb {
            HopClass::Rank1
        } else if ga == gb {
            HopClass::Rank2
        } else {
            HopClass::Rank3
        }
    }

    #[test]
    fn classify_matches_brute_force_enumeration() {
        let t = topo(8, 1, 2, 2);
        for a in 0..8 {
            for b in 0..8 {
                assert_eq!(t.classify(UnitId(a), UnitId(b)), classify_brute(&t, a, b));
            }
        }
    }

    #[test]
    fn classify_is_symmetric_and_reflexively_intra() {
        let t = topo(96, 3, 2, 4);
        for a in 0..96 {
            assert_eq!(t.classify(UnitId(a), UnitId(a)), HopClass::IntraNode);
            for b in 0..96 {
                assert_eq!(t.classify(UnitId(a), UnitId(b)), t.classify(UnitId(b), UnitId(a)));
            }
        }
    }

    proptest! {
        /// Coarsening any grouping parameter by an integer factor keeps every
        /// boundary nested inside an old one, so no pair's hop class can
        /// increase. (Non-multiple widenings can re-cut boundaries and are
        /// legitimately non-monotone.)
        #[test]
        fn classify_monotone_under_coarsening(
            units in 2u32..64,
            ns in 1u32..5,
            bpc in 1u32..5,
            cpg in 1u32..5,
            widen in 0usize..3,
            factor in 2u32..5,
            a in 0u32..64,
            b in 0u32..64,
        ) {
            prop_assume!(a < units && b < units);
            let t = topo(units, ns, bpc, cpg);
            let wider = match widen {
                0 => topo(units, ns * factor, bpc, cpg),
                1 => topo(units, ns, bpc * factor, cpg),
                _ => topo(units, ns, bpc, cpg * factor),
            };
            prop_assert!(wider.classify(UnitId(a), UnitId(b)) <= t.classify(UnitId(a), UnitId(b)));
        }
    }

    #[test]
    fn smp_placement_fills_nodes_in_order() {
        let t = topo(32, 16, 16, 2);
        for u in 0..16 {
            assert_eq!(t.node_of(UnitId(u)), 0);
        }
        for u in 16..32 {
            assert_eq!(t.node_of(UnitId(u)), 1);
        }
        assert_eq!(t.num_nodes(), 2);
    }

    #[test]
    fn cost_is_base_plus_linear_term() {
        let m = LatencyModel::default();
        let c = m.cost(HopClass::Rank1, 1024);
        let want = 2.0e-6 + 1024.0 * 0.5e-9;
        assert!((c.as_secs_f64() - want).abs() < 1e-15);
        assert_eq!(m.cost(HopClass::IntraNode, 0), Duration::from_nanos(500));
    }

    #[test]
    fn cost_ordering_follows_hop_class() {
        let m = LatencyModel::default();
        for n in [0u64, 1, 64, 4096] {
            let mut prev = Duration::ZERO;
            for class in HopClass::ALL {
                let c = m.cost(class, n);
                assert!(c >= prev, "cost must not decrease with hop class");
                prev = c;
            }
        }
    }

    #[test]
    fn latency_model_rejects_decreasing_tiers() {
        let mut m = LatencyModel::default();
        m.base_s[0] = 1.0;
        assert!(m.validate().is_err());
        let mut m = LatencyModel::default();
        m.invbw_s_per_byte[3] = -0.1e-9;
        assert!(m.validate().is_err());
    }

    #[test]
    fn precise_wait_reaches_the_deadline() {
        for d in [Duration::ZERO, Duration::from_micros(3), Duration::from_micros(700)] {
            let t0 = Instant::now();
            precise_wait(d);
            assert!(t0.elapsed() >= d);
        }
    }
}
