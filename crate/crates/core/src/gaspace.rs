//! Global address space: units, teams, and exposed memory segments.
//!
//! A run is a fixed set of units (one OS thread each) created by [`launch`].
//! Units allocate global memory collectively over a team (every member
//! contributes one region) or privately; either way the segment is exposed for
//! one-sided access the moment allocation returns and stays exposed until it
//! is freed — there is no epoch or window API to open and close. Segment
//! memory is plain shared bytes behind relaxed atomics: racing transfers can
//! interleave payload bytes but can never corrupt the runtime.

use std::collections::HashMap;
use std::marker::PhantomData;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicU8, Ordering};
use std::sync::{Arc, Condvar, Mutex, RwLock};
use std::thread;
use std::time::Duration;

use crate::error::{LaunchError, RtError};
use crate::transport::{lock_clean, AbortFlag, CounterSnapshot, Fabric, LatencyModel, RoutingMode, Topology};

/// Dense unit identifier in `0..num_units`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct UnitId(pub u32);

impl std::fmt::Display for UnitId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Team identifier; `TEAM_ALL` is 0 and ids are never reused within a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TeamId(pub u64);

impl std::fmt::Display for TeamId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// The root team containing every unit; exists for the whole run.
pub const TEAM_ALL: TeamId = TeamId(0);

/// Globally unique, monotone segment identifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SegmentId(pub u64);

impl std::fmt::Display for SegmentId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Fat pointer into the global address space: a byte offset into one unit's
/// region of one segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GlobalPointer {
    pub segment: SegmentId,
    pub unit: UnitId,
    pub offset: u64,
}

impl GlobalPointer {
    /// Redirect the pointer at another unit's region of the same segment.
    /// Purely arithmetic; validity is checked when the pointer is used.
    pub fn set_unit(mut self, unit: UnitId) -> GlobalPointer {
        self.unit = unit;
        self
    }

    /// Advance the byte offset. Wrapping, so offset algebra is associative;
    /// out-of-range results fail at access time.
    pub fn inc_addr(mut self, delta: u64) -> GlobalPointer {
        self.offset = self.offset.wrapping_add(delta);
        self
    }
}

// ---------------------------------------------------------------------------
// Segment memory

/// One unit's storage for one segment.
pub(crate) struct Region {
    bytes: Box<[AtomicU8]>,
}

impl Region {
    fn new(len: u64) -> Region {
        let mut v = Vec::with_capacity(len as usize);
        v.resize_with(len as usize, || AtomicU8::new(0));
        Region { bytes: v.into_boxed_slice() }
    }

    fn len(&self) -> usize {
        self.bytes.len()
    }
}

/// A bounds-checked window `[base, base+len)` into a region.
pub(crate) struct RegionView {
    mem: Arc<Region>,
    base: usize,
    len: usize,
}

impl RegionView {
    pub(crate) fn len(&self) -> usize {
        self.len
    }

    pub(crate) fn write_bytes(&self, src: &[u8]) {
        debug_assert_eq!(src.len(), self.len);
        for (i, b) in src.iter().enumerate() {
            self.mem.bytes[self.base + i].store(*b, Ordering::Relaxed);
        }
    }

    pub(crate) fn read_bytes(&self, dst: &mut [u8]) {
        debug_assert_eq!(dst.len(), self.len);
        for (i, b) in dst.iter_mut().enumerate() {
            *b = self.mem.bytes[self.base + i].load(Ordering::Relaxed);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Scope {
    /// Collectively allocated over a team; freed collectively.
    Team(TeamId),
    /// Allocated and freed by a single owner unit.
    Private(UnitId),
}

pub(crate) struct SegmentInner {
    #[allow(dead_code)]
    id: SegmentId,
    scope: Scope,
    size_bytes: u64,
    /// Allocated implies exposed; flips to freed exactly once.
    freed: AtomicBool,
    regions: RwLock<HashMap<UnitId, Arc<Region>>>,
}

/// All segments of a run, shared between units and service workers.
#[derive(Default)]
pub(crate) struct SegmentRegistry {
    segments: RwLock<HashMap<SegmentId, Arc<SegmentInner>>>,
}

impl SegmentRegistry {
    fn register(&self, id: SegmentId, scope: Scope, size_bytes: u64, unit: UnitId) {
        let seg = {
            let mut map = self.segments.write().unwrap_or_else(|p| p.into_inner());
            Arc::clone(map.entry(id).or_insert_with(|| {
                Arc::new(SegmentInner {
                    id,
                    scope,
                    size_bytes,
                    freed: AtomicBool::new(false),
                    regions: RwLock::new(HashMap::new()),
                })
            }))
        };
        let region = Arc::new(Region::new(size_bytes));
        seg.regions.write().unwrap_or_else(|p| p.into_inner()).insert(unit, region);
    }

    fn get(&self, id: SegmentId) -> Result<Arc<SegmentInner>, RtError> {
        self.segments
            .read()
            .unwrap_or_else(|p| p.into_inner())
            .get(&id)
            .cloned()
            .ok_or(RtError::UnknownSegment(id))
    }

    /// Look up `[offset, offset+len)` of `unit`'s region of `segment`,
    /// enforcing exposure, membership, and bounds.
    pub(crate) fn resolve(
        &self,
        segment: SegmentId,
        unit: UnitId,
        offset: u64,
        len: u64,
    ) -> Result<RegionView, RtError> {
        let seg = self.get(segment)?;
        if seg.freed.load(Ordering::SeqCst) {
            return Err(RtError::SegmentFreed(segment));
        }
        let region = seg
            .regions
            .read()
            .unwrap_or_else(|p| p.into_inner())
            .get(&unit)
            .cloned()
            .ok_or(RtError::NoRegionOnUnit { segment, unit })?;
        let end = offset.checked_add(len).ok_or(RtError::OutOfBounds {
            segment,
            offset,
            len,
            size: seg.size_bytes,
        })?;
        if end > seg.size_bytes || region.len() as u64 != seg.size_bytes {
            return Err(RtError::OutOfBounds { segment, offset, len, size: seg.size_bytes });
        }
        Ok(RegionView { mem: region, base: offset as usize, len: len as usize })
    }

    fn mark_freed(&self, id: SegmentId) -> Result<(), RtError> {
        let seg = self.get(id)?;
        if seg.freed.swap(true, Ordering::SeqCst) {
            return Err(RtError::SegmentFreed(id));
        }
        Ok(())
    }

    fn first_live_team_segment(&self, team: TeamId) -> Option<SegmentId> {
        let map = self.segments.read().unwrap_or_else(|p| p.into_inner());
        let mut ids: Vec<SegmentId> = map
            .values()
            .filter(|s| s.scope == Scope::Team(team) && !s.freed.load(Ordering::SeqCst))
            .map(|s| s.id)
            .collect();
        ids.sort();
        ids.first().copied()
    }

    fn exposed_ids(&self) -> Vec<SegmentId> {
        let map = self.segments.read().unwrap_or_else(|p| p.into_inner());
        let mut ids: Vec<SegmentId> =
            map.values().filter(|s| !s.freed.load(Ordering::SeqCst)).map(|s| s.id).collect();
        ids.sort();
        ids
    }

    fn force_free_all(&self) {
        let map = self.segments.read().unwrap_or_else(|p| p.into_inner());
        for seg in map.values() {
            seg.freed.store(true, Ordering::SeqCst);
        }
    }
}

// ---------------------------------------------------------------------------
// Teams and in-process collectives

/// What a unit claims to be doing when it arrives at a collective round.
/// All members of a round must present equal tags; divergence is reported to
/// every participant instead of deadlocking.
#[derive(Debug, Clone, PartialEq)]
enum CollTag {
    Barrier,
    ReduceMax,
    CreateTeam { members: Vec<UnitId> },
    DestroyTeam { team: TeamId },
    Alloc { nbytes: u64 },
    AllocReady { segment: SegmentId },
    Free { segment: SegmentId },
}

struct Published {
    round: u64,
    payload: u64,
    acc: f64,
    first: String,
    offender: Option<String>,
}

#[derive(Default)]
struct CollState {
    round: u64,
    arrived: usize,
    first: Option<CollTag>,
    payload: u64,
    acc: f64,
    offender: Option<String>,
    published: Option<Published>,
}

/// Reusable rendezvous cell: one round per collective call, in call order.
#[derive(Default)]
struct CollCell {
    state: Mutex<CollState>,
    cv: Condvar,
}

struct RoundOutcome {
    payload: u64,
    acc: f64,
}

pub(crate) struct Team {
    id: TeamId,
    #[allow(dead_code)]
    parent: Option<TeamId>,
    members: Vec<UnitId>,
    ranks: HashMap<UnitId, usize>,
    cell: CollCell,
}

impl Team {
    fn new(id: TeamId, parent: Option<TeamId>, members: Vec<UnitId>) -> Team {
        let ranks = members.iter().enumerate().map(|(r, u)| (*u, r)).collect();
        Team { id, parent, members, ranks, cell: CollCell::default() }
    }

    pub(crate) fn size(&self) -> usize {
        self.members.len()
    }

    pub(crate) fn rank_of(&self, unit: UnitId) -> Option<usize> {
        self.ranks.get(&unit).copied()
    }

    /// One collective round. `on_first` runs once under the cell lock when the
    /// round opens (id draws); `on_last` runs once when it closes, before any
    /// waiter is released (commit effects). A tag mismatch taints the round
    /// and every participant gets the same error.
    fn rendezvous(
        &self,
        abort: &AbortFlag,
        tag: CollTag,
        contrib: Option<f64>,
        on_first: impl FnOnce() -> u64,
        on_last: impl FnOnce(u64),
    ) -> Result<RoundOutcome, RtError> {
        let mut st = lock_clean(&self.cell.state);
        let my_round = st.round;
        if st.arrived == 0 {
            st.first = Some(tag.clone());
            st.offender = None;
            st.payload = on_first();
            st.acc = f64::NEG_INFINITY;
        } else if st.first.as_ref() != Some(&tag) && st.offender.is_none() {
            st.offender = Some(format!("{tag:?}"));
        }
        if let Some(c) = contrib {
            st.acc = st.acc.max(c);
        }
        st.arrived += 1;

        if st.arrived == self.size() {
            let published = Published {
                round: my_round,
                payload: st.payload,
                acc: st.acc,
                first: format!("{:?}", st.first.take().expect("round has a first tag")),
                offender: st.offender.take(),
            };
            if published.offender.is_none() {
                on_last(published.payload);
            }
            st.published = Some(published);
            st.round += 1;
            st.arrived = 0;
            self.cell.cv.notify_all();
        } else {
            while st.round == my_round {
                if abort.is_tripped() {
                    return Err(abort.as_error());
                }
                let (guard, _) = self
                    .cell
                    .cv
                    .wait_timeout(st, Duration::from_millis(25))
                    .unwrap_or_else(|p| p.into_inner());
                st = guard;
            }
        }

        let p = st.published.as_ref().expect("completed round was published");
        debug_assert_eq!(p.round, my_round, "a later round cannot finish while we wait");
        match &p.offender {
            None => Ok(RoundOutcome { payload: p.payload, acc: p.acc }),
            Some(off) => {
                let mine = format!("{tag:?}");
                let theirs = if mine == p.first { off.clone() } else { p.first.clone() };
                Err(RtError::CollectiveMismatch { team: self.id, mine, theirs })
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Runtime configuration and shared state

/// Shape and policy of a run. `blades_per_chassis` defaults to 16;
/// `chassis_per_group` defaults to the desk-scale 2.
#[derive(Debug, Clone, Copy)]
pub struct RuntimeConfig {
    pub num_units: u32,
    pub node_size: u32,
    pub blades_per_chassis: u32,
    pub chassis_per_group: u32,
    pub latency: LatencyModel,
    pub routing: RoutingMode,
}

impl RuntimeConfig {
    pub fn new(num_units: u32, node_size: u32) -> RuntimeConfig {
        RuntimeConfig {
            num_units,
            node_size,
            blades_per_chassis: 16,
            chassis_per_group: 2,
            latency: LatencyModel::default(),
            routing: RoutingMode::LocalityAware,
        }
    }

    pub fn with_routing(mut self, routing: RoutingMode) -> RuntimeConfig {
        self.routing = routing;
        self
    }

    pub fn topology(&self) -> Result<Topology, LaunchError> {
        Topology::new(self.num_units, self.node_size, self.blades_per_chassis, self.chassis_per_group)
    }

    /// Check the machine shape and latency model without launching.
    pub fn validate(&self) -> Result<Topology, LaunchError> {
        let topo = self.topology()?;
        self.latency.validate()?;
        Ok(topo)
    }
}

pub(crate) struct RuntimeInner {
    pub(crate) config: RuntimeConfig,
    pub(crate) fabric: Arc<Fabric>,
    pub(crate) registry: Arc<SegmentRegistry>,
    teams: RwLock<HashMap<TeamId, Arc<Team>>>,
    next_segment: AtomicU64,
    next_team: AtomicU64,
    pub(crate) abort: Arc<AbortFlag>,
}

impl RuntimeInner {
    pub(crate) fn team(&self, id: TeamId) -> Result<Arc<Team>, RtError> {
        self.teams
            .read()
            .unwrap_or_else(|p| p.into_inner())
            .get(&id)
            .cloned()
            .ok_or(RtError::UnknownTeam(id))
    }
}

/// Per-unit operation counters, readable any time via [`Unit::stats`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct UnitStats {
    pub puts: u64,
    pub gets: u64,
    pub barriers: u64,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct IssuedOp {
    pub(crate) segment: SegmentId,
    pub(crate) target: UnitId,
    pub(crate) seq: u64,
}

/// Handle to the runtime held by exactly one unit thread. All runtime
/// operations go through this; it cannot leave its thread.
pub struct Unit {
    pub(crate) id: UnitId,
    pub(crate) rt: Arc<RuntimeInner>,
    pub(crate) next_seq: HashMap<UnitId, u64>,
    pub(crate) issued: Vec<IssuedOp>,
    pub(crate) stats: UnitStats,
    _solo: PhantomData<*mut ()>,
}

impl Unit {
    fn new(rt: Arc<RuntimeInner>, id: UnitId) -> Unit {
        Unit {
            id,
            rt,
            next_seq: HashMap::new(),
            issued: Vec::new(),
            stats: UnitStats::default(),
            _solo: PhantomData,
        }
    }

    /// This unit's global id.
    pub fn myid(&self) -> UnitId {
        self.id
    }

    /// Total number of units in the run.
    pub fn size(&self) -> u32 {
        self.rt.config.num_units
    }

    pub fn config(&self) -> &RuntimeConfig {
        &self.rt.config
    }

    pub fn topology(&self) -> Topology {
        self.rt.fabric.topology
    }

    /// Snapshot of the runtime-wide transport counters.
    pub fn counters(&self) -> CounterSnapshot {
        self.rt.fabric.counters.snapshot()
    }

    /// Snapshot of this unit's own operation counters.
    pub fn stats(&self) -> UnitStats {
        self.stats
    }

    /// Number of members of `team`.
    pub fn team_size(&self, team: TeamId) -> Result<usize, RtError> {
        Ok(self.rt.team(team)?.size())
    }

    /// This unit's dense rank within `team`, if it is a member.
    pub fn team_rank(&self, team: TeamId) -> Result<usize, RtError> {
        let t = self.rt.team(team)?;
        t.rank_of(self.id).ok_or(RtError::NotTeamMember { unit: self.id, team })
    }

    pub(crate) fn member_team(&self, team: TeamId) -> Result<Arc<Team>, RtError> {
        let t = self.rt.team(team)?;
        if t.rank_of(self.id).is_none() {
            return Err(RtError::NotTeamMember { unit: self.id, team });
        }
        Ok(t)
    }

    /// Collectively create a sub-team of `parent` from `members` (in rank
    /// order). Every member of `parent` must call with the same list.
    pub fn team_create(&mut self, parent: TeamId, members: &[UnitId]) -> Result<TeamId, RtError> {
        let p = self.member_team(parent)?;
        if members.is_empty() {
            return Err(RtError::BadTeamMembers("member list is empty".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for m in members {
            if !seen.insert(*m) {
                return Err(RtError::BadTeamMembers(format!("duplicate member {m}")));
            }
            if p.rank_of(*m).is_none() {
                return Err(RtError::BadTeamMembers(format!(
                    "unit {m} is not a member of parent team {parent}"
                )));
            }
        }
        let rt = &self.rt;
        let member_vec = members.to_vec();
        let outcome = p.rendezvous(
            &rt.abort,
            CollTag::CreateTeam { members: member_vec.clone() },
            None,
            || {
                let id = TeamId(rt.next_team.fetch_add(1, Ordering::SeqCst));
                let team = Arc::new(Team::new(id, Some(parent), member_vec.clone()));
                rt.teams.write().unwrap_or_else(|e| e.into_inner()).insert(id, team);
                id.0
            },
            |_| {},
        )?;
        Ok(TeamId(outcome.payload))
    }

    /// Collectively destroy `team`. All collective segments of the team must
    /// have been freed first; the root team cannot be destroyed.
    pub fn team_destroy(&mut self, team: TeamId) -> Result<(), RtError> {
        let t = self.member_team(team)?;
        if team == TEAM_ALL {
            return Err(RtError::CannotDestroyRootTeam(team));
        }
        if let Some(segment) = self.rt.registry.first_live_team_segment(team) {
            return Err(RtError::TeamHasLiveSegment { team, segment });
        }
        let rt = &self.rt;
        t.rendezvous(&rt.abort, CollTag::DestroyTeam { team }, None, || 0, |_| {
            rt.teams.write().unwrap_or_else(|e| e.into_inner()).remove(&team);
        })?;
        Ok(())
    }

    /// Collectively allocate a segment over `team`: every member contributes
    /// `nbytes` of exposed storage. Returns a pointer to offset 0 of the
    /// lowest-ranked member's region; the segment id is identical on all
    /// members. Regions start at offset 0 of their own allocation, so the
    /// 8-byte cell alignment of the address space is trivially satisfied.
    pub fn team_memalloc_aligned(
        &mut self,
        team: TeamId,
        nbytes: u64,
    ) -> Result<GlobalPointer, RtError> {
        let t = self.member_team(team)?;
        let rt = &self.rt;
        let outcome = t.rendezvous(
            &rt.abort,
            CollTag::Alloc { nbytes },
            None,
            || rt.next_segment.fetch_add(1, Ordering::SeqCst),
            |_| {},
        )?;
        let segment = SegmentId(outcome.payload);
        rt.registry.register(segment, Scope::Team(team), nbytes, self.id);
        // Second round: no member returns before every region is in place.
        t.rendezvous(&rt.abort, CollTag::AllocReady { segment }, None, || 0, |_| {})?;
        Ok(GlobalPointer { segment, unit: t.members[0], offset: 0 })
    }

    /// Collectively free a segment allocated over `team`. Every member must
    /// have completed (waited) its own outstanding operations on the segment.
    pub fn team_memfree(&mut self, team: TeamId, gptr: GlobalPointer) -> Result<(), RtError> {
        let t = self.member_team(team)?;
        let seg = self.rt.registry.get(gptr.segment)?;
        match seg.scope {
            Scope::Team(owning) if owning == team => {}
            Scope::Team(owning) => {
                return Err(RtError::WrongTeam { segment: gptr.segment, given: team, actual: owning })
            }
            Scope::Private(_) => return Err(RtError::NotCollective(gptr.segment)),
        }
        if seg.freed.load(Ordering::SeqCst) {
            return Err(RtError::SegmentFreed(gptr.segment));
        }
        self.ensure_no_pending(gptr.segment)?;
        let rt = &self.rt;
        t.rendezvous(&rt.abort, CollTag::Free { segment: gptr.segment }, None, || 0, |_| {
            let _ = rt.registry.mark_freed(gptr.segment);
        })?;
        Ok(())
    }

    /// Allocate a private segment exposed to every unit; only the owner can
    /// free it.
    pub fn memalloc(&mut self, nbytes: u64) -> Result<GlobalPointer, RtError> {
        let segment = SegmentId(self.rt.next_segment.fetch_add(1, Ordering::SeqCst));
        self.rt.registry.register(segment, Scope::Private(self.id), nbytes, self.id);
        Ok(GlobalPointer { segment, unit: self.id, offset: 0 })
    }

    /// Free a private segment.
    pub fn memfree(&mut self, gptr: GlobalPointer) -> Result<(), RtError> {
        let seg = self.rt.registry.get(gptr.segment)?;
        match seg.scope {
            Scope::Private(owner) if owner == self.id => {}
            Scope::Private(owner) => {
                return Err(RtError::NotSegmentOwner {
                    segment: gptr.segment,
                    owner,
                    caller: self.id,
                })
            }
            Scope::Team(_) => return Err(RtError::NotPrivate(gptr.segment)),
        }
        self.ensure_no_pending(gptr.segment)?;
        self.rt.registry.mark_freed(gptr.segment)
    }

    /// Load/store access to this unit's own region of a segment.
    pub fn local_region(&self, gptr: GlobalPointer) -> Result<LocalRegion, RtError> {
        if gptr.unit != self.id {
            return Err(RtError::NotLocal { unit: gptr.unit });
        }
        let seg = self.rt.registry.get(gptr.segment)?;
        let view = self.rt.registry.resolve(gptr.segment, self.id, 0, seg.size_bytes)?;
        Ok(LocalRegion { view })
    }

    /// Error if this unit still has unwaited operations on `segment`.
    fn ensure_no_pending(&mut self, segment: SegmentId) -> Result<(), RtError> {
        let fabric = &self.rt.fabric;
        self.issued.retain(|op| !fabric.op_completed(self.id, op.target, op.seq));
        if let Some(op) = self.issued.iter().find(|op| op.segment == segment) {
            return Err(RtError::PendingOps { segment, unit: self.id, seq: op.seq });
        }
        Ok(())
    }

    /// Next request sequence number toward `target`.
    pub(crate) fn draw_seq(&mut self, target: UnitId) -> u64 {
        let next = self.next_seq.entry(target).or_insert(1);
        let seq = *next;
        *next += 1;
        seq
    }

    /// Synchronize all members of `team`.
    pub fn barrier(&mut self, team: TeamId) -> Result<(), RtError> {
        let t = self.member_team(team)?;
        self.stats.barriers += 1;
        t.rendezvous(&self.rt.abort, CollTag::Barrier, None, || 0, |_| {})?;
        Ok(())
    }

    /// Maximum of every member's contribution. NaN contributions are rejected
    /// before the unit joins the round.
    pub fn allreduce_max(&mut self, team: TeamId, value: f64) -> Result<f64, RtError> {
        if value.is_nan() {
            return Err(RtError::NanContribution);
        }
        let t = self.member_team(team)?;
        let outcome = t.rendezvous(&self.rt.abort, CollTag::ReduceMax, Some(value), || 0, |_| {})?;
        Ok(outcome.acc)
    }
}

/// Owner's load/store window over its own region (halo fills, field
/// initialization, local reads). Offsets are bytes; out-of-range access panics
/// like slice indexing.
pub struct LocalRegion {
    view: RegionView,
}

impl LocalRegion {
    pub fn len(&self) -> usize {
        self.view.len()
    }

    pub fn is_empty(&self) -> bool {
        self.view.len() == 0
    }

    #[inline]
    pub fn read_f64(&self, offset: usize) -> f64 {
        let mut b = [0u8; 8];
        assert!(offset + 8 <= self.view.len, "read_f64 at {offset} out of bounds");
        for (i, byte) in b.iter_mut().enumerate() {
            *byte = self.view.mem.bytes[self.view.base + offset + i].load(Ordering::Relaxed);
        }
        f64::from_le_bytes(b)
    }

    #[inline]
    pub fn write_f64(&self, offset: usize, value: f64) {
        assert!(offset + 8 <= self.view.len, "write_f64 at {offset} out of bounds");
        for (i, byte) in value.to_le_bytes().iter().enumerate() {
            self.view.mem.bytes[self.view.base + offset + i].store(*byte, Ordering::Relaxed);
        }
    }

    /// Bulk read of `dst.len()` consecutive cells starting at byte `offset`.
    pub fn read_f64s(&self, offset: usize, dst: &mut [f64]) {
        assert!(offset + dst.len() * 8 <= self.view.len, "read_f64s out of bounds");
        let base = self.view.base + offset;
        for (i, cell) in dst.iter_mut().enumerate() {
            let mut b = [0u8; 8];
            for (j, byte) in b.iter_mut().enumerate() {
                *byte = self.view.mem.bytes[base + i * 8 + j].load(Ordering::Relaxed);
            }
            *cell = f64::from_le_bytes(b);
        }
    }

    /// Bulk write of consecutive cells starting at byte `offset`.
    pub fn write_f64s(&self, offset: usize, src: &[f64]) {
        assert!(offset + src.len() * 8 <= self.view.len, "write_f64s out of bounds");
        let base = self.view.base + offset;
        for (i, cell) in src.iter().enumerate() {
            for (j, byte) in cell.to_le_bytes().iter().enumerate() {
                self.view.mem.bytes[base + i * 8 + j].store(*byte, Ordering::Relaxed);
            }
        }
    }

    pub fn read_bytes(&self, offset: usize, dst: &mut [u8]) {
        assert!(offset + dst.len() <= self.view.len, "read_bytes out of bounds");
        for (i, b) in dst.iter_mut().enumerate() {
            *b = self.view.mem.bytes[self.view.base + offset + i].load(Ordering::Relaxed);
        }
    }

    pub fn write_bytes(&self, offset: usize, src: &[u8]) {
        assert!(offset + src.len() <= self.view.len, "write_bytes out of bounds");
        for (i, b) in src.iter().enumerate() {
            self.view.mem.bytes[self.view.base + offset + i].store(*b, Ordering::Relaxed);
        }
    }
}

// ---------------------------------------------------------------------------
// Launch

/// Results of a completed run.
#[derive(Debug)]
pub struct LaunchOutput<R> {
    /// One result per unit, indexed by unit id.
    pub results: Vec<R>,
    /// Final transport counters after drain.
    pub counters: CounterSnapshot,
}

enum Outcome<R> {
    Done(R),
    Failed(RtError),
    Panicked(String),
}

/// Start `num_units` unit threads running `unit_main`, plus one service worker
/// per node, and tear everything down when the last unit returns.
///
/// A panic or error in any unit aborts the whole run and is reported with that
/// unit's identity. Teardown drains the transport and then checks that no
/// segment is still exposed; leftovers are force-freed and reported as a leak.
pub fn launch<R, F>(config: RuntimeConfig, unit_main: F) -> Result<LaunchOutput<R>, LaunchError>
where
    R: Send,
    F: Fn(&mut Unit) -> Result<R, RtError> + Sync,
{
    let topology = config.validate()?;
    let abort = Arc::new(AbortFlag::default());
    let registry = Arc::new(SegmentRegistry::default());
    let (fabric, workers) =
        Fabric::start(topology, config.latency, Arc::clone(&registry), Arc::clone(&abort));

    let mut teams = HashMap::new();
    let all_members: Vec<UnitId> = (0..config.num_units).map(UnitId).collect();
    teams.insert(TEAM_ALL, Arc::new(Team::new(TEAM_ALL, None, all_members)));

    let rt = Arc::new(RuntimeInner {
        config,
        fabric: Arc::clone(&fabric),
        registry: Arc::clone(&registry),
        teams: RwLock::new(teams),
        next_segment: AtomicU64::new(1),
        next_team: AtomicU64::new(1),
        abort: Arc::clone(&abort),
    });

    let unit_main = &unit_main;
    let outcomes: Vec<Outcome<R>> = thread::scope(|s| {
        let handles: Vec<_> = (0..config.num_units)
            .map(|i| {
                let rt = Arc::clone(&rt);
                let abort = Arc::clone(&abort);
                s.spawn(move || {
                    let mut unit = Unit::new(rt, UnitId(i));
                    match catch_unwind(AssertUnwindSafe(|| unit_main(&mut unit))) {
                        Ok(Ok(r)) => Outcome::Done(r),
                        Ok(Err(e)) => {
                            eprintln!("[unit {i}] error: {e}");
                            if !matches!(e, RtError::Aborted(_)) {
                                abort.trip(format!("unit {i} failed: {e}"));
                            }
                            Outcome::Failed(e)
                        }
                        Err(payload) => {
                            let message = panic_text(payload.as_ref());
                            eprintln!("[unit {i}] panicked: {message}");
                            abort.trip(format!("unit {i} panicked: {message}"));
                            Outcome::Panicked(message)
                        }
                    }
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("unit thread itself never panics")).collect()
    });

    fabric.shutdown(workers);
    let leaked = registry.exposed_ids();
    registry.force_free_all();
    let counters = fabric.counters.snapshot();

    for (i, o) in outcomes.iter().enumerate() {
        if let Outcome::Panicked(message) = o {
            return Err(LaunchError::UnitPanicked { unit: UnitId(i as u32), message: message.clone() });
        }
    }
    let mut first_abort: Option<UnitId> = None;
    let mut results = Vec::with_capacity(outcomes.len());
    let mut failures: Vec<(UnitId, RtError)> = Vec::new();
    for (i, o) in outcomes.into_iter().enumerate() {
        match o {
            Outcome::Done(r) => results.push(r),
            Outcome::Failed(RtError::Aborted(reason)) => {
                if first_abort.is_none() {
                    first_abort = Some(UnitId(i as u32));
                }
                failures.push((UnitId(i as u32), RtError::Aborted(reason)));
            }
            Outcome::Failed(e) => return Err(LaunchError::UnitFailed { unit: UnitId(i as u32), source: e }),
            Outcome::Panicked(_) => unreachable!("handled above"),
        }
    }
    if let Some((unit, source)) = failures.into_iter().next() {
        return Err(LaunchError::UnitFailed { unit, source });
    }
    if !leaked.is_empty() {
        return Err(LaunchError::SegmentLeak { segments: leaked });
    }
    Ok(LaunchOutput { results, counters })
}

fn panic_text(payload: &(dyn std::any::Any + Send)) -> String {
    if let Some(s) = payload.downcast_ref::<&str>() {
        (*s).to_string()
    } else if let Some(s) = payload.downcast_ref::<String>() {
        s.clone()
    } else {
        "opaque panic payload".to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn quiet_cfg(units: u32, node_size: u32) -> RuntimeConfig {
        // Zero latency keeps lifecycle tests instant.
        let mut cfg = RuntimeConfig::new(units, node_size);
        cfg.latency = LatencyModel { base_s: [0.0; 4], invbw_s_per_byte: [0.0; 4] };
        cfg
    }

    #[test]
    fn pointer_algebra_setunit_and_incaddr() {
        let g = GlobalPointer { segment: SegmentId(7), unit: UnitId(0), offset: 16 };
        assert_eq!(g.inc_addr(0), g);
        let h = g.set_unit(UnitId(3)).inc_addr(24);
        assert_eq!(h.segment, SegmentId(7));
        assert_eq!(h.unit, UnitId(3));
        assert_eq!(h.offset, 40);
    }

    proptest! {
        #[test]
        fn incaddr_is_associative(off in 0u64..1 << 40, a in 0u64..1 << 30, b in 0u64..1 << 30) {
            let g = GlobalPointer { segment: SegmentId(1), unit: UnitId(0), offset: off };
            prop_assert_eq!(g.inc_addr(a).inc_addr(b), g.inc_addr(a + b));
        }
    }

    #[test]
    fn launch_rejects_bad_configs() {
        let r = launch(quiet_cfg(0, 4), |_u| Ok(()));
        assert!(matches!(r, Err(LaunchError::InvalidConfig(_))));
        let r = launch(quiet_cfg(4, 0), |_u| Ok(()));
        assert!(matches!(r, Err(LaunchError::InvalidConfig(_))));
        let mut cfg = quiet_cfg(4, 2);
        cfg.latency.base_s = [4.0e-6, 2.0e-6, 4.0e-6, 8.0e-6];
        assert!(matches!(launch(cfg, |_u| Ok(())), Err(LaunchError::InvalidConfig(_))));
    }

    #[test]
    fn launch_single_unit_runs_and_exits_clean() {
        let out = launch(quiet_cfg(1, 1), |u| {
            assert_eq!(u.myid(), UnitId(0));
            assert_eq!(u.size(), 1);
            Ok(u.myid().0)
        })
        .unwrap();
        assert_eq!(out.results, vec![0]);
        assert_eq!(out.counters.envelopes, 0);
    }

    #[test]
    fn launch_places_units_smp_style() {
        let out = launch(quiet_cfg(32, 16), |u| {
            let node = u.topology().node_of(u.myid());
            assert_eq!(node, u.myid().0 / 16);
            Ok((u.myid().0, node))
        })
        .unwrap();
        assert_eq!(out.results.len(), 32);
        for (unit, node) in out.results {
            assert_eq!(node, if unit < 16 { 0 } else { 1 });
        }
    }

    #[test]
    fn collective_alloc_agrees_on_segment_id_and_unit_zero() {
        let out = launch(quiet_cfg(4, 2), |u| {
            let g = u.team_memalloc_aligned(TEAM_ALL, 64)?;
            u.barrier(TEAM_ALL)?;
            u.team_memfree(TEAM_ALL, g)?;
            Ok((g.segment, g.unit, g.offset))
        })
        .unwrap();
        let first = out.results[0];
        assert_eq!(first.1, UnitId(0));
        assert_eq!(first.2, 0);
        for r in &out.results {
            assert_eq!(*r, first);
        }
    }

    #[test]
    fn successive_allocations_get_distinct_ids() {
        launch(quiet_cfg(2, 2), |u| {
            let a = u.team_memalloc_aligned(TEAM_ALL, 8)?;
            let b = u.team_memalloc_aligned(TEAM_ALL, 8)?;
            assert_ne!(a.segment, b.segment);
            u.team_memfree(TEAM_ALL, a)?;
            u.team_memfree(TEAM_ALL, b)?;
            Ok(())
        })
        .unwrap();
    }

    #[test]
    fn zero_byte_segment_is_legal_but_unreadable() {
        launch(quiet_cfg(2, 2), |u| {
            let g = u.team_memalloc_aligned(TEAM_ALL, 0)?;
            let local = u.local_region(g.set_unit(u.myid()))?;
            assert_eq!(local.len(), 0);
            match u.rt.registry.resolve(g.segment, u.myid(), 0, 1) {
                Err(RtError::OutOfBounds { .. }) => {}
                Err(other) => panic!("expected OutOfBounds, got {other:?}"),
                Ok(_) => panic!("expected OutOfBounds, got a view"),
            }
            u.team_memfree(TEAM_ALL, g)?;
            Ok(())
        })
        .unwrap();
    }

    #[test]
    fn double_free_is_an_error() {
        launch(quiet_cfg(1, 1), |u| {
            let g = u.memalloc(16)?;
            u.memfree(g)?;
            assert!(matches!(u.memfree(g), Err(RtError::SegmentFreed(_))));
            Ok(())
        })
        .unwrap();
    }

    #[test]
    fn private_segments_enforce_ownership() {
        launch(quiet_cfg(2, 2), |u| {
            // Only unit 0 allocates, so its segment id is deterministically 1.
            let mine = if u.myid() == UnitId(0) { Some(u.memalloc(8)?) } else { None };
            u.barrier(TEAM_ALL)?;
            if u.myid() == UnitId(1) {
                let foreign = GlobalPointer { segment: SegmentId(1), unit: UnitId(0), offset: 0 };
                match u.memfree(foreign) {
                    Err(RtError::NotSegmentOwner { .. }) => {}
                    other => panic!("expected ownership error, got {other:?}"),
                }
            }
            u.barrier(TEAM_ALL)?;
            if let Some(g) = mine {
                u.memfree(g)?;
            }
            Ok(())
        })
        .unwrap();
    }

    #[test]
    fn leaked_segment_is_reported_at_exit() {
        let r = launch(quiet_cfg(1, 1), |u| {
            let _g = u.memalloc(32)?;
            Ok(())
        });
        match r {
            Err(LaunchError::SegmentLeak { segments }) => assert_eq!(segments.len(), 1),
            other => panic!("expected leak report, got {other:?}"),
        }
    }

    #[test]
    fn team_create_checks_membership_and_subsets() {
        launch(quiet_cfg(4, 2), |u| {
            // Not a subset of the parent.
            let err = u.team_create(TEAM_ALL, &[UnitId(0), UnitId(9)]).unwrap_err();
            assert!(matches!(err, RtError::BadTeamMembers(_)));
            let err = u.team_create(TEAM_ALL, &[]).unwrap_err();
            assert!(matches!(err, RtError::BadTeamMembers(_)));

            // A real sub-team of the lower half, created by everyone.
            let sub = u.team_create(TEAM_ALL, &[UnitId(0), UnitId(1)])?;
            assert_eq!(u.team_size(sub)?, 2);
            if u.myid().0 < 2 {
                assert_eq!(u.team_rank(sub)?, u.myid().0 as usize);
                u.barrier(sub)?;
            } else {
                assert!(matches!(
                    u.team_rank(sub),
                    Err(RtError::NotTeamMember { .. })
                ));
                // Non-members skip the sub-team collectives entirely.
            }
            // Everyone's lookups are done before the members destroy the team.
            u.barrier(TEAM_ALL)?;
            if u.myid().0 < 2 {
                u.team_destroy(sub)?;
            }
            u.barrier(TEAM_ALL)?;
            if u.myid().0 >= 2 {
                assert!(matches!(u.team_size(sub), Err(RtError::UnknownTeam(_))));
            }
            Ok(())
        })
        .unwrap();
    }

    #[test]
    fn destroying_the_root_team_is_refused() {
        launch(quiet_cfg(2, 2), |u| {
            assert!(matches!(
                u.team_destroy(TEAM_ALL),
                Err(RtError::CannotDestroyRootTeam(_))
            ));
            Ok(())
        })
        .unwrap();
    }

    #[test]
    fn destroy_with_live_segment_names_the_leak() {
        launch(quiet_cfg(2, 2), |u| {
            let sub = u.team_create(TEAM_ALL, &[UnitId(0), UnitId(1)])?;
            let g = u.team_memalloc_aligned(sub, 16)?;
            match u.team_destroy(sub) {
                Err(RtError::TeamHasLiveSegment { segment, .. }) => assert_eq!(segment, g.segment),
                other => panic!("expected live-segment error, got {other:?}"),
            }
            u.team_memfree(sub, g)?;
            u.team_destroy(sub)?;
            Ok(())
        })
        .unwrap();
    }

    #[test]
    fn team_ids_are_never_reused() {
        launch(quiet_cfg(2, 2), |u| {
            let a = u.team_create(TEAM_ALL, &[UnitId(0), UnitId(1)])?;
            u.team_destroy(a)?;
            let b = u.team_create(TEAM_ALL, &[UnitId(0), UnitId(1)])?;
            assert_ne!(a, b);
            u.team_destroy(b)?;
            Ok(())
        })
        .unwrap();
    }

    #[test]
    fn collective_divergence_on_sizes_is_detected() {
        launch(quiet_cfg(2, 2), |u| {
            let nbytes = if u.myid().0 == 0 { 64 } else { 128 };
            match u.team_memalloc_aligned(TEAM_ALL, nbytes) {
                Err(RtError::CollectiveMismatch { .. }) => Ok(()),
                other => panic!("expected collective mismatch, got {other:?}"),
            }
        })
        .unwrap();
    }

    #[test]
    fn allreduce_max_examples() {
        let out = launch(quiet_cfg(4, 2), |u| {
            let all_zero = u.allreduce_max(TEAM_ALL, 0.0)?;
            let ranks = u.allreduce_max(TEAM_ALL, u.team_rank(TEAM_ALL)? as f64)?;
            assert!(matches!(u.allreduce_max(TEAM_ALL, f64::NAN), Err(RtError::NanContribution)));
            u.barrier(TEAM_ALL)?;
            let negative = u.allreduce_max(TEAM_ALL, -1.5 - u.myid().0 as f64)?;
            Ok((all_zero, ranks, negative))
        })
        .unwrap();
        for (z, r, n) in out.results {
            assert_eq!(z, 0.0);
            assert_eq!(r, 3.0);
            assert_eq!(n, -1.5);
        }
    }

    #[test]
    fn a_panicking_unit_aborts_the_run_with_its_identity() {
        let r = launch(quiet_cfg(4, 2), |u| {
            if u.myid().0 == 2 {
                panic!("deliberate test panic");
            }
            // Everyone else parks in a barrier that can never complete.
            u.barrier(TEAM_ALL)?;
            Ok(())
        });
        match r {
            Err(LaunchError::UnitPanicked { unit, message }) => {
                assert_eq!(unit, UnitId(2));
                assert!(message.contains("deliberate"));
            }
            other => panic!("expected UnitPanicked, got {other:?}"),
        }
    }

    #[test]
    fn a_failing_unit_aborts_peers_and_reports_the_root_cause() {
        let r: Result<LaunchOutput<()>, _> = launch(quiet_cfg(2, 2), |u| {
            if u.myid().0 == 1 {
                return Err(RtError::NanContribution);
            }
            u.barrier(TEAM_ALL)?;
            Ok(())
        });
        match r {
            Err(LaunchError::UnitFailed { unit, source }) => {
                assert_eq!(unit, UnitId(1));
                assert!(matches!(source, RtError::NanContribution));
            }
            other => panic!("expected UnitFailed, got {other:?}"),
        }
    }

    #[test]
    fn local_region_rejects_remote_pointers() {
        launch(quiet_cfg(2, 2), |u| {
            let g = u.team_memalloc_aligned(TEAM_ALL, 16)?;
            let remote = g.set_unit(UnitId(1 - u.myid().0));
            assert!(matches!(u.local_region(remote), Err(RtError::NotLocal { .. })));
            let local = u.local_region(g.set_unit(u.myid()))?;
            local.write_f64(0, 2.5);
            assert_eq!(local.read_f64(0), 2.5);
            u.team_memfree(TEAM_ALL, g)?;
            Ok(())
        })
        .unwrap();
    }
}
