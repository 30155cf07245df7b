//! One-sided remote memory access.
//!
//! `put` and `get` move bytes between a local buffer and any unit's region of
//! an exposed segment; the target unit never participates (its node's service
//! worker applies the transfer). Blocking forms return once the transfer has
//! completed at the origin; non-blocking forms return an [`OpHandle`] to pass
//! to [`Unit::wait`] or [`Unit::waitall`].
//!
//! Routing: a *blocking* transfer whose origin and target share a node is, in
//! locality-aware mode, served by a direct memory copy — no message, no
//! sequence number. Every other transfer (cross-node, oblivious mode, or any
//! non-blocking call) travels as envelopes: a put is a payload message plus an
//! acknowledgement, a get is a request plus a reply, delivered FIFO per
//! (origin, target) pair.
//!
//! Completion is per target: waiting on a handle flushes the whole (origin,
//! target) stream up to that handle, so every earlier operation toward the
//! same target is complete afterwards too.

use std::collections::HashMap;

use crate::error::RtError;
use crate::gaspace::{GlobalPointer, IssuedOp, SegmentId, Unit, UnitId};
use crate::transport::{Envelope, EnvelopeKind, RoutingMode};

/// Observable state of a non-blocking operation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpState {
    Pending,
    Complete,
    Failed,
}

/// Completion token for one non-blocking operation. Consumed by `wait` /
/// `waitall`; a get handle borrows its destination buffer until then.
pub struct OpHandle<'buf> {
    pub(crate) target: UnitId,
    #[allow(dead_code)]
    pub(crate) segment: SegmentId,
    /// Request sequence toward `target`; 0 marks an already-complete
    /// zero-byte operation that never touched the transport.
    pub(crate) seq: u64,
    pub(crate) dst: Option<&'buf mut [u8]>,
}

impl OpHandle<'_> {
    pub fn target(&self) -> UnitId {
        self.target
    }
}

impl Unit {
    fn use_direct(&self, target: UnitId) -> bool {
        self.rt.config.routing == RoutingMode::LocalityAware
            && self.rt.fabric.topology.same_node(self.id, target)
    }

    /// Fail fast once any unit has tripped the abort; without this, a unit
    /// whose traffic is all direct copies could spin past a dead peer forever.
    fn ensure_live(&self) -> Result<(), RtError> {
        if self.rt.abort.is_tripped() {
            return Err(self.rt.abort.as_error());
        }
        Ok(())
    }

    /// Zero-byte transfers skip the transport but still validate the address.
    fn validate_addr(&self, gptr: GlobalPointer) -> Result<(), RtError> {
        self.rt.registry.resolve(gptr.segment, gptr.unit, gptr.offset, 0).map(|_| ())
    }

    fn send_put(&mut self, gptr: GlobalPointer, src: &[u8]) -> u64 {
        let seq = self.draw_seq(gptr.unit);
        self.issued.push(IssuedOp { segment: gptr.segment, target: gptr.unit, seq });
        self.rt.fabric.send(Envelope {
            kind: EnvelopeKind::Put { payload: src.to_vec() },
            origin: self.id,
            target: gptr.unit,
            segment: gptr.segment,
            offset: gptr.offset,
            nbytes: src.len() as u64,
            seq,
        });
        seq
    }

    fn send_get(&mut self, gptr: GlobalPointer, nbytes: usize) -> u64 {
        let seq = self.draw_seq(gptr.unit);
        self.issued.push(IssuedOp { segment: gptr.segment, target: gptr.unit, seq });
        self.rt.fabric.send(Envelope {
            kind: EnvelopeKind::GetRequest,
            origin: self.id,
            target: gptr.unit,
            segment: gptr.segment,
            offset: gptr.offset,
            nbytes: nbytes as u64,
            seq,
        });
        seq
    }

    /// Complete every operation toward `target` with sequence <= `upto`.
    fn flush_to(&mut self, target: UnitId, upto: u64) -> Result<(), RtError> {
        self.rt.fabric.flush(self.id, target, upto)?;
        self.issued.retain(|op| op.target != target || op.seq > upto);
        Ok(())
    }

    fn check_put(&mut self, target: UnitId, seq: u64) -> Result<(), RtError> {
        match self.rt.fabric.take_failure(self.id, target, seq) {
            Some(reason) => Err(RtError::DeliveryFailed { target, seq, reason }),
            None => Ok(()),
        }
    }

    fn collect_get(&mut self, target: UnitId, seq: u64, dst: &mut [u8]) -> Result<(), RtError> {
        if let Some(reason) = self.rt.fabric.take_failure(self.id, target, seq) {
            return Err(RtError::DeliveryFailed { target, seq, reason });
        }
        let payload = self
            .rt
            .fabric
            .take_payload(self.id, target, seq)
            .expect("a flushed get has either a payload or a failure parked");
        if payload.len() != dst.len() {
            return Err(RtError::BufferSizeMismatch { have: dst.len(), need: payload.len() });
        }
        dst.copy_from_slice(&payload);
        Ok(())
    }

    /// Blocking one-sided write of `src` to the global address `gptr`.
    pub fn put(&mut self, gptr: GlobalPointer, src: &[u8]) -> Result<(), RtError> {
        self.ensure_live()?;
        self.stats.puts += 1;
        if src.is_empty() {
            return self.validate_addr(gptr);
        }
        if self.use_direct(gptr.unit) {
            let view =
                self.rt.registry.resolve(gptr.segment, gptr.unit, gptr.offset, src.len() as u64)?;
            return self.rt.fabric.direct_copy_in(self.id, gptr.unit, &view, src);
        }
        let seq = self.send_put(gptr, src);
        self.flush_to(gptr.unit, seq)?;
        self.check_put(gptr.unit, seq)
    }

    /// Blocking one-sided read from the global address `gptr` into `dst`.
    pub fn get(&mut self, gptr: GlobalPointer, dst: &mut [u8]) -> Result<(), RtError> {
        self.ensure_live()?;
        self.stats.gets += 1;
        if dst.is_empty() {
            return self.validate_addr(gptr);
        }
        if self.use_direct(gptr.unit) {
            let view =
                self.rt.registry.resolve(gptr.segment, gptr.unit, gptr.offset, dst.len() as u64)?;
            return self.rt.fabric.direct_copy_out(self.id, gptr.unit, &view, dst);
        }
        let seq = self.send_get(gptr, dst.len());
        self.flush_to(gptr.unit, seq)?;
        self.collect_get(gptr.unit, seq, dst)
    }

    /// Non-blocking put. The payload is captured immediately; completion (and
    /// any delivery error) surfaces at `wait`. Always uses the message
    /// transport, even between same-node units.
    pub fn put_nb(&mut self, gptr: GlobalPointer, src: &[u8]) -> Result<OpHandle<'static>, RtError> {
        self.ensure_live()?;
        self.stats.puts += 1;
        if src.is_empty() {
            self.validate_addr(gptr)?;
            return Ok(OpHandle { target: gptr.unit, segment: gptr.segment, seq: 0, dst: None });
        }
        let seq = self.send_put(gptr, src);
        Ok(OpHandle { target: gptr.unit, segment: gptr.segment, seq, dst: None })
    }

    /// Non-blocking get. `dst` stays borrowed by the handle and is filled by
    /// `wait`/`waitall`. Always uses the message transport.
    pub fn get_nb<'b>(
        &mut self,
        gptr: GlobalPointer,
        dst: &'b mut [u8],
    ) -> Result<OpHandle<'b>, RtError> {
        self.ensure_live()?;
        self.stats.gets += 1;
        if dst.is_empty() {
            self.validate_addr(gptr)?;
            return Ok(OpHandle { target: gptr.unit, segment: gptr.segment, seq: 0, dst: None });
        }
        let seq = self.send_get(gptr, dst.len());
        Ok(OpHandle { target: gptr.unit, segment: gptr.segment, seq, dst: Some(dst) })
    }

    /// Poll a handle without consuming it.
    pub fn op_state(&self, handle: &OpHandle<'_>) -> OpState {
        if handle.seq == 0 {
            return OpState::Complete;
        }
        if !self.rt.fabric.op_completed(self.id, handle.target, handle.seq) {
            return OpState::Pending;
        }
        if self.rt.fabric.op_failed(self.id, handle.target, handle.seq) {
            OpState::Failed
        } else {
            OpState::Complete
        }
    }

    /// Complete one operation. Flush semantics: every earlier operation this
    /// unit issued toward the same target is also complete on return.
    pub fn wait(&mut self, handle: OpHandle<'_>) -> Result<(), RtError> {
        let OpHandle { target, seq, dst, .. } = handle;
        if seq == 0 {
            return Ok(());
        }
        self.flush_to(target, seq)?;
        match dst {
            None => self.check_put(target, seq),
            Some(dst) => self.collect_get(target, seq, dst),
        }
    }

    /// Complete a batch of operations with one flush per distinct target.
    /// All handles are drained even if one fails; the first error (in handle
    /// order) is returned.
    pub fn waitall(&mut self, handles: Vec<OpHandle<'_>>) -> Result<(), RtError> {
        let mut upto: HashMap<UnitId, u64> = HashMap::new();
        for h in &handles {
            if h.seq > 0 {
                let e = upto.entry(h.target).or_insert(0);
                *e = (*e).max(h.seq);
            }
        }
        let mut targets: Vec<(UnitId, u64)> = upto.into_iter().collect();
        targets.sort();
        for (target, seq) in targets {
            self.flush_to(target, seq)?;
        }
        let mut result = Ok(());
        for handle in handles {
            let OpHandle { target, seq, dst, .. } = handle;
            if seq == 0 {
                continue;
            }
            let r = match dst {
                None => self.check_put(target, seq),
                Some(dst) => self.collect_get(target, seq, dst),
            };
            if result.is_ok() {
                result = r;
            }
        }
        result
    }
}
