//! A locality-aware one-sided communication runtime with a 3-D heat-conduction
//! mini-app on top.
//!
//! The runtime ([`gaspace`], [`onesided`], [`transport`]) gives a fixed set of
//! units a partitioned global address space: memory is allocated collectively
//! over teams (or privately), is exposed for one-sided `put`/`get` the moment
//! allocation returns, and transfers are routed by physical locality — shared
//! memory within a node, simulated hierarchical messaging across nodes.
//!
//! On top of it, [`heat3d`] runs an explicit 7-point heat-conduction stencil
//! with halo exchange, [`oracle`] provides an independent serial reference
//! solver, and [`bench`] drives weak-scaling experiments to CSV.
//!
//! # Example
//!
//! Each unit passes its id one neighbor to the right:
//!
//! ```
//! use hearth::{launch, RuntimeConfig, UnitId, TEAM_ALL};
//!
//! # fn main() -> Result<(), hearth::LaunchError> {
//! let out = launch(RuntimeConfig::new(4, 2), |u| {
//!     // Collective allocation: one 64-byte region per unit, usable at once.
//!     let seg = u.team_memalloc_aligned(TEAM_ALL, 64)?;
//!     let right = UnitId((u.myid().0 + 1) % u.size());
//!     u.put(seg.set_unit(right), &u.myid().0.to_le_bytes())?;
//!     u.barrier(TEAM_ALL)?;
//!
//!     let mut from_left = [0u8; 4];
//!     let local = u.local_region(seg.set_unit(u.myid()))?;
//!     local.read_bytes(0, &mut from_left);
//!
//!     u.barrier(TEAM_ALL)?;
//!     u.team_memfree(TEAM_ALL, seg)?;
//!     Ok(u32::from_le_bytes(from_left))
//! })?;
//! assert_eq!(out.results, vec![3, 0, 1, 2]);
//! # Ok(())
//! # }
//! ```

pub mod bench;
pub mod error;
pub mod gaspace;
pub mod heat3d;
pub mod onesided;
pub mod oracle;
pub mod transport;

pub use error::{LaunchError, RtError};
pub use gaspace::{
    launch, GlobalPointer, LaunchOutput, LocalRegion, RuntimeConfig, SegmentId, TeamId, Unit,
    UnitId, UnitStats, TEAM_ALL,
};
pub use onesided::{OpHandle, OpState};
pub use transport::{CounterSnapshot, HopClass, LatencyModel, RoutingMode, Topology};
