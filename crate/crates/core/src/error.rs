//! Error types for the runtime layers (units, teams, segments, RMA).

use thiserror::Error;

use crate::gaspace::{SegmentId, TeamId, UnitId};

/// Errors surfaced by runtime operations inside a unit.
#[derive(Debug, Error)]
pub enum RtError {
    #[error("unknown team {0}")]
    UnknownTeam(TeamId),

    #[error("unit {unit} is not a member of team {team}")]
    NotTeamMember { unit: UnitId, team: TeamId },

    #[error("invalid team member list: {0}")]
    BadTeamMembers(String),

    #[error("team {0} is the root team and cannot be destroyed")]
    CannotDestroyRootTeam(TeamId),

    #[error("team {team} still owns exposed segment {segment}")]
    TeamHasLiveSegment { team: TeamId, segment: SegmentId },

    #[error("unknown segment {0}")]
    UnknownSegment(SegmentId),

    #[error("segment {0} has been freed")]
    SegmentFreed(SegmentId),

    #[error("segment {segment} has no region on unit {unit}")]
    NoRegionOnUnit { segment: SegmentId, unit: UnitId },

    #[error(
        "access [{offset}, {offset}+{len}) out of bounds for segment {segment} of {size} bytes"
    )]
    OutOfBounds { segment: SegmentId, offset: u64, len: u64, size: u64 },

    #[error("segment {segment} is owned by unit {owner}, not unit {caller}")]
    NotSegmentOwner { segment: SegmentId, owner: UnitId, caller: UnitId },

    #[error("segment {segment} belongs to team {actual}, not team {given}")]
    WrongTeam { segment: SegmentId, given: TeamId, actual: TeamId },

    #[error("segment {0} is private, not collectively allocated; use memfree")]
    NotCollective(SegmentId),

    #[error("segment {0} is collectively allocated, not private; use team_memfree")]
    NotPrivate(SegmentId),

    #[error("pointer names unit {unit}; local access needs the caller's own region")]
    NotLocal { unit: UnitId },

    #[error("segment {segment} has outstanding operations from unit {unit} (seq {seq} pending)")]
    PendingOps { segment: SegmentId, unit: UnitId, seq: u64 },

    #[error("collective mismatch on team {team}: this unit ran {mine} but the round started with {theirs}")]
    CollectiveMismatch { team: TeamId, mine: String, theirs: String },

    #[error("NaN contribution rejected by allreduce_max")]
    NanContribution,

    #[error("operation handle already consumed by a previous wait")]
    HandleConsumed,

    #[error("destination buffer is {have} bytes but the operation transfers {need}")]
    BufferSizeMismatch { have: usize, need: usize },

    #[error("remote delivery failed for op seq {seq} to unit {target}: {reason}")]
    DeliveryFailed { target: UnitId, seq: u64, reason: String },

    #[error("direct copy refused: units {origin} and {target} are on different nodes")]
    DirectCopyRefused { origin: UnitId, target: UnitId },

    #[error("run aborted: {0}")]
    Aborted(String),
}

/// Errors surfaced by `launch` itself (setup, teardown, and unit outcomes).
#[derive(Debug, Error)]
pub enum LaunchError {
    #[error("invalid runtime config: {0}")]
    InvalidConfig(String),

    #[error("unit {unit} panicked: {message}")]
    UnitPanicked { unit: UnitId, message: String },

    #[error("unit {unit} failed: {source}")]
    UnitFailed {
        unit: UnitId,
        #[source]
        source: RtError,
    },

    #[error("segments leaked at exit (still exposed): {}", format_ids(.segments))]
    SegmentLeak { segments: Vec<SegmentId> },
}

fn format_ids(ids: &[SegmentId]) -> String {
    let strs: Vec<String> = ids.iter().map(|s| s.to_string()).collect();
    strs.join(", ")
}
