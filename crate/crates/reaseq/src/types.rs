//! Shared id types. Plain integers, aliased for readability at call sites.

pub type ItemId = u64;
pub type UserId = u64;

/// Two-level category path: (top level, sub level).
pub type CategoryPath = (String, String);
