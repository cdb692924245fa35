//! The closed universe of capability scopes a token may carry.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Scope {
    StatusRead,
    EnvironmentRead,
    ComputeSubmit,
    ComputeRead,
    ComputeCancel,
    StreamingManage,
    StreamingRead,
    WorkflowsManage,
    WorkflowsRead,
    TokensManage,
}

impl Scope {
    pub const ALL: [Scope; 10] = [
        Scope::StatusRead,
        Scope::EnvironmentRead,
        Scope::ComputeSubmit,
        Scope::ComputeRead,
        Scope::ComputeCancel,
        Scope::StreamingManage,
        Scope::StreamingRead,
        Scope::WorkflowsManage,
        Scope::WorkflowsRead,
        Scope::TokensManage,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Scope::StatusRead => "status.read",
            Scope::EnvironmentRead => "environment.read",
            Scope::ComputeSubmit => "compute.submit",
            Scope::ComputeRead => "compute.read",
            Scope::ComputeCancel => "compute.cancel",
            Scope::StreamingManage => "streaming.manage",
            Scope::StreamingRead => "streaming.read",
            Scope::WorkflowsManage => "workflows.manage",
            Scope::WorkflowsRead => "workflows.read",
            Scope::TokensManage => "tokens.manage",
        }
    }

    fn bit(self) -> u16 {
        1 << (self as u16)
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown scope {0:?}")]
pub struct UnknownScope(pub String);

impl FromStr for Scope {
    type Err = UnknownScope;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Scope::ALL
            .into_iter()
            .find(|sc| sc.as_str() == s)
            .ok_or_else(|| UnknownScope(s.to_string()))
    }
}

impl Serialize for Scope {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Scope {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A set of scopes, stored as a bitmask over [`Scope::ALL`].
#[derive(Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct ScopeSet(u16);

impl ScopeSet {
    pub const fn empty() -> Self {
        ScopeSet(0)
    }

    pub fn all() -> Self {
        Scope::ALL.into_iter().collect()
    }

    /// Builds the set whose members are the bits of `mask` (bit i = `Scope::ALL[i]`).
    pub fn from_mask(mask: u16) -> Self {
        ScopeSet(mask & ((1 << Scope::ALL.len()) - 1))
    }

    pub fn mask(self) -> u16 {
        self.0
    }

    pub fn contains(self, scope: Scope) -> bool {
        self.0 & scope.bit() != 0
    }

    pub fn insert(&mut self, scope: Scope) {
        self.0 |= scope.bit();
    }

    pub fn remove(&mut self, scope: Scope) {
        self.0 &= !scope.bit();
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn iter(self) -> impl Iterator<Item = Scope> {
        Scope::ALL.into_iter().filter(move |s| self.contains(*s))
    }
}

impl fmt::Debug for ScopeSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.iter().map(Scope::as_str)).finish()
    }
}

impl FromIterator<Scope> for ScopeSet {
    fn from_iter<I: IntoIterator<Item = Scope>>(iter: I) -> Self {
        let mut set = ScopeSet::empty();
        for s in iter {
            set.insert(s);
        }
        set
    }
}

impl<const N: usize> From<[Scope; N]> for ScopeSet {
    fn from(arr: [Scope; N]) -> Self {
        arr.into_iter().collect()
    }
}

impl Serialize for ScopeSet {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(self.iter())
    }
}

impl<'de> Deserialize<'de> for ScopeSet {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = Vec::<Scope>::deserialize(d)?;
        Ok(v.into_iter().collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for s in Scope::ALL {
            assert_eq!(s.as_str().parse::<Scope>().unwrap(), s);
        }
        assert!("compute.delete".parse::<Scope>().is_err());
    }

    #[test]
    fn set_serializes_in_canonical_order() {
        let set = ScopeSet::from([Scope::TokensManage, Scope::StatusRead]);
        assert_eq!(
            serde_json::to_string(&set).unwrap(),
            r#"["status.read","tokens.manage"]"#
        );
        let back: ScopeSet = serde_json::from_str(r#"["tokens.manage","status.read"]"#).unwrap();
        assert_eq!(back, set);
        assert!(serde_json::from_str::<ScopeSet>(r#"["root"]"#).is_err());
    }

    #[test]
    fn mask_covers_universe() {
        assert_eq!(ScopeSet::from_mask(u16::MAX), ScopeSet::all());
        assert_eq!(ScopeSet::all().len(), 10);
    }
}
