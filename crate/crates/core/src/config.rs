//! Extraction configurations and their dotted identifiers, e.g.
//! `mono.aoc-100.nospec.avg_le8`: source, context mode, special-token policy
//! and layer scheme.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::store::SourceKind;

/// Which special tokens join the subword average.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SpecialPolicy {
    /// Content tokens only.
    NoSpec,
    /// Content tokens plus CLS and SEP.
    All,
    /// Content tokens plus CLS.
    WithCls,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ContextMode {
    /// The word encoded alone.
    Iso,
    /// Mean over the first `M` corpus occurrences.
    Aoc(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LayerScheme {
    /// Mean of layers `0..=n`.
    AvgLe(usize),
    /// Layer `n` only.
    Single(usize),
    /// Mean of layers `n..=top`.
    AvgGe(usize),
}

impl LayerScheme {
    pub fn index(self) -> usize {
        match self {
            LayerScheme::AvgLe(n) | LayerScheme::Single(n) | LayerScheme::AvgGe(n) => n,
        }
    }

    /// Inclusive layer range combined by this scheme.
    pub fn layers(self, num_layers: usize) -> Result<std::ops::RangeInclusive<usize>> {
        let n = self.index();
        if n >= num_layers {
            return Err(Error::LayerOutOfRange { index: n, num_layers });
        }
        Ok(match self {
            LayerScheme::AvgLe(n) => 0..=n,
            LayerScheme::Single(n) => n..=n,
            LayerScheme::AvgGe(n) => n..=num_layers - 1,
        })
    }
}

/// Source, context mode and policy: everything but the layer scheme.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PoolingConfig {
    pub source: SourceKind,
    pub context: ContextMode,
    pub policy: SpecialPolicy,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ExtractionConfig {
    pub source: SourceKind,
    pub context: ContextMode,
    pub policy: SpecialPolicy,
    pub layers: LayerScheme,
}

impl ExtractionConfig {
    pub fn new(source: SourceKind, context: ContextMode, policy: SpecialPolicy, layers: LayerScheme) -> Self {
        ExtractionConfig {
            source,
            context,
            policy,
            layers,
        }
    }

    pub fn pooling(&self) -> PoolingConfig {
        PoolingConfig {
            source: self.source,
            context: self.context,
            policy: self.policy,
        }
    }

    /// Checks the layer index against a store's layer count.
    pub fn validate(&self, num_layers: usize) -> Result<()> {
        self.layers.layers(num_layers).map(|_| ())
    }

    /// Parses and range-checks against `num_layers`.
    pub fn parse_for(s: &str, num_layers: usize) -> Result<Self> {
        let config: ExtractionConfig = s.parse()?;
        let n = config.layers.index();
        if n >= num_layers {
            let segment = s.rsplit('.').next().unwrap_or(s);
            return Err(Error::parse(
                segment,
                format!("layer {n} out of range for {num_layers} layers"),
            ));
        }
        Ok(config)
    }
}

impl fmt::Display for SpecialPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SpecialPolicy::NoSpec => "nospec",
            SpecialPolicy::All => "all",
            SpecialPolicy::WithCls => "withcls",
        })
    }
}

impl fmt::Display for ContextMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ContextMode::Iso => f.write_str("iso"),
            ContextMode::Aoc(m) => write!(f, "aoc-{m}"),
        }
    }
}

impl fmt::Display for LayerScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerScheme::AvgLe(n) => write!(f, "avg_le{n}"),
            LayerScheme::Single(n) => write!(f, "l{n}"),
            LayerScheme::AvgGe(n) => write!(f, "avg_ge{n}"),
        }
    }
}

impl fmt::Display for PoolingConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}.{}", self.source.as_str(), self.context, self.policy)
    }
}

impl fmt::Display for ExtractionConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.pooling(), self.layers)
    }
}

pub(crate) fn parse_source(seg: &str) -> Result<SourceKind> {
    match seg {
        "mono" => Ok(SourceKind::Mono),
        "multi" => Ok(SourceKind::Multi),
        _ => Err(Error::parse(seg, "expected `mono` or `multi`")),
    }
}

fn parse_count(seg: &str, digits: &str) -> Result<usize> {
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return Err(Error::parse(seg, "expected a non-negative integer"));
    }
    digits.parse().map_err(|_| Error::parse(seg, "integer out of range"))
}

impl FromStr for ContextMode {
    type Err = Error;

    fn from_str(seg: &str) -> Result<Self> {
        if seg == "iso" {
            return Ok(ContextMode::Iso);
        }
        let Some(m) = seg.strip_prefix("aoc-") else {
            return Err(Error::parse(seg, "expected `iso` or `aoc-M`"));
        };
        match parse_count(seg, m)? {
            0 => Err(Error::parse(seg, "M must be at least 1")),
            m => Ok(ContextMode::Aoc(m)),
        }
    }
}

impl FromStr for SpecialPolicy {
    type Err = Error;

    fn from_str(seg: &str) -> Result<Self> {
        match seg {
            "nospec" => Ok(SpecialPolicy::NoSpec),
            "all" => Ok(SpecialPolicy::All),
            "withcls" => Ok(SpecialPolicy::WithCls),
            _ => Err(Error::parse(seg, "expected `nospec`, `all` or `withcls`")),
        }
    }
}

impl FromStr for LayerScheme {
    type Err = Error;

    fn from_str(seg: &str) -> Result<Self> {
        if let Some(n) = seg.strip_prefix("avg_le") {
            Ok(LayerScheme::AvgLe(parse_count(seg, n)?))
        } else if let Some(n) = seg.strip_prefix("avg_ge") {
            Ok(LayerScheme::AvgGe(parse_count(seg, n)?))
        } else if let Some(n) = seg.strip_prefix('l') {
            Ok(LayerScheme::Single(parse_count(seg, n)?))
        } else {
            Err(Error::parse(seg, "expected `avg_leN`, `lN` or `avg_geN`"))
        }
    }
}

impl FromStr for PoolingConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let segs: Vec<&str> = s.split('.').collect();
        if segs.len() != 3 {
            return Err(Error::parse(s, "expected source.context.policy"));
        }
        Ok(PoolingConfig {
            source: parse_source(segs[0])?,
            context: segs[1].parse()?,
            policy: segs[2].parse()?,
        })
    }
}

impl FromStr for ExtractionConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let segs: Vec<&str> = s.split('.').collect();
        if segs.len() != 4 {
            return Err(Error::parse(s, "expected source.context.policy.layers"));
        }
        Ok(ExtractionConfig {
            source: parse_source(segs[0])?,
            context: segs[1].parse()?,
            policy: segs[2].parse()?,
            layers: segs[3].parse()?,
        })
    }
}

macro_rules! string_serde {
    ($t:ty) => {
        impl Serialize for $t {
            fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
                s.collect_str(self)
            }
        }

        impl<'de> Deserialize<'de> for $t {
            fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
                String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
            }
        }
    };
}

string_serde!(ExtractionConfig);
string_serde!(PoolingConfig);
