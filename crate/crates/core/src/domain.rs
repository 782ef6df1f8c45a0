//! Shared vocabulary: attribute maps, lower-bound constraints, attribute
//! queries, job specifications and records, and client descriptions.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{DomainError, QueryParseError};

/// Simulated or wall-clock time in seconds.
pub type Seconds = f64;

/// Opaque job identifier. Ids are issued in increasing order, and the
/// zero-padded display form sorts lexicographically the same way.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct JobId(pub u32);

impl fmt::Display for JobId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "job-{:06}", self.0)
    }
}

/// Opaque client identifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClientId(pub u64);

impl fmt::Display for ClientId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "client-{}", self.0)
    }
}

fn check_entry(name: &str, value: f64) -> Result<(), DomainError> {
    if name.is_empty() {
        return Err(DomainError::EmptyAttributeName);
    }
    if !value.is_finite() {
        return Err(DomainError::NonFiniteValue {
            name: name.to_string(),
            value,
        });
    }
    Ok(())
}

/// Named numeric attributes of a client. Categorical attributes are encoded
/// as ordered integers.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BTreeMap<String, f64>", into = "BTreeMap<String, f64>")]
pub struct AttributeMap(BTreeMap<String, f64>);

impl AttributeMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_pairs<'a, I>(pairs: I) -> Result<Self, DomainError>
    where
        I: IntoIterator<Item = (&'a str, f64)>,
    {
        let mut map = Self::new();
        for (name, value) in pairs {
            map.insert(name, value)?;
        }
        Ok(map)
    }

    pub fn insert(&mut self, name: &str, value: f64) -> Result<(), DomainError> {
        check_entry(name, value)?;
        self.0.insert(name.to_string(), value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.0.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.0.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

impl TryFrom<BTreeMap<String, f64>> for AttributeMap {
    type Error = DomainError;

    fn try_from(map: BTreeMap<String, f64>) -> Result<Self, Self::Error> {
        for (name, value) in &map {
            check_entry(name, *value)?;
        }
        Ok(Self(map))
    }
}

impl From<AttributeMap> for BTreeMap<String, f64> {
    fn from(map: AttributeMap) -> Self {
        map.0
    }
}

/// Conjunction of lower bounds over named attributes. Serialized as a JSON
/// object `{name: bound}`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BTreeMap<String, f64>", into = "BTreeMap<String, f64>")]
pub struct Constraint {
    bounds: BTreeMap<String, f64>,
}

impl Constraint {
    /// The empty constraint, satisfied by every attribute map.
    pub fn none() -> Self {
        Self::default()
    }

    pub fn from_pairs<'a, I>(pairs: I) -> Result<Self, DomainError>
    where
        I: IntoIterator<Item = (&'a str, f64)>,
    {
        let mut bounds = BTreeMap::new();
        for (name, bound) in pairs {
            check_entry(name, bound)?;
            bounds.insert(name.to_string(), bound);
        }
        Ok(Self { bounds })
    }

    pub fn with(mut self, name: &str, bound: f64) -> Result<Self, DomainError> {
        check_entry(name, bound)?;
        self.bounds.insert(name.to_string(), bound);
        Ok(self)
    }

    pub fn bound(&self, name: &str) -> Option<f64> {
        self.bounds.get(name).copied()
    }

    pub fn is_empty(&self) -> bool {
        self.bounds.is_empty()
    }

    pub fn len(&self) -> usize {
        self.bounds.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.bounds.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn is_satisfied_by(&self, attrs: &AttributeMap) -> bool {
        self.bounds
            .iter()
            .all(|(name, bound)| attrs.get(name).is_some_and(|v| v >= *bound))
    }

    /// Equivalent query: one `name>=bound` clause per entry.
    pub fn to_query(&self) -> Query {
        Query {
            clauses: self
                .bounds
                .iter()
                .map(|(name, bound)| Clause {
                    attr: name.clone(),
                    op: Comparator::Ge,
                    value: *bound,
                })
                .collect(),
        }
    }

    /// Canonical textual key; equal constraints have equal signatures.
    pub fn signature(&self) -> String {
        self.to_query().to_string()
    }
}

impl TryFrom<BTreeMap<String, f64>> for Constraint {
    type Error = DomainError;

    fn try_from(bounds: BTreeMap<String, f64>) -> Result<Self, Self::Error> {
        for (name, bound) in &bounds {
            check_entry(name, *bound)?;
        }
        Ok(Self { bounds })
    }
}

impl From<Constraint> for BTreeMap<String, f64> {
    fn from(c: Constraint) -> Self {
        c.bounds
    }
}

/// True iff every bound in `c` is met by a present attribute in `attrs`.
pub fn satisfies(attrs: &AttributeMap, c: &Constraint) -> bool {
    c.is_satisfied_by(attrs)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Comparator {
    Ge,
    Gt,
    Eq,
    Le,
    Lt,
}

impl Comparator {
    pub fn holds(self, lhs: f64, rhs: f64) -> bool {
        match self {
            Comparator::Ge => lhs >= rhs,
            Comparator::Gt => lhs > rhs,
            Comparator::Eq => lhs == rhs,
            Comparator::Le => lhs <= rhs,
            Comparator::Lt => lhs < rhs,
        }
    }

    pub fn symbol(self) -> &'static str {
        match self {
            Comparator::Ge => ">=",
            Comparator::Gt => ">",
            Comparator::Eq => "=",
            Comparator::Le => "<=",
            Comparator::Lt => "<",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Clause {
    pub attr: String,
    pub op: Comparator,
    pub value: f64,
}

/// Conjunctive attribute predicate, parsed from strings such as
/// `cpu_f >= 2 AND ram < 4096`. The empty string parses to the query that
/// matches everything.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Query {
    clauses: Vec<Clause>,
}

impl Query {
    pub fn all() -> Self {
        Self::default()
    }

    pub fn from_clauses(clauses: Vec<Clause>) -> Result<Self, DomainError> {
        for c in &clauses {
            check_entry(&c.attr, c.value)?;
        }
        Ok(Self { clauses })
    }

    pub fn clauses(&self) -> &[Clause] {
        &self.clauses
    }

    /// Evaluates against any named-value source; an absent name fails its clause.
    pub fn eval_with<F>(&self, lookup: F) -> bool
    where
        F: Fn(&str) -> Option<f64>,
    {
        self.clauses
            .iter()
            .all(|c| lookup(&c.attr).is_some_and(|v| c.op.holds(v, c.value)))
    }

    pub fn matches(&self, attrs: &AttributeMap) -> bool {
        self.eval_with(|name| attrs.get(name))
    }

    /// Conjunction of two queries.
    pub fn and(mut self, other: &Query) -> Query {
        self.clauses.extend(other.clauses.iter().cloned());
        self
    }
}

pub fn eval_query(attrs: &AttributeMap, q: &Query) -> bool {
    q.matches(attrs)
}

impl fmt::Display for Query {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, c) in self.clauses.iter().enumerate() {
            if i > 0 {
                f.write_str(" AND ")?;
            }
            write!(f, "{}{}{}", c.attr, c.op.symbol(), c.value)?;
        }
        Ok(())
    }
}

impl FromStr for Query {
    type Err = QueryParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        QueryParser::new(s).parse()
    }
}

impl Serialize for Query {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Query {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

struct QueryParser<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> QueryParser<'a> {
    fn new(src: &'a str) -> Self {
        Self { src, pos: 0 }
    }

    fn rest(&self) -> &'a str {
        &self.src[self.pos..]
    }

    fn skip_ws(&mut self) {
        let rest = self.rest();
        self.pos += rest.len() - rest.trim_start().len();
    }

    fn err(&self, reason: &'static str) -> QueryParseError {
        QueryParseError {
            input: self.src.to_string(),
            position: self.pos,
            reason,
        }
    }

    fn parse(mut self) -> Result<Query, QueryParseError> {
        let mut clauses = Vec::new();
        self.skip_ws();
        if self.rest().is_empty() {
            return Ok(Query { clauses });
        }
        loop {
            clauses.push(self.clause()?);
            self.skip_ws();
            if self.rest().is_empty() {
                return Ok(Query { clauses });
            }
            let rest = self.rest();
            if rest.len() >= 3 && rest[..3].eq_ignore_ascii_case("and") {
                self.pos += 3;
                self.skip_ws();
                if self.rest().is_empty() {
                    return Err(self.err("dangling AND"));
                }
            } else {
                return Err(self.err("expected AND"));
            }
        }
    }

    fn clause(&mut self) -> Result<Clause, QueryParseError> {
        self.skip_ws();
        let attr = self.ident()?;
        self.skip_ws();
        let op = self.comparator()?;
        self.skip_ws();
        let value = self.number()?;
        Ok(Clause { attr, op, value })
    }

    fn ident(&mut self) -> Result<String, QueryParseError> {
        let rest = self.rest();
        let mut chars = rest.char_indices();
        match chars.next() {
            Some((_, c)) if c.is_ascii_alphabetic() || c == '_' => {}
            _ => return Err(self.err("expected attribute name")),
        }
        let end = chars
            .find(|(_, c)| !(c.is_ascii_alphanumeric() || *c == '_' || *c == '.'))
            .map_or(rest.len(), |(i, _)| i);
        self.pos += end;
        Ok(rest[..end].to_string())
    }

    fn comparator(&mut self) -> Result<Comparator, QueryParseError> {
        const TABLE: [(&str, Comparator); 8] = [
            (">=", Comparator::Ge),
            ("<=", Comparator::Le),
            ("==", Comparator::Eq),
            ("≥", Comparator::Ge),
            ("≤", Comparator::Le),
            (">", Comparator::Gt),
            ("<", Comparator::Lt),
            ("=", Comparator::Eq),
        ];
        let rest = self.rest();
        for (tok, op) in TABLE {
            if rest.starts_with(tok) {
                self.pos += tok.len();
                return Ok(op);
            }
        }
        Err(self.err("expected comparator"))
    }

    fn number(&mut self) -> Result<f64, QueryParseError> {
        let bytes = self.rest().as_bytes();
        let mut end = 0;
        if end < bytes.len() && (bytes[end] == b'+' || bytes[end] == b'-') {
            end += 1;
        }
        let digits_start = end;
        while end < bytes.len() && (bytes[end].is_ascii_digit() || bytes[end] == b'.') {
            end += 1;
        }
        if end == digits_start {
            return Err(self.err("expected number"));
        }
        // exponent only when followed by a digit, so `4AND` still lexes as 4
        if end + 1 < bytes.len() && (bytes[end] == b'e' || bytes[end] == b'E') {
            let mut exp = end + 1;
            if exp < bytes.len() && (bytes[exp] == b'+' || bytes[exp] == b'-') {
                exp += 1;
            }
            if exp < bytes.len() && bytes[exp].is_ascii_digit() {
                while exp < bytes.len() && bytes[exp].is_ascii_digit() {
                    exp += 1;
                }
                end = exp;
            }
        }
        let text = &self.rest()[..end];
        let value: f64 = text.parse().map_err(|_| self.err("malformed number"))?;
        if !value.is_finite() {
            return Err(self.err("number is not finite"));
        }
        self.pos += end;
        Ok(value)
    }
}

/// Parameters of a job registration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobSpec {
    pub total_round: u32,
    pub est_demand: u32,
    #[serde(default)]
    pub public_constraint: Constraint,
    #[serde(default)]
    pub private_constraint: Constraint,
    /// Abstract compute units per client task; only the simulator reads it.
    #[serde(default = "default_workload")]
    pub workload_per_client: f64,
}

fn default_workload() -> f64 {
    1.0
}

impl JobSpec {
    pub fn validate(&self) -> Result<(), DomainError> {
        if self.total_round == 0 {
            return Err(DomainError::InvalidJobSpec("total_round must be >= 1"));
        }
        if self.est_demand == 0 {
            return Err(DomainError::InvalidJobSpec("est_demand must be >= 1"));
        }
        if !(self.workload_per_client.is_finite() && self.workload_per_client > 0.0) {
            return Err(DomainError::InvalidJobSpec("workload_per_client must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum JobState {
    Registered,
    Requesting,
    Executing,
    Finished,
}

/// One row of the job database.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub job_id: JobId,
    pub time_stamp: Seconds,
    pub total_sched: Seconds,
    pub start_sched: Seconds,
    pub job_ip: String,
    pub port: u16,
    pub total_demand: u64,
    pub total_round: u32,
    pub attained_service: u64,
    pub round: u32,
    pub demand: u32,
    pub amount: u32,
    pub score: f64,
    pub public_constraint: Constraint,
    pub private_constraint: Constraint,
    pub state: JobState,
    pub workload_per_client: f64,
}

impl JobRecord {
    /// Numeric view of the record for queries and `get_field`.
    /// `public_constraint.<x>` / `private_constraint.<y>` resolve to bounds.
    pub fn field(&self, name: &str) -> Option<f64> {
        let v = match name {
            "time_stamp" => self.time_stamp,
            "total_sched" => self.total_sched,
            "start_sched" => self.start_sched,
            "port" => f64::from(self.port),
            "total_demand" => self.total_demand as f64,
            "total_round" => f64::from(self.total_round),
            "attained_service" => self.attained_service as f64,
            "round" => f64::from(self.round),
            "demand" => f64::from(self.demand),
            "amount" => f64::from(self.amount),
            "score" => self.score,
            "workload_per_client" => self.workload_per_client,
            other => {
                if let Some(x) = other.strip_prefix("public_constraint.") {
                    return self.public_constraint.bound(x);
                }
                if let Some(y) = other.strip_prefix("private_constraint.") {
                    return self.private_constraint.bound(y);
                }
                return None;
            }
        };
        Some(v)
    }

    pub fn has_open_slots(&self) -> bool {
        self.state == JobState::Requesting && self.amount < self.demand
    }
}

/// A client as seen during one availability interval.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientInfo {
    pub client_id: ClientId,
    pub public_attrs: AttributeMap,
    pub private_attrs: AttributeMap,
    pub avail_start: Seconds,
    pub avail_end: Seconds,
    pub speed: f64,
    pub bandwidth: f64,
}

impl ClientInfo {
    pub fn validate(&self) -> Result<(), DomainError> {
        // also rejects NaN endpoints
        if self.avail_start.partial_cmp(&self.avail_end) != Some(std::cmp::Ordering::Less) {
            return Err(DomainError::InvalidClient("avail_start must precede avail_end"));
        }
        if !(self.speed.is_finite() && self.speed > 0.0) {
            return Err(DomainError::InvalidClient("speed must be positive"));
        }
        if !(self.bandwidth.is_finite() && self.bandwidth > 0.0) {
            return Err(DomainError::InvalidClient("bandwidth must be positive"));
        }
        Ok(())
    }

    pub fn is_available_at(&self, now: Seconds) -> bool {
        self.avail_start <= now && now <= self.avail_end
    }
}
