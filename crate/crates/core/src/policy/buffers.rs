//! Labeled state stores searched by k-nearest neighbors on standardized
//! coordinates.

use super::knn::{brute_force, KdTree, Point};
use super::{discounted_returns, DiscreteAction, PolicyError, StateVec, Trajectory};
use crate::codec::{self, Reader};

/// Smallest value buffer accepted.
pub const MIN_VALUE_STATES: usize = 100;

/// States, their per-dimension scales and the search tree over the scaled points.
#[derive(Debug, Clone)]
struct Index {
    states: Vec<StateVec>,
    scales: [f64; 3],
    k: usize,
    tree: KdTree,
}

impl Index {
    fn new(states: Vec<StateVec>, scales: [f64; 3], k: usize) -> Result<Self, PolicyError> {
        if scales.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(PolicyError::Contract(format!("scales must be positive, got {scales:?}")));
        }
        if k == 0 {
            return Err(PolicyError::Contract("k must be positive".into()));
        }
        if let Some(bad) = states.iter().find(|s| !s.is_finite()) {
            return Err(PolicyError::Contract(format!("non-finite state {bad:?}")));
        }
        let points = states.iter().map(|s| normalize(*s, &scales)).collect();
        Ok(Self {
            tree: KdTree::build(points),
            states,
            scales,
            k,
        })
    }

    fn neighbors(&self, s: StateVec) -> Vec<usize> {
        self.tree.nearest(&normalize(s, &self.scales), self.k)
    }

    fn neighbors_brute_force(&self, s: StateVec) -> Vec<usize> {
        brute_force(self.tree.points(), &normalize(s, &self.scales), self.k)
    }
}

fn normalize(s: StateVec, scales: &[f64; 3]) -> Point {
    [s.z1 / scales[0], s.z2 / scales[1], s.speed / scales[2]]
}

/// Population standard deviation per dimension; a dimension without spread
/// gets scale 1 and is flagged.
pub fn standard_scales(states: &[StateVec]) -> ([f64; 3], [bool; 3]) {
    let n = states.len().max(1) as f64;
    let mut scales = [1.0; 3];
    let mut degenerate = [false; 3];
    for d in 0..3 {
        let mean = states.iter().map(|s| s.to_array()[d]).sum::<f64>() / n;
        let var = states.iter().map(|s| (s.to_array()[d] - mean).powi(2)).sum::<f64>() / n;
        let sd = var.sqrt();
        if sd.is_finite() && sd > 1e-12 {
            scales[d] = sd;
        } else {
            degenerate[d] = true;
        }
    }
    (scales, degenerate)
}

fn write_records<'a>(magic: &[u8; 4], scales: &[f64; 3], records: impl ExactSizeIterator<Item = (&'a StateVec, f64)>) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 8 + 24 + records.len() * 32);
    out.extend_from_slice(magic);
    codec::put_u64(&mut out, records.len() as u64);
    for s in scales {
        codec::put_f64(&mut out, *s);
    }
    for (s, v) in records {
        for x in [s.z1, s.z2, s.speed, v] {
            codec::put_f64(&mut out, x);
        }
    }
    out
}

type Records = ([f64; 3], Vec<(StateVec, f64)>);

fn read_records(magic: &[u8; 4], bytes: &[u8]) -> Result<Records, PolicyError> {
    let fmt = PolicyError::Format;
    let mut r = Reader::new(bytes);
    if r.take(4).map_err(fmt)? != magic {
        return Err(PolicyError::Format(format!("missing {} magic", String::from_utf8_lossy(magic))));
    }
    let count = r.u64().map_err(fmt)? as usize;
    if r.remaining() != 24 + count.saturating_mul(32) {
        return Err(PolicyError::Format(format!("entry count {count} does not match file size")));
    }
    let scales = [r.f64().map_err(fmt)?, r.f64().map_err(fmt)?, r.f64().map_err(fmt)?];
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let s = StateVec {
            z1: r.f64().map_err(fmt)?,
            z2: r.f64().map_err(fmt)?,
            speed: r.f64().map_err(fmt)?,
        };
        records.push((s, r.f64().map_err(fmt)?));
    }
    Ok((scales, records))
}

/// States paired with their discounted returns.
#[derive(Debug, Clone)]
pub struct ValueBuffer {
    index: Index,
    values: Vec<f64>,
    /// Dimensions whose spread was zero and whose scale fell back to 1.
    pub degenerate: [bool; 3],
}

impl ValueBuffer {
    pub fn new(states: Vec<StateVec>, values: Vec<f64>, scales: [f64; 3], k: usize) -> Result<Self, PolicyError> {
        if states.len() != values.len() {
            return Err(PolicyError::Contract("states and values differ in length".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(PolicyError::Contract("non-finite value".into()));
        }
        Ok(Self {
            index: Index::new(states, scales, k)?,
            values,
            degenerate: [false; 3],
        })
    }

    /// Scales come from the spread of `states`.
    pub fn from_entries(states: Vec<StateVec>, values: Vec<f64>, k: usize) -> Result<Self, PolicyError> {
        let (scales, degenerate) = standard_scales(&states);
        let mut b = Self::new(states, values, scales, k)?;
        b.degenerate = degenerate;
        Ok(b)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn k(&self) -> usize {
        self.index.k
    }

    pub fn scales(&self) -> [f64; 3] {
        self.index.scales
    }

    pub fn state(&self, i: usize) -> StateVec {
        self.index.states[i]
    }

    pub fn value(&self, i: usize) -> f64 {
        self.values[i]
    }

    pub fn states(&self) -> &[StateVec] {
        &self.index.states
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Indices of the nearest entries, nearest first; fewer than `k` when the
    /// buffer is smaller.
    pub fn neighbors(&self, s: StateVec) -> Vec<usize> {
        self.index.neighbors(s)
    }

    pub fn neighbors_brute_force(&self, s: StateVec) -> Vec<usize> {
        self.index.neighbors_brute_force(s)
    }

    /// `VBUF` file: count, scales, then `(z1, z2, speed, value)` records.
    pub fn to_bytes(&self) -> Vec<u8> {
        write_records(b"VBUF", &self.index.scales, self.index.states.iter().zip(self.values.iter().copied()))
    }

    pub fn from_bytes(bytes: &[u8], k: usize) -> Result<Self, PolicyError> {
        let (scales, records) = read_records(b"VBUF", bytes)?;
        let (states, values) = records.into_iter().unzip();
        Self::new(states, values, scales, k)
    }
}

/// Pairs every rollout state with its discounted return.
pub fn build_value_buffer(trajectories: &[Trajectory], gamma: f64, k: usize) -> Result<ValueBuffer, PolicyError> {
    let mut states = Vec::new();
    let mut values = Vec::new();
    for t in trajectories.iter().filter(|t| !t.steps.is_empty()) {
        let rewards: Vec<f64> = t.steps.iter().map(|s| s.reward).collect();
        values.extend(discounted_returns(&rewards, gamma)?);
        states.extend(t.steps.iter().map(|s| s.state));
    }
    if states.len() < MIN_VALUE_STATES {
        return Err(PolicyError::Contract(format!(
            "value buffer needs at least {MIN_VALUE_STATES} states, got {}",
            states.len()
        )));
    }
    ValueBuffer::from_entries(states, values, k)
}

/// Good recovery transitions, searched with the value buffer's scales.
#[derive(Debug, Clone)]
pub struct CorrectionBuffer {
    index: Index,
    actions: Vec<DiscreteAction>,
}

impl CorrectionBuffer {
    pub fn new(entries: Vec<(StateVec, DiscreteAction)>, scales: [f64; 3], k: usize) -> Result<Self, PolicyError> {
        let (states, actions) = entries.into_iter().unzip();
        Ok(Self {
            index: Index::new(states, scales, k)?,
            actions,
        })
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn scales(&self) -> [f64; 3] {
        self.index.scales
    }

    pub fn state(&self, i: usize) -> StateVec {
        self.index.states[i]
    }

    pub fn action(&self, i: usize) -> DiscreteAction {
        self.actions[i]
    }

    pub fn actions(&self) -> &[DiscreteAction] {
        &self.actions
    }

    pub fn neighbors(&self, s: StateVec) -> Vec<usize> {
        self.index.neighbors(s)
    }

    pub fn neighbors_brute_force(&self, s: StateVec) -> Vec<usize> {
        self.index.neighbors_brute_force(s)
    }

    /// `CBUF` file: count, scales, then `(z1, z2, speed, action id)` records.
    pub fn to_bytes(&self) -> Vec<u8> {
        write_records(
            b"CBUF",
            &self.index.scales,
            self.index.states.iter().zip(self.actions.iter().map(|a| a.id() as f64)),
        )
    }

    pub fn from_bytes(bytes: &[u8], k: usize) -> Result<Self, PolicyError> {
        let (scales, records) = read_records(b"CBUF", bytes)?;
        let entries = records
            .into_iter()
            .map(|(s, id)| {
                let action = (id.fract() == 0.0 && id >= 0.0)
                    .then(|| DiscreteAction::from_id(id as usize))
                    .flatten()
                    .ok_or_else(|| PolicyError::Format(format!("invalid action id {id}")))?;
                Ok((s, action))
            })
            .collect::<Result<Vec<_>, PolicyError>>()?;
        Self::new(entries, scales, k)
    }
}
