//! Trajectory data model, CSV ingestion, state scaling and three-way splitting.
//!
//! A trajectory holds states `S_0..S_{T+1}`, binary actions `A_0..A_T` and the
//! per-step rewards `R(S_t, A_t, S_{t+1})`. Every trajectory in a [`Dataset`]
//! shares the same horizon and state dimension.

use std::collections::HashMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// `T + 2` states.
    pub states: Vec<DVector<f64>>,
    /// `T + 1` actions, each 0 or 1.
    pub actions: Vec<u8>,
    /// `T + 1` rewards.
    pub rewards: Vec<f64>,
}

impl Trajectory {
    pub fn new(states: Vec<DVector<f64>>, actions: Vec<u8>, rewards: Vec<f64>) -> Result<Self> {
        let id = "<new>".to_string();
        if actions.is_empty() {
            return Err(Error::MalformedTrajectory { id, reason: "no decision steps".into() });
        }
        if states.len() != actions.len() + 1 {
            return Err(Error::MalformedTrajectory {
                id,
                reason: format!("{} states for {} actions", states.len(), actions.len()),
            });
        }
        if rewards.len() != actions.len() {
            return Err(Error::MalformedTrajectory {
                id,
                reason: format!("{} rewards for {} actions", rewards.len(), actions.len()),
            });
        }
        let k = states[0].len();
        if let Some(s) = states.iter().find(|s| s.len() != k) {
            return Err(Error::Dimension { expected: k, found: s.len() });
        }
        if actions.iter().any(|&a| a > 1) {
            return Err(Error::MalformedTrajectory { id, reason: "action outside {0,1}".into() });
        }
        if states.iter().any(|s| s.iter().any(|v| !v.is_finite())) {
            return Err(Error::MalformedTrajectory { id, reason: "non-finite state".into() });
        }
        Ok(Trajectory { states, actions, rewards })
    }

    /// Number of decision steps, `T + 1`.
    pub fn steps(&self) -> usize {
        self.actions.len()
    }

    pub fn dim(&self) -> usize {
        self.states[0].len()
    }

    /// Undiscounted return `sum_t R_t`.
    pub fn total_return(&self) -> f64 {
        self.rewards.iter().sum()
    }

    /// Iterator over decision steps as `(state, action)`.
    pub fn decisions(&self) -> impl Iterator<Item = (&DVector<f64>, u8)> {
        self.states.iter().zip(self.actions.iter().copied())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingInfo {
    pub per_dimension_sd: Vec<f64>,
    pub applied: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub trajectories: Vec<Trajectory>,
    pub scaling: Option<ScalingInfo>,
    pub seed_tag: Option<String>,
}

impl Dataset {
    pub fn new(trajectories: Vec<Trajectory>) -> Result<Self> {
        let first = trajectories.first().ok_or(Error::EmptyDataset)?;
        let (steps, k) = (first.steps(), first.dim());
        for tr in &trajectories {
            if tr.dim() != k {
                return Err(Error::Dimension { expected: k, found: tr.dim() });
            }
            if tr.steps() != steps {
                return Err(Error::RaggedTrajectory {
                    id: "<in-memory>".into(),
                    expected: steps,
                    found: tr.steps(),
                });
            }
        }
        Ok(Dataset { trajectories, scaling: None, seed_tag: None })
    }

    pub fn n(&self) -> usize {
        self.trajectories.len()
    }

    /// Decision steps per trajectory, `T + 1`.
    pub fn steps(&self) -> usize {
        self.trajectories[0].steps()
    }

    /// State dimension `K`.
    pub fn dim(&self) -> usize {
        self.trajectories[0].dim()
    }

    pub fn returns(&self) -> Vec<f64> {
        self.trajectories.iter().map(Trajectory::total_return).collect()
    }

    /// Dataset restricted to the given trajectory indices, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let trajectories = indices
            .iter()
            .map(|&i| {
                self.trajectories
                    .get(i)
                    .cloned()
                    .ok_or_else(|| Error::InvalidArgument(format!("trajectory index {i} out of range")))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut d = Dataset::new(trajectories)?;
        d.scaling = self.scaling.clone();
        d.seed_tag = self.seed_tag.clone();
        Ok(d)
    }

    /// Pooled (over trajectories and all `T + 2` time points) sample standard
    /// deviation of each state dimension, with Bessel's correction.
    pub fn pooled_sd(&self) -> Vec<f64> {
        let k = self.dim();
        let mut sum = vec![0.0; k];
        let mut count = 0usize;
        for s in self.trajectories.iter().flat_map(|t| t.states.iter()) {
            for j in 0..k {
                sum[j] += s[j];
            }
            count += 1;
        }
        let mean: Vec<f64> = sum.iter().map(|v| v / count as f64).collect();
        let mut ss = vec![0.0; k];
        for s in self.trajectories.iter().flat_map(|t| t.states.iter()) {
            for j in 0..k {
                ss[j] += (s[j] - mean[j]).powi(2);
            }
        }
        let denom = count.saturating_sub(1).max(1) as f64;
        ss.iter().map(|v| (v / denom).sqrt()).collect()
    }
}

/// Divides every state dimension by its pooled sample standard deviation.
pub fn scale_states(d: &Dataset) -> Result<Dataset> {
    if d.scaling.as_ref().is_some_and(|s| s.applied) {
        return Err(Error::AlreadyScaled);
    }
    let sd = d.pooled_sd();
    if let Some(dim) = sd.iter().position(|&v| !(v > 0.0) || !v.is_finite()) {
        return Err(Error::ZeroVariance { dim: dim + 1 });
    }
    let mut out = d.clone();
    for tr in &mut out.trajectories {
        for s in &mut tr.states {
            for (v, sdk) in s.iter_mut().zip(&sd) {
                *v /= sdk;
            }
        }
    }
    out.scaling = Some(ScalingInfo { per_dimension_sd: sd, applied: true });
    Ok(out)
}

/// Inverse of [`scale_states`]. Rewards are left untouched in both directions.
pub fn unscale_states(d: &Dataset) -> Result<Dataset> {
    let info = match &d.scaling {
        Some(info) if info.applied => info.clone(),
        _ => return Err(Error::InvalidArgument("dataset is not scaled".into())),
    };
    let mut out = d.clone();
    for tr in &mut out.trajectories {
        for s in &mut tr.states {
            for (v, sdk) in s.iter_mut().zip(&info.per_dimension_sd) {
                *v *= sdk;
            }
        }
    }
    out.scaling = Some(ScalingInfo { applied: false, ..info });
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub split1_train: Vec<usize>,
    pub split1_test: Vec<usize>,
    pub split2: Vec<usize>,
    pub seed: u64,
}

impl SplitSpec {
    pub fn split1(&self) -> Vec<usize> {
        let mut v = self.split1_train.clone();
        v.extend_from_slice(&self.split1_test);
        v
    }
}

pub const DEFAULT_SPLIT_FRACTIONS: (f64, f64, f64) = (0.25, 0.25, 0.5);

/// Random three-way partition of `0..n`, deterministic in `seed`.
pub fn split_dataset(n: usize, seed: u64, fractions: (f64, f64, f64)) -> Result<SplitSpec> {
    let (f1, f2, f3) = fractions;
    if [f1, f2, f3].iter().any(|f| !(*f > 0.0)) || ((f1 + f2 + f3) - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "split fractions must be positive and sum to 1, got ({f1}, {f2}, {f3})"
        )));
    }
    let n_train = (n as f64 * f1).round() as usize;
    let n_test = (n as f64 * f2).round() as usize;
    if n_train == 0 || n_test == 0 || n_train + n_test >= n {
        return Err(Error::SplitTooSmall { n });
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let mut split1_train = idx[..n_train].to_vec();
    let mut split1_test = idx[n_train..n_train + n_test].to_vec();
    let mut split2 = idx[n_train + n_test..].to_vec();
    split1_train.sort_unstable();
    split1_test.sort_unstable();
    split2.sort_unstable();
    Ok(SplitSpec { split1_train, split1_test, split2, seed })
}

/// How per-step rewards are obtained at ingestion. Component indices are
/// 1-based, matching the `s1..sK` column naming.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum RewardRule {
    Column(String),
    NextStateComponent(usize),
    NegCurrentComponentTimesAction(usize),
}

impl RewardRule {
    pub fn reward(&self, s: &DVector<f64>, a: u8, s_next: &DVector<f64>) -> f64 {
        match *self {
            RewardRule::Column(_) => f64::NAN,
            RewardRule::NextStateComponent(j) => s_next[j - 1],
            RewardRule::NegCurrentComponentTimesAction(j) => -s[j - 1] * a as f64,
        }
    }

    fn component(&self) -> Option<usize> {
        match *self {
            RewardRule::Column(_) => None,
            RewardRule::NextStateComponent(j) | RewardRule::NegCurrentComponentTimesAction(j) => Some(j),
        }
    }
}

impl fmt::Display for RewardRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RewardRule::Column(c) => write!(f, "column({c})"),
            RewardRule::NextStateComponent(j) => write!(f, "next_state_component({j})"),
            RewardRule::NegCurrentComponentTimesAction(j) => write!(f, "neg_current_component_times_action({j})"),
        }
    }
}

impl FromStr for RewardRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::InvalidArgument(format!("unrecognised reward rule `{s}`"));
        if s == "column" {
            return Ok(RewardRule::Column("r".into()));
        }
        let (name, rest) = s.split_once('(').ok_or_else(bad)?;
        let arg = rest.strip_suffix(')').ok_or_else(bad)?.trim();
        match name.trim() {
            "column" => Ok(RewardRule::Column(arg.to_string())),
            "next_state_component" => {
                let j: usize = arg.parse().map_err(|_| bad())?;
                if j == 0 {
                    return Err(bad());
                }
                Ok(RewardRule::NextStateComponent(j))
            }
            "neg_current_component_times_action" => {
                let j: usize = arg.parse().map_err(|_| bad())?;
                if j == 0 {
                    return Err(bad());
                }
                Ok(RewardRule::NegCurrentComponentTimesAction(j))
            }
            _ => Err(bad()),
        }
    }
}

/// Column mapping for [`load_dataset`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub id: String,
    pub time: String,
    pub states: Vec<String>,
    pub action: String,
    pub reward: RewardRule,
}

impl CsvSchema {
    /// `id, t, s1..sK, a, r`.
    pub fn standard(k: usize) -> Self {
        CsvSchema {
            id: "id".into(),
            time: "t".into(),
            states: (1..=k).map(|j| format!("s{j}")).collect(),
            action: "a".into(),
            reward: RewardRule::Column("r".into()),
        }
    }

    /// Standard schema with `K` taken from the `s1, s2, ...` columns present in `headers`.
    pub fn from_headers<S: AsRef<str>>(headers: &[S], reward: Option<RewardRule>) -> Self {
        let mut k = 0;
        while headers.iter().any(|h| h.as_ref() == format!("s{}", k + 1)) {
            k += 1;
        }
        let mut schema = CsvSchema::standard(k);
        if let Some(r) = reward {
            schema.reward = r;
        }
        schema
    }
}

/// Reads a trajectory CSV from `path`.
pub fn load_dataset(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    read_dataset(file, schema)
}

struct Row {
    line: usize,
    time: f64,
    state: DVector<f64>,
    action: Option<u8>,
    reward: Option<f64>,
}

/// Reads trajectories from any CSV source. Each trajectory contributes `T + 1`
/// decision rows followed by one terminal row holding `S_{T+1}` with empty
/// action (and reward) cells.
pub fn read_dataset<R: Read>(reader: R, schema: &CsvSchema) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        headers.iter().position(|h| h == name).ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let id_col = col(&schema.id)?;
    let t_col = col(&schema.time)?;
    let s_cols = schema.states.iter().map(|s| col(s)).collect::<Result<Vec<_>>>()?;
    let a_col = col(&schema.action)?;
    let r_col = match &schema.reward {
        RewardRule::Column(c) => Some(col(c)?),
        other => {
            let j = other.component().unwrap_or(0);
            if j > schema.states.len() {
                return Err(Error::InvalidArgument(format!(
                    "reward rule {other} refers to component {j} but only {} state columns exist",
                    schema.states.len()
                )));
            }
            None
        }
    };
    if s_cols.is_empty() {
        return Err(Error::InvalidArgument("schema names no state columns".into()));
    }

    let parse = |rec: &csv::StringRecord, c: usize, line: usize| -> Result<f64> {
        let raw = rec.get(c).unwrap_or("");
        let v: f64 = raw.parse().map_err(|_| Error::Parse {
            row: line,
            column: headers[c].to_string(),
            value: raw.to_string(),
        })?;
        if !v.is_finite() {
            return Err(Error::NonFinite { row: line, column: headers[c].to_string() });
        }
        Ok(v)
    };

    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Vec<Row>> = HashMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        let id = rec.get(id_col).unwrap_or("").to_string();
        let time = parse(&rec, t_col, line)?;
        let state = DVector::from_iterator(
            s_cols.len(),
            s_cols.iter().map(|&c| parse(&rec, c, line)).collect::<Result<Vec<_>>>()?,
        );
        let raw_a = rec.get(a_col).unwrap_or("");
        let action = if raw_a.is_empty() {
            None
        } else {
            match raw_a.parse::<f64>() {
                Ok(v) if v == 0.0 => Some(0),
                Ok(v) if v == 1.0 => Some(1),
                _ => return Err(Error::NonBinaryAction { row: line, value: raw_a.to_string() }),
            }
        };
        let reward = match r_col {
            Some(c) if action.is_some() => Some(parse(&rec, c, line)?),
            _ => None,
        };
        if !groups.contains_key(&id) {
            order.push(id.clone());
        }
        groups.entry(id).or_default().push(Row { line, time, state, action, reward });
    }
    if order.is_empty() {
        return Err(Error::EmptyDataset);
    }

    // modal number of decision steps defines T
    let mut counts: HashMap<usize, usize> = HashMap::new();
    for rows in groups.values() {
        *counts.entry(rows.iter().filter(|r| r.action.is_some()).count()).or_default() += 1;
    }
    let expected = counts
        .iter()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
        .map(|(&steps, _)| steps)
        .unwrap_or(0);

    let mut trajectories = Vec::with_capacity(order.len());
    for id in &order {
        let mut rows = groups.remove(id).unwrap_or_default();
        rows.sort_by(|a, b| a.time.total_cmp(&b.time));
        let decisions = rows.iter().filter(|r| r.action.is_some()).count();
        if decisions != expected {
            return Err(Error::RaggedTrajectory { id: id.clone(), expected, found: decisions });
        }
        let last = rows.last().expect("group is non-empty");
        if last.action.is_some() {
            return Err(Error::MalformedTrajectory {
                id: id.clone(),
                reason: format!("missing terminal state row (empty action) after line {}", last.line),
            });
        }
        if let Some(r) = rows[..rows.len() - 1].iter().find(|r| r.action.is_none()) {
            return Err(Error::MalformedTrajectory {
                id: id.clone(),
                reason: format!("line {}: empty action before the terminal row", r.line),
            });
        }
        let states: Vec<DVector<f64>> = rows.iter().map(|r| r.state.clone()).collect();
        let actions: Vec<u8> = rows[..rows.len() - 1].iter().map(|r| r.action.unwrap_or(0)).collect();
        let rewards: Vec<f64> = match &schema.reward {
            RewardRule::Column(_) => rows[..rows.len() - 1].iter().map(|r| r.reward.unwrap_or(f64::NAN)).collect(),
            rule => (0..actions.len()).map(|t| rule.reward(&states[t], actions[t], &states[t + 1])).collect(),
        };
        let tr = Trajectory::new(states, actions, rewards).map_err(|e| match e {
            Error::MalformedTrajectory { reason, .. } => Error::MalformedTrajectory { id: id.clone(), reason },
            other => other,
        })?;
        trajectories.push(tr);
    }
    Dataset::new(trajectories)
}

/// Writes `d` in the standard `id, t, s1..sK, a, r` layout.
pub fn write_dataset<W: Write>(d: &Dataset, writer: W) -> Result<()> {
    let k = d.dim();
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["id".to_string(), "t".to_string()];
    header.extend((1..=k).map(|j| format!("s{j}")));
    header.push("a".into());
    header.push("r".into());
    w.write_record(&header)?;
    for (i, tr) in d.trajectories.iter().enumerate() {
        for (t, s) in tr.states.iter().enumerate() {
            let mut rec = vec![i.to_string(), t.to_string()];
            rec.extend(s.iter().map(|v| v.to_string()));
            if t < tr.steps() {
                rec.push(tr.actions[t].to_string());
                rec.push(tr.rewards[t].to_string());
            } else {
                rec.push(String::new());
                rec.push(String::new());
            }
            w.write_record(&rec)?;
        }
    }
    w.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}
