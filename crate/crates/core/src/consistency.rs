//! Neighbour-consistency filter that turns the rejected set into the
//! reliable pseudo-labeled subset.

use std::cmp::Ordering;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::dataio::{Dataset, Role};
use crate::{par, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConsistencyConfig {
    /// Neighbours inspected per rejected sample.
    pub neighbors: usize,
}

impl Default for ConsistencyConfig {
    fn default() -> Self {
        Self { neighbors: 6 }
    }
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// The `c` nearest pool members to `pool[query]`, excluding the query
/// itself. Distance ties go to the smaller id. Returns pool positions
/// ordered by increasing distance.
pub fn knn(query: usize, pool: &[Vec<f64>], ids: &[usize], c: usize) -> Result<Vec<usize>> {
    if ids.len() != pool.len() {
        return Err(Error::Shape("one id per pool member required".into()));
    }
    if c == 0 {
        return Err(Error::Config("neighbour count must be at least 1".into()));
    }
    if pool.len() < c + 1 {
        return Err(Error::Precondition(format!(
            "pool of {} cannot supply {c} neighbours besides the query",
            pool.len()
        )));
    }
    let q = pool
        .get(query)
        .ok_or_else(|| Error::Precondition(format!("query {query} is not a pool member")))?;
    let mut cand: Vec<(f64, usize, usize)> = pool
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != query)
        .map(|(i, p)| (squared_distance(q, p), ids[i], i))
        .collect();
    let cmp = |a: &(f64, usize, usize), b: &(f64, usize, usize)| {
        a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1))
    };
    if cand.len() > c {
        cand.select_nth_unstable_by(c - 1, cmp);
        cand.truncate(c);
    }
    cand.sort_by(cmp);
    Ok(cand.into_iter().map(|(_, _, i)| i).collect())
}

/// Per-sample outcome of the consistency check.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsistencyOutcome {
    pub id: usize,
    /// Neighbours that are themselves rejected.
    pub agreeing: usize,
    pub retained: bool,
}

/// Keeps the rejected samples whose neighbourhood in the unlabeled pool is
/// mostly rejected too (strictly more than half of `C`).
pub fn consistent_filter(
    pseudo: &Dataset,
    unlabeled: &Dataset,
    features: &[Vec<f64>],
    cfg: &ConsistencyConfig,
) -> Result<(Dataset, Vec<ConsistencyOutcome>)> {
    if features.len() != unlabeled.len() {
        return Err(Error::Shape("one feature per unlabeled sample required".into()));
    }
    let k = unlabeled.class_count;
    if pseudo.is_empty() {
        return Ok((Dataset::new(Vec::new(), Role::Reliable, k), Vec::new()));
    }
    let ids = unlabeled.ids();
    let position: HashMap<usize, usize> = ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let mut rejected = vec![false; ids.len()];
    let queries = pseudo
        .samples
        .iter()
        .map(|s| {
            let p = *position
                .get(&s.id)
                .ok_or_else(|| Error::Precondition(format!("sample {} is not in the unlabeled set", s.id)))?;
            rejected[p] = true;
            Ok(p)
        })
        .collect::<Result<Vec<_>>>()?;

    let c = cfg.neighbors;
    let outcomes = par::map(&queries, |&q| -> Result<ConsistencyOutcome> {
        let nn = knn(q, features, &ids, c)?;
        let agreeing = nn.iter().filter(|&&i| rejected[i]).count();
        Ok(ConsistencyOutcome { id: ids[q], agreeing, retained: 2 * agreeing > c })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let samples = pseudo
        .samples
        .iter()
        .zip(&outcomes)
        .filter(|(_, o)| o.retained)
        .map(|(s, _)| s.clone())
        .collect();
    Ok((Dataset::new(samples, Role::Reliable, k), outcomes))
}
