// SPDX-License-Identifier: MIT OR Apache-2.0

//! Category-balanced retrieval metrics.
//!
//! Every annotated object of a query image is one prompted query. A hit is
//! correct when the retrieved image holds any object of the prompted
//! object's category. Per object we compute precision and average precision
//! at `k`; per category these are averaged over query images, where a query
//! holding `n_c` objects of category `c` contributes each object with weight
//! `1 / n_c`. MP@k and MAP@k are unweighted means over the categories that
//! have at least one query.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prompts::{PixelBox, Rle};
use crate::retrieval::RetrievalResult;

/// One annotated object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectAnnotation {
    pub category: String,
    #[serde(rename = "box")]
    pub bbox: PixelBox,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segmentation: Option<Rle>,
}

/// Image id → categories present in that image.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CategoryIndex {
    images: BTreeMap<String, BTreeSet<String>>,
}

impl CategoryIndex {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert<'a, I>(&mut self, id: &str, categories: I)
    where
        I: IntoIterator<Item = &'a str>,
    {
        let entry = self.images.entry(String::from(id)).or_default();
        entry.extend(categories.into_iter().map(String::from));
    }

    pub fn contains(&self, id: &str, category: &str) -> Result<bool> {
        self.images
            .get(id)
            .map(|cats| cats.contains(category))
            .ok_or_else(|| Error::UnknownImage(String::from(id)))
    }
}

/// Correctness bits of one prompted query, in rank order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryOutcome {
    pub query_id: String,
    pub object_index: usize,
    pub category: String,
    pub bits: Vec<bool>,
}

/// Marks every retrieved image that holds `category`.
pub fn score_retrieval(
    result: &RetrievalResult,
    query_id: &str,
    object_index: usize,
    category: &str,
    index: &CategoryIndex,
) -> Result<QueryOutcome> {
    let bits = result
        .ranked
        .iter()
        .map(|item| index.contains(&item.image_id, category))
        .collect::<Result<Vec<_>>>()?;
    Ok(QueryOutcome {
        query_id: String::from(query_id),
        object_index,
        category: String::from(category),
        bits,
    })
}

fn check_cutoff(outcome: &QueryOutcome, k: usize) -> Result<()> {
    if k == 0 || k > outcome.bits.len() {
        return Err(Error::BadParam(format!(
            "k = {k} outside [1, {}]",
            outcome.bits.len()
        )));
    }
    Ok(())
}

/// Fraction of correct hits among the first `k`.
pub fn precision_at(outcome: &QueryOutcome, k: usize) -> Result<f64> {
    check_cutoff(outcome, k)?;
    let hits = outcome.bits[..k].iter().filter(|&&b| b).count();
    Ok(hits as f64 / k as f64)
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// `a/b + c/d` in lowest terms, `None` on overflow.
fn add_ratio((a, b): (u128, u128), (c, d): (u128, u128)) -> Option<(u128, u128)> {
    let g = gcd(b, d);
    let den = (b / g).checked_mul(d)?;
    let num = a.checked_mul(d / g)?.checked_add(c.checked_mul(b / g)?)?;
    let r = gcd(num, den);
    Some((num / r, den / r))
}

/// Mean of the precision at every correct rank within the first `k`; zero
/// when no hit is correct.
///
/// The sum is kept as an exact fraction and rounded once, so short lists
/// give correctly rounded values; very long lists fall back to float
/// accumulation.
pub fn average_precision_at(outcome: &QueryOutcome, k: usize) -> Result<f64> {
    check_cutoff(outcome, k)?;
    let mut hits = 0usize;
    let mut sum = 0.0;
    let mut exact = Some((0u128, 1u128));
    for (i, _) in outcome.bits[..k].iter().enumerate().filter(|(_, &b)| b) {
        hits += 1;
        sum += hits as f64 / (i + 1) as f64;
        exact = exact.and_then(|acc| add_ratio(acc, (hits as u128, i as u128 + 1)));
    }
    if hits == 0 {
        return Ok(0.0);
    }
    match exact.and_then(|(n, d)| Some((n, d.checked_mul(hits as u128)?))) {
        Some((n, d)) => {
            let r = gcd(n, d);
            Ok((n / r) as f64 / (d / r) as f64)
        }
        None => Ok(sum / hits as f64),
    }
}

/// Per-object precision and average precision, possibly averaged over
/// several prompt placements.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectScore {
    pub query_id: String,
    pub category: String,
    pub precision: f64,
    pub average_precision: f64,
}

impl ObjectScore {
    /// Scores an outcome at `min(k, outcome length)`.
    pub fn from_outcome(outcome: &QueryOutcome, k: usize) -> Result<Self> {
        let k = k.min(outcome.bits.len());
        Ok(Self {
            query_id: outcome.query_id.clone(),
            category: outcome.category.clone(),
            precision: precision_at(outcome, k)?,
            average_precision: average_precision_at(outcome, k)?,
        })
    }
}

/// Per-category row of an [`EvalReport`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryReport {
    pub category: String,
    pub p_at_k: f64,
    pub ap_at_k: f64,
    pub num_queries: usize,
    pub num_objects: usize,
}

/// Aggregated evaluation at cutoff `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub k: usize,
    pub categories: Vec<CategoryReport>,
    pub mp_at_k: f64,
    pub map_at_k: f64,
    pub num_objects: usize,
}

/// Order-independent mean: summing in ascending value order makes the result
/// invariant to how categories are named.
fn sorted_mean(mut values: Vec<f64>) -> f64 {
    let n = values.len() as f64;
    values.sort_by(f64::total_cmp);
    values.iter().sum::<f64>() / n
}

/// Category-balanced aggregation of per-object scores.
pub fn aggregate(scores: &[ObjectScore], k: usize) -> Result<EvalReport> {
    if scores.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    // category -> query -> [(precision, average precision)]
    let mut grouped: BTreeMap<&str, BTreeMap<&str, Vec<(f64, f64)>>> = BTreeMap::new();
    for s in scores {
        grouped
            .entry(s.category.as_str())
            .or_default()
            .entry(s.query_id.as_str())
            .or_default()
            .push((s.precision, s.average_precision));
    }
    let categories: Vec<CategoryReport> = grouped
        .into_iter()
        .map(|(category, queries)| {
            let mut p_sum = 0.0;
            let mut ap_sum = 0.0;
            let mut objects = 0;
            for objs in queries.values() {
                let n_c = objs.len() as f64;
                for (p, ap) in objs {
                    p_sum += p / n_c;
                    ap_sum += ap / n_c;
                }
                objects += objs.len();
            }
            let nq = queries.len() as f64;
            CategoryReport {
                category: String::from(category),
                p_at_k: p_sum / nq,
                ap_at_k: ap_sum / nq,
                num_queries: queries.len(),
                num_objects: objects,
            }
        })
        .collect();
    Ok(EvalReport {
        k,
        mp_at_k: sorted_mean(categories.iter().map(|c| c.p_at_k).collect()),
        map_at_k: sorted_mean(categories.iter().map(|c| c.ap_at_k).collect()),
        num_objects: scores.len(),
        categories,
    })
}
