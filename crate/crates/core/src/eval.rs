//! Ranking metrics (triplet AUC, retrieval MRR), scorers for the trained
//! student and teacher, and the POP / RAND baselines.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::catalog::{Catalog, PairSet, Triplet};
use crate::distill::{attention_confidence, build_teacher, AttentionParams, ScoreDistribution};
use crate::error::{Error, Result};
use crate::numerics::{dot, Vector};
use crate::rules::{activated_rules, constraint_vector, RuleSet};
use crate::student::{encode_item, EncoderParams};

/// Scores a single (top, bottom) pair.
pub trait PairScorer: Sync {
    fn score(&self, top: usize, bottom: usize) -> f64;
}

/// Scores the two pairs of a triplet, `(m_ij, m_ik)`.
pub trait TripletScorer: Sync {
    fn score_triplet(&self, t: Triplet) -> (f64, f64);
}

impl<T: PairScorer> TripletScorer for T {
    fn score_triplet(&self, t: Triplet) -> (f64, f64) {
        (self.score(t.top, t.positive), self.score(t.top, t.negative))
    }
}

/// Scores a list of candidate bottoms for one top.
pub trait CandidateScorer: Sync {
    fn score_candidates(&self, top: usize, candidates: &[usize]) -> Vec<f64>;
}

impl<T: PairScorer> CandidateScorer for T {
    fn score_candidates(&self, top: usize, candidates: &[usize]) -> Vec<f64> {
        candidates.iter().map(|&b| self.score(top, b)).collect()
    }
}

/// Fraction of `(m_ij, m_ik)` with `m_ij > m_ik`; ties count one half.
pub fn auc(scores: &[(f64, f64)]) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::RejectedInput("AUC of an empty triplet list".into()));
    }
    let total: f64 = scores
        .iter()
        .map(|&(a, b)| {
            if a > b {
                1.0
            } else if a == b {
                0.5
            } else {
                0.0
            }
        })
        .sum();
    Ok(total / scores.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub auc: f64,
    pub n_triplets: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_rule: Option<BTreeMap<usize, f64>>,
}

/// Scores all triplets in parallel; order of the result follows the input.
pub fn score_triplets<S: TripletScorer + ?Sized>(scorer: &S, triplets: &[Triplet]) -> Vec<(f64, f64)> {
    triplets.par_iter().map(|&t| scorer.score_triplet(t)).collect()
}

pub fn evaluate_auc<S: TripletScorer + ?Sized>(scorer: &S, triplets: &[Triplet]) -> Result<EvalReport> {
    let scores = score_triplets(scorer, triplets);
    Ok(EvalReport {
        auc: auc(&scores)?,
        n_triplets: triplets.len(),
        per_rule: None,
    })
}

/// AUC restricted to the triplets on which each rule fires. Rules that never
/// fire are absent from the map.
pub fn per_rule_eval<S: TripletScorer + ?Sized>(
    scorer: &S,
    rules: &RuleSet,
    catalog: &Catalog,
    triplets: &[Triplet],
) -> Result<BTreeMap<usize, f64>> {
    if triplets.is_empty() {
        return Err(Error::RejectedInput("per-rule evaluation needs triplets".into()));
    }
    let scores = score_triplets(scorer, triplets);
    let mut buckets: BTreeMap<usize, Vec<(f64, f64)>> = BTreeMap::new();
    for (t, s) in triplets.iter().zip(&scores) {
        for id in activated_rules(rules, catalog, *t) {
            buckets.entry(id).or_default().push(*s);
        }
    }
    buckets
        .into_iter()
        .map(|(id, s)| Ok((id, auc(&s)?)))
        .collect()
}

/// Student scores from latent encodings computed once per item.
pub struct StudentScorer {
    tops: Vec<Vector>,
    bottoms: Vec<Vector>,
}

impl StudentScorer {
    pub fn new(params: &EncoderParams, catalog: &Catalog) -> Result<Self> {
        let tops = catalog
            .tops()
            .par_iter()
            .map(|it| encode_item(params, it))
            .collect::<Result<Vec<_>>>()?;
        let bottoms = catalog
            .bottoms()
            .par_iter()
            .map(|it| encode_item(params, it))
            .collect::<Result<Vec<_>>>()?;
        Ok(StudentScorer { tops, bottoms })
    }
}

impl PairScorer for StudentScorer {
    fn score(&self, top: usize, bottom: usize) -> f64 {
        dot(&self.tops[top], &self.bottoms[bottom])
    }
}

/// Number of training tops paired with each bottom.
pub struct PopScorer {
    counts: Vec<usize>,
}

pub fn pop_baseline(train_pairs: &PairSet) -> PopScorer {
    let mut counts = vec![0; train_pairs.num_bottoms()];
    for &(_, j) in train_pairs.pairs() {
        counts[j] += 1;
    }
    PopScorer { counts }
}

impl PairScorer for PopScorer {
    fn score(&self, _top: usize, bottom: usize) -> f64 {
        self.counts.get(bottom).copied().unwrap_or(0) as f64
    }
}

/// Uniform `[0, 1)` scores that are a pure function of `(seed, top, bottom)`.
pub struct RandScorer {
    seed: u64,
}

pub fn rand_baseline(seed: u64) -> RandScorer {
    RandScorer { seed }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

impl PairScorer for RandScorer {
    fn score(&self, top: usize, bottom: usize) -> f64 {
        let h = splitmix64(splitmix64(splitmix64(self.seed) ^ top as u64) ^ bottom as u64);
        (h >> 11) as f64 / (1u64 << 53) as f64
    }
}

/// Scores with the rule-projected teacher distribution instead of the raw
/// student scores. On a triplet this returns `(q_ij, q_ik)`. For candidate
/// ranking, a candidate's score is the sum of its teacher probability over
/// every head-to-head triplet against the other candidates.
pub struct TeacherScorer<'a> {
    student: StudentScorer,
    attention: &'a AttentionParams,
    rules: &'a RuleSet,
    catalog: &'a Catalog,
    c: f64,
}

impl<'a> TeacherScorer<'a> {
    pub fn new(
        student: &EncoderParams,
        attention: &'a AttentionParams,
        rules: &'a RuleSet,
        catalog: &'a Catalog,
        c: f64,
    ) -> Result<Self> {
        if !rules.is_empty() && attention.num_rules() != rules.len() {
            return Err(Error::RejectedInput(format!(
                "attention network was trained for {} rules, rule set has {}",
                attention.num_rules(),
                rules.len()
            )));
        }
        Ok(TeacherScorer {
            student: StudentScorer::new(student, catalog)?,
            attention,
            rules,
            catalog,
            c,
        })
    }

    pub fn teacher(&self, t: Triplet) -> ScoreDistribution {
        let (m_ij, m_ik) = self.student.score_triplet(t);
        let p = ScoreDistribution::from_scores(m_ij, m_ik);
        let constraints = constraint_vector(self.rules, self.catalog, t);
        if constraints.is_empty() {
            return p;
        }
        let ids: Vec<usize> = constraints.iter().map(|c| c.rule_id).collect();
        let conf = attention_confidence(self.attention, self.catalog, t, &ids)
            .expect("rule ids validated against the attention network");
        build_teacher(p, &constraints, &conf, self.c).q
    }
}

impl TripletScorer for TeacherScorer<'_> {
    fn score_triplet(&self, t: Triplet) -> (f64, f64) {
        let q = self.teacher(t);
        (q.ij, q.ik)
    }
}

impl CandidateScorer for TeacherScorer<'_> {
    fn score_candidates(&self, top: usize, candidates: &[usize]) -> Vec<f64> {
        candidates
            .iter()
            .map(|&a| {
                candidates
                    .iter()
                    .filter(|&&b| b != a)
                    .map(|&b| self.teacher(Triplet::new(top, a, b)).ij)
                    .sum()
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuerySplit {
    /// Tops that appear in the training pairs.
    Observed,
    /// Tops absent from the training pairs.
    Unobserved,
    All,
}

impl std::str::FromStr for QuerySplit {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "observed" => Ok(QuerySplit::Observed),
            "unobserved" => Ok(QuerySplit::Unobserved),
            "all" => Ok(QuerySplit::All),
            _ => Err(format!("unknown split {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub mrr: f64,
    pub t_candidates: usize,
    pub split: QuerySplit,
    pub n_queries: usize,
}

/// One retrieval query: a top, its held-out positive and sampled negatives.
#[derive(Debug, Clone, PartialEq)]
pub struct Query {
    pub top: usize,
    pub positive: usize,
    pub candidates: Vec<usize>,
}

/// Builds one query per distinct test top (first test positive, in pair
/// order) with `t_candidates - 1` negatives avoiding every known positive.
pub fn build_queries(
    catalog: &Catalog,
    test_pairs: &PairSet,
    train_pairs: &PairSet,
    known_pairs: &PairSet,
    t_candidates: usize,
    seed: u64,
    split: QuerySplit,
) -> Result<Vec<Query>> {
    if t_candidates < 2 {
        return Err(Error::RejectedInput("need at least two ranking candidates".into()));
    }
    let observed = train_pairs.tops();
    let positives = known_pairs.union(test_pairs).positives_by_top();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::new();
    let mut queries = Vec::new();
    for &(top, positive) in test_pairs.pairs() {
        if !seen.insert(top) {
            continue;
        }
        let keep = match split {
            QuerySplit::All => true,
            QuerySplit::Observed => observed.contains(&top),
            QuerySplit::Unobserved => !observed.contains(&top),
        };
        if !keep {
            continue;
        }
        let pool: Vec<usize> = (0..catalog.num_bottoms())
            .filter(|b| !positives[top].contains(b))
            .collect();
        if pool.len() < t_candidates - 1 {
            return Err(Error::Sampling(format!(
                "top {:?} has only {} negative candidates, {} needed",
                catalog.top(top).id,
                pool.len(),
                t_candidates - 1
            )));
        }
        let mut candidates = vec![positive];
        candidates.extend(index::sample(&mut rng, pool.len(), t_candidates - 1).into_iter().map(|k| pool[k]));
        queries.push(Query {
            top,
            positive,
            candidates,
        });
    }
    Ok(queries)
}

/// 1-based rank of the positive: score descending, ties by ascending item id.
pub fn rank_of_positive(catalog: &Catalog, query: &Query, scores: &[f64]) -> usize {
    let pos_score = scores[0];
    let pos_id = &catalog.bottom(query.positive).id;
    1 + query.candidates[1..]
        .iter()
        .zip(&scores[1..])
        .filter(|(&b, &s)| s > pos_score || (s == pos_score && catalog.bottom(b).id < *pos_id))
        .count()
}

/// Mean reciprocal rank of the held-out positive among `t_candidates`.
#[allow(clippy::too_many_arguments)]
pub fn mrr_retrieval<S: CandidateScorer + ?Sized>(
    scorer: &S,
    catalog: &Catalog,
    test_pairs: &PairSet,
    train_pairs: &PairSet,
    known_pairs: &PairSet,
    t_candidates: usize,
    seed: u64,
    split: QuerySplit,
) -> Result<RetrievalReport> {
    let queries = build_queries(catalog, test_pairs, train_pairs, known_pairs, t_candidates, seed, split)?;
    if queries.is_empty() {
        return Err(Error::RejectedInput(format!("no {split:?} queries in the test pairs")));
    }
    let reciprocal: Vec<f64> = queries
        .par_iter()
        .map(|q| {
            let scores = scorer.score_candidates(q.top, &q.candidates);
            1.0 / rank_of_positive(catalog, q, &scores) as f64
        })
        .collect();
    Ok(RetrievalReport {
        mrr: reciprocal.iter().sum::<f64>() / reciprocal.len() as f64,
        t_candidates,
        split,
        n_queries: queries.len(),
    })
}

/// Tops of the test pairs split by whether they occur in training.
pub fn observed_partition(test_pairs: &PairSet, train_pairs: &PairSet) -> (BTreeSet<usize>, BTreeSet<usize>) {
    let observed = train_pairs.tops();
    test_pairs.tops().into_iter().partition(|t| observed.contains(t))
}
