//! Items, positive top/bottom pairs, dataset splits and BPR triplet sampling.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::index;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Vector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Top,
    Bottom,
}

/// One fashion item with its precomputed feature vectors and metadata tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct Item {
    pub id: String,
    pub side: Side,
    pub visual: Vector,
    pub contextual: Vector,
    pub tokens: BTreeSet<String>,
}

impl Item {
    pub fn new(
        id: impl Into<String>,
        side: Side,
        visual: Vec<f64>,
        contextual: Vec<f64>,
        tokens: impl IntoIterator<Item = impl AsRef<str>>,
    ) -> Self {
        Item {
            id: id.into(),
            side,
            visual: visual.into(),
            contextual: contextual.into(),
            tokens: normalize_tokens(tokens),
        }
    }

    /// `[visual; contextual]`
    pub fn features(&self) -> Vector {
        Vector::concat(&self.visual, &self.contextual)
    }

    pub fn has_token(&self, token: &str) -> bool {
        self.tokens.contains(token)
    }
}

/// Lowercases, trims and deduplicates; empty tokens are dropped.
pub fn normalize_tokens(tokens: impl IntoIterator<Item = impl AsRef<str>>) -> BTreeSet<String> {
    tokens
        .into_iter()
        .map(|t| normalize_token(t.as_ref()))
        .filter(|t| !t.is_empty())
        .collect()
}

pub fn normalize_token(token: &str) -> String {
    token.trim().to_lowercase()
}

/// Wire format of one line of `items.jsonl`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ItemRecord {
    pub id: String,
    pub side: Side,
    pub visual: Vec<f64>,
    pub contextual: Vec<f64>,
    #[serde(default)]
    pub tokens: Vec<String>,
}

impl From<&Item> for ItemRecord {
    fn from(item: &Item) -> Self {
        ItemRecord {
            id: item.id.clone(),
            side: item.side,
            visual: item.visual.0.clone(),
            contextual: item.contextual.0.clone(),
            tokens: item.tokens.iter().cloned().collect(),
        }
    }
}

/// All tops and bottoms, in ingestion order.
#[derive(Debug, Clone, Default)]
pub struct Catalog {
    tops: Vec<Item>,
    bottoms: Vec<Item>,
    visual_dim: usize,
    contextual_dim: usize,
    top_index: HashMap<String, usize>,
    bottom_index: HashMap<String, usize>,
}

impl Catalog {
    /// Builds a catalog; dimensions are taken from the first item.
    pub fn from_items(items: impl IntoIterator<Item = Item>) -> Result<Self> {
        let mut catalog = Catalog::default();
        let mut seen = HashSet::new();
        for (n, item) in items.into_iter().enumerate() {
            if n == 0 {
                catalog.visual_dim = item.visual.len();
                catalog.contextual_dim = item.contextual.len();
            }
            catalog.check_item(&item)?;
            if !seen.insert(item.id.clone()) {
                return Err(Error::Schema(format!("duplicate item id {:?}", item.id)));
            }
            catalog.push(item);
        }
        Ok(catalog)
    }

    fn check_item(&self, item: &Item) -> Result<()> {
        if item.visual.len() != self.visual_dim {
            return Err(Error::Schema(format!(
                "item {:?}: visual vector has length {}, expected {}",
                item.id,
                item.visual.len(),
                self.visual_dim
            )));
        }
        if item.contextual.len() != self.contextual_dim {
            return Err(Error::Schema(format!(
                "item {:?}: contextual vector has length {}, expected {}",
                item.id,
                item.contextual.len(),
                self.contextual_dim
            )));
        }
        if !item.visual.is_finite() || !item.contextual.is_finite() {
            return Err(Error::Schema(format!("item {:?}: non-finite feature value", item.id)));
        }
        Ok(())
    }

    fn push(&mut self, item: Item) {
        match item.side {
            Side::Top => {
                self.top_index.insert(item.id.clone(), self.tops.len());
                self.tops.push(item);
            }
            Side::Bottom => {
                self.bottom_index.insert(item.id.clone(), self.bottoms.len());
                self.bottoms.push(item);
            }
        }
    }

    pub fn tops(&self) -> &[Item] {
        &self.tops
    }

    pub fn bottoms(&self) -> &[Item] {
        &self.bottoms
    }

    pub fn top(&self, i: usize) -> &Item {
        &self.tops[i]
    }

    pub fn bottom(&self, j: usize) -> &Item {
        &self.bottoms[j]
    }

    pub fn num_tops(&self) -> usize {
        self.tops.len()
    }

    pub fn num_bottoms(&self) -> usize {
        self.bottoms.len()
    }

    pub fn visual_dim(&self) -> usize {
        self.visual_dim
    }

    pub fn contextual_dim(&self) -> usize {
        self.contextual_dim
    }

    /// `visual_dim + contextual_dim`
    pub fn feature_dim(&self) -> usize {
        self.visual_dim + self.contextual_dim
    }

    pub fn is_empty(&self) -> bool {
        self.tops.is_empty() && self.bottoms.is_empty()
    }

    pub fn top_index(&self, id: &str) -> Option<usize> {
        self.top_index.get(id).copied()
    }

    pub fn bottom_index(&self, id: &str) -> Option<usize> {
        self.bottom_index.get(id).copied()
    }

    pub fn items(&self) -> impl Iterator<Item = &Item> {
        self.tops.iter().chain(&self.bottoms)
    }
}

/// Reads line-delimited JSON items. Blank lines are skipped.
pub fn load_catalog(path: impl AsRef<Path>) -> Result<Catalog> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut items = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ItemRecord =
            serde_json::from_str(&line).map_err(|e| Error::parse(path, n + 1, e.to_string()))?;
        items.push(Item::new(rec.id, rec.side, rec.visual, rec.contextual, rec.tokens));
    }
    Catalog::from_items(items)
}

pub fn write_catalog(catalog: &Catalog, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for item in catalog.items() {
        let line = serde_json::to_string(&ItemRecord::from(item))
            .map_err(|e| Error::Internal(e.to_string()))?;
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Set of positive (top, bottom) index pairs, kept in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PairSet {
    pairs: Vec<(usize, usize)>,
    members: HashSet<(usize, usize)>,
    num_tops: usize,
    num_bottoms: usize,
}

impl PairSet {
    pub fn new(pairs: Vec<(usize, usize)>, num_tops: usize, num_bottoms: usize) -> Result<Self> {
        let mut members = HashSet::with_capacity(pairs.len());
        for &(i, j) in &pairs {
            if i >= num_tops || j >= num_bottoms {
                return Err(Error::RejectedInput(format!(
                    "pair ({i}, {j}) out of range for {num_tops} tops and {num_bottoms} bottoms"
                )));
            }
            if !members.insert((i, j)) {
                return Err(Error::Schema(format!("duplicate pair ({i}, {j})")));
            }
        }
        Ok(PairSet {
            pairs,
            members,
            num_tops,
            num_bottoms,
        })
    }

    pub fn for_catalog(pairs: Vec<(usize, usize)>, catalog: &Catalog) -> Result<Self> {
        PairSet::new(pairs, catalog.num_tops(), catalog.num_bottoms())
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn contains(&self, top: usize, bottom: usize) -> bool {
        self.members.contains(&(top, bottom))
    }

    pub fn num_tops(&self) -> usize {
        self.num_tops
    }

    pub fn num_bottoms(&self) -> usize {
        self.num_bottoms
    }

    /// Pairs of both sets; `self` order first. Shared pairs appear once.
    pub fn union(&self, other: &PairSet) -> PairSet {
        let mut out = self.clone();
        for &p in &other.pairs {
            if out.members.insert(p) {
                out.pairs.push(p);
            }
        }
        out.num_tops = out.num_tops.max(other.num_tops);
        out.num_bottoms = out.num_bottoms.max(other.num_bottoms);
        out
    }

    /// Tops that appear in at least one pair.
    pub fn tops(&self) -> BTreeSet<usize> {
        self.pairs.iter().map(|&(i, _)| i).collect()
    }

    /// Positive bottoms of every top, indexed by top.
    pub fn positives_by_top(&self) -> Vec<BTreeSet<usize>> {
        let mut out = vec![BTreeSet::new(); self.num_tops];
        for &(i, j) in &self.pairs {
            out[i].insert(j);
        }
        out
    }
}

/// Reads `top_id,bottom_id` rows; ids must exist in the catalog.
pub fn load_pairs(path: impl AsRef<Path>, catalog: &Catalog) -> Result<PairSet> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    if headers.len() != 2 || &headers[0] != "top_id" || &headers[1] != "bottom_id" {
        return Err(Error::parse(path, 1, "expected header `top_id,bottom_id`"));
    }
    let mut pairs = Vec::new();
    for (n, row) in reader.records().enumerate() {
        let line = n + 2;
        let row = row.map_err(|e| Error::parse(path, line, e.to_string()))?;
        if row.len() != 2 {
            return Err(Error::parse(path, line, "expected two columns"));
        }
        let top = catalog
            .top_index(&row[0])
            .ok_or_else(|| Error::Schema(format!("line {line}: unknown top id {:?}", &row[0])))?;
        let bottom = catalog
            .bottom_index(&row[1])
            .ok_or_else(|| Error::Schema(format!("line {line}: unknown bottom id {:?}", &row[1])))?;
        pairs.push((top, bottom));
    }
    PairSet::for_catalog(pairs, catalog)
}

pub fn write_pairs(pairs: &PairSet, catalog: &Catalog, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut writer = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    writer
        .write_record(["top_id", "bottom_id"])
        .map_err(|e| csv_error(path, e))?;
    for &(i, j) in pairs.pairs() {
        writer
            .write_record([catalog.top(i).id.as_str(), catalog.bottom(j).id.as_str()])
            .map_err(|e| csv_error(path, e))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

fn csv_error(path: &Path, err: csv::Error) -> Error {
    let line = err.position().map_or(0, |p| p.line() as usize);
    match err.into_kind() {
        csv::ErrorKind::Io(e) => Error::io(path, e),
        other => Error::parse(path, line, format!("{other:?}")),
    }
}

/// The bottoms paired with top `i`.
pub fn positive_bottoms(pairs: &PairSet, i: usize) -> Result<BTreeSet<usize>> {
    if i >= pairs.num_tops {
        return Err(Error::RejectedInput(format!(
            "top index {i} out of range ({} tops)",
            pairs.num_tops
        )));
    }
    Ok(pairs
        .pairs
        .iter()
        .filter(|&&(t, _)| t == i)
        .map(|&(_, b)| b)
        .collect())
}

/// `(top, positive bottom, negative bottom)`: the positive should outscore the negative.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Triplet {
    pub top: usize,
    pub positive: usize,
    pub negative: usize,
}

impl Triplet {
    pub fn new(top: usize, positive: usize, negative: usize) -> Self {
        Triplet {
            top,
            positive,
            negative,
        }
    }

    /// Same top with the two bottoms exchanged.
    pub fn swapped(self) -> Self {
        Triplet::new(self.top, self.negative, self.positive)
    }
}

/// `m` triplets per positive pair, negatives drawn without replacement from
/// the bottoms not paired with the top in `pairs`.
pub fn sample_triplets(catalog: &Catalog, pairs: &PairSet, m: usize, seed: u64) -> Result<Vec<Triplet>> {
    sample_triplets_excluding(catalog, pairs, pairs, m, seed)
}

/// Like [`sample_triplets`], but negatives avoid every positive in `known`
/// (used for held-out pairs, where the training positives are also known).
pub fn sample_triplets_excluding(
    catalog: &Catalog,
    pairs: &PairSet,
    known: &PairSet,
    m: usize,
    seed: u64,
) -> Result<Vec<Triplet>> {
    if m == 0 {
        return Err(Error::RejectedInput("negatives per pair must be at least 1".into()));
    }
    let n_bottoms = catalog.num_bottoms();
    let mut positives = vec![BTreeSet::new(); catalog.num_tops()];
    for &(i, j) in known.pairs().iter().chain(pairs.pairs()) {
        positives[i].insert(j);
    }
    let mut negatives: HashMap<usize, Vec<usize>> = HashMap::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(pairs.len() * m);
    for &(i, j) in pairs.pairs() {
        let pool = negatives.entry(i).or_insert_with(|| {
            (0..n_bottoms).filter(|b| !positives[i].contains(b)).collect()
        });
        if pool.len() < m {
            return Err(Error::Sampling(format!(
                "top {:?} has {} candidate negatives but {m} were requested",
                catalog.top(i).id,
                pool.len()
            )));
        }
        for k in index::sample(&mut rng, pool.len(), m) {
            out.push(Triplet::new(i, j, pool[k]));
        }
    }
    Ok(out)
}

/// Fractions for train / validation / test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions(pub f64, pub f64, pub f64);

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions(0.8, 0.1, 0.1)
    }
}

/// Seeded disjoint partition into `(train, valid, test)`. Each part keeps the
/// input order; sizes are `round(fraction * n)` for train and validation.
pub fn split_pairs(pairs: &PairSet, fractions: SplitFractions, seed: u64) -> Result<(PairSet, PairSet, PairSet)> {
    let SplitFractions(a, b, c) = fractions;
    if [a, b, c].iter().any(|f| !(0.0..=1.0).contains(f)) || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(Error::RejectedInput(format!(
            "split fractions ({a}, {b}, {c}) must be in [0,1] and sum to 1"
        )));
    }
    let n = pairs.len();
    let n_train = ((a * n as f64).round() as usize).min(n);
    let n_valid = ((b * n as f64).round() as usize).min(n - n_train);

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut bucket = vec![2u8; n];
    for &p in &order[..n_train] {
        bucket[p] = 0;
    }
    for &p in &order[n_train..n_train + n_valid] {
        bucket[p] = 1;
    }
    let mut parts: [Vec<(usize, usize)>; 3] = Default::default();
    for (p, &pair) in pairs.pairs().iter().enumerate() {
        parts[bucket[p] as usize].push(pair);
    }
    let [train, valid, test] = parts;
    let mk = |v| PairSet::new(v, pairs.num_tops, pairs.num_bottoms);
    Ok((mk(train)?, mk(valid)?, mk(test)?))
}
