//! Synthetic catalogs with planted matching rules.
//!
//! Every item gets a latent style vector and one value per attribute. Its
//! visual and contextual features are noisy linear images of the style
//! vector concatenated with the one-hot attribute codes, so attributes are
//! recoverable from the features but only approximately.
//!
//! Positive pairs come from a two-component mixture. With probability
//! `rule_boost` the bottom is drawn among those that satisfy a planted
//! positive rule for the chosen top; otherwise it is drawn by style
//! affinity and rejected with probability `suppression` whenever a planted
//! negative rule fires on the pair.

use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::catalog::{write_catalog, write_pairs, Catalog, Item, PairSet, Side};
use crate::error::{Error, Result};
use crate::numerics::{dot, Matrix};
use crate::rules::{activates, parse_rules_str, Attribute, Lexicon, Polarity, RuleSet};

const ATTEMPTS_PER_PAIR: usize = 200;

/// Generator settings. The defaults were calibrated so the ranking-only
/// baseline lands around 0.62 test AUC: pairs outside the rule-driven half
/// are drawn without style preference, leaving the planted rules as the
/// main learnable signal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_tops: usize,
    pub n_bottoms: usize,
    pub n_pairs: usize,
    pub visual_dim: usize,
    pub contextual_dim: usize,
    pub style_dim: usize,
    /// Standard deviation of the additive feature noise.
    pub noise: f64,
    /// Inverse temperature of the style-affinity draw.
    pub style_weight: f64,
    /// Probability that a pair is drawn among positive-rule matches.
    pub rule_boost: f64,
    /// Probability that a style-drawn pair hitting a negative rule is rejected.
    pub suppression: f64,
    /// Planted rules in rules-file syntax.
    pub rules: Vec<String>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_tops: 500,
            n_bottoms: 500,
            n_pairs: 2000,
            visual_dim: 16,
            contextual_dim: 8,
            style_dim: 6,
            noise: 0.3,
            style_weight: 0.0,
            rule_boost: 0.5,
            suppression: 0.9,
            rules: default_rules(),
            seed: 0,
        }
    }
}

pub fn default_rules() -> Vec<String> {
    [
        "color: black + white",
        "color: white + blue",
        "material: silk + denim",
        "pattern: striped + solid",
        "color: no red + red",
        "pattern: no plaid + floral",
    ]
    .map(String::from)
    .to_vec()
}

/// Attribute vocabulary of the generator. Category values differ by side.
pub fn vocabulary(attribute: Attribute, side: Side) -> &'static [&'static str] {
    match (attribute, side) {
        (Attribute::Color, _) => &["black", "white", "red", "blue", "grey", "beige"],
        (Attribute::Material, _) => &["denim", "cotton", "leather", "silk"],
        (Attribute::Pattern, _) => &["solid", "striped", "plaid", "floral"],
        (Attribute::Category, Side::Top) => &["shirt", "tshirt", "sweater", "blouse"],
        (Attribute::Category, Side::Bottom) => &["jeans", "skirt", "shorts", "trousers"],
        (Attribute::Brand, _) => &["acme", "northwind", "globex"],
    }
}

const ATTRIBUTES: [Attribute; 4] = [Attribute::Color, Attribute::Material, Attribute::Pattern, Attribute::Category];

/// Lexicon covering every value the generator can emit.
pub fn synthetic_lexicon() -> Lexicon {
    let mut lex = Lexicon::new();
    for a in ATTRIBUTES {
        lex.insert(a, vocabulary(a, Side::Top));
        lex.insert(a, vocabulary(a, Side::Bottom));
    }
    lex
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub catalog: Catalog,
    pub pairs: PairSet,
    pub rules: RuleSet,
    pub lexicon: Lexicon,
}

impl SyntheticData {
    /// Writes `items.jsonl`, `pairs.csv`, `rules.txt` and `lexicon.toml`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_catalog(&self.catalog, dir.join("items.jsonl"))?;
        write_pairs(&self.pairs, &self.catalog, dir.join("pairs.csv"))?;
        let rules = dir.join("rules.txt");
        std::fs::write(&rules, self.rules.to_text()).map_err(|e| Error::io(&rules, e))?;
        let lex = dir.join("lexicon.toml");
        std::fs::write(&lex, self.lexicon.to_toml()).map_err(|e| Error::io(&lex, e))
    }
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect()
}

fn validate(cfg: &SynthConfig) -> Result<()> {
    let bad = |m: String| Err(Error::RejectedInput(m));
    if cfg.n_tops == 0 || cfg.n_bottoms == 0 || cfg.n_pairs == 0 {
        return bad("item and pair counts must be at least 1".into());
    }
    if cfg.visual_dim == 0 || cfg.contextual_dim == 0 || cfg.style_dim == 0 {
        return bad("feature dimensions must be at least 1".into());
    }
    if cfg.n_pairs > cfg.n_tops * cfg.n_bottoms {
        return bad(format!("{} pairs do not fit {} x {} items", cfg.n_pairs, cfg.n_tops, cfg.n_bottoms));
    }
    if !(cfg.noise >= 0.0 && cfg.noise.is_finite() && cfg.style_weight.is_finite()) {
        return bad("noise and style weight must be finite, noise non-negative".into());
    }
    for (name, p) in [("rule boost", cfg.rule_boost), ("suppression", cfg.suppression)] {
        if !(0.0..=1.0).contains(&p) {
            return bad(format!("{name} must lie in [0, 1]"));
        }
    }
    Ok(())
}

struct Draft {
    style: Vec<f64>,
    codes: Vec<f64>,
    tokens: Vec<&'static str>,
}

fn draft_items(rng: &mut ChaCha8Rng, n: usize, side: Side, style_dim: usize) -> Vec<Draft> {
    (0..n)
        .map(|_| {
            let style = gaussian(rng, style_dim, 1.0);
            let mut codes = Vec::new();
            let mut tokens = Vec::new();
            for a in ATTRIBUTES {
                let vocab = vocabulary(a, side);
                let pick = rng.random_range(0..vocab.len());
                codes.extend((0..vocab.len()).map(|v| if v == pick { 1.0 } else { 0.0 }));
                tokens.push(vocab[pick]);
            }
            Draft { style, codes, tokens }
        })
        .collect()
}

pub fn gen_synthetic(cfg: &SynthConfig) -> Result<SyntheticData> {
    validate(cfg)?;
    let rules = parse_rules_str(&cfg.rules.join("\n"), "<synthetic rules>")?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut drafts = draft_items(&mut rng, cfg.n_tops, Side::Top, cfg.style_dim);
    drafts.extend(draft_items(&mut rng, cfg.n_bottoms, Side::Bottom, cfg.style_dim));
    let latent = cfg.style_dim + drafts[0].codes.len();
    let project = |rng: &mut ChaCha8Rng, rows: usize| {
        Matrix::from_vec(rows, latent, gaussian(rng, rows * latent, 1.0 / (latent as f64).sqrt()))
    };
    let pv = project(&mut rng, cfg.visual_dim)?;
    let pc = project(&mut rng, cfg.contextual_dim)?;

    let mut items = Vec::with_capacity(drafts.len());
    for (n, d) in drafts.iter().enumerate() {
        let (side, id) = if n < cfg.n_tops {
            (Side::Top, format!("t{n:05}"))
        } else {
            (Side::Bottom, format!("b{:05}", n - cfg.n_tops))
        };
        let u: Vec<f64> = d.style.iter().chain(&d.codes).copied().collect();
        let mut features = |m: &Matrix| -> Result<Vec<f64>> {
            let clean = crate::numerics::matvec(m, &u)?;
            let noise = gaussian(&mut rng, m.rows(), cfg.noise);
            Ok(clean.iter().zip(noise).map(|(c, e)| c + e).collect())
        };
        let visual = features(&pv)?;
        let contextual = features(&pc)?;
        items.push(Item::new(id, side, visual, contextual, d.tokens.iter().copied()));
    }
    let catalog = Catalog::from_items(items)?;
    let pairs = draw_pairs(cfg, &catalog, &drafts, &rules, &mut rng)?;
    Ok(SyntheticData {
        catalog,
        pairs,
        rules,
        lexicon: synthetic_lexicon(),
    })
}

fn draw_pairs(
    cfg: &SynthConfig,
    catalog: &Catalog,
    drafts: &[Draft],
    rules: &RuleSet,
    rng: &mut ChaCha8Rng,
) -> Result<PairSet> {
    let (n_t, n_b) = (catalog.num_tops(), catalog.num_bottoms());
    let fires = |polarity: Polarity, i: usize, j: usize| {
        rules
            .rules()
            .iter()
            .any(|r| r.polarity == polarity && activates(r, catalog.top(i), catalog.bottom(j)))
    };
    let rule_matches: Vec<Vec<usize>> = (0..n_t)
        .map(|i| (0..n_b).filter(|&j| fires(Polarity::Positive, i, j)).collect())
        .collect();
    let boostable: Vec<usize> = (0..n_t).filter(|&i| !rule_matches[i].is_empty()).collect();
    if cfg.rule_boost > 0.0 && boostable.is_empty() {
        return Err(Error::Generation(
            "no (top, bottom) pair satisfies a planted positive rule".into(),
        ));
    }
    let scale = cfg.style_weight / (cfg.style_dim as f64).sqrt();
    let affinity = |i: usize, j: usize| scale * dot(&drafts[i].style, &drafts[n_t + j].style);

    let mut taken = std::collections::HashSet::new();
    let mut pairs = Vec::with_capacity(cfg.n_pairs);
    for _ in 0..cfg.n_pairs {
        let mut placed = false;
        for _ in 0..ATTEMPTS_PER_PAIR {
            let boosted = rng.random_bool(cfg.rule_boost);
            let (i, pool): (usize, Vec<usize>) = if boosted {
                let i = boostable[rng.random_range(0..boostable.len())];
                (i, rule_matches[i].clone())
            } else {
                (rng.random_range(0..n_t), (0..n_b).collect())
            };
            let pool: Vec<usize> = pool.into_iter().filter(|&j| !taken.contains(&(i, j))).collect();
            if pool.is_empty() {
                continue;
            }
            let logits: Vec<f64> = pool.iter().map(|&j| affinity(i, j)).collect();
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let pick = WeightedIndex::new(&weights).map_err(|e| Error::Generation(e.to_string()))?;
            let j = pool[pick.sample(rng)];
            if !boosted && fires(Polarity::Negative, i, j) && rng.random_bool(cfg.suppression) {
                continue;
            }
            taken.insert((i, j));
            pairs.push((i, j));
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::Generation(format!(
                "could not place pair {} of {} after {ATTEMPTS_PER_PAIR} attempts",
                pairs.len() + 1,
                cfg.n_pairs
            )));
        }
    }
    PairSet::for_catalog(pairs, catalog)
}

/// Uniformly random pairs over the catalog, for checks that need
/// compatibility-free data.
pub fn random_pairs(catalog: &Catalog, n: usize, seed: u64) -> Result<PairSet> {
    let total = catalog.num_tops() * catalog.num_bottoms();
    if n > total {
        return Err(Error::RejectedInput(format!("{n} pairs do not fit {total} slots")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nb = catalog.num_bottoms();
    let pairs = index::sample(&mut rng, total, n).into_iter().map(|k| (k / nb, k % nb)).collect();
    PairSet::for_catalog(pairs, catalog)
}
