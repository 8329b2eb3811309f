//! Matching rules over attribute tokens: parsing, activation, the
//! per-triplet constraint indicators and co-occurrence mining of candidates.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::catalog::{normalize_token, Catalog, Item, PairSet, Triplet};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Attribute {
    Color,
    Material,
    Pattern,
    Category,
    Brand,
}

impl Attribute {
    pub const ALL: [Attribute; 5] = [
        Attribute::Color,
        Attribute::Material,
        Attribute::Pattern,
        Attribute::Category,
        Attribute::Brand,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Attribute::Color => "color",
            Attribute::Material => "material",
            Attribute::Pattern => "pattern",
            Attribute::Category => "category",
            Attribute::Brand => "brand",
        }
    }
}

impl fmt::Display for Attribute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Attribute {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let s = s.trim().to_lowercase();
        Attribute::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| format!("unknown attribute {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive,
    Negative,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rule {
    pub id: usize,
    pub attribute: Attribute,
    pub top_value: String,
    pub bottom_value: String,
    pub polarity: Polarity,
}

impl Rule {
    pub fn new(attribute: Attribute, top_value: &str, bottom_value: &str, polarity: Polarity) -> Self {
        Rule {
            id: 0,
            attribute,
            top_value: normalize_token(top_value),
            bottom_value: normalize_token(bottom_value),
            polarity,
        }
    }

    pub fn positive(attribute: Attribute, top_value: &str, bottom_value: &str) -> Self {
        Rule::new(attribute, top_value, bottom_value, Polarity::Positive)
    }

    pub fn negative(attribute: Attribute, top_value: &str, bottom_value: &str) -> Self {
        Rule::new(attribute, top_value, bottom_value, Polarity::Negative)
    }
}

/// `attribute: [no ]top + bottom`
impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let no = match self.polarity {
            Polarity::Positive => "",
            Polarity::Negative => "no ",
        };
        write!(f, "{}: {no}{} + {}", self.attribute, self.top_value, self.bottom_value)
    }
}

/// Ordered rules; a rule's id is its position.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleSet {
    rules: Vec<Rule>,
}

impl RuleSet {
    /// Reassigns ids to `0..len`.
    pub fn new(rules: Vec<Rule>) -> Self {
        let rules = rules
            .into_iter()
            .enumerate()
            .map(|(id, r)| Rule { id, ..r })
            .collect();
        RuleSet { rules }
    }

    pub fn rules(&self) -> &[Rule] {
        &self.rules
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    pub fn get(&self, id: usize) -> Option<&Rule> {
        self.rules.get(id)
    }

    pub fn to_text(&self) -> String {
        self.rules.iter().map(|r| format!("{r}\n")).collect()
    }
}

/// Whether the top carries the rule's top value and the bottom its bottom
/// value. Polarity plays no part.
pub fn activates(rule: &Rule, top: &Item, bottom: &Item) -> bool {
    top.has_token(&rule.top_value) && bottom.has_token(&rule.bottom_value)
}

/// Activation and reward indicators of one rule on one triplet.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RuleConstraint {
    pub rule_id: usize,
    /// Rule fires on (top, positive bottom).
    pub active_ij: bool,
    /// Rule fires on (top, negative bottom).
    pub active_ik: bool,
    /// Reward for the (top, positive bottom) side.
    pub f_ij: bool,
    /// Reward for the (top, negative bottom) side.
    pub f_ik: bool,
}

impl RuleConstraint {
    pub fn from_activation(rule_id: usize, polarity: Polarity, active_ij: bool, active_ik: bool) -> Self {
        let (f_ij, f_ik) = reward_indicators(polarity, active_ij, active_ik);
        RuleConstraint {
            rule_id,
            active_ij,
            active_ik,
            f_ij,
            f_ik,
        }
    }

    pub fn rewards(&self) -> (f64, f64) {
        (f64::from(u8::from(self.f_ij)), f64::from(u8::from(self.f_ik)))
    }
}

/// A side is rewarded when a positive rule fires on it alone, or a negative
/// rule fires on the other side alone.
pub fn reward_indicators(polarity: Polarity, active_ij: bool, active_ik: bool) -> (bool, bool) {
    let discriminates = active_ij != active_ik;
    match polarity {
        Polarity::Positive => (discriminates && active_ij, discriminates && active_ik),
        Polarity::Negative => (discriminates && active_ik, discriminates && active_ij),
    }
}

/// Constraints of every rule that fires on either pair of the triplet, in
/// rule order. This is the activated set the attention normalizes over.
pub fn constraint_vector(rules: &RuleSet, catalog: &Catalog, t: Triplet) -> Vec<RuleConstraint> {
    let top = catalog.top(t.top);
    let pos = catalog.bottom(t.positive);
    let neg = catalog.bottom(t.negative);
    rules
        .rules()
        .iter()
        .filter_map(|r| {
            let a_ij = activates(r, top, pos);
            let a_ik = activates(r, top, neg);
            (a_ij || a_ik).then(|| RuleConstraint::from_activation(r.id, r.polarity, a_ij, a_ik))
        })
        .collect()
}

/// Rule ids activated on a triplet.
pub fn activated_rules(rules: &RuleSet, catalog: &Catalog, t: Triplet) -> Vec<usize> {
    constraint_vector(rules, catalog, t).iter().map(|c| c.rule_id).collect()
}

pub fn parse_rules(path: impl AsRef<Path>) -> Result<RuleSet> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_rules_str(&text, path)
}

/// Parses `attribute: [no ]value1 + value2` lines; `#` starts a comment.
pub fn parse_rules_str(text: &str, source: impl AsRef<Path>) -> Result<RuleSet> {
    let mut rules = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| Error::parse(source.as_ref(), n + 1, msg);
        let (attr, body) = line
            .split_once(':')
            .ok_or_else(|| err("expected `attribute: value1 + value2`".into()))?;
        let attribute = attr.parse::<Attribute>().map_err(err)?;
        let body = body.trim();
        let (polarity, body) = match body.strip_prefix("no ") {
            Some(rest) => (Polarity::Negative, rest),
            None => (Polarity::Positive, body),
        };
        let (top, bottom) = body
            .split_once('+')
            .ok_or_else(|| err("expected `value1 + value2`".into()))?;
        let (top, bottom) = (normalize_token(top), normalize_token(bottom));
        if top.is_empty() || bottom.is_empty() || bottom.contains('+') {
            return Err(err(format!("malformed value pair {body:?}")));
        }
        rules.push(Rule::new(attribute, &top, &bottom, polarity));
    }
    Ok(RuleSet::new(rules))
}

/// Attribute → admissible value tokens.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Lexicon(pub BTreeMap<Attribute, BTreeSet<String>>);

impl Lexicon {
    pub fn new() -> Self {
        Lexicon::default()
    }

    pub fn insert(&mut self, attribute: Attribute, values: impl IntoIterator<Item = impl AsRef<str>>) {
        let entry = self.0.entry(attribute).or_default();
        entry.extend(values.into_iter().map(|v| normalize_token(v.as_ref())).filter(|v| !v.is_empty()));
    }

    pub fn is_empty(&self) -> bool {
        self.0.values().all(BTreeSet::is_empty)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let raw: BTreeMap<String, Vec<String>> =
            toml::from_str(&text).map_err(|e| Error::parse(path, 0, e.to_string()))?;
        let mut lex = Lexicon::new();
        for (attr, values) in raw {
            let attribute = attr.parse::<Attribute>().map_err(|m| Error::parse(path, 0, m))?;
            lex.insert(attribute, values);
        }
        Ok(lex)
    }

    pub fn to_toml(&self) -> String {
        let raw: BTreeMap<&str, Vec<&String>> = self
            .0
            .iter()
            .map(|(a, v)| (a.as_str(), v.iter().collect()))
            .collect();
        toml::to_string(&raw).unwrap_or_default()
    }
}

/// A mined rule with the co-occurrence count that selected it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RuleCandidate {
    pub rule: Rule,
    pub count: usize,
}

/// Co-occurrence counts of (top value, bottom value) for one attribute over
/// the given pairs. Every combination of values observed in the catalog is
/// present, including zero counts.
pub fn cooccurrence(
    catalog: &Catalog,
    pairs: &PairSet,
    values: &BTreeSet<String>,
) -> BTreeMap<(String, String), usize> {
    let observed = |items: &[Item]| -> BTreeSet<String> {
        items
            .iter()
            .flat_map(|it| it.tokens.iter())
            .filter(|t| values.contains(*t))
            .cloned()
            .collect()
    };
    let top_values = observed(catalog.tops());
    let bottom_values = observed(catalog.bottoms());
    let mut counts: BTreeMap<(String, String), usize> = top_values
        .iter()
        .flat_map(|t| bottom_values.iter().map(move |b| ((t.clone(), b.clone()), 0)))
        .collect();
    for &(i, j) in pairs.pairs() {
        let top = catalog.top(i);
        let bottom = catalog.bottom(j);
        for tv in top.tokens.iter().filter(|t| values.contains(*t)) {
            for bv in bottom.tokens.iter().filter(|t| values.contains(*t)) {
                *counts.entry((tv.clone(), bv.clone())).or_insert(0) += 1;
            }
        }
    }
    counts
}

/// Per attribute: the `top_n` most frequent value pairs become positive
/// candidates and the `bottom_n` least frequent (over values observed in
/// the catalog, zero counts included) become negative candidates. Ties
/// break on `(top_value, bottom_value)`. A pair never appears as both.
pub fn mine_rules(
    catalog: &Catalog,
    train_pairs: &PairSet,
    lexicon: &Lexicon,
    top_n: usize,
    bottom_n: usize,
) -> Result<Vec<RuleCandidate>> {
    if lexicon.is_empty() {
        return Err(Error::RejectedInput("attribute lexicon is empty".into()));
    }
    let mut out = Vec::new();
    for (&attribute, values) in &lexicon.0 {
        let counts = cooccurrence(catalog, train_pairs, values);
        let mut by_count: Vec<(&(String, String), &usize)> = counts.iter().collect();

        by_count.sort_by(|a, b| b.1.cmp(a.1).then_with(|| a.0.cmp(b.0)));
        let positives: Vec<_> = by_count
            .iter()
            .filter(|(_, &c)| c > 0)
            .take(top_n)
            .map(|(k, &c)| ((*k).clone(), c))
            .collect();

        by_count.sort_by(|a, b| a.1.cmp(b.1).then_with(|| a.0.cmp(b.0)));
        let chosen: BTreeSet<_> = positives.iter().map(|(k, _)| k.clone()).collect();
        let negatives: Vec<_> = by_count
            .iter()
            .filter(|(k, _)| !chosen.contains(*k))
            .take(bottom_n)
            .map(|(k, &c)| ((*k).clone(), c))
            .collect();

        for ((t, b), count) in positives {
            out.push(RuleCandidate {
                rule: Rule::positive(attribute, &t, &b),
                count,
            });
        }
        for ((t, b), count) in negatives {
            out.push(RuleCandidate {
                rule: Rule::negative(attribute, &t, &b),
                count,
            });
        }
    }
    for (id, c) in out.iter_mut().enumerate() {
        c.rule.id = id;
    }
    Ok(out)
}

/// Rules-file text with counts as trailing comments.
pub fn format_candidates(candidates: &[RuleCandidate]) -> String {
    let mut s = String::from("# mined rule candidates; curate before use\n");
    for c in candidates {
        s += &format!("{}  # count={}\n", c.rule, c.count);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::Side;

    fn item(id: &str, side: Side, tokens: &[&str]) -> Item {
        Item::new(id, side, vec![0.0], vec![0.0], tokens.iter().copied())
    }

    #[test]
    fn activation_examples() {
        let r = Rule::positive(Attribute::Color, "black", "black");
        assert!(activates(&r, &item("t", Side::Top, &["black", "tee"]), &item("b", Side::Bottom, &["black", "jeans"])));

        let r = Rule::negative(Attribute::Material, "silk", "knit");
        assert!(!activates(&r, &item("t", Side::Top, &["silk"]), &item("b", Side::Bottom, &["cotton"])));

        let r = Rule::positive(Attribute::Category, "coat", "dress");
        assert!(activates(&r, &item("t", Side::Top, &["coat"]), &item("b", Side::Bottom, &["dress", "floral"])));
    }

    #[test]
    fn reward_cases() {
        assert_eq!(reward_indicators(Polarity::Positive, true, false), (true, false));
        assert_eq!(reward_indicators(Polarity::Negative, true, false), (false, true));
        assert_eq!(reward_indicators(Polarity::Positive, true, true), (false, false));
        assert_eq!(reward_indicators(Polarity::Negative, true, true), (false, false));
    }

    #[test]
    fn constraint_vector_lists_activated_rules_only() {
        let catalog = Catalog::from_items([
            item("t0", Side::Top, &["black", "silk"]),
            item("b0", Side::Bottom, &["black"]),
            item("b1", Side::Bottom, &["knit"]),
        ])
        .unwrap();
        let rules = RuleSet::new(vec![
            Rule::positive(Attribute::Color, "black", "black"),
            Rule::positive(Attribute::Color, "white", "black"),
            Rule::negative(Attribute::Material, "silk", "knit"),
        ]);
        let cv = constraint_vector(&rules, &catalog, Triplet::new(0, 0, 1));
        assert_eq!(cv.len(), 2);
        assert_eq!((cv[0].rule_id, cv[0].f_ij, cv[0].f_ik), (0, true, false));
        assert_eq!((cv[1].rule_id, cv[1].f_ij, cv[1].f_ik), (2, true, false));
        assert_eq!(activated_rules(&rules, &catalog, Triplet::new(0, 0, 0)), vec![0]);
    }

    #[test]
    fn parse_examples() {
        let rs = parse_rules_str(
            "# curated\nmaterial: no silk + knit\ncolor: black + black   # strong\n\nCategory: sweatshirt + Activewear Pants\n",
            "rules.txt",
        )
        .unwrap();
        assert_eq!(rs.len(), 3);
        assert_eq!(rs.rules()[0], Rule { id: 0, ..Rule::negative(Attribute::Material, "silk", "knit") });
        assert_eq!(rs.rules()[1], Rule { id: 1, ..Rule::positive(Attribute::Color, "black", "black") });
        assert_eq!(rs.rules()[2].bottom_value, "activewear pants");
        assert_eq!(parse_rules_str(&rs.to_text(), "x").unwrap(), rs);

        assert!(parse_rules_str("", "empty").unwrap().is_empty());
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let err = parse_rules_str("color: black + black\ncolour: red + red\n", "r.txt").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err:?}");
        let err = parse_rules_str("\ncolor: black black\n", "r.txt").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
        let err = parse_rules_str("color black + black", "r.txt").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
        assert!(parse_rules_str("color: + black", "r.txt").is_err());
    }

    fn mining_corpus() -> (Catalog, PairSet) {
        // tops: t0 black, t1 black, t2 white, t3 red; bottoms: b0 black, b1 white, b2 blue
        let catalog = Catalog::from_items([
            item("t0", Side::Top, &["black", "tee"]),
            item("t1", Side::Top, &["black"]),
            item("t2", Side::Top, &["white"]),
            item("t3", Side::Top, &["red"]),
            item("b0", Side::Bottom, &["black"]),
            item("b1", Side::Bottom, &["white", "jeans"]),
            item("b2", Side::Bottom, &["blue"]),
        ])
        .unwrap();
        let pairs = PairSet::for_catalog(vec![(0, 0), (1, 0), (2, 0), (2, 1), (3, 2), (0, 2)], &catalog).unwrap();
        (catalog, pairs)
    }

    #[test]
    fn mining_matches_brute_force_count() {
        let (catalog, pairs) = mining_corpus();
        let mut lex = Lexicon::new();
        lex.insert(Attribute::Color, ["black", "white", "red", "blue", "green"]);

        // Brute force: enumerate every (top value, bottom value) over observed values
        // and count the training pairs carrying both.
        let top_vals = ["black", "red", "white"];
        let bottom_vals = ["black", "blue", "white"];
        let mut expected: Vec<((String, String), usize)> = Vec::new();
        for tv in top_vals {
            for bv in bottom_vals {
                let c = pairs
                    .pairs()
                    .iter()
                    .filter(|&&(i, j)| catalog.top(i).has_token(tv) && catalog.bottom(j).has_token(bv))
                    .count();
                expected.push(((tv.into(), bv.into()), c));
            }
        }
        let counts = cooccurrence(&catalog, &pairs, &lex.0[&Attribute::Color]);
        assert_eq!(counts.into_iter().collect::<Vec<_>>(), expected);

        let mined = mine_rules(&catalog, &pairs, &lex, 2, 3).unwrap();
        let shown: Vec<String> = mined.iter().map(|c| format!("{} #{}", c.rule, c.count)).collect();
        assert_eq!(
            shown,
            vec![
                "color: black + black #2",
                "color: black + blue #1",
                "color: no black + white #0",
                "color: no red + black #0",
                "color: no red + white #0",
            ]
        );
        assert!(mined.iter().enumerate().all(|(i, c)| c.rule.id == i));
    }

    #[test]
    fn maximal_cooccurrence_is_first_positive() {
        let mut items = Vec::new();
        for i in 0..5 {
            items.push(item(&format!("t{i}"), Side::Top, &["black"]));
            items.push(item(&format!("b{i}"), Side::Bottom, &["black"]));
        }
        items.push(item("t9", Side::Top, &["white"]));
        items.push(item("b9", Side::Bottom, &["red"]));
        let catalog = Catalog::from_items(items).unwrap();
        let pairs = PairSet::for_catalog((0..5).map(|i| (i, i)).collect(), &catalog).unwrap();
        let mut lex = Lexicon::new();
        lex.insert(Attribute::Color, ["black", "white", "red"]);
        let mined = mine_rules(&catalog, &pairs, &lex, 1, 10).unwrap();
        assert_eq!(mined[0].rule, Rule::positive(Attribute::Color, "black", "black"));
        assert_eq!(mined[0].count, 5);
        assert!(mined
            .iter()
            .any(|c| c.rule == Rule { id: c.rule.id, ..Rule::negative(Attribute::Color, "white", "red") }));
        assert!(mine_rules(&catalog, &pairs, &Lexicon::new(), 1, 1).is_err());
    }

    #[test]
    fn lexicon_toml_roundtrip() {
        let mut lex = Lexicon::new();
        lex.insert(Attribute::Color, ["Black", "white"]);
        lex.insert(Attribute::Category, ["activewear pants"]);
        let f = tempfile::NamedTempFile::new().unwrap();
        std::fs::write(f.path(), lex.to_toml()).unwrap();
        assert_eq!(Lexicon::load(f.path()).unwrap(), lex);
    }

    proptest::proptest! {
        #[test]
        fn constraint_properties(
            top in proptest::collection::btree_set("[a-c]", 0..3),
            pos in proptest::collection::btree_set("[a-c]", 0..3),
            neg in proptest::collection::btree_set("[a-c]", 0..3),
            extra in "[a-c]",
            negative in proptest::bool::ANY,
        ) {
            let polarity = if negative { Polarity::Negative } else { Polarity::Positive };
            let rules = RuleSet::new(
                ["a", "b", "c"].iter().flat_map(|t| ["a", "b", "c"].map(|b| Rule::new(Attribute::Color, t, b, polarity))).collect(),
            );
            let mk = |top: &BTreeSet<String>, pos: &BTreeSet<String>, neg: &BTreeSet<String>| {
                Catalog::from_items([
                    Item::new("t", Side::Top, vec![0.0], vec![0.0], top.iter()),
                    Item::new("j", Side::Bottom, vec![0.0], vec![0.0], pos.iter()),
                    Item::new("k", Side::Bottom, vec![0.0], vec![0.0], neg.iter()),
                ]).unwrap()
            };
            let catalog = mk(&top, &pos, &neg);
            let t = Triplet::new(0, 0, 1);
            let cv = constraint_vector(&rules, &catalog, t);
            let swapped = constraint_vector(&rules, &catalog, t.swapped());
            proptest::prop_assert_eq!(cv.len(), swapped.len());
            for (a, b) in cv.iter().zip(&swapped) {
                proptest::prop_assert!(!(a.f_ij && a.f_ik));
                proptest::prop_assert_eq!((a.f_ij, a.f_ik), (b.f_ik, b.f_ij));
            }
            // adding a token never deactivates a rule
            let mut bigger = top.clone();
            bigger.insert(extra);
            let grown = mk(&bigger, &pos, &neg);
            for r in rules.rules() {
                if activates(r, catalog.top(0), catalog.bottom(0)) {
                    proptest::prop_assert!(activates(r, grown.top(0), grown.bottom(0)));
                }
            }
        }
    }
}
