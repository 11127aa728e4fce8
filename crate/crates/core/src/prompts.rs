//! Super-class partitions, LLM query text, feature banks and the indexed
//! positive/negative prompt bank.
//!
//! Within a category `c` of a super-class of size `s`, prompts occupy flat
//! indices `1..=s*N`: positives take `1..=N`, and the negatives borrowing
//! the features of the `r`-th sibling (siblings listed in partition order,
//! skipping `c`) take `r*N + 1..=r*N + N`.

use std::collections::{HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SuperClassPartition {
    groups: Vec<(String, Vec<String>)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PartitionViolation {
    Missing(String),
    Duplicate { category: String, occurrences: usize },
    EmptyGroup(String),
    Unexpected(String),
}

impl fmt::Display for PartitionViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PartitionViolation::Missing(c) => write!(f, "category {c:?} is not in any super-class"),
            PartitionViolation::Duplicate { category, occurrences } => {
                write!(f, "category {category:?} appears {occurrences} times")
            }
            PartitionViolation::EmptyGroup(g) => write!(f, "super-class {g:?} is empty"),
            PartitionViolation::Unexpected(c) => write!(f, "category {c:?} is not a known category"),
        }
    }
}

impl SuperClassPartition {
    pub fn new(groups: Vec<(String, Vec<String>)>) -> Self {
        Self { groups }
    }

    /// Parses the super-class file: a JSON object mapping each super-class
    /// name to an array of category names. Key order is preserved.
    pub fn from_json(text: &str) -> Result<Self> {
        let map: serde_json::Map<String, Value> = serde_json::from_str(text)?;
        let groups = map
            .into_iter()
            .map(|(name, members)| {
                let members: Vec<String> = serde_json::from_value(members)?;
                Ok((name, members))
            })
            .collect::<Result<_>>()?;
        Ok(Self { groups })
    }

    pub fn to_json(&self) -> String {
        let map: serde_json::Map<String, Value> = self
            .groups
            .iter()
            .map(|(g, members)| (g.clone(), Value::from(members.clone())))
            .collect();
        serde_json::to_string_pretty(&Value::Object(map)).expect("partition serializes")
    }

    /// `categories` split into `num_groups` contiguous, nearly equal groups
    /// named `group0`, `group1`, ...
    pub fn contiguous(categories: &[String], num_groups: usize) -> Result<Self> {
        if num_groups == 0 || num_groups > categories.len() {
            return Err(Error::Invalid(format!(
                "cannot split {} categories into {num_groups} super-classes",
                categories.len()
            )));
        }
        let base = categories.len() / num_groups;
        let extra = categories.len() % num_groups;
        let mut groups = Vec::with_capacity(num_groups);
        let mut start = 0;
        for g in 0..num_groups {
            let size = base + usize::from(g < extra);
            groups.push((format!("group{g}"), categories[start..start + size].to_vec()));
            start += size;
        }
        Ok(Self { groups })
    }

    pub fn groups(&self) -> &[(String, Vec<String>)] {
        &self.groups
    }

    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    /// Categories in order of first appearance.
    pub fn categories(&self) -> Vec<String> {
        let mut seen = HashSet::new();
        self.groups
            .iter()
            .flat_map(|(_, members)| members.iter())
            .filter(|c| seen.insert(c.as_str()))
            .cloned()
            .collect()
    }

    fn group_of(&self, category: &str) -> Option<&[String]> {
        self.groups
            .iter()
            .find(|(_, members)| members.iter().any(|m| m == category))
            .map(|(_, members)| members.as_slice())
    }
}

/// Checks that the groups partition `categories` exactly, collecting every
/// violation rather than stopping at the first.
pub fn validate_partition(
    partition: &SuperClassPartition,
    categories: &[String],
) -> std::result::Result<(), Vec<PartitionViolation>> {
    let mut violations = Vec::new();
    let mut counts: HashMap<&str, usize> = HashMap::new();
    let mut order: Vec<&str> = Vec::new();
    for (group, members) in &partition.groups {
        if members.is_empty() {
            violations.push(PartitionViolation::EmptyGroup(group.clone()));
        }
        for m in members {
            let n = counts.entry(m.as_str()).or_insert(0);
            if *n == 0 {
                order.push(m);
            }
            *n += 1;
        }
    }
    let known: HashSet<&str> = categories.iter().map(String::as_str).collect();
    for c in &order {
        let n = counts[c];
        if n > 1 {
            violations.push(PartitionViolation::Duplicate {
                category: c.to_string(),
                occurrences: n,
            });
        }
        if !known.contains(c) {
            violations.push(PartitionViolation::Unexpected(c.to_string()));
        }
    }
    for c in categories {
        if !counts.contains_key(c.as_str()) {
            violations.push(PartitionViolation::Missing(c.clone()));
        }
    }
    if violations.is_empty() {
        Ok(())
    } else {
        Err(violations)
    }
}

/// The discriminative-feature query for `category`, naming its super-class
/// siblings. Singleton super-classes get the plain single-category query.
pub fn emit_query(category: &str, partition: &SuperClassPartition) -> Result<String> {
    let group = partition
        .group_of(category)
        .ok_or_else(|| Error::UnknownCategory(category.to_string()))?;
    let siblings: Vec<&str> = group
        .iter()
        .map(String::as_str)
        .filter(|m| *m != category)
        .collect();
    if siblings.is_empty() {
        Ok(format!("What are useful features for distinguishing a {category} in a photo?"))
    } else {
        Ok(format!(
            "What are useful features for distinguishing a {category} from {} in a photo?",
            siblings.join(", ")
        ))
    }
}

/// One `{category}\t{query}` line per category, in partition order.
pub fn emit_queries(partition: &SuperClassPartition) -> Result<String> {
    let mut out = String::new();
    for c in partition.categories() {
        out.push_str(&c);
        out.push('\t');
        out.push_str(&emit_query(&c, partition)?);
        out.push('\n');
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureBank {
    n: usize,
    features: HashMap<String, Vec<String>>,
}

impl FeatureBank {
    pub fn new(expected_n: usize, features: impl IntoIterator<Item = (String, Vec<String>)>) -> Result<Self> {
        let mut map = HashMap::new();
        for (category, list) in features {
            if list.len() != expected_n {
                return Err(Error::WrongCount {
                    category,
                    expected: expected_n,
                    found: list.len(),
                });
            }
            let mut seen = HashSet::new();
            for f in &list {
                if f.trim().is_empty() {
                    return Err(Error::EmptyFeature(category));
                }
                if !seen.insert(f.as_str()) {
                    return Err(Error::DuplicateFeature {
                        category,
                        feature: f.clone(),
                    });
                }
            }
            map.insert(category, list);
        }
        Ok(Self {
            n: expected_n,
            features: map,
        })
    }

    /// Placeholder features `"feature {k} of {category}"` for every category.
    pub fn synthetic(categories: &[String], n: usize) -> Self {
        let features = categories
            .iter()
            .map(|c| (c.clone(), (1..=n).map(|k| format!("feature {k} of {c}")).collect()))
            .collect();
        Self { n, features }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, category: &str) -> Option<&[String]> {
        self.features.get(category).map(Vec::as_slice)
    }

    /// Serializes in the given category order.
    pub fn to_json(&self, order: &[String]) -> String {
        let map: serde_json::Map<String, Value> = order
            .iter()
            .filter_map(|c| self.features.get(c).map(|f| (c.clone(), Value::from(f.clone()))))
            .collect();
        serde_json::to_string_pretty(&Value::Object(map)).expect("features serialize")
    }
}

/// Parses and validates a feature file (category -> array of N strings).
pub fn ingest_features(document: &str, expected_n: usize) -> Result<FeatureBank> {
    let map: serde_json::Map<String, Value> = serde_json::from_str(document)?;
    let entries = map
        .into_iter()
        .map(|(c, v)| Ok((c, serde_json::from_value::<Vec<String>>(v)?)))
        .collect::<Result<Vec<_>>>()?;
    FeatureBank::new(expected_n, entries)
}

/// Category ordering, super-class membership and flat prompt indexing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptLayout {
    n: usize,
    categories: Vec<String>,
    lookup: HashMap<String, usize>,
    siblings: Vec<Vec<usize>>,
}

impl PromptLayout {
    pub fn new(partition: &SuperClassPartition, n_features: usize) -> Result<Self> {
        if n_features == 0 {
            return Err(Error::Invalid("number of features per category must be positive".into()));
        }
        let categories = partition.categories();
        validate_partition(partition, &categories).map_err(Error::InvalidPartition)?;
        let lookup: HashMap<String, usize> = categories
            .iter()
            .enumerate()
            .map(|(i, c)| (c.clone(), i))
            .collect();
        let mut siblings = vec![Vec::new(); categories.len()];
        for (_, members) in partition.groups() {
            let ids: Vec<usize> = members.iter().map(|m| lookup[m]).collect();
            for &c in &ids {
                siblings[c] = ids.iter().copied().filter(|&d| d != c).collect();
            }
        }
        Ok(Self {
            n: n_features,
            categories,
            lookup,
            siblings,
        })
    }

    pub fn n_features(&self) -> usize {
        self.n
    }

    pub fn num_categories(&self) -> usize {
        self.categories.len()
    }

    pub fn categories(&self) -> &[String] {
        &self.categories
    }

    pub fn category_name(&self, c: usize) -> &str {
        &self.categories[c]
    }

    pub fn category_id(&self, name: &str) -> Result<usize> {
        self.lookup
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownCategory(name.to_string()))
    }

    /// Super-class siblings of `c` in partition order, excluding `c`.
    pub fn siblings(&self, c: usize) -> &[usize] {
        &self.siblings[c]
    }

    /// Size of `c`'s super-class.
    pub fn group_size(&self, c: usize) -> usize {
        self.siblings[c].len() + 1
    }

    /// Number of prompts (positives plus negatives) held by `c`.
    pub fn prompt_count(&self, c: usize) -> usize {
        self.group_size(c) * self.n
    }

    /// 1-based rank of `d` among `c`'s siblings.
    pub fn sibling_rank(&self, c: usize, d: usize) -> Option<usize> {
        self.siblings[c].iter().position(|&x| x == d).map(|p| p + 1)
    }

    pub fn positive_index(&self, n: usize) -> Result<usize> {
        if n == 0 || n > self.n {
            return Err(Error::OutOfRange(format!("feature position {n} not in 1..={}", self.n)));
        }
        Ok(n)
    }

    /// Flat index of the negative of `c` that negates feature `n` of sibling `d`.
    pub fn negative_index(&self, c: usize, d: usize, n: usize) -> Result<usize> {
        self.positive_index(n)?;
        let rank = self.sibling_rank(c, d).ok_or_else(|| {
            Error::OutOfRange(format!(
                "{:?} is not a super-class sibling of {:?}",
                self.categories.get(d),
                self.categories.get(c)
            ))
        })?;
        Ok(rank * self.n + n)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptKind {
    Positive,
    Negative,
}

/// Flat index of a prompt by category and feature names.
pub fn prompt_index(
    layout: &PromptLayout,
    category: &str,
    kind: PromptKind,
    source_category: Option<&str>,
    feature_position: usize,
) -> Result<usize> {
    let c = layout.category_id(category)?;
    match kind {
        PromptKind::Positive => layout.positive_index(feature_position),
        PromptKind::Negative => {
            let source = source_category
                .ok_or_else(|| Error::OutOfRange("negative prompts need a source category".into()))?;
            let d = layout.category_id(source)?;
            layout.negative_index(c, d, feature_position)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptEntry {
    pub category: String,
    pub kind: PromptKind,
    /// Category whose feature the text mentions; the category itself for positives.
    pub source_category: String,
    pub feature_position: usize,
    pub flat_index: usize,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptBank {
    layout: PromptLayout,
    entries: Vec<PromptEntry>,
}

pub fn positive_text(category: &str, feature: &str) -> String {
    format!("a photo of a {category}, which has {feature}")
}

pub fn negative_text(category: &str, feature: &str) -> String {
    format!("a photo of a {category}, which has no {feature}")
}

pub fn build_prompts(bank: &FeatureBank, partition: &SuperClassPartition) -> Result<PromptBank> {
    let layout = PromptLayout::new(partition, bank.n())?;
    let features_of = |c: &str| bank.get(c).ok_or_else(|| Error::MissingCategory(c.to_string()));
    let mut entries = Vec::new();
    for (c, name) in layout.categories().iter().enumerate() {
        for (k, feature) in features_of(name)?.iter().enumerate() {
            entries.push(PromptEntry {
                category: name.clone(),
                kind: PromptKind::Positive,
                source_category: name.clone(),
                feature_position: k + 1,
                flat_index: layout.positive_index(k + 1)?,
                text: positive_text(name, feature),
            });
        }
        for &d in layout.siblings(c) {
            let source = layout.category_name(d);
            for (k, feature) in features_of(source)?.iter().enumerate() {
                entries.push(PromptEntry {
                    category: name.clone(),
                    kind: PromptKind::Negative,
                    source_category: source.to_string(),
                    feature_position: k + 1,
                    flat_index: layout.negative_index(c, d, k + 1)?,
                    text: negative_text(name, feature),
                });
            }
        }
    }
    Ok(PromptBank { layout, entries })
}

impl PromptBank {
    pub fn layout(&self) -> &PromptLayout {
        &self.layout
    }

    pub fn entries(&self) -> &[PromptEntry] {
        &self.entries
    }

    pub fn entries_for<'a>(&'a self, category: &'a str) -> impl Iterator<Item = &'a PromptEntry> + 'a {
        self.entries.iter().filter(move |e| e.category == category)
    }

    /// JSON array of prompt entries for the embedding extractor.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.entries).expect("prompt bank serializes")
    }
}

/// Record name under which the embedding of a prompt is stored.
pub fn prompt_record_name(category: &str, flat_index: usize) -> String {
    format!("{category}#{flat_index}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn names(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    fn carnivores() -> SuperClassPartition {
        SuperClassPartition::new(vec![(
            "large carnivores".into(),
            names(&["tiger", "wolf", "bear", "leopard", "lion"]),
        )])
    }

    #[test]
    fn valid_partition() {
        let cats = names(&["tiger", "wolf", "bear", "leopard", "lion"]);
        assert_eq!(validate_partition(&carnivores(), &cats), Ok(()));
    }

    #[test]
    fn duplicate_and_missing_violations() {
        let p = SuperClassPartition::new(vec![
            ("a".into(), names(&["tiger", "wolf"])),
            ("b".into(), names(&["tiger", "bear", "leopard"])),
            ("c".into(), vec![]),
        ]);
        let cats = names(&["tiger", "wolf", "bear", "leopard", "lion"]);
        let v = validate_partition(&p, &cats).unwrap_err();
        assert!(v.contains(&PartitionViolation::Duplicate {
            category: "tiger".into(),
            occurrences: 2
        }));
        assert!(v.contains(&PartitionViolation::Missing("lion".into())));
        assert!(v.contains(&PartitionViolation::EmptyGroup("c".into())));
    }

    #[test]
    fn query_lists_siblings() {
        assert_eq!(
            emit_query("tiger", &carnivores()).unwrap(),
            "What are useful features for distinguishing a tiger from wolf, bear, leopard, lion in a photo?"
        );
    }

    #[test]
    fn singleton_query_falls_back() {
        let p = SuperClassPartition::new(vec![("trees".into(), names(&["oak"]))]);
        assert_eq!(
            emit_query("oak", &p).unwrap(),
            "What are useful features for distinguishing a oak in a photo?"
        );
        assert!(matches!(emit_query("pine", &p), Err(Error::UnknownCategory(_))));
    }

    #[test]
    fn partition_json_keeps_order() {
        let p = SuperClassPartition::from_json(r#"{"z": ["b", "a"], "a": ["c"]}"#).unwrap();
        assert_eq!(p.categories(), names(&["b", "a", "c"]));
        assert_eq!(SuperClassPartition::from_json(&p.to_json()).unwrap(), p);
    }

    #[test]
    fn feature_ingestion() {
        let bank = ingest_features(r#"{"tiger": ["striped fur"]}"#, 1).unwrap();
        assert_eq!(bank.get("tiger").unwrap(), ["striped fur".to_string()]);
        assert!(matches!(
            ingest_features(r#"{"tiger": []}"#, 1),
            Err(Error::WrongCount { found: 0, .. })
        ));
        assert!(matches!(
            ingest_features(r#"{"tiger": ["striped fur", "striped fur"]}"#, 2),
            Err(Error::DuplicateFeature { .. })
        ));
        assert!(matches!(
            ingest_features(r#"{"tiger": [" "]}"#, 1),
            Err(Error::EmptyFeature(_))
        ));
    }

    #[test]
    fn prompt_texts() {
        let p = SuperClassPartition::new(vec![("g".into(), names(&["tiger", "wolf"]))]);
        let bank = FeatureBank::new(
            1,
            [
                ("tiger".to_string(), names(&["striped fur"])),
                ("wolf".to_string(), names(&["pointed ears"])),
            ],
        )
        .unwrap();
        let prompts = build_prompts(&bank, &p).unwrap();
        let texts: Vec<&str> = prompts.entries().iter().map(|e| e.text.as_str()).collect();
        assert!(texts.contains(&"a photo of a tiger, which has striped fur"));
        assert!(texts.contains(&"a photo of a wolf, which has no striped fur"));
    }

    #[test]
    fn missing_category_in_bank() {
        let bank = FeatureBank::new(1, [("tiger".to_string(), names(&["striped fur"]))]).unwrap();
        assert!(matches!(
            build_prompts(&bank, &carnivores()),
            Err(Error::MissingCategory(_))
        ));
    }

    #[test]
    fn counts_per_member() {
        let cats = carnivores().categories();
        let bank = FeatureBank::synthetic(&cats, 3);
        let prompts = build_prompts(&bank, &carnivores()).unwrap();
        for c in &cats {
            let pos = prompts.entries_for(c).filter(|e| e.kind == PromptKind::Positive).count();
            let neg = prompts.entries_for(c).filter(|e| e.kind == PromptKind::Negative).count();
            assert_eq!((pos, neg), (3, 12));
        }
    }

    #[test]
    fn flat_indices() {
        let layout = PromptLayout::new(&carnivores(), 3).unwrap();
        assert_eq!(prompt_index(&layout, "tiger", PromptKind::Positive, None, 2).unwrap(), 2);
        assert_eq!(prompt_index(&layout, "tiger", PromptKind::Negative, Some("wolf"), 1).unwrap(), 4);
        assert_eq!(prompt_index(&layout, "tiger", PromptKind::Negative, Some("leopard"), 3).unwrap(), 12);
        // the sibling list of wolf skips wolf itself: tiger is rank 1, bear rank 2
        assert_eq!(prompt_index(&layout, "wolf", PromptKind::Negative, Some("bear"), 1).unwrap(), 7);
        assert!(matches!(
            prompt_index(&layout, "tiger", PromptKind::Negative, Some("tiger"), 1),
            Err(Error::OutOfRange(_))
        ));
        assert!(matches!(
            prompt_index(&layout, "tiger", PromptKind::Positive, None, 4),
            Err(Error::OutOfRange(_))
        ));
    }

    #[test]
    fn export_round_trips() {
        let cats = carnivores().categories();
        let prompts = build_prompts(&FeatureBank::synthetic(&cats, 2), &carnivores()).unwrap();
        let back: Vec<PromptEntry> = serde_json::from_str(&prompts.to_json()).unwrap();
        assert_eq!(back, prompts.entries());
    }

    fn arb_partition() -> impl Strategy<Value = (SuperClassPartition, usize)> {
        (prop::collection::vec(1usize..5, 1..5), 1usize..4).prop_map(|(sizes, n)| {
            let mut next = 0;
            let groups = sizes
                .iter()
                .enumerate()
                .map(|(g, &s)| {
                    let members = (next..next + s).map(|i| format!("c{i}")).collect();
                    next += s;
                    (format!("g{g}"), members)
                })
                .collect();
            (SuperClassPartition::new(groups), n)
        })
    }

    proptest! {
        #[test]
        fn flat_index_is_a_bijection((partition, n) in arb_partition()) {
            let cats = partition.categories();
            let bank = build_prompts(&FeatureBank::synthetic(&cats, n), &partition).unwrap();
            let layout = bank.layout();
            for (c, name) in cats.iter().enumerate() {
                let mut idx: Vec<usize> = bank.entries_for(name).map(|e| e.flat_index).collect();
                idx.sort_unstable();
                let expected: Vec<usize> = (1..=layout.prompt_count(c)).collect();
                prop_assert_eq!(idx, expected);
            }
            for e in bank.entries() {
                let negative = e.kind == PromptKind::Negative;
                prop_assert_eq!(e.text.contains(" no "), negative);
            }
        }

        #[test]
        fn query_names_exactly_the_siblings((partition, _n) in arb_partition()) {
            for (_, members) in partition.groups() {
                for m in members {
                    let q = emit_query(m, &partition).unwrap();
                    for other in partition.categories() {
                        let mentioned = q.contains(&format!(" {other} ")) || q.contains(&format!(" {other},"));
                        prop_assert_eq!(mentioned, members.contains(&other));
                    }
                }
            }
        }
    }
}
