//! Anagram-based label expansion and the equal-length-substitution mode.
//!
//! Permutations operate on extended grapheme clusters so multi-unit
//! characters are never split. Ranks index the factorial number system;
//! rank 0 is the identity.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use unicode_segmentation::UnicodeSegmentation;

use crate::error::{Error, Result};

/// Factorials above this saturate; 20! is the largest fitting in u64.
pub const FACTORIAL_CAP: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpansionMode {
    Anagram,
    EqualLength,
    Identity,
}

/// An ordered set of label variants for one source instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpansionPlan {
    pub source_label: String,
    pub variants: Vec<String>,
    pub mode: ExpansionMode,
    pub seed: u64,
}

fn factorial(n: usize) -> u64 {
    (1..=n as u64).product::<u64>().max(1)
}

/// Number of index permutations of the label, `min(l, 20)!` (saturated);
/// duplicate characters still count as distinct permutations.
pub fn permutation_count(label: &str) -> u64 {
    let l = label.graphemes(true).count();
    factorial(l.min(FACTORIAL_CAP))
}

/// Writes the permutation with the given factorial-system rank.
fn unrank(mut rank: u64, clusters: &[&str]) -> String {
    let l = clusters.len();
    let mut avail: Vec<&str> = clusters.to_vec();
    let mut out = String::new();
    for i in 0..l {
        let f = factorial(l - 1 - i);
        let idx = (rank / f) as usize;
        rank %= f;
        out.push_str(avail.remove(idx));
    }
    out
}

fn shuffled(clusters: &[&str], rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..clusters.len()).collect();
    // Fisher-Yates.
    for i in (1..idx.len()).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

/// Samples `n` anagram variants. The identity is always variant 1; for
/// `n <= P(l)` the remaining permutation indices are distinct, otherwise
/// sampling is with replacement. Deterministic under the seed.
pub fn expand_anagrams(label: &str, n: usize, seed: u64) -> ExpansionPlan {
    let clusters: Vec<&str> = label.graphemes(true).collect();
    let l = clusters.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut variants = vec![label.to_string()];
    if l <= FACTORIAL_CAP {
        let p = factorial(l);
        if (n as u64) <= p {
            // Distinct non-identity ranks.
            if p <= 100_000 {
                let mut ranks: Vec<u64> = (1..p).collect();
                for i in (1..ranks.len()).rev() {
                    let j = rng.gen_range(0..=i);
                    ranks.swap(i, j);
                }
                for &r in ranks.iter().take(n - 1) {
                    variants.push(unrank(r, &clusters));
                }
            } else {
                let mut seen = HashSet::new();
                while variants.len() < n {
                    let r = rng.gen_range(1..p);
                    if seen.insert(r) {
                        variants.push(unrank(r, &clusters));
                    }
                }
            }
        } else {
            for _ in 1..n {
                let r = rng.gen_range(0..p);
                variants.push(unrank(r, &clusters));
            }
        }
    } else {
        // Too long for exact ranks; distinct index shuffles instead.
        let mut seen: HashSet<Vec<usize>> = HashSet::new();
        seen.insert((0..l).collect());
        while variants.len() < n {
            let idx = shuffled(&clusters, &mut rng);
            if seen.insert(idx.clone()) {
                variants.push(idx.iter().map(|&i| clusters[i]).collect());
            }
        }
    }
    ExpansionPlan {
        source_label: label.to_string(),
        variants,
        mode: ExpansionMode::Anagram,
        seed,
    }
}

/// Samples `n` uniform random strings with the label's grapheme length over
/// the charset. Deterministic under the seed.
pub fn expand_equal_length(
    label: &str,
    charset: &str,
    n: usize,
    seed: u64,
) -> Result<ExpansionPlan> {
    let symbols: Vec<&str> = charset.graphemes(true).collect();
    if symbols.is_empty() {
        return Err(Error::Config("equal-length charset is empty".into()));
    }
    let l = label.graphemes(true).count();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let variants = (0..n)
        .map(|_| {
            (0..l)
                .map(|_| symbols[rng.gen_range(0..symbols.len())])
                .collect::<String>()
        })
        .collect();
    Ok(ExpansionPlan {
        source_label: label.to_string(),
        variants,
        mode: ExpansionMode::EqualLength,
        seed,
    })
}

/// The trivial single-variant plan.
pub fn identity_plan(label: &str) -> ExpansionPlan {
    ExpansionPlan {
        source_label: label.to_string(),
        variants: vec![label.to_string()],
        mode: ExpansionMode::Identity,
        seed: 0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use itertools::Itertools;
    use proptest::prelude::*;

    fn sorted_chars(s: &str) -> Vec<&str> {
        let mut v: Vec<&str> = s.graphemes(true).collect();
        v.sort();
        v
    }

    #[test]
    fn count_examples() {
        assert_eq!(permutation_count("abc"), 6);
        assert_eq!(permutation_count("kills"), 120);
        assert_eq!(permutation_count("aa"), 2);
        // Saturation above the factorial cap.
        let long: String = std::iter::repeat('x').take(25).collect();
        assert_eq!(permutation_count(&long), factorial(20));
    }

    #[test]
    fn count_agrees_with_exhaustive_enumeration_up_to_six() {
        let alphabet = ["a", "b", "c", "d", "e", "f", "g", "h", "i", "j"];
        for l in 1..=6usize {
            let label: String = alphabet[..l].concat();
            let enumerated = (0..l).permutations(l).count() as u64;
            assert_eq!(permutation_count(&label), enumerated, "l={l}");
        }
    }

    #[test]
    fn full_expansion_covers_all_permutations() {
        let plan = expand_anagrams("abc", 6, 7);
        assert_eq!(plan.variants[0], "abc");
        let got: HashSet<&String> = plan.variants.iter().collect();
        let want: HashSet<String> = "abc"
            .chars()
            .permutations(3)
            .map(|p| p.into_iter().collect())
            .collect();
        assert_eq!(got.len(), 6);
        for v in &want {
            assert!(got.contains(v), "missing {v}");
        }
    }

    #[test]
    fn single_variant_is_identity() {
        let plan = expand_anagrams("stream", 1, 123);
        assert_eq!(plan.variants, vec!["stream".to_string()]);
    }

    #[test]
    fn plans_are_seed_deterministic() {
        let a = expand_anagrams("forge", 12, 5);
        let b = expand_anagrams("forge", 12, 5);
        assert_eq!(a, b);
        let c = expand_anagrams("forge", 12, 6);
        assert_ne!(a.variants, c.variants);
    }

    #[test]
    fn oversampling_switches_to_replacement() {
        let plan = expand_anagrams("ab", 10, 3);
        assert_eq!(plan.variants.len(), 10);
        assert_eq!(plan.variants[0], "ab");
        for v in &plan.variants {
            assert_eq!(sorted_chars(v), sorted_chars("ab"));
        }
    }

    #[test]
    fn long_label_variants_stay_multiset_equal() {
        let label = "abcdefghijklmnopqrstuvwxy"; // 25 > factorial cap
        let plan = expand_anagrams(label, 8, 11);
        assert_eq!(plan.variants.len(), 8);
        let unique: HashSet<&String> = plan.variants.iter().collect();
        assert_eq!(unique.len(), 8);
        for v in &plan.variants {
            assert_eq!(sorted_chars(v), sorted_chars(label));
        }
    }

    #[test]
    fn grapheme_clusters_survive_permutation() {
        // Family emoji is multi-codepoint; it must move as one unit.
        let label = "a\u{1f468}\u{200d}\u{1f469}\u{200d}\u{1f466}b";
        let plan = expand_anagrams(label, 6, 2);
        for v in &plan.variants {
            assert_eq!(sorted_chars(v), sorted_chars(label));
            assert_eq!(v.graphemes(true).count(), 3);
        }
    }

    #[test]
    fn equal_length_basics() {
        let plan = expand_equal_length("kills", "abcdefghijklmnopqrstuvwxyz", 20, 9).unwrap();
        assert_eq!(plan.variants.len(), 20);
        for v in &plan.variants {
            assert_eq!(v.graphemes(true).count(), 5);
        }
        let single = expand_equal_length("abc", "a", 4, 1).unwrap();
        assert!(single.variants.iter().all(|v| v == "aaa"));
        assert!(matches!(
            expand_equal_length("abc", "", 4, 1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn equal_length_single_symbol_distribution_is_uniform() {
        let charset = "abcdefghijklmnopqrstuvwxyz";
        let n = 10_000;
        let plan = expand_equal_length("x", charset, n, 34).unwrap();
        let mut counts = std::collections::HashMap::new();
        for v in &plan.variants {
            *counts.entry(v.clone()).or_insert(0usize) += 1;
        }
        let p = 1.0 / 26.0;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        for c in charset.chars() {
            let k = *counts.get(&c.to_string()).unwrap_or(&0) as f64;
            assert!(
                (k - n as f64 * p).abs() < 3.0 * sigma,
                "symbol {c}: count {k}"
            );
        }
    }

    proptest! {
        #[test]
        fn multiset_preservation_and_distinct_ranks(
            label in "[a-j]{1,7}",
            n in 1usize..30,
            seed in 0u64..1000,
        ) {
            let plan = expand_anagrams(&label, n, seed);
            prop_assert_eq!(plan.variants.len(), n);
            prop_assert_eq!(&plan.variants[0], &label);
            for v in &plan.variants {
                prop_assert_eq!(sorted_chars(v), sorted_chars(&label));
            }
        }

        #[test]
        fn distinct_strings_when_label_has_no_duplicates(
            n in 1usize..24,
            seed in 0u64..1000,
        ) {
            let label = "abcd";
            let plan = expand_anagrams(label, n, seed);
            // 4! = 24 >= n, and all characters are distinct, so distinct
            // ranks mean distinct strings.
            let unique: HashSet<&String> = plan.variants.iter().collect();
            prop_assert_eq!(unique.len(), n);
        }
    }
}
