//! Name normalization and palette slot assignment.

use alloc::collections::BTreeSet;
use alloc::string::String;

use crate::error::{Error, Result};

const TRAILING_PUNCTUATION: [char; 4] = ['.', ',', ';', ':'];

/// Canonical form of a node, attribute or label name.
///
/// Lowercases, trims, collapses internal whitespace and strips trailing
/// sentence punctuation. No stemming: "doctors" and "doctor" stay distinct.
pub fn normalize_name(raw: &str) -> Result<String> {
    let mut out = String::with_capacity(raw.len());
    for word in raw.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.extend(word.chars().flat_map(char::to_lowercase));
    }
    let keep = out
        .trim_end_matches(|c: char| TRAILING_PUNCTUATION.contains(&c) || c.is_whitespace())
        .len();
    out.truncate(keep);
    if out.is_empty() {
        return Err(Error::EmptyName);
    }
    Ok(out)
}

/// Smallest non-negative slot not already taken.
pub fn assign_color_index(existing: &BTreeSet<u32>) -> u32 {
    let mut next = 0;
    for &slot in existing {
        if slot != next {
            break;
        }
        next += 1;
    }
    next
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn normalizes_case_and_whitespace() {
        assert_eq!(normalize_name("Doctor ").unwrap(), "doctor");
        assert_eq!(normalize_name("medical   equipment.").unwrap(), "medical equipment");
        assert_eq!(normalize_name("\tWhite Coat ;:").unwrap(), "white coat");
    }

    #[test]
    fn rejects_empty() {
        assert_eq!(normalize_name("  "), Err(Error::EmptyName));
        assert_eq!(normalize_name(""), Err(Error::EmptyName));
        assert_eq!(normalize_name(" .,; "), Err(Error::EmptyName));
    }

    #[test]
    fn no_singularization() {
        assert_ne!(normalize_name("doctors").unwrap(), normalize_name("doctor").unwrap());
    }

    #[test]
    fn color_slots() {
        assert_eq!(assign_color_index(&BTreeSet::new()), 0);
        assert_eq!(assign_color_index(&[0, 1, 2].into_iter().collect()), 3);
        assert_eq!(assign_color_index(&[0, 2].into_iter().collect()), 1);
        assert_eq!(assign_color_index(&[1, 2].into_iter().collect()), 0);
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(raw in any::<String>()) {
            if let Ok(once) = normalize_name(&raw) {
                prop_assert_eq!(normalize_name(&once).unwrap(), once);
            }
        }

        #[test]
        fn normalize_is_idempotent_on_wordy_input(raw in "[ A-Za-z.,;:\t]{0,24}") {
            if let Ok(once) = normalize_name(&raw) {
                prop_assert_eq!(normalize_name(&once).unwrap(), once);
            }
        }

        #[test]
        fn color_index_is_fresh(existing in proptest::collection::btree_set(0u32..16, 0..12)) {
            let slot = assign_color_index(&existing);
            prop_assert!(!existing.contains(&slot));
            prop_assert!((0..slot).all(|s| existing.contains(&s)));
        }
    }
}
