//! Templated ordered narratives for learning checks. Every document has
//! four sentences, each opening with a connective that pins its place.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::rng;

const OPENERS: [&[&str]; 4] = [
    &["first ,", "to begin ,", "at the start ,"],
    &["then ,", "next ,", "after that ,"],
    &["later ,", "afterwards ,", "some time later ,"],
    &["finally ,", "in the end ,", "at last ,"],
];

const NAMES: &[&str] = &[
    "anna", "ben", "chloe", "dev", "ella", "felix", "grace", "hugo", "iris", "jonas", "kira", "leo", "mia", "noah",
    "olga", "pablo",
];
const VERBS: &[&str] = &[
    "found", "painted", "carried", "repaired", "opened", "cleaned", "moved", "lifted", "sold", "bought", "hid",
    "checked",
];
const ADJECTIVES: &[&str] = &["old", "red", "small", "heavy", "broken", "shiny", "wooden", "strange"];
const NOUNS: &[&str] = &[
    "box", "lamp", "chair", "door", "bike", "clock", "map", "boat", "key", "bag", "drum", "kettle",
];
const PLACES: &[&str] = &[
    "garden", "kitchen", "shed", "market", "hall", "attic", "harbor", "library",
];

fn pick<'a, R: Rng>(rng: &mut R, xs: &[&'a str]) -> &'a str {
    xs.choose(rng).expect("non-empty word list")
}

/// One document as four sentence strings in their original order.
pub fn narrative<R: Rng>(rng: &mut R) -> Vec<String> {
    let name = pick(rng, NAMES);
    OPENERS
        .iter()
        .map(|openers| {
            format!(
                "{} {name} {} the {} {} in the {} .",
                pick(rng, openers),
                pick(rng, VERBS),
                pick(rng, ADJECTIVES),
                pick(rng, NOUNS),
                pick(rng, PLACES)
            )
        })
        .collect()
}

/// `n` narratives in the prepared corpus format: one sentence per line,
/// blank line between documents.
pub fn ordered_corpus(n: usize, seed: u64) -> String {
    let mut r = rng::stream(seed, rng::DATA, 0);
    let mut out = String::new();
    for i in 0..n {
        if i > 0 {
            out.push('\n');
        }
        for s in narrative(&mut r) {
            out.push_str(&s);
            out.push('\n');
        }
    }
    out
}
