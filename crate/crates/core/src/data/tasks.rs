//! The three diagnostic tasks: 62 random letters between bos and eos.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use super::vocab::{byte_of, id_of, BOS_ID, EOS_ID};

/// Letters per diagnostic input, excluding bos and eos.
pub const LETTERS: usize = 62;

pub const VOWELS: &[u8] = b"aeiouAEIOU";

/// One input/target pair of token ids.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskExample {
    pub input: Vec<usize>,
    pub target: Vec<usize>,
}

pub fn is_vowel(b: u8) -> bool {
    VOWELS.contains(&b)
}

pub fn is_lower_consonant(b: u8) -> bool {
    b.is_ascii_lowercase() && !is_vowel(b)
}

/// Per-example generator: a pure function of `(seed, index)`.
pub fn example_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn consonants(lower: bool, upper: bool) -> Vec<u8> {
    (b'a'..=b'z')
        .filter(|_| lower)
        .chain((b'A'..=b'Z').filter(|_| upper))
        .filter(|&c| !is_vowel(c))
        .collect()
}

fn pick(rng: &mut ChaCha8Rng, from: &[u8]) -> u8 {
    from[rng.random_range(0..from.len())]
}

fn wrap(letters: &[u8]) -> Vec<usize> {
    let mut v = Vec::with_capacity(letters.len() + 2);
    v.push(BOS_ID);
    v.extend(letters.iter().map(|&b| id_of(b)));
    v.push(EOS_ID);
    v
}

fn letters_of(ids: &[usize]) -> Vec<u8> {
    ids.iter().filter_map(|&i| byte_of(i)).collect()
}

/// Drops every vowel.
pub fn simple_vowel_rule(letters: &[u8]) -> Vec<u8> {
    letters.iter().copied().filter(|&b| !is_vowel(b)).collect()
}

/// Drops vowels whose immediate predecessor in the input is a lowercase consonant.
pub fn contextual_vowel_rule(letters: &[u8]) -> Vec<u8> {
    letters
        .iter()
        .enumerate()
        .filter(|&(i, &b)| !(is_vowel(b) && i > 0 && is_lower_consonant(letters[i - 1])))
        .map(|(_, &b)| b)
        .collect()
}

/// Replaces every `ABC` with `D`.
pub fn merge_rule(letters: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(letters.len());
    let mut i = 0;
    while i < letters.len() {
        if letters[i..].starts_with(b"ABC") {
            out.push(b'D');
            i += 3;
        } else {
            out.push(letters[i]);
            i += 1;
        }
    }
    out
}

/// Vowel removal: each letter is a vowel with probability 0.19.
pub fn simple_vowel_example(seed: u64, index: u64) -> TaskExample {
    let mut rng = example_rng(seed, index);
    let cons = consonants(true, true);
    let letters: Vec<u8> = (0..LETTERS)
        .map(|_| if rng.random_bool(0.19) { pick(&mut rng, VOWELS) } else { pick(&mut rng, &cons) })
        .collect();
    TaskExample { input: wrap(&letters), target: wrap(&simple_vowel_rule(&letters)) }
}

/// Contextual vowel removal: vowels with probability 0.40, consonants lowercase with probability 0.75.
pub fn contextual_vowel_example(seed: u64, index: u64) -> TaskExample {
    let mut rng = example_rng(seed, index);
    let (lower, upper) = (consonants(true, false), consonants(false, true));
    let letters: Vec<u8> = (0..LETTERS)
        .map(|_| {
            if rng.random_bool(0.40) {
                pick(&mut rng, VOWELS)
            } else if rng.random_bool(0.75) {
                pick(&mut rng, &lower)
            } else {
                pick(&mut rng, &upper)
            }
        })
        .collect();
    TaskExample { input: wrap(&letters), target: wrap(&contextual_vowel_rule(&letters)) }
}

/// Sequence merge: Poisson(5) copies of `ABC` inserted into an `ABC`-free base string.
pub fn sequence_merge_example(seed: u64, index: u64) -> TaskExample {
    let mut rng = example_rng(seed, index);
    let poisson = Poisson::new(5.0).expect("positive rate");
    let max_insert = LETTERS / 3;
    let count = loop {
        let k = poisson.sample(&mut rng) as usize;
        if k <= max_insert {
            break k;
        }
    };
    let base_len = LETTERS - 3 * count;
    let alphabet: Vec<u8> = (b'a'..=b'z').chain(b'A'..=b'Z').collect();
    let mut base: Vec<u8> = Vec::with_capacity(base_len);
    while base.len() < base_len {
        let c = pick(&mut rng, &alphabet);
        if c == b'C' && base.ends_with(b"AB") {
            continue;
        }
        base.push(c);
    }
    let mut gaps: Vec<usize> = (0..count).map(|_| rng.random_range(0..=base_len)).collect();
    gaps.sort_unstable();
    let mut letters = Vec::with_capacity(LETTERS);
    let mut g = gaps.iter().peekable();
    for i in 0..=base_len {
        while g.next_if(|&&p| p == i).is_some() {
            letters.extend_from_slice(b"ABC");
        }
        if i < base_len {
            letters.push(base[i]);
        }
    }
    TaskExample { input: wrap(&letters), target: wrap(&merge_rule(&letters)) }
}

/// Applies the task rule to an existing input (bos/eos kept).
pub fn target_for(rule: fn(&[u8]) -> Vec<u8>, input: &[usize]) -> Vec<usize> {
    wrap(&rule(&letters_of(input)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_examples() {
        assert_eq!(simple_vowel_rule(b"zEKRreJcBxGUJQbZSIos"), b"zKRrJcBxGJQbZSs");
        assert_eq!(contextual_vowel_rule(b"EOubXgaYVbiOgiIrEnld"), b"EOubXgYVbOgIrnld");
        assert_eq!(merge_rule(b"KjAxIpABCZCxBcniABCs"), b"KjAxIpDZCxBcniDs");
    }

    #[test]
    fn inputs_are_64_tokens() {
        for i in 0..20 {
            for ex in [simple_vowel_example(3, i), contextual_vowel_example(3, i), sequence_merge_example(3, i)] {
                assert_eq!(ex.input.len(), 64);
                assert_eq!(ex.input[0], BOS_ID);
                assert_eq!(ex.input[63], EOS_ID);
            }
        }
    }

    #[test]
    fn generators_are_pure() {
        assert_eq!(sequence_merge_example(9, 4), sequence_merge_example(9, 4));
        assert_ne!(simple_vowel_example(9, 4), simple_vowel_example(9, 5));
    }
}
