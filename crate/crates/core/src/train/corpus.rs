//! Deterministic synthetic text: sentences drawn from a word-level Markov
//! chain over a small vocabulary, emitted as byte tokens.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const WORDS: [&str; 24] = [
    "the", "cat", "dog", "sat", "on", "mat", "ran", "to", "park", "a", "big", "small", "red",
    "ball", "saw", "bird", "flew", "over", "tree", "and", "then", "home", "fast", "slowly",
];

/// Successor weights; each word gets this many successors in decreasing
/// order of probability.
const SUCCESSOR_WEIGHTS: [u32; 3] = [6, 3, 1];

struct Grammar {
    successors: Vec<[usize; 3]>,
    starts: [usize; 2],
}

impl Grammar {
    fn new(rng: &mut ChaCha8Rng) -> Self {
        let mut successors = Vec::with_capacity(WORDS.len());
        for w in 0..WORDS.len() {
            let mut others: Vec<usize> = (0..WORDS.len()).filter(|&o| o != w).collect();
            others.shuffle(rng);
            successors.push([others[0], others[1], others[2]]);
        }
        Self {
            successors,
            starts: [0, 9],
        }
    }

    fn next(&self, word: usize, rng: &mut ChaCha8Rng) -> usize {
        let total: u32 = SUCCESSOR_WEIGHTS.iter().sum();
        let mut u = rng.gen_range(0..total);
        for (i, &w) in SUCCESSOR_WEIGHTS.iter().enumerate() {
            if u < w {
                return self.successors[word][i];
            }
            u -= w;
        }
        unreachable!()
    }
}

/// `len` byte tokens of synthetic text, fully determined by `seed`.
pub fn synthetic_corpus(seed: u64, len: usize) -> Vec<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grammar = Grammar::new(&mut rng);
    let mut out = Vec::with_capacity(len + 64);
    while out.len() < len {
        let mut word = grammar.starts[rng.gen_range(0..2)];
        let words = rng.gen_range(4..9);
        for i in 0..words {
            if i > 0 {
                out.push(u32::from(b' '));
                word = grammar.next(word, &mut rng);
            }
            out.extend(WORDS[word].bytes().map(u32::from));
        }
        out.extend(". ".bytes().map(u32::from));
    }
    out.truncate(len);
    out
}
