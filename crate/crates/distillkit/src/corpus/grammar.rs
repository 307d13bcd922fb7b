//! A tiny closed grammar for the "English" target side of the synthetic
//! corpora. Sentences are one or two clauses over a fixed lexicon of CVCV
//! words, giving lengths between 3 and 17 tokens and a vocabulary far below
//! the 512-type ceiling the decoding oracles assume.

use rand::Rng;
use rand_chacha::ChaCha12Rng;

const CONSONANTS: [char; 12] = ['b', 'd', 'f', 'g', 'k', 'l', 'm', 'n', 'p', 'r', 's', 't'];
const VOWELS: [char; 5] = ['a', 'e', 'i', 'o', 'u'];

const N_NOUNS: usize = 24;
const N_VERBS: usize = 16;
const N_ADJECTIVES: usize = 12;
const N_ADVERBS: usize = 8;
const N_DETERMINERS: usize = 4;
const N_CONNECTIVES: usize = 4;

/// Enumerate distinct CVCV words by walking the 12*5*12*5 index space with a
/// stride coprime to its size, so consecutive lexicon entries do not share
/// prefixes.
fn word_at(i: usize) -> String {
    const TOTAL: usize = 12 * 5 * 12 * 5; // 3600
    const STRIDE: usize = 641; // prime, coprime with 3600
    let mut x = (i * STRIDE) % TOTAL;
    let v2 = x % 5;
    x /= 5;
    let c2 = x % 12;
    x /= 12;
    let v1 = x % 5;
    x /= 5;
    let c1 = x % 12;
    [CONSONANTS[c1], VOWELS[v1], CONSONANTS[c2], VOWELS[v2]].iter().collect()
}

#[derive(Debug, Clone)]
pub struct ToyGrammar {
    pub nouns: Vec<String>,
    pub verbs: Vec<String>,
    pub adjectives: Vec<String>,
    pub adverbs: Vec<String>,
    pub determiners: Vec<String>,
    pub connectives: Vec<String>,
}

impl ToyGrammar {
    pub fn standard() -> Self {
        let mut i = 0;
        let mut take = |n: usize| -> Vec<String> {
            let ws: Vec<String> = (i..i + n).map(word_at).collect();
            i += n;
            ws
        };
        ToyGrammar {
            nouns: take(N_NOUNS),
            verbs: take(N_VERBS),
            adjectives: take(N_ADJECTIVES),
            adverbs: take(N_ADVERBS),
            determiners: take(N_DETERMINERS),
            connectives: take(N_CONNECTIVES),
        }
    }

    pub fn all_words(&self) -> Vec<&str> {
        self.nouns
            .iter()
            .chain(&self.verbs)
            .chain(&self.adjectives)
            .chain(&self.adverbs)
            .chain(&self.determiners)
            .chain(&self.connectives)
            .map(|s| s.as_str())
            .collect()
    }

    fn pick<'a>(rng: &mut ChaCha12Rng, words: &'a [String]) -> &'a str {
        &words[rng.gen_range(0..words.len())]
    }

    /// noun phrase: [det] [adj] noun
    fn sample_np(&self, rng: &mut ChaCha12Rng, out: &mut Vec<String>) {
        if rng.gen::<f64>() < 0.5 {
            out.push(Self::pick(rng, &self.determiners).to_string());
        }
        if rng.gen::<f64>() < 0.4 {
            out.push(Self::pick(rng, &self.adjectives).to_string());
        }
        out.push(Self::pick(rng, &self.nouns).to_string());
    }

    /// clause: NP verb NP [adv]
    fn sample_clause(&self, rng: &mut ChaCha12Rng, out: &mut Vec<String>) {
        self.sample_np(rng, out);
        out.push(Self::pick(rng, &self.verbs).to_string());
        self.sample_np(rng, out);
        if rng.gen::<f64>() < 0.3 {
            out.push(Self::pick(rng, &self.adverbs).to_string());
        }
    }

    /// sentence: clause [connective clause]
    pub fn sample(&self, rng: &mut ChaCha12Rng) -> Vec<String> {
        let mut out = Vec::new();
        self.sample_clause(rng, &mut out);
        if rng.gen::<f64>() < 0.35 {
            out.push(Self::pick(rng, &self.connectives).to_string());
            self.sample_clause(rng, &mut out);
        }
        out
    }
}
