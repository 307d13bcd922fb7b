//! Synthetic multilingual parallel corpora: generation, script unification,
//! subword vocabularies, similarity scoring, and high-quality filtering.

pub mod grammar;
pub mod io;
pub mod score;
pub mod subword;
pub mod synth;
pub mod types;

pub use grammar::ToyGrammar;
pub use io::{read_corpus, read_vocab, write_corpus, write_vocab};
pub use score::{corpus_quality_stats, hq_filter, similarity_score, HqFilterOutcome};
pub use subword::{train_subword_vocab, Vocab, BOS, EOS, PAD, UNK};
pub use synth::{
    language_tag, make_synthetic_corpus, recover_oracle_target, source_from_target, unify_script,
};
pub use types::{
    Corpus, FilterPolicy, LanguageSpec, Provenance, ReorderRule, SentencePair,
};
