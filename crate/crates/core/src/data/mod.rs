//! Dialog corpora: file format, label spaces, tokenization, vocabulary,
//! pretrained word vectors and the synthetic generator.

mod corpus;
pub mod synthetic;
mod text;

pub use corpus::{Corpus, Dialog, EncodedDialog, LabelSpace, Split, Utterance};
pub use synthetic::{generate_synthetic, RuleSet, SyntheticConfig};
pub use text::{embedding_table, load_word_vectors, tokenize, Vocabulary, PAD, UNK};
