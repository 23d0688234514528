//! Question tokenization and the token + segment + position text embedding.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{small_normal, Mat, ParamId, ParamStore, EMBEDDING_STD};
use crate::sequence::{EmbeddingSequence, Modality};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
pub const SPECIAL_TOKENS: [&str; 4] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]"];

/// Dense token ids in first-occurrence order, specials first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn build<S: AsRef<str>>(corpus: &[S]) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::InvalidInput("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut vocab = Self::specials_only();
        for question in corpus {
            for word in split_words(question.as_ref()) {
                vocab.insert(word);
            }
        }
        Ok(vocab)
    }

    fn specials_only() -> Self {
        let mut vocab = Vocabulary {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for s in SPECIAL_TOKENS {
            vocab.insert(s.to_string());
        }
        vocab
    }

    fn insert(&mut self, token: String) {
        if !self.index.contains_key(&token) {
            self.index.insert(token.clone(), self.tokens.len());
            self.tokens.push(token);
        }
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// One token per line, in id order.
    pub fn to_lines(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_lines(text: &str) -> Result<Self> {
        let tokens: Vec<&str> = text.lines().collect();
        if tokens.len() < SPECIAL_TOKENS.len() || tokens[..4] != SPECIAL_TOKENS {
            return Err(Error::InvalidInput(
                "vocabulary must start with [PAD] [UNK] [CLS] [SEP]".into(),
            ));
        }
        let mut vocab = Self::specials_only();
        for t in &tokens[4..] {
            if vocab.index.contains_key(*t) {
                return Err(Error::InvalidInput(format!("duplicate vocabulary token `{t}`")));
            }
            vocab.insert(t.to_string());
        }
        Ok(vocab)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_lines()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_lines(&text)
    }
}

/// Lowercases and splits on anything that is not alphanumeric.
pub fn split_words(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect()
}

/// `[CLS] t1..tk [SEP] [PAD]...`, truncated so that `[SEP]` always fits.
pub fn tokenize(question: &str, vocab: &Vocabulary, len: usize) -> Result<Vec<usize>> {
    if len < 2 {
        return Err(Error::InvalidInput(format!("token length {len} < 2")));
    }
    let mut ids = Vec::with_capacity(len);
    ids.push(CLS);
    ids.extend(
        split_words(question)
            .iter()
            .take(len - 2)
            .map(|w| vocab.id(w)),
    );
    ids.push(SEP);
    ids.resize(len, PAD);
    Ok(ids)
}

/// Plain-matrix text embedding tables.
#[derive(Clone, Debug, PartialEq)]
pub struct TextTables {
    pub token: Mat,
    pub segment: Mat,
    pub position: Mat,
}

/// `row i = token[ids[i]] + segment[0] + position[i]`.
pub fn embed_text(ids: &[usize], tables: &TextTables) -> Result<EmbeddingSequence> {
    check_ids(ids, tables.token.nrows(), tables.position.nrows())?;
    let d = tables.token.ncols();
    let seg = tables.segment.row(Modality::Text.segment_id());
    let values = Mat::from_shape_fn((ids.len(), d), |(i, j)| {
        tables.token[[ids[i], j]] + seg[j] + tables.position[[i, j]]
    });
    Ok(EmbeddingSequence {
        values,
        modality: Modality::Text,
        valid: ids.iter().map(|&id| id != PAD).collect(),
    })
}

fn check_ids(ids: &[usize], vocab_len: usize, max_len: usize) -> Result<()> {
    if let Some(&bad) = ids.iter().find(|&&id| id >= vocab_len) {
        return Err(Error::InvalidInput(format!(
            "token id {bad} out of range for vocabulary of {vocab_len}"
        )));
    }
    if ids.len() > max_len {
        return Err(Error::InvalidInput(format!(
            "sequence of {} tokens exceeds position table of {max_len}",
            ids.len()
        )));
    }
    Ok(())
}

/// Trainable text embedding tables. The segment table is shared with the
/// visual pipeline (row 0 text, row 1 visual).
#[derive(Clone, Debug)]
pub struct TextEmbedding {
    pub token: ParamId,
    pub segment: ParamId,
    pub position: ParamId,
    pub vocab_len: usize,
    pub max_len: usize,
}

impl TextEmbedding {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        vocab_len: usize,
        max_len: usize,
        d: usize,
        segment: ParamId,
        rng: &mut R,
    ) -> Self {
        TextEmbedding {
            token: store.add("text.token", small_normal(vocab_len, d, EMBEDDING_STD, rng)),
            segment,
            position: store.add("text.position", small_normal(max_len, d, EMBEDDING_STD, rng)),
            vocab_len,
            max_len,
        }
    }

    pub fn forward(&self, tape: &mut Tape, ids: &[usize]) -> Result<Var> {
        check_ids(ids, self.vocab_len, self.max_len)?;
        let token = tape.param(self.token);
        let rows = tape.gather_rows(token, ids);
        let segment = tape.param(self.segment);
        let seg_row = tape.slice_rows(segment, Modality::Text.segment_id(), 1);
        let rows = tape.add_row(rows, seg_row);
        let position = tape.param(self.position);
        let pos = tape.slice_rows(position, 0, ids.len());
        Ok(tape.add(rows, pos))
    }

    pub fn tables(&self, store: &ParamStore) -> TextTables {
        TextTables {
            token: store.get(self.token).clone(),
            segment: store.get(self.segment).clone(),
            position: store.get(self.position).clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_param_gradients, GradCheckConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_vocab() -> Vocabulary {
        Vocabulary::build(&["what organ"]).unwrap()
    }

    #[test]
    fn build_vocab_assigns_first_occurrence_ids() {
        let v = tiny_vocab();
        let want = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "what", "organ"];
        assert_eq!(v.tokens(), want.map(String::from));
        assert_eq!(v.id("what"), 4);
        assert_eq!(v.id("organ"), 5);
    }

    #[test]
    fn duplicates_share_an_id() {
        let v = Vocabulary::build(&["tool tool", "Tool organ tool"]).unwrap();
        assert_eq!(v.len(), 6);
        assert_eq!(v.id("tool"), 4);
    }

    #[test]
    fn empty_corpus_is_rejected() {
        let empty: [&str; 0] = [];
        assert!(Vocabulary::build(&empty).is_err());
    }

    #[test]
    fn unseen_words_map_to_unk() {
        let v = tiny_vocab();
        assert_eq!(tokenize("what kidney", &v, 5).unwrap(), vec![CLS, 4, UNK, SEP, PAD]);
    }

    #[test]
    fn tokenize_fixture() {
        let v = tiny_vocab();
        assert_eq!(tokenize("What organ?", &v, 6).unwrap(), vec![2, 4, 5, 3, 0, 0]);
        assert_eq!(tokenize("", &v, 4).unwrap(), vec![2, 3, 0, 0]);
    }

    #[test]
    fn tokenize_truncates_and_keeps_sep() {
        let v = tiny_vocab();
        let ids = tokenize("what organ what organ what", &v, 4).unwrap();
        assert_eq!(ids, vec![CLS, 4, 5, SEP]);
        assert!(tokenize("what", &v, 1).is_err());
    }

    #[test]
    fn vocab_lines_round_trip() {
        let v = Vocabulary::build(&["which tool is used", "what organ"]).unwrap();
        assert_eq!(Vocabulary::from_lines(&v.to_lines()).unwrap(), v);
        assert!(Vocabulary::from_lines("a\nb\n").is_err());
    }

    fn random_tables(seed: u64, v: usize, l: usize, d: usize) -> TextTables {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        TextTables {
            token: small_normal(v, d, 1.0, &mut rng),
            segment: small_normal(2, d, 1.0, &mut rng),
            position: small_normal(l, d, 1.0, &mut rng),
        }
    }

    #[test]
    fn embed_text_identity_and_zero_cases() {
        let mut t = random_tables(1, 6, 5, 3);
        t.segment.fill(0.0);
        t.position.fill(0.0);
        let ids = [2, 4, 5, 3, 0];
        let e = embed_text(&ids, &t).unwrap();
        for (i, &id) in ids.iter().enumerate() {
            assert_eq!(e.values.row(i), t.token.row(id));
        }
        assert_eq!(e.valid, vec![true, true, true, true, false]);
        t.token.fill(0.0);
        assert!(embed_text(&ids, &t).unwrap().values.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn embed_text_matches_summation_oracle_and_tape() {
        let t = random_tables(9, 7, 6, 4);
        let ids = [2, 6, 1, 3, 0, 0];
        let e = embed_text(&ids, &t).unwrap();
        for (i, &id) in ids.iter().enumerate() {
            for j in 0..4 {
                let want = t.token[[id, j]] + t.segment[[0, j]] + t.position[[i, j]];
                assert!((e.values[[i, j]] - want).abs() < 1e-15);
            }
        }

        let mut store = ParamStore::new();
        let seg = store.add("segment", t.segment.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let emb = TextEmbedding::new(&mut store, 7, 6, 4, seg, &mut rng);
        *store.get_mut(emb.token) = t.token.clone();
        *store.get_mut(emb.position) = t.position.clone();
        let mut tape = Tape::new(&store);
        let v = emb.forward(&mut tape, &ids).unwrap();
        assert_eq!(tape.value(v), &e.values);
    }

    #[test]
    fn embed_text_rejects_out_of_range_ids() {
        let t = random_tables(2, 4, 4, 2);
        assert!(embed_text(&[2, 9, 3], &t).is_err());
        assert!(embed_text(&[2, 3, 0, 0, 0], &t).is_err());
    }

    #[test]
    fn embed_text_is_linear_in_each_table() {
        let t = random_tables(4, 5, 4, 3);
        let ids = [2, 4, 3, 0];
        let base = embed_text(&ids, &t).unwrap().values;
        let mut scaled = t.clone();
        scaled.position *= 3.0;
        let out = embed_text(&ids, &scaled).unwrap().values;
        let diff = &out - &base;
        for i in 0..4 {
            for j in 0..3 {
                assert!((diff[[i, j]] - 2.0 * t.position[[i, j]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn text_embedding_gradients_match_finite_differences() {
        for seed in 0..3 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::new();
            let seg = store.add("segment", small_normal(2, 4, 1.0, &mut rng));
            let emb = TextEmbedding::new(&mut store, 6, 5, 4, seg, &mut rng);
            let probe = store.add("probe", small_normal(5, 4, 1.0, &mut rng));
            let ids = [2, 4, 4, 3, 0];
            let report = check_param_gradients(&store, &GradCheckConfig::default(), |t| {
                let e = emb.forward(t, &ids).unwrap();
                let e = t.tanh(e);
                let p = t.param(probe);
                let m = t.mul(e, p);
                t.sum_all(m)
            });
            assert!(report.max_rel_error < 1e-4, "{report:?}");
        }
    }
}
