//! Question encoding: tokenization, vocabulary, trainable embeddings and a bi-LSTM.

use std::collections::{BTreeSet, HashMap};
use std::io::BufRead;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::BiLstm;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
const PAD_TOKEN: &str = "<pad>";
const UNK_TOKEN: &str = "<unk>";

/// Lowercases and splits on whitespace and punctuation.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase())
        .collect()
}

/// Token and answer-label index spaces. Index 0 is padding, 1 is unknown.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    token_index: HashMap<String, usize>,
    answers: Vec<String>,
    answer_index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary from question tokens and answer labels. Both are
    /// sorted, so the result depends only on the sets, not on corpus order.
    pub fn build<'a, I, J>(questions: I, answers: J) -> Self
    where
        I: IntoIterator<Item = &'a [String]>,
        J: IntoIterator<Item = &'a str>,
    {
        let words: BTreeSet<&str> = questions
            .into_iter()
            .flat_map(|q| q.iter().map(String::as_str))
            .collect();
        let labels: BTreeSet<&str> = answers.into_iter().collect();
        Self::from_lists(
            words.into_iter().map(str::to_string).collect(),
            labels.into_iter().map(str::to_string).collect(),
        )
    }

    pub fn from_lists(words: Vec<String>, answers: Vec<String>) -> Self {
        let mut tokens = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        tokens.extend(
            words
                .into_iter()
                .filter(|w| w != PAD_TOKEN && w != UNK_TOKEN),
        );
        let token_index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        let answer_index = answers
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary {
            tokens,
            token_index,
            answers,
            answer_index,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= 2
    }

    pub fn num_answers(&self) -> usize {
        self.answers.len()
    }

    pub fn token(&self, index: usize) -> Option<&str> {
        self.tokens.get(index).map(String::as_str)
    }

    pub fn index(&self, token: &str) -> usize {
        self.token_index.get(token).copied().unwrap_or(UNK)
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.index(t)).collect()
    }

    pub fn answer(&self, index: usize) -> Option<&str> {
        self.answers.get(index).map(String::as_str)
    }

    pub fn answer_index(&self, label: &str) -> Option<usize> {
        self.answer_index.get(label).copied()
    }

    pub fn answers(&self) -> &[String] {
        &self.answers
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Output of the question encoder.
#[derive(Clone, Copy, Debug)]
pub struct EncodedQuestion {
    /// `[S, d]` bi-LSTM output state per token.
    pub contextual_words: Var,
    /// `[d]`, the final backward state followed by the final forward state.
    pub question_vector: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct LanguageEncoder {
    pub embedding: ParamId,
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub dim: usize,
    pub max_len: usize,
    pub lstm: BiLstm,
}

impl LanguageEncoder {
    /// `dim` is the total state width; each direction gets `dim / 2` units.
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        vocab_size: usize,
        embed_dim: usize,
        dim: usize,
        max_len: usize,
    ) -> Result<Self> {
        if dim % 2 != 0 || dim == 0 {
            return Err(Error::Config(format!("question dim {dim} must be even")));
        }
        let embedding = store.weight("lang.embedding", &[vocab_size, embed_dim])?;
        let lstm = BiLstm::new(store, "lang.lstm", embed_dim, dim / 2)?;
        Ok(LanguageEncoder {
            embedding,
            vocab_size,
            embed_dim,
            dim,
            max_len,
            lstm,
        })
    }

    pub fn embed<F: Real>(&self, g: &mut Graph<F>, store: &ParamStore<F>, tokens: &[usize]) -> Result<Var> {
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.vocab_size) {
            return Err(Error::Vocabulary {
                index: bad,
                size: self.vocab_size,
            });
        }
        let table = g.param(store, self.embedding);
        g.rows(table, tokens)
    }

    pub fn encode_question<F: Real>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        tokens: &[usize],
    ) -> Result<EncodedQuestion> {
        if tokens.is_empty() {
            return Err(Error::contract("empty question"));
        }
        if tokens.len() > self.max_len {
            return Err(Error::contract(format!(
                "question has {} tokens, max is {}",
                tokens.len(),
                self.max_len
            )));
        }
        let seq = self.embed(g, store, tokens)?;
        let out = self.lstm.run(g, store, seq)?;
        let question_vector = g.concat_last(&[out.final_bwd, out.final_fwd])?;
        Ok(EncodedQuestion {
            contextual_words: out.states,
            question_vector,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = vec![self.embedding];
        for cell in [self.lstm.forward, self.lstm.backward] {
            v.extend(cell.input.params());
            v.extend(cell.recurrent.params());
        }
        v
    }
}

/// Reads `token v1 … vN` lines and overwrites matching rows of the embedding
/// table. Returns how many vocabulary rows were replaced.
pub fn import_embeddings<F: Real, R: BufRead>(
    reader: R,
    vocab: &Vocabulary,
    store: &mut ParamStore<F>,
    table: ParamId,
) -> Result<usize> {
    let shape = store.value(table).shape().to_vec();
    let (rows, width) = (shape[0], shape[1]);
    let mut replaced = 0;
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let mut parts = line.split_whitespace();
        let Some(token) = parts.next() else { continue };
        let values: Vec<f64> = parts
            .map(|p| {
                p.parse::<f64>().map_err(|e| {
                    Error::format("embedding file", format!("line {}: {e}", lineno + 1))
                })
            })
            .collect::<Result<_>>()?;
        if values.len() != width {
            return Err(Error::format(
                "embedding file",
                format!("line {}: expected {width} values, got {}", lineno + 1, values.len()),
            ));
        }
        let idx = vocab.index(token);
        if idx == UNK && token != UNK_TOKEN || idx >= rows {
            continue;
        }
        let data = store.value_mut(table).data_mut();
        for (d, v) in data[idx * width..(idx + 1) * width].iter_mut().zip(&values) {
            *d = F::c(*v);
        }
        replaced += 1;
    }
    Ok(replaced)
}

/// Writes the table in the same plain-text format `import_embeddings` reads.
pub fn export_embeddings<F: Real, W: std::io::Write>(
    mut w: W,
    vocab: &Vocabulary,
    table: &Tensor<F>,
) -> Result<()> {
    let width = table.last_dim();
    for (i, tok) in vocab.tokens().iter().enumerate() {
        write!(w, "{tok}")?;
        for v in &table.data()[i * width..(i + 1) * width] {
            write!(w, " {v}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}
