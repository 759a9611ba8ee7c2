use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::{self, ManifestEntry, FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;
use crate::tokenizer::Vocab;

use super::{EncoderConfig, EncoderModel};

const HEAD_NAME: &str = "head.weight";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: EncoderConfig,
    params: Vec<ManifestEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    vocab: Option<Vec<String>>,
    #[serde(default)]
    lowercase: bool,
    /// `[student hidden, teacher dim]` when a projection head is stored.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    head: Option<[usize; 2]>,
}

/// Encoder weights with the vocabulary and an optional distillation projection.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: EncoderModel,
    pub vocab: Option<Vocab>,
    pub head: Option<Tensor>,
}

impl Checkpoint {
    pub fn new(model: EncoderModel, vocab: Option<Vocab>) -> Self {
        Checkpoint {
            model,
            vocab,
            head: None,
        }
    }

    pub fn vocab(&self) -> Result<&Vocab> {
        self.vocab
            .as_ref()
            .ok_or_else(|| Error::Data("checkpoint carries no vocabulary".into()))
    }

    /// Output dimension of sentence embeddings (projection applied if present).
    pub fn embedding_dim(&self) -> usize {
        self.head
            .as_ref()
            .map_or(self.model.config.hidden, |h| h.shape()[1])
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut manifest = Vec::new();
        let mut blob = Vec::with_capacity(self.model.param_count());
        let mut add = |name: &str, t: &Tensor, blob: &mut Vec<f32>| {
            manifest.push(ManifestEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                offset: blob.len() * 4,
            });
            blob.extend_from_slice(t.data());
        };
        for (name, t) in self.model.params.iter() {
            add(name, t, &mut blob);
        }
        if let Some(h) = &self.head {
            add(HEAD_NAME, h, &mut blob);
        }
        let header = Header {
            format_version: FORMAT_VERSION,
            config: self.model.config.clone(),
            params: manifest,
            vocab: self.vocab.as_ref().map(|v| v.tokens().to_vec()),
            lowercase: self.vocab.as_ref().is_some_and(Vocab::lowercase),
            head: self.head.as_ref().map(|h| [h.shape()[0], h.shape()[1]]),
        };
        container::write(path, &header, &blob)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, blob): (Header, Vec<f32>) = container::read(path)?;
        let ctx = |e: Error| match e {
            Error::Data(m) | Error::Parameter(m) => Error::Data(format!("{}: {m}", path.display())),
            other => other,
        };
        if header.format_version != FORMAT_VERSION {
            return Err(Error::Data(format!(
                "{}: unsupported format version {}",
                path.display(),
                header.format_version
            )));
        }
        let mut params = ParamSet::new();
        let mut head = None;
        for entry in &header.params {
            let data = container::slice(&blob, entry).map_err(ctx)?.to_vec();
            let t = Tensor::new(entry.shape.clone(), data)?;
            if entry.name == HEAD_NAME {
                head = Some(t);
            } else {
                params.push(entry.name.clone(), t);
            }
        }
        match (&head, header.head) {
            (Some(h), Some(dims)) if h.shape() == dims && dims[0] == header.config.hidden => {}
            (None, None) => {}
            _ => {
                return Err(ctx(Error::Data(
                    "projection head does not match header".into(),
                )))
            }
        }
        let model = EncoderModel::from_params(header.config, params).map_err(ctx)?;
        let vocab = match header.vocab {
            Some(tokens) => Some(
                Vocab::from_tokens(tokens)
                    .map_err(ctx)?
                    .with_lowercase(header.lowercase),
            ),
            None => None,
        };
        if let Some(v) = &vocab {
            if v.len() != model.config.vocab_size {
                return Err(ctx(Error::Data(format!(
                    "vocabulary has {} tokens, config expects {}",
                    v.len(),
                    model.config.vocab_size
                ))));
            }
        }
        Ok(Checkpoint { model, vocab, head })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> EncoderConfig {
        EncoderConfig {
            layers: 1,
            hidden: 8,
            heads: 2,
            ffn_mult: 2,
            max_len: 6,
            vocab_size: 12,
            dropout_p: 0.0,
            pre_norm: false,
        }
    }

    fn vocab() -> Vocab {
        let mut t: Vec<String> = crate::tokenizer::SPECIAL_TOKENS
            .iter()
            .map(|s| s.to_string())
            .collect();
        t.extend("abcdefg".chars().map(|c| c.to_string()));
        Vocab::from_tokens(t).unwrap()
    }

    #[test]
    fn round_trip_with_and_without_head() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let mut ck = Checkpoint::new(EncoderModel::init(cfg(), 1).unwrap(), Some(vocab()));
        ck.save(&p).unwrap();
        assert_eq!(Checkpoint::load(&p).unwrap(), ck);
        ck.head = Some(Tensor::full([8, 5], 0.5));
        ck.save(&p).unwrap();
        let back = Checkpoint::load(&p).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.embedding_dim(), 5);
    }

    #[test]
    fn manifest_must_match_config() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let ck = Checkpoint::new(EncoderModel::init(cfg(), 1).unwrap(), None);
        ck.save(&p).unwrap();
        let (mut header, blob): (Header, Vec<f32>) = container::read(&p).unwrap();
        header.config.ffn_mult = 4;
        container::write(&p, &header, &blob).unwrap();
        assert!(matches!(Checkpoint::load(&p), Err(Error::Data(_))));
    }
}
