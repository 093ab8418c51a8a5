//! Bidirectional text Transformer pooled at the end-of-sequence token.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;

use super::{EncoderConfig, Vocabulary, EOS};
use crate::error::{Error, Result};
use crate::nn::layers::{self, init_block, init_layer_norm, init_linear};
use crate::nn::{init, Graph, ParamStore, Var};

/// Shared-space embedding of one text.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbedding {
    pub embedding: Vec<f64>,
    pub source_text: String,
}

pub fn init_text_encoder(
    store: &mut ParamStore,
    rng: &mut impl Rng,
    cfg: &EncoderConfig,
) -> Result<()> {
    let d = cfg.text_width;
    store.insert(
        "text.token_embed",
        init::normal(rng, &[cfg.text_vocab, d], 0.02),
    )?;
    store.insert(
        "text.pos_embed",
        init::normal(rng, &[cfg.text_max_len, d], 0.01),
    )?;
    for i in 0..cfg.text_depth {
        init_block(store, rng, &format!("text.blocks.{i}"), d, cfg.text_mlp_dim)?;
    }
    init_layer_norm(store, "text.ln_final", d)?;
    init_linear(store, rng, "text.proj", d, cfg.shared_dim())
}

fn check_sequence(ids: &[usize], cfg: &EncoderConfig) -> Result<()> {
    if ids.last() != Some(&EOS) {
        return Err(Error::InvalidData(
            "token sequence does not end with EOS".into(),
        ));
    }
    if ids.len() > cfg.text_max_len {
        return Err(Error::InvalidData(format!(
            "{} tokens exceed the limit of {}",
            ids.len(),
            cfg.text_max_len
        )));
    }
    if let Some(bad) = ids.iter().find(|&&i| i >= cfg.text_vocab) {
        return Err(Error::InvalidData(format!(
            "token id {bad} outside vocabulary"
        )));
    }
    Ok(())
}

/// Encodes token sequences into `[N x D_shared]` rows, one per sequence.
///
/// Sequences of equal length share one batched pass; duplicates are encoded
/// once.
pub fn encode_texts(
    g: &mut Graph,
    p: &ParamStore,
    cfg: &EncoderConfig,
    seqs: &[Vec<usize>],
) -> Result<Var> {
    if seqs.is_empty() {
        return Err(Error::Empty("text batch"));
    }
    let mut unique: Vec<&[usize]> = Vec::new();
    let mut slot_of: HashMap<&[usize], usize> = HashMap::new();
    let mut order = Vec::with_capacity(seqs.len());
    for s in seqs {
        check_sequence(s, cfg)?;
        let next = unique.len();
        let slot = *slot_of.entry(s.as_slice()).or_insert(next);
        if slot == next {
            unique.push(s);
        }
        order.push(slot);
    }
    let mut by_len: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in unique.iter().enumerate() {
        by_len.entry(s.len()).or_default().push(i);
    }

    let tok = g.param(p, "text.token_embed")?;
    let pos = g.param(p, "text.pos_embed")?;
    let mut parts = Vec::new();
    let mut row_of = vec![0; unique.len()];
    let mut offset = 0;
    for (&len, members) in &by_len {
        let n = members.len();
        let ids: Vec<usize> = members
            .iter()
            .flat_map(|&i| unique[i].iter().copied())
            .collect();
        let pos_idx: Vec<usize> = (0..n).flat_map(|_| 0..len).collect();
        let e = g.gather_rows(tok, &ids);
        let pe = g.gather_rows(pos, &pos_idx);
        let mut x = g.add(e, pe);
        let keep = vec![false; n];
        for b in 0..cfg.text_depth {
            x = layers::block(g, p, &format!("text.blocks.{b}"), x, cfg.text_heads, &keep)?;
        }
        let eos_rows: Vec<usize> = (0..n).map(|k| k * len + len - 1).collect();
        let eos = g.gather_rows(x, &eos_rows);
        let eos = layers::layer_norm(g, p, "text.ln_final", eos)?;
        parts.push(layers::linear(g, p, "text.proj", eos)?);
        for (k, &i) in members.iter().enumerate() {
            row_of[i] = offset + k;
        }
        offset += n;
    }
    let stacked = if parts.len() == 1 {
        parts[0]
    } else {
        g.concat_rows(&parts)
    };
    let idx: Vec<usize> = order.iter().map(|&u| row_of[u]).collect();
    let out = if idx.iter().enumerate().all(|(i, &r)| i == r) && idx.len() == offset {
        stacked
    } else {
        g.gather_rows(stacked, &idx)
    };
    if !g.value(out).is_finite() {
        return Err(Error::Numerical("non-finite text embeddings".into()));
    }
    Ok(out)
}

/// Eval-mode embeddings of raw strings.
pub fn text_embeddings(
    p: &ParamStore,
    cfg: &EncoderConfig,
    vocab: &Vocabulary,
    texts: &[&str],
) -> Result<Vec<TextEmbedding>> {
    let seqs: Vec<Vec<usize>> = texts
        .iter()
        .map(|t| vocab.encode(t, cfg.text_max_len))
        .collect();
    let mut g = Graph::new();
    let out = encode_texts(&mut g, p, cfg, &seqs)?;
    let v = g.value(out);
    Ok(texts
        .iter()
        .enumerate()
        .map(|(i, t)| TextEmbedding {
            embedding: v.row(i).to_vec(),
            source_text: t.to_string(),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (EncoderConfig, ParamStore, Vocabulary) {
        let vocab = Vocabulary::build(["a photo of a red blue circle square big small"]);
        let cfg = EncoderConfig {
            text_width: 8,
            text_heads: 2,
            text_mlp_dim: 16,
            text_vocab: vocab.len(),
            ..EncoderConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = ParamStore::new();
        init_text_encoder(&mut p, &mut rng, &cfg).unwrap();
        (cfg, p, vocab)
    }

    #[test]
    fn different_strings_differ_and_repeat_is_identical() {
        let (cfg, p, vocab) = setup();
        let e = text_embeddings(
            &p,
            &cfg,
            &vocab,
            &["red circle", "blue square", "red circle"],
        )
        .unwrap();
        assert_ne!(e[0].embedding, e[1].embedding);
        assert_eq!(e[0].embedding, e[2].embedding);
        let again = text_embeddings(&p, &cfg, &vocab, &["red circle"]).unwrap();
        assert_eq!(again[0].embedding, e[0].embedding);
    }

    #[test]
    fn batching_matches_single_encoding() {
        let (cfg, p, vocab) = setup();
        let texts = [
            "a big red circle",
            "blue square",
            "small circle",
            "a photo of a red square",
        ];
        let batch = text_embeddings(&p, &cfg, &vocab, &texts).unwrap();
        for (t, b) in texts.iter().zip(&batch) {
            let single = text_embeddings(&p, &cfg, &vocab, &[t]).unwrap();
            let diff = single[0]
                .embedding
                .iter()
                .zip(&b.embedding)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
            assert!(diff < 1e-12, "{t}: {diff}");
        }
    }

    #[test]
    fn long_input_truncates_without_error() {
        let (cfg, p, vocab) = setup();
        let long = ["red"; 20].join(" ");
        let ids = vocab.encode(&long, cfg.text_max_len);
        assert_eq!(ids.len(), 16);
        assert!(text_embeddings(&p, &cfg, &vocab, &[&long]).is_ok());
    }

    #[test]
    fn missing_eos_is_error() {
        let (cfg, p, _) = setup();
        let mut g = Graph::new();
        assert!(matches!(
            encode_texts(&mut g, &p, &cfg, &[vec![3, 4]]),
            Err(Error::InvalidData(_))
        ));
    }

    #[test]
    fn text_encoder_gradcheck() {
        let (cfg, mut p, vocab) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (_, t) in p.iter_mut() {
            for v in t.data_mut() {
                *v += 0.05 * rng.random_range(-1.0..1.0);
            }
        }
        let seqs = vec![
            vocab.encode("red circle", 16),
            vocab.encode("a blue square", 16),
        ];
        let probe = init::normal(&mut rng, &[2, 8], 1.0);
        let res = gradcheck::check_params(&p, 1e-5, |g, p| {
            let y = encode_texts(g, p, &cfg, &seqs).unwrap();
            let w = g.constant(probe.clone());
            let prod = g.mul(y, w);
            g.sum(prod)
        });
        assert!(res.max_rel_err <= 1e-4, "{res:?}");
    }
}
