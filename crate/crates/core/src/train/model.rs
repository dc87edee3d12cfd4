use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::fusion::FusionHead;
use crate::image::ImageEncoder;
use crate::params::{Bound, ParamSet};
use crate::tensor::{Graph, Tensor, Var};
use crate::text::{TextEncoder, TokenBatch, Vocabulary};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

const RESERVED_TOKENS: usize = 4;

/// Image encoder, text encoder and fusion head with their weights and vocabulary.
#[derive(Debug, Clone)]
pub struct RatingModel {
    cfg: ModelConfig,
    image: ImageEncoder,
    text: TextEncoder,
    head: FusionHead,
    vocab: Vocabulary,
    pub params: ParamSet,
}

impl RatingModel {
    /// Fresh weights drawn from `seed`.
    pub fn new(cfg: &ModelConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (image, text, head) = Self::modules(cfg)?;
        let mut params = image.init_params(&mut rng);
        params.extend(text.init_params(&mut rng))?;
        params.extend(head.init_params(&mut rng))?;
        Self::check_vocab(cfg, &vocab)?;
        Ok(Self {
            cfg: cfg.clone(),
            image,
            text,
            head,
            vocab,
            params,
        })
    }

    /// Vocabulary sized for `cfg` from the given texts.
    pub fn build_vocab<'a>(cfg: &ModelConfig, texts: impl IntoIterator<Item = &'a str>) -> Vocabulary {
        Vocabulary::from_corpus(texts, cfg.text.vocab_size.saturating_sub(RESERVED_TOKENS))
    }

    /// Reassemble from stored weights; the names and shapes must match the
    /// architecture exactly.
    pub fn from_parts(cfg: &ModelConfig, vocab: Vocabulary, params: ParamSet) -> Result<Self> {
        let expected = Self::expected_shapes(cfg)?;
        let got: BTreeMap<String, Vec<usize>> = params.iter().map(|(k, t)| (k.to_string(), t.shape().to_vec())).collect();
        if let Some(k) = expected.keys().find(|k| !got.contains_key(*k)) {
            return Err(Error::Checkpoint(format!("missing weight `{k}`")));
        }
        if let Some(k) = got.keys().find(|k| !expected.contains_key(*k)) {
            return Err(Error::Checkpoint(format!("unexpected weight `{k}`")));
        }
        for (k, shape) in &expected {
            if &got[k] != shape {
                return Err(Error::Checkpoint(format!("weight `{k}` has shape {:?}, expected {shape:?}", got[k])));
            }
        }
        let (image, text, head) = Self::modules(cfg)?;
        Self::check_vocab(cfg, &vocab)?;
        Ok(Self {
            cfg: cfg.clone(),
            image,
            text,
            head,
            vocab,
            params,
        })
    }

    fn modules(cfg: &ModelConfig) -> Result<(ImageEncoder, TextEncoder, FusionHead)> {
        cfg.validate()?;
        Ok((
            ImageEncoder::new(cfg.image.clone())?,
            TextEncoder::new(cfg.text.clone())?,
            FusionHead::new(cfg.fusion.clone())?,
        ))
    }

    fn check_vocab(cfg: &ModelConfig, vocab: &Vocabulary) -> Result<()> {
        if vocab.len() > cfg.text.vocab_size {
            return Err(Error::Config(format!(
                "vocabulary has {} tokens but the embedding table holds {}",
                vocab.len(),
                cfg.text.vocab_size
            )));
        }
        Ok(())
    }

    /// Parameter names and shapes for `cfg`.
    pub fn expected_shapes(cfg: &ModelConfig) -> Result<BTreeMap<String, Vec<usize>>> {
        let (image, text, head) = Self::modules(cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut out = BTreeMap::new();
        for p in [image.init_params(&mut rng), text.init_params(&mut rng), head.init_params(&mut rng)] {
            for (k, t) in p.iter() {
                out.insert(k.to_string(), t.shape().to_vec());
            }
        }
        Ok(out)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn image_encoder(&self) -> &ImageEncoder {
        &self.image
    }

    pub fn text_encoder(&self) -> &TextEncoder {
        &self.text
    }

    pub fn tokens<S: AsRef<str>>(&self, texts: &[S]) -> Result<TokenBatch> {
        TokenBatch::encode(texts.iter().map(AsRef::as_ref), &self.vocab, self.cfg.text.max_len)
    }

    /// Stack `[3, S, S]` images into one `[B, 3, S, S]` tensor.
    pub fn stack_images(&self, images: &[&Tensor]) -> Result<Tensor> {
        let s = self.cfg.image.input_size;
        let mut data = Vec::with_capacity(images.len() * 3 * s * s);
        for img in images {
            if img.shape() != [3, s, s] {
                return Err(Error::dim("stack_images", format!("expected [3, {s}, {s}], got {:?}", img.shape())));
            }
            data.extend_from_slice(img.data());
        }
        Tensor::new(vec![images.len(), 3, s, s], data)
    }

    /// Predictions `[B, 1]` on the training scale.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        p: &Bound,
        images: Var,
        tokens: &TokenBatch,
        train: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let v = self.image.forward(g, p, images)?;
        let t = self.text.forward(g, p, tokens)?;
        self.head.forward(g, p, v, t, train, rng)
    }

    /// Evaluation-mode predictions on the training scale.
    pub fn predict_scaled<S: AsRef<str>>(&self, images: &[&Tensor], texts: &[S]) -> Result<Vec<f64>> {
        if images.len() != texts.len() {
            return Err(Error::Contract(format!("{} images but {} texts", images.len(), texts.len())));
        }
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(self.stack_images(images)?);
        let tokens = self.tokens(texts)?;
        // dropout is off in eval mode, so this RNG is never drawn from
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let y = self.forward(&mut g, &p, x, &tokens, false, &mut rng)?;
        Ok(g.value(y).data().to_vec())
    }

    /// Evaluation-mode ratings on the original 1..5 scale.
    pub fn predict<S: AsRef<str>>(&self, images: &[&Tensor], texts: &[S]) -> Result<Vec<f64>> {
        let scale = self.cfg.target_scale;
        Ok(self.predict_scaled(images, texts)?.into_iter().map(|y| scale.inverse(y)).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::FusionConfig;
    use crate::image::ImageEncoderConfig;
    use crate::text::TextEncoderConfig;

    pub(crate) fn tiny() -> ModelConfig {
        let mut c = ModelConfig::desk();
        c.image = ImageEncoderConfig {
            input_size: 32,
            stem_channels: 4,
            stage_channels: [4, 8, 8],
            embed_dim: 8,
            expand_ratio: 2,
            ..ImageEncoderConfig::desk()
        };
        c.text = TextEncoderConfig {
            vocab_size: 32,
            width: 8,
            layers: 1,
            heads: 2,
            max_len: 8,
            output_dim: 8,
            ffn_mult: 2,
            ..TextEncoderConfig::desk()
        };
        c.fusion = FusionConfig {
            embed_dim: 8,
            hidden_dim: 8,
            ..FusionConfig::desk()
        };
        c
    }

    #[test]
    fn predicts_one_value_per_sample() {
        let cfg = tiny();
        let vocab = RatingModel::build_vocab(&cfg, ["good login screen", "bad map"]);
        let m = RatingModel::new(&cfg, vocab, 1).unwrap();
        let img = Tensor::zeros(&[3, 32, 32]);
        let out = m.predict(&[&img, &img], &["good login", "bad map"]).unwrap();
        assert_eq!(out.len(), 2);
        assert!(out.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn from_parts_checks_names_and_shapes() {
        let cfg = tiny();
        let vocab = RatingModel::build_vocab(&cfg, ["a b c"]);
        let m = RatingModel::new(&cfg, vocab.clone(), 1).unwrap();
        RatingModel::from_parts(&cfg, vocab.clone(), m.params.clone()).unwrap();
        let mut extra = m.params.clone();
        extra.insert("rogue.weight", Tensor::zeros(&[1]));
        assert!(matches!(
            RatingModel::from_parts(&cfg, vocab.clone(), extra),
            Err(Error::Checkpoint(_))
        ));
        let mut bad = m.params.clone();
        bad.insert("head.out.bias", Tensor::zeros(&[2]));
        assert!(RatingModel::from_parts(&cfg, vocab, bad).is_err());
    }

    #[test]
    fn mismatched_inputs_rejected() {
        let cfg = tiny();
        let m = RatingModel::new(&cfg, RatingModel::build_vocab(&cfg, ["x"]), 1).unwrap();
        let img = Tensor::zeros(&[3, 16, 16]);
        assert!(m.predict(&[&img], &["x"]).is_err());
        let img = Tensor::zeros(&[3, 32, 32]);
        assert!(m.predict(&[&img], &["x", "y"]).is_err());
    }
}
