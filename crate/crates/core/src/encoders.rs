//! Frozen stand-ins for the vision and text encoders: a fixed seeded scene
//! projection and seeded word vectors, never trained.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{vec_mat_acc, RngStream, Tensor};

const TEXT_TAG: u64 = 0x7e57;
const SCENE_TAG: u64 = 0x5ce7e;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub seed: u64,
    /// Length of the raw occupancy vector fed to the scene projection.
    pub raw_dim: usize,
    pub scene_dim: usize,
    pub text_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            seed: 0x0e90_5eed,
            raw_dim: crate::synth_env::RAW_FEATURE_DIM,
            scene_dim: 64,
            text_dim: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrozenEncoders {
    cfg: EncoderConfig,
    scene_proj: Tensor,
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl FrozenEncoders {
    pub fn new(cfg: EncoderConfig) -> Result<Self> {
        if cfg.raw_dim == 0 || cfg.scene_dim == 0 || cfg.text_dim == 0 {
            return Err(Error::Config(format!("encoder dims must be positive: {cfg:?}")));
        }
        // occupancy vectors are sparse; scale for roughly unit-variance outputs
        let scene_scale = (3.0 / 40.0f64).sqrt();
        Ok(Self {
            cfg,
            scene_proj: Tensor::uniform(
                &[cfg.raw_dim, cfg.scene_dim],
                scene_scale,
                &mut RngStream::new(cfg.seed, SCENE_TAG),
            ),
        })
    }

    pub fn config(&self) -> EncoderConfig {
        self.cfg
    }

    pub fn project_scene(&self, raw: &[f64]) -> Result<Vec<f64>> {
        if raw.len() != self.cfg.raw_dim {
            return Err(Error::Dimension(format!(
                "raw scene vector [{}], expected [{}]",
                raw.len(),
                self.cfg.raw_dim
            )));
        }
        let mut out = vec![0.0; self.cfg.scene_dim];
        vec_mat_acc(raw, self.scene_proj.data(), self.cfg.scene_dim, &mut out);
        Ok(out)
    }

    /// Fixed random unit-variance vector for one lowercase word.
    pub fn word_vector(&self, word: &str) -> Vec<f64> {
        let mut rng = RngStream::new(self.cfg.seed ^ TEXT_TAG, fnv1a(word));
        let a = 3.0f64.sqrt();
        (0..self.cfg.text_dim).map(|_| a * (2.0 * rng.next_f64() - 1.0)).collect()
    }

    /// Sum of word vectors scaled by `1/sqrt(n)` over the alphanumeric/underscore words of `text`.
    pub fn embed_text(&self, text: &str) -> Vec<f64> {
        let lower = text.to_lowercase();
        let words: Vec<&str> = lower
            .split(|c: char| !(c.is_alphanumeric() || c == '_'))
            .filter(|w| !w.is_empty())
            .collect();
        let mut out = vec![0.0; self.cfg.text_dim];
        if words.is_empty() {
            return out;
        }
        for w in &words {
            for (o, v) in out.iter_mut().zip(self.word_vector(w)) {
                *o += v;
            }
        }
        let n = (words.len() as f64).sqrt();
        out.iter_mut().for_each(|o| *o /= n);
        out
    }

    /// `[scene_feat; text_emb]`, the conditioning input of either model.
    pub fn joint(&self, scene_feat: &[f64], text_emb: &[f64]) -> Result<Vec<f64>> {
        if scene_feat.len() != self.cfg.scene_dim || text_emb.len() != self.cfg.text_dim {
            return Err(Error::Dimension(format!(
                "scene [{}] / text [{}], expected [{}] / [{}]",
                scene_feat.len(),
                text_emb.len(),
                self.cfg.scene_dim,
                self.cfg.text_dim
            )));
        }
        Ok([scene_feat, text_emb].concat())
    }

    /// Query-conditioned multimodal embedding; the same layout as [`Self::joint`].
    pub fn f_emb(&self, scene_feat: &[f64], query_emb: &[f64]) -> Result<Vec<f64>> {
        self.joint(scene_feat, query_emb)
    }

    /// Width of both the stage-1 context and `f_emb`.
    pub fn context_dim(&self) -> usize {
        self.cfg.scene_dim + self.cfg.text_dim
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn enc() -> FrozenEncoders {
        FrozenEncoders::new(EncoderConfig::default()).unwrap()
    }

    #[test]
    fn deterministic_and_shaped() {
        let a = enc();
        let b = enc();
        assert_eq!(a, b);
        assert_eq!(a.embed_text("Segment the mug."), b.embed_text("segment THE mug"));
        assert_eq!(a.embed_text("").len(), 32);
        let raw = vec![0.5; a.config().raw_dim];
        assert_eq!(a.project_scene(&raw).unwrap().len(), 64);
        assert!(a.project_scene(&raw[1..]).is_err());
        let f = a.f_emb(&vec![0.1; 64], &vec![0.2; 32]).unwrap();
        assert_eq!(f.len(), a.context_dim());
        assert!(a.f_emb(&vec![0.1; 63], &vec![0.2; 32]).is_err());
    }

    #[test]
    fn distinct_words_differ() {
        let e = enc();
        assert_ne!(e.word_vector("mug"), e.word_vector("bowl"));
        assert_ne!(e.embed_text("segment the mug"), e.embed_text("segment the bowl"));
    }
}
