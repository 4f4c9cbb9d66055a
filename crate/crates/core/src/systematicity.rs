//! Systematicity scores for error patches.
//!
//! For a query error patch `p` with neighborhood `N` among the class's error
//! patches:
//!
//! * `sigma1`: mean cosine between the text embedding of p's caption and the
//!   image embeddings of `N` (joint space, cross-modal);
//! * `sigma2`: mean cosine between the sentence embedding of p's caption and
//!   those of the neighbors' captions;
//! * `sigma3`: cosine between p's caption sentence embedding and that of the
//!   class prompt;
//! * `omega`: 1 when `sigma1 + sigma2 - sigma3 >= alpha`.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::index::{cosine, knn, EmbeddingMatrix};
use crate::oracle::{EmbeddingVector, OracleClient, SpaceFamily, SpaceId};
use crate::patch::SemanticClass;

pub const DEFAULT_PROMPT_TEMPLATE: &str = "the concept of one or many {class}";
pub const DEFAULT_ALPHA: f64 = 0.35;
pub const DEFAULT_Q: usize = 3;

/// Absorbs rounding when a margin that is exactly `alpha` in decimal
/// arithmetic lands a few ulps below it in binary.
pub const BOUNDARY_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassPrompt {
    pub class: SemanticClass,
    pub text: String,
}

impl ClassPrompt {
    /// Substitutes the class prompt name for `{class}` in `template`.
    pub fn new(class: &SemanticClass, template: &str) -> Self {
        ClassPrompt {
            class: class.clone(),
            text: template.replace("{class}", class.prompt_name()),
        }
    }
}

fn mean_cosine(query: &EmbeddingVector, neighbors: &[EmbeddingVector]) -> Result<f64> {
    if neighbors.is_empty() {
        return Err(Error::EmptyNeighborhood);
    }
    let mut sum = 0.0;
    for n in neighbors {
        sum += cosine(query, n)?;
    }
    Ok(sum / neighbors.len() as f64)
}

fn require_space(v: &EmbeddingVector, family: SpaceFamily, want: &str) -> Result<()> {
    if v.space_id.family() == family {
        Ok(())
    } else {
        Err(Error::SpaceMismatch {
            left: want.to_string(),
            right: v.space_id.to_string(),
        })
    }
}

/// Mean joint-space cosine between the query vector and neighbor image
/// embeddings.
pub fn sigma1(query: &EmbeddingVector, neighbor_images: &[EmbeddingVector]) -> Result<f64> {
    require_space(query, SpaceFamily::Joint, "joint")?;
    for n in neighbor_images {
        if n.space_id != SpaceId::JointImage {
            return Err(Error::SpaceMismatch {
                left: SpaceId::JointImage.to_string(),
                right: n.space_id.to_string(),
            });
        }
    }
    mean_cosine(query, neighbor_images)
}

pub fn sigma2(query_sentence: &EmbeddingVector, neighbor_sentences: &[EmbeddingVector]) -> Result<f64> {
    require_space(query_sentence, SpaceFamily::Sentence, "sentence")?;
    for n in neighbor_sentences {
        require_space(n, SpaceFamily::Sentence, "sentence")?;
    }
    mean_cosine(query_sentence, neighbor_sentences)
}

pub fn sigma3(query_sentence: &EmbeddingVector, prompt_sentence: &EmbeddingVector) -> Result<f64> {
    require_space(query_sentence, SpaceFamily::Sentence, "sentence")?;
    require_space(prompt_sentence, SpaceFamily::Sentence, "sentence")?;
    cosine(query_sentence, prompt_sentence)
}

pub fn omega(s1: f64, s2: f64, s3: f64, alpha: f64) -> u8 {
    u8::from(s1 + s2 - s3 >= alpha - BOUNDARY_EPS)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SigmaTerm {
    Sigma1,
    Sigma2,
    Sigma3,
}

/// Per-term rescaling applied before the decision, for embedding spaces
/// whose cosine ranges differ.
pub trait Calibration: Send + Sync {
    fn apply(&self, term: SigmaTerm, raw: f64) -> f64;
}

#[derive(Clone, Copy, Debug, Default)]
pub struct Identity;

impl Calibration for Identity {
    fn apply(&self, _term: SigmaTerm, raw: f64) -> f64 {
        raw
    }
}

/// Which joint-space vector stands for the query patch in `sigma1`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sigma1Query {
    /// Text embedding of the query caption.
    #[default]
    CaptionText,
    /// Image embedding of the query patch itself.
    QueryImage,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystematicityScore {
    pub patch_id: String,
    pub neighbor_ids: Vec<String>,
    pub sigma1: f64,
    pub sigma2: f64,
    pub sigma3: f64,
    pub omega: u8,
    pub alpha: f64,
    pub caption: String,
}

impl SystematicityScore {
    pub fn margin(&self) -> f64 {
        self.sigma1 + self.sigma2 - self.sigma3
    }

    pub fn is_systematic(&self) -> bool {
        self.omega == 1
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SystematicSet {
    pub alpha: f64,
    pub q: usize,
    pub systematic_patch_ids: Vec<String>,
}

impl SystematicSet {
    pub fn from_scores(scores: &[SystematicityScore], alpha: f64, q: usize) -> Self {
        let mut ids: Vec<String> = scores
            .iter()
            .filter(|s| s.is_systematic())
            .map(|s| s.patch_id.clone())
            .collect();
        ids.sort();
        SystematicSet {
            alpha,
            q,
            systematic_patch_ids: ids,
        }
    }
}

/// Text-side oracles needed for scoring.
pub trait TextEncoders: Sync {
    fn embed_text(&self, text: &str) -> Result<EmbeddingVector>;
    fn encode_sentence(&self, text: &str) -> Result<EmbeddingVector>;
}

impl TextEncoders for OracleClient {
    fn embed_text(&self, text: &str) -> Result<EmbeddingVector> {
        OracleClient::embed_text(self, text).map_err(|e| Error::oracle("embed_text", e))
    }

    fn encode_sentence(&self, text: &str) -> Result<EmbeddingVector> {
        OracleClient::encode_sentence(self, text).map_err(|e| Error::oracle("encode_sentence", e))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoreParams {
    pub q: usize,
    pub alpha: f64,
    pub sigma1_query: Sigma1Query,
}

impl Default for ScoreParams {
    fn default() -> Self {
        ScoreParams {
            q: DEFAULT_Q,
            alpha: DEFAULT_ALPHA,
            sigma1_query: Sigma1Query::default(),
        }
    }
}

/// Everything shared across the patches of one class.
pub struct ScoreContext<'a> {
    pub index: &'a EmbeddingMatrix,
    /// Patch id to trimmed caption, for every indexed patch.
    pub captions: &'a BTreeMap<String, String>,
    pub prompt_embedding: EmbeddingVector,
    pub encoders: &'a dyn TextEncoders,
    pub calibration: &'a dyn Calibration,
    pub params: ScoreParams,
}

impl<'a> ScoreContext<'a> {
    /// Embeds the class prompt once.
    pub fn new(
        index: &'a EmbeddingMatrix,
        captions: &'a BTreeMap<String, String>,
        prompt: &ClassPrompt,
        encoders: &'a dyn TextEncoders,
        calibration: &'a dyn Calibration,
        params: ScoreParams,
    ) -> Result<Self> {
        Ok(ScoreContext {
            index,
            captions,
            prompt_embedding: encoders.encode_sentence(&prompt.text)?,
            encoders,
            calibration,
            params,
        })
    }

    fn caption(&self, id: &str) -> Result<&str> {
        self.captions
            .get(id)
            .map(String::as_str)
            .ok_or_else(|| Error::Config(format!("no caption for error patch {id}")))
    }
}

pub fn score_patch(patch_id: &str, ctx: &ScoreContext<'_>, class: &SemanticClass) -> Result<SystematicityScore> {
    if ctx.index.len() == 1 {
        return Err(Error::SingletonErrorSet {
            class: class.name.clone(),
        });
    }
    let neighbors = knn(ctx.index, patch_id, ctx.params.q)?;
    let caption = ctx.caption(patch_id)?;

    let query_joint = match ctx.params.sigma1_query {
        Sigma1Query::CaptionText => ctx.encoders.embed_text(caption)?,
        Sigma1Query::QueryImage => ctx
            .index
            .vector(patch_id)
            .ok_or_else(|| Error::UnknownQueryId(patch_id.to_string()))?,
    };
    let neighbor_images: Vec<EmbeddingVector> = neighbors
        .neighbor_ids
        .iter()
        .map(|id| ctx.index.vector(id).ok_or_else(|| Error::UnknownQueryId(id.clone())))
        .collect::<Result<_>>()?;
    let query_sentence = ctx.encoders.encode_sentence(caption)?;
    let neighbor_sentences: Vec<EmbeddingVector> = neighbors
        .neighbor_ids
        .iter()
        .map(|id| ctx.encoders.encode_sentence(ctx.caption(id)?))
        .collect::<Result<_>>()?;

    let cal = |term, v: f64| ctx.calibration.apply(term, v).clamp(-1.0, 1.0);
    let s1 = cal(SigmaTerm::Sigma1, sigma1(&query_joint, &neighbor_images)?);
    let s2 = cal(SigmaTerm::Sigma2, sigma2(&query_sentence, &neighbor_sentences)?);
    let s3 = cal(SigmaTerm::Sigma3, sigma3(&query_sentence, &ctx.prompt_embedding)?);
    Ok(SystematicityScore {
        patch_id: patch_id.to_string(),
        neighbor_ids: neighbors.neighbor_ids,
        sigma1: s1,
        sigma2: s2,
        sigma3: s3,
        omega: omega(s1, s2, s3, ctx.params.alpha),
        alpha: ctx.params.alpha,
        caption: caption.to_string(),
    })
}

/// Scores every indexed patch, in patch id order.
pub fn score_all(ctx: &ScoreContext<'_>, class: &SemanticClass) -> Result<Vec<SystematicityScore>> {
    ctx.index
        .ids
        .par_iter()
        .map(|id| score_patch(id, ctx, class))
        .collect()
}
