//! Scene documents.
//!
//! A scene is one JSON object, either explicit:
//!
//! ```json
//! {
//!   "channels": 2, "height": 4, "width": 4,
//!   "images": [{
//!     "features": { "p3": [..], "p4": [..], "p5": [..] },
//!     "tokens": [{ "count": 2, "embeddings": [..], "valid": [true, false] }],
//!     "masks": [[0, 1, ..]],
//!     "positives": [0]
//!   }]
//! }
//! ```
//!
//! with features laid out channel, row, column (P4 and P5 at half and quarter
//! resolution), token embeddings token by token, and one row-major 0/1 mask of
//! `height * width` cells per prompt; or `{ "synth": <SceneSpec> }`.

use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use expalign::synth::generate_scene;
use expalign::{AlignmentSample, FeatureMap, InstanceMaskSet, PromptLabels, SceneSpec, TokenBatch};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneDocument {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SceneSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channels: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub images: Vec<ImageRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageRecord {
    pub features: LevelRecord,
    pub tokens: Vec<TokenRecord>,
    pub masks: Vec<Vec<u8>>,
    pub positives: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LevelRecord {
    pub p3: Vec<f64>,
    pub p4: Vec<f64>,
    pub p5: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenRecord {
    pub count: usize,
    pub embeddings: Vec<f64>,
    /// All tokens are real when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub valid: Option<Vec<bool>>,
}

impl SceneDocument {
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let field = e.path().to_string();
            anyhow!("{origin}: field `{field}`: {}", e.into_inner())
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading scene {}", path.display()))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Explicit document holding `batch`.
    pub fn from_batch(batch: &[AlignmentSample]) -> Self {
        let Some(first) = batch.first() else {
            return Self::default();
        };
        let p3 = &first.features()[0];
        let images = batch
            .iter()
            .map(|s| {
                let [a, b, c] = s.features();
                ImageRecord {
                    features: LevelRecord { p3: a.values().to_vec(), p4: b.values().to_vec(), p5: c.values().to_vec() },
                    tokens: s
                        .tokens()
                        .iter()
                        .map(|t| TokenRecord {
                            count: t.count(),
                            embeddings: t.embeddings().to_vec(),
                            valid: t.valid().iter().any(|v| !v).then(|| t.valid().to_vec()),
                        })
                        .collect(),
                    masks: (0..s.prompts())
                        .map(|p| {
                            let n = s.masks().cells();
                            (0..n).map(|i| u8::from(s.masks().contains(p, i))).collect()
                        })
                        .collect(),
                    positives: s.labels().positives().to_vec(),
                }
            })
            .collect();
        Self {
            synth: None,
            channels: Some(p3.channels()),
            height: Some(p3.height()),
            width: Some(p3.width()),
            images,
        }
    }

    pub fn to_batch(&self) -> Result<Vec<AlignmentSample>> {
        if let Some(spec) = &self.synth {
            if self.channels.is_some() || self.height.is_some() || self.width.is_some() || !self.images.is_empty() {
                bail!("a scene is either `synth` or explicit dims and images, not both");
            }
            return generate_scene(spec).context("field `synth`");
        }
        let need = |v: Option<usize>, name: &str| v.ok_or_else(|| anyhow!("field `{name}` is missing"));
        let c = need(self.channels, "channels")?;
        let h = need(self.height, "height")?;
        let w = need(self.width, "width")?;
        if self.images.is_empty() {
            bail!("field `images`: a scene needs at least one image");
        }
        self.images
            .iter()
            .enumerate()
            .map(|(b, img)| img.to_sample(c, h, w).with_context(|| format!("field `images[{b}]`")))
            .collect()
    }
}

impl ImageRecord {
    fn to_sample(&self, c: usize, h: usize, w: usize) -> Result<AlignmentSample> {
        if h % 4 != 0 || w % 4 != 0 {
            bail!("height and width must be multiples of 4, got {h}x{w}");
        }
        let levels = [(3u8, 1usize, &self.features.p3), (4, 2, &self.features.p4), (5, 4, &self.features.p5)];
        let mut maps = Vec::with_capacity(3);
        for (scale, f, values) in levels {
            let map = FeatureMap::new(scale, c, h / f, w / f, values.clone())
                .with_context(|| format!("field `features.p{scale}`"))?;
            maps.push(map);
        }
        let features: [FeatureMap; 3] = maps.try_into().map_err(|_| anyhow!("three feature levels"))?;
        let prompts = self.tokens.len();
        let tokens = self
            .tokens
            .iter()
            .enumerate()
            .map(|(p, t)| {
                let valid = t.valid.clone().unwrap_or_else(|| vec![true; t.count]);
                TokenBatch::new(t.count, c, t.embeddings.clone(), valid).with_context(|| format!("field `tokens[{p}]`"))
            })
            .collect::<Result<Vec<_>>>()?;
        if self.masks.len() != prompts {
            bail!("field `masks`: {} masks for {prompts} prompts", self.masks.len());
        }
        let mut raw = Vec::with_capacity(prompts * h * w);
        for (p, m) in self.masks.iter().enumerate() {
            if m.len() != h * w {
                bail!("field `masks[{p}]`: {} cells, expected {}", m.len(), h * w);
            }
            if let Some(j) = m.iter().position(|&v| v > 1) {
                bail!("field `masks[{p}][{j}]`: mask entries must be 0 or 1, got {}", m[j]);
            }
            raw.extend_from_slice(m);
        }
        let masks = InstanceMaskSet::from_binary(prompts, h, w, &raw).context("field `masks`")?;
        let labels = PromptLabels::new(prompts, self.positives.clone()).context("field `positives`")?;
        Ok(AlignmentSample::new(features, tokens, masks, labels)?)
    }
}

/// Scene at `path`, or the synthetic benchmark scene for `seed` and `signal`.
pub fn load_batch(path: Option<&Path>, seed: u64, signal: f64) -> Result<Vec<AlignmentSample>> {
    match path {
        Some(p) => SceneDocument::load(p)?.to_batch().with_context(|| format!("scene {}", p.display())),
        None => Ok(generate_scene(&SceneSpec::benchmark(seed, signal))?),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: &str = r#"{
  "channels": 1, "height": 4, "width": 4,
  "images": [{
    "features": { "p3": [0,1,2,3,4,5,6,7,8,9,10,11,12,13,14,15], "p4": [1,2,3,4], "p5": [1] },
    "tokens": [{ "count": 1, "embeddings": [1] }, { "count": 2, "embeddings": [1, -1], "valid": [true, false] }],
    "masks": [[1,1,0,0,1,1,0,0,0,0,0,0,0,0,0,0], [0,0,0,0,0,0,0,0,0,0,0,0,0,0,0,0]],
    "positives": [0]
  }]
}"#;

    #[test]
    fn explicit_scene_round_trips() {
        let doc = SceneDocument::parse(SMALL, "small").unwrap();
        let batch = doc.to_batch().unwrap();
        assert_eq!(batch.len(), 1);
        assert_eq!(batch[0].masks().area(0), 4);
        assert_eq!(batch[0].tokens()[1].valid(), &[true, false]);
        let again = SceneDocument::from_batch(&batch);
        assert_eq!(again.to_batch().unwrap(), batch);
    }

    #[test]
    fn synth_scene_matches_generator() {
        let spec = SceneSpec::benchmark(3, 1.0);
        let doc = SceneDocument { synth: Some(spec.clone()), ..SceneDocument::default() };
        let text = serde_json::to_string(&doc).unwrap();
        let batch = SceneDocument::parse(&text, "synth").unwrap().to_batch().unwrap();
        assert_eq!(batch, generate_scene(&spec).unwrap());
    }

    #[test]
    fn errors_carry_field_context() {
        let broken = SMALL.replace("\"positives\": [0]", "\"positives\": [\"a\"]");
        let err = SceneDocument::parse(&broken, "s").unwrap_err().to_string();
        assert!(err.contains("images[0].positives"), "{err}");
        assert!(err.contains("line"), "{err}");

        let short = SMALL.replace("\"p4\": [1,2,3,4]", "\"p4\": [1,2,3]");
        let err = format!("{:#}", SceneDocument::parse(&short, "s").unwrap().to_batch().unwrap_err());
        assert!(err.contains("images[0]") && err.contains("features.p4"), "{err}");

        let bad_mask = SMALL.replace("[1,1,0,0,1,1", "[2,1,0,0,1,1");
        let err = format!("{:#}", SceneDocument::parse(&bad_mask, "s").unwrap().to_batch().unwrap_err());
        assert!(err.contains("masks[0][0]"), "{err}");

        let err = format!("{:#}", SceneDocument::parse("{}", "s").unwrap().to_batch().unwrap_err());
        assert!(err.contains("channels"), "{err}");
    }
}
