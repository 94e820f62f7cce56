//! Normal / abnormal / stateless prompt construction and embedding.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use crate::backbone::Backbone;
use crate::config::PromptConfig;
use crate::error::{AfrError, Result};
use crate::numeric::FeatureVector;
use crate::params::Linear;

pub const PLACEHOLDER: &str = "{c}";

const STATE_WORDS: &[&str] = &[
    "normal",
    "abnormal",
    "defective",
    "anomalous",
    "damaged",
    "flawless",
    "perfect",
    "broken",
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTriplet {
    pub class_name: String,
    pub normal: String,
    pub abnormal: String,
    pub stateless: String,
}

/// Lowercases, trims, and turns `_`/`-` separators into spaces (`metal_nut` → `metal nut`).
pub fn normalize_class_name(name: &str) -> String {
    name.trim()
        .to_lowercase()
        .replace(['_', '-'], " ")
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

fn instantiate(template: &str, class_name: &str, which: &str) -> Result<String> {
    match template.matches(PLACEHOLDER).count() {
        1 => Ok(template.replace(PLACEHOLDER, class_name)),
        0 => Err(AfrError::Config(format!(
            "{which} prompt template {template:?} has no {PLACEHOLDER} placeholder"
        ))),
        _ => Err(AfrError::Config(format!(
            "{which} prompt template {template:?} repeats the {PLACEHOLDER} placeholder"
        ))),
    }
}

pub fn build_prompt_triplet(class_name: &str, templates: &PromptConfig) -> Result<PromptTriplet> {
    let class_name = normalize_class_name(class_name);
    if class_name.is_empty() {
        return Err(AfrError::Config("class name must not be empty".into()));
    }
    let stateless_words: Vec<String> = templates
        .stateless
        .replace(PLACEHOLDER, " ")
        .split_whitespace()
        .map(str::to_lowercase)
        .collect();
    if let Some(w) = stateless_words.iter().find(|w| STATE_WORDS.contains(&w.as_str())) {
        return Err(AfrError::Config(format!(
            "stateless prompt template carries the state word {w:?}"
        )));
    }
    Ok(PromptTriplet {
        normal: instantiate(&templates.normal, &class_name, "normal")?,
        abnormal: instantiate(&templates.abnormal, &class_name, "abnormal")?,
        stateless: instantiate(&templates.stateless, &class_name, "stateless")?,
        class_name,
    })
}

/// Text-encoder outputs for one triplet, before the adapter.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTextEmbeddings {
    pub normal: FeatureVector,
    pub abnormal: FeatureVector,
    pub stateless: FeatureVector,
}

/// Adapted prompt embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbeddings {
    pub f_n: FeatureVector,
    pub f_a: FeatureVector,
    pub f_s: FeatureVector,
}

pub fn encode_triplet(backbone: &Backbone, triplet: &PromptTriplet) -> Result<RawTextEmbeddings> {
    Ok(RawTextEmbeddings {
        normal: backbone.encode_text(&triplet.normal)?,
        abnormal: backbone.encode_text(&triplet.abnormal)?,
        stateless: backbone.encode_text(&triplet.stateless)?,
    })
}

pub fn adapt(raw: &RawTextEmbeddings, adapter: &Linear) -> Result<TextEmbeddings> {
    let apply = |v: &FeatureVector| -> Result<FeatureVector> {
        FeatureVector::from_row(adapter.apply(&v.to_row())?.view())
    };
    Ok(TextEmbeddings {
        f_n: apply(&raw.normal)?,
        f_a: apply(&raw.abnormal)?,
        f_s: apply(&raw.stateless)?,
    })
}

/// `f_x = adapter(encode_text(T^x))` for the three prompts.
pub fn embed_prompts(backbone: &Backbone, triplet: &PromptTriplet, adapter: &Linear) -> Result<TextEmbeddings> {
    adapt(&encode_triplet(backbone, triplet)?, adapter)
}

/// Caches raw prompt encodings per class. Entries are written once and read
/// thereafter; with a cache directory they also persist across runs.
pub struct PromptCache {
    templates: PromptConfig,
    entries: Mutex<HashMap<String, Arc<RawTextEmbeddings>>>,
    dir: Option<(PathBuf, String)>,
}

impl PromptCache {
    pub fn new(templates: PromptConfig) -> Self {
        PromptCache {
            templates,
            entries: Mutex::new(HashMap::new()),
            dir: None,
        }
    }

    /// Also persists encodings under `dir`, namespaced by `backbone_tag`.
    pub fn with_dir(mut self, dir: PathBuf, backbone_tag: String) -> Self {
        self.dir = Some((dir, backbone_tag));
        self
    }

    pub fn templates(&self) -> &PromptConfig {
        &self.templates
    }

    pub fn get(&self, backbone: &Backbone, class_name: &str) -> Result<Arc<RawTextEmbeddings>> {
        let triplet = build_prompt_triplet(class_name, &self.templates)?;
        let key = triplet.class_name.clone();
        if let Some(hit) = self.entries.lock().expect("prompt cache poisoned").get(&key) {
            return Ok(hit.clone());
        }
        let raw = match self.read_disk(&triplet)? {
            Some(raw) => raw,
            None => {
                let raw = encode_triplet(backbone, &triplet)?;
                self.write_disk(&triplet, &raw)?;
                raw
            }
        };
        let raw = Arc::new(raw);
        self.entries
            .lock()
            .expect("prompt cache poisoned")
            .entry(key)
            .or_insert(raw.clone());
        Ok(raw)
    }

    fn disk_path(&self, triplet: &PromptTriplet) -> Option<PathBuf> {
        let (dir, tag) = self.dir.as_ref()?;
        let key = format!("{tag}\n{}\n{}\n{}", triplet.normal, triplet.abnormal, triplet.stateless);
        Some(dir.join(format!("{:016x}.txt", fnv1a(key.as_bytes()))))
    }

    fn read_disk(&self, triplet: &PromptTriplet) -> Result<Option<RawTextEmbeddings>> {
        let Some(path) = self.disk_path(triplet) else { return Ok(None) };
        let Ok(text) = std::fs::read_to_string(&path) else { return Ok(None) };
        let rows: Vec<Vec<f64>> = text
            .lines()
            .map(|l| l.split_whitespace().map(str::parse).collect::<std::result::Result<_, _>>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| AfrError::Dataset(format!("corrupt prompt cache file {}", path.display())))?;
        let [n, a, s] = <[Vec<f64>; 3]>::try_from(rows)
            .map_err(|_| AfrError::Dataset(format!("corrupt prompt cache file {}", path.display())))?;
        Ok(Some(RawTextEmbeddings {
            normal: FeatureVector::new(n)?,
            abnormal: FeatureVector::new(a)?,
            stateless: FeatureVector::new(s)?,
        }))
    }

    fn write_disk(&self, triplet: &PromptTriplet, raw: &RawTextEmbeddings) -> Result<()> {
        let Some(path) = self.disk_path(triplet) else { return Ok(()) };
        let dir = path.parent().expect("cache file has a parent");
        std::fs::create_dir_all(dir).map_err(|e| AfrError::io(dir, e))?;
        let line = |v: &FeatureVector| {
            v.as_slice().iter().map(|x| format!("{x:e}")).collect::<Vec<_>>().join(" ")
        };
        let text = format!("{}\n{}\n{}\n", line(&raw.normal), line(&raw.abnormal), line(&raw.stateless));
        std::fs::write(&path, text).map_err(|e| AfrError::io(&path, e))
    }
}

/// 64-bit FNV-1a, stable across platforms and releases.
pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::numeric::cosine_similarity;

    #[test]
    fn default_triplet_for_screw() {
        let t = build_prompt_triplet("screw", &PromptConfig::default()).unwrap();
        assert_eq!(t.normal, "a photo of a normal screw");
        assert_eq!(t.abnormal, "a photo of a defective screw");
        assert_eq!(t.stateless, "a photo of a screw");
    }

    #[test]
    fn substitution_and_normalization() {
        let t = build_prompt_triplet("bottle", &PromptConfig::default()).unwrap();
        assert_eq!(t.stateless, "a photo of a bottle");
        let t = build_prompt_triplet(" Metal_Nut ", &PromptConfig::default()).unwrap();
        assert_eq!(t.class_name, "metal nut");
        assert_eq!(t.abnormal, "a photo of a defective metal nut");
        for p in [&t.normal, &t.abnormal, &t.stateless] {
            assert_eq!(p.matches("metal nut").count(), 1);
        }
    }

    #[test]
    fn template_errors() {
        let mut tpl = PromptConfig::default();
        tpl.normal = "photo".into();
        assert!(build_prompt_triplet("screw", &tpl).is_err());
        let mut tpl = PromptConfig::default();
        tpl.stateless = "a photo of a normal {c}".into();
        assert!(build_prompt_triplet("screw", &tpl).is_err());
        assert!(build_prompt_triplet("  ", &PromptConfig::default()).is_err());
    }

    #[test]
    fn identity_adapter_returns_encoder_output() {
        let bb = Backbone::surrogate(BackboneConfig::surrogate(), 0).unwrap();
        let t = build_prompt_triplet("screw", &PromptConfig::default()).unwrap();
        let e = embed_prompts(&bb, &t, &Linear::identity(32)).unwrap();
        assert_eq!(e.f_s, bb.encode_text("a photo of a screw").unwrap());
        assert_ne!(e.f_n, e.f_a);
    }

    #[test]
    fn zero_adapter_trips_the_cosine_guard() {
        let bb = Backbone::surrogate(BackboneConfig::surrogate(), 0).unwrap();
        let t = build_prompt_triplet("screw", &PromptConfig::default()).unwrap();
        let e = embed_prompts(&bb, &t, &Linear::zeros(32, 32)).unwrap();
        assert!(matches!(
            cosine_similarity(e.f_s.as_slice(), e.f_a.as_slice()),
            Err(AfrError::Degenerate(_))
        ));
    }

    #[test]
    fn state_words_move_the_embedding_for_every_test_class() {
        let bb = Backbone::surrogate(BackboneConfig::surrogate(), 0).unwrap();
        for class in ["screw", "bottle", "stripes", "checker", "blobs", "rings", "weave", "dots"] {
            let t = build_prompt_triplet(class, &PromptConfig::default()).unwrap();
            let raw = encode_triplet(&bb, &t).unwrap();
            assert_ne!(raw.normal, raw.abnormal, "{class}");
        }
    }

    #[test]
    fn disk_cache_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let bb = Backbone::surrogate(BackboneConfig::tiny(), 0).unwrap();
        let cache = PromptCache::new(PromptConfig::default()).with_dir(dir.path().into(), "tiny:0".into());
        let first = cache.get(&bb, "screw").unwrap();
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
        let fresh = PromptCache::new(PromptConfig::default()).with_dir(dir.path().into(), "tiny:0".into());
        assert_eq!(*fresh.get(&bb, "screw").unwrap(), *first);
    }
}
