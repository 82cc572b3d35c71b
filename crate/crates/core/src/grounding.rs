//! Word and phrase grounding, caption category matching, and caption-driven detection.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::bundle::FeatureBundle;
use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::expand::{build_object_set, object_heatmap, Heatmap, HeatmapKind, ObjectSet};
use crate::geometry::{BoxPx, Detection};
use crate::gradcam::{
    compute_initial_seed, gradcam_scores, select_potential_seeds, GradCamMap, InitialSeed, SeedSet,
};
use crate::segment::{segment, Segmentation};

/// Intermediate products of the single-word pipeline.
#[derive(Debug, Clone)]
pub struct WordHeatmap {
    pub gradcam: GradCamMap,
    pub seeds: SeedSet,
    pub initial_seed: InitialSeed,
    pub object: ObjectSet,
    pub heatmap: Heatmap,
}

/// Seed selection and expansion for one caption token.
pub fn word_heatmap(bundle: &FeatureBundle, token_index: usize, cfg: &PipelineConfig) -> Result<WordHeatmap> {
    let token = bundle.tokens.get(token_index).ok_or(Error::Range {
        index: token_index,
        limit: bundle.tokens.len(),
    })?;
    let np = bundle.num_patches();
    let gradcam = gradcam_scores(token, token_index, np)?;
    let seeds = select_potential_seeds(&gradcam, cfg.potential_seeds.min(np))?;
    let initial_seed = compute_initial_seed(&seeds, cfg.initial_seeds.min(seeds.len()), &bundle.geometry)?;
    let object = build_object_set(&initial_seed, &seeds, &bundle.vit_keys)?;
    let heatmap = object_heatmap(&object, &bundle.vit_keys)?;
    Ok(WordHeatmap {
        gradcam,
        seeds,
        initial_seed,
        object,
        heatmap,
    })
}

/// Box for one token: threshold its expanded heatmap and enclose the segment holding its initial seed.
pub fn word_box(bundle: &FeatureBundle, token_index: usize, cfg: &PipelineConfig) -> Result<Segmentation> {
    let w = word_heatmap(bundle, token_index, cfg)?;
    segment(&w.heatmap, &w.initial_seed, &bundle.geometry, cfg)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhraseQuery {
    pub token_indices: Vec<usize>,
    pub phrase_text: String,
}

impl PhraseQuery {
    pub fn new(token_indices: Vec<usize>, phrase_text: impl Into<String>) -> Self {
        Self {
            token_indices,
            phrase_text: phrase_text.into(),
        }
    }

    pub fn validate(&self, n_tokens: usize) -> Result<()> {
        if self.token_indices.is_empty() {
            return Err(Error::Argument("phrase has no tokens".into()));
        }
        let distinct: BTreeSet<usize> = self.token_indices.iter().copied().collect();
        if distinct.len() != self.token_indices.len() {
            return Err(Error::Argument(format!(
                "phrase token indices {:?} repeat a token",
                self.token_indices
            )));
        }
        if let Some(&bad) = self.token_indices.iter().find(|&&i| i >= n_tokens) {
            return Err(Error::Argument(format!(
                "token index {bad} out of range for {n_tokens} tokens"
            )));
        }
        Ok(())
    }
}

const STOP_WORDS: &[&str] = &[
    "a", "an", "the", "of", "in", "on", "at", "with", "and", "or", "to", "for", "by", "from", "is",
    "are", "his", "her", "its", "their", "this", "that",
];

fn is_stop_word(text: &str) -> bool {
    let t = text.trim().to_lowercase();
    STOP_WORDS.contains(&t.as_str())
}

#[derive(Debug, Clone)]
pub struct PhraseGrounding {
    pub bbox: BoxPx,
    pub heatmap: Heatmap,
    /// Cell whose segment was boxed.
    pub seed: InitialSeed,
    pub segmentation: Segmentation,
    /// Highest Grad-CAM score over the contributing tokens.
    pub max_gradcam: f64,
}

/// Sum the expanded heatmaps of every phrase token and box one segment.
///
/// The segment is grown from whichever per-word initial seed scores highest on the
/// summed heatmap (lowest patch index on ties), so a one-word phrase reproduces the
/// word pipeline exactly.
pub fn ground_phrase(bundle: &FeatureBundle, q: &PhraseQuery, cfg: &PipelineConfig) -> Result<PhraseGrounding> {
    q.validate(bundle.tokens.len())?;
    // Sorted so the result cannot depend on the order tokens were listed in.
    let mut indices: Vec<usize> = q.token_indices.clone();
    indices.sort_unstable();
    if cfg.drop_stop_words {
        let content: Vec<usize> = indices
            .iter()
            .copied()
            .filter(|&i| !is_stop_word(&bundle.tokens[i].text))
            .collect();
        if !content.is_empty() {
            indices = content;
        }
    }

    let np = bundle.num_patches();
    let mut summed = vec![0.0; np];
    let mut seeds = BTreeSet::new();
    let mut max_gradcam = f64::NEG_INFINITY;
    for &i in &indices {
        let w = word_heatmap(bundle, i, cfg)?;
        for (s, v) in summed.iter_mut().zip(&w.heatmap.values) {
            *s += v;
        }
        seeds.insert(w.initial_seed.patch_index);
        max_gradcam = w.gradcam.scores.iter().copied().fold(max_gradcam, f64::max);
    }
    let heatmap = Heatmap {
        values: summed,
        kind: HeatmapKind::Phrase,
    };
    // BTreeSet iterates ascending, so the first maximum has the lowest index.
    let mut best = *seeds.first().expect("phrase has at least one token");
    for &s in &seeds {
        if heatmap.values[s] > heatmap.values[best] {
            best = s;
        }
    }
    let seed = InitialSeed::at(&bundle.geometry, best)?;
    let segmentation = segment(&heatmap, &seed, &bundle.geometry, cfg)?;
    Ok(PhraseGrounding {
        bbox: segmentation.bbox,
        heatmap,
        seed,
        segmentation,
        max_gradcam,
    })
}

/// One lexicon category: canonical name plus lowercase aliases.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LexiconEntry {
    pub id: u64,
    pub name: String,
    #[serde(default)]
    pub aliases: Vec<String>,
}

/// Category vocabulary for caption matching. The lowercased canonical name is always an alias.
#[derive(Debug, Clone)]
pub struct Lexicon {
    entries: Vec<LexiconEntry>,
    table: HashMap<Vec<String>, (u64, String)>,
    longest: usize,
}

impl Lexicon {
    pub fn new(entries: Vec<LexiconEntry>) -> Result<Self> {
        let mut ids = BTreeSet::new();
        let mut table: HashMap<Vec<String>, (u64, String)> = HashMap::new();
        let mut longest = 0;
        for e in &entries {
            if !ids.insert(e.id) {
                return Err(Error::Data(format!("duplicate category id {}", e.id)));
            }
            if let Some(a) = e.aliases.iter().find(|a| a.to_lowercase() != **a) {
                return Err(Error::Data(format!("alias {a:?} is not lowercase")));
            }
            let name = e.name.to_lowercase();
            for alias in std::iter::once(&name).chain(&e.aliases) {
                let words: Vec<String> = words(alias).into_iter().map(|w| w.text).collect();
                if words.is_empty() {
                    return Err(Error::Data(format!("empty alias in category {}", e.id)));
                }
                match table.get(&words) {
                    Some((other, _)) if *other != e.id => {
                        return Err(Error::Data(format!(
                            "alias {alias:?} maps to categories {other} and {}",
                            e.id
                        )));
                    }
                    Some(_) => {}
                    None => {
                        longest = longest.max(words.len());
                        table.insert(words, (e.id, alias.clone()));
                    }
                }
            }
        }
        Ok(Self {
            entries,
            table,
            longest,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::new(serde_json::from_str(text)?)
    }

    pub fn entries(&self) -> &[LexiconEntry] {
        &self.entries
    }

    fn lookup(&self, words: &[String]) -> Option<&(u64, String)> {
        let (last, head) = words.split_last()?;
        let mut key = head.to_vec();
        for variant in plural_variants(last) {
            key.push(variant);
            if let Some(hit) = self.table.get(&key) {
                return Some(hit);
            }
            key.pop();
        }
        None
    }
}

fn plural_variants(word: &str) -> Vec<String> {
    let mut out = vec![word.to_string()];
    if word.len() > 1 {
        if let Some(stem) = word.strip_suffix('s') {
            out.push(stem.to_string());
        }
    }
    if word.len() > 2 {
        if let Some(stem) = word.strip_suffix("es") {
            out.push(stem.to_string());
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Word {
    text: String,
    start: usize,
    end: usize,
}

/// Lowercased alphanumeric runs with their byte spans.
fn words(text: &str) -> Vec<Word> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, ch) in text.char_indices().chain(std::iter::once((text.len(), ' '))) {
        match (ch.is_alphanumeric(), start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                out.push(Word {
                    text: text[s..i].to_lowercase(),
                    start: s,
                    end: i,
                });
                start = None;
            }
            _ => {}
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CategoryMatch {
    pub category_id: u64,
    pub token_indices: Vec<usize>,
    pub matched_alias: String,
}

/// Whole-word alias search over the caption, longest alias first, one match per category.
pub fn match_categories(caption: &str, tokens: &[crate::bundle::TokenRecord], lex: &Lexicon) -> Vec<CategoryMatch> {
    let ws = words(caption);
    let texts: Vec<String> = ws.iter().map(|w| w.text.clone()).collect();
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    let mut i = 0;
    while i < ws.len() {
        let max_len = lex.longest.min(ws.len() - i);
        let hit = (1..=max_len)
            .rev()
            .find_map(|len| lex.lookup(&texts[i..i + len]).map(|h| (len, h)));
        let Some((len, (category_id, alias))) = hit else {
            i += 1;
            continue;
        };
        let (start, end) = (ws[i].start, ws[i + len - 1].end);
        i += len;
        if seen.contains(category_id) {
            continue;
        }
        let token_indices: Vec<usize> = tokens
            .iter()
            .enumerate()
            .filter(|(_, t)| (t.char_start as usize) < end && (t.char_end as usize) > start)
            .map(|(k, _)| k)
            .collect();
        if token_indices.is_empty() {
            continue;
        }
        seen.insert(*category_id);
        out.push(CategoryMatch {
            category_id: *category_id,
            token_indices,
            matched_alias: alias.clone(),
        });
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Confidence attached to a grounded box.
pub fn grounding_confidence(g: &PhraseGrounding) -> f64 {
    sigmoid(g.max_gradcam)
}

/// One detection per lexicon category found in the caption. Confidence is the
/// sigmoid of the largest Grad-CAM score over the matched tokens.
pub fn detect_categories(bundle: &FeatureBundle, image_id: u64, lex: &Lexicon, cfg: &PipelineConfig) -> Result<Vec<Detection>> {
    match_categories(&bundle.caption, &bundle.tokens, lex)
        .into_iter()
        .map(|m| {
            let q = PhraseQuery::new(m.token_indices, m.matched_alias);
            let g = ground_phrase(bundle, &q, cfg)?;
            Ok(Detection {
                image_id,
                category_id: m.category_id,
                bbox: g.bbox,
                confidence: grounding_confidence(&g),
            })
        })
        .collect()
}

/// Category ids keyed by lowercase canonical name.
pub fn category_ids_by_name(lex: &Lexicon) -> BTreeMap<String, u64> {
    lex.entries()
        .iter()
        .map(|e| (e.name.to_lowercase(), e.id))
        .collect()
}
