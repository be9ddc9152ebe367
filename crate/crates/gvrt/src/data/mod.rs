//! Dataset model: multi-domain samples with per-image descriptions, splits,
//! vocabulary, and batching.
//!
//! A dataset is a flat list of [`Sample`]s. Samples sharing an `id` are
//! "siblings": the same underlying content rendered under different domain
//! styles, so they share label and texts by construction. Datasets persist as
//! a directory of `meta.json`, `samples.bin` (length-prefixed little-endian
//! `f32` tensors), and `texts.jsonl`.

pub mod batch;
pub mod split;
pub mod synth;
pub mod text;

pub use batch::{eval_batches, BatchStream, TextMode};
pub use split::{build_split_plan, SplitMode, SplitPlan};
pub use synth::SynthSpec;
pub use text::Vocabulary;

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{GvrtError, Result};

/// One rendered image with its identity and descriptions.
#[derive(Debug, Clone)]
pub struct Sample {
    /// Content id, shared by renderings of the same content across domains.
    pub id: u32,
    pub domain: u16,
    pub label: u16,
    /// `channels × h × w`, row-major, values in `[0, 1]`.
    pub image: Vec<f64>,
    /// One or more descriptions; index 0 is the canonical class sentence.
    pub texts: Vec<String>,
}

/// The full corpus across all domains.
#[derive(Debug, Clone)]
pub struct MultiDomainDataset {
    pub samples: Vec<Sample>,
    pub num_classes: usize,
    pub num_domains: usize,
    pub class_names: Vec<String>,
    pub domain_names: Vec<String>,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Spec the generator ran with, if synthesized (echoed into `meta.json`).
    pub spec: Option<SynthSpec>,
    index: HashMap<(u32, u16), usize>,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    num_classes: usize,
    num_domains: usize,
    class_names: Vec<String>,
    domain_names: Vec<String>,
    channels: usize,
    height: usize,
    width: usize,
    num_samples: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    spec: Option<SynthSpec>,
}

#[derive(Serialize, Deserialize)]
struct TextRow {
    id: u32,
    domain: u16,
    label: u16,
    sentences: Vec<String>,
}

impl MultiDomainDataset {
    /// Build from parts, sorting samples by `(id, domain)` and indexing them.
    pub fn new(
        mut samples: Vec<Sample>,
        num_classes: usize,
        num_domains: usize,
        class_names: Vec<String>,
        domain_names: Vec<String>,
        channels: usize,
        height: usize,
        width: usize,
        spec: Option<SynthSpec>,
    ) -> Result<Self> {
        samples.sort_by_key(|s| (s.id, s.domain));
        let mut index = HashMap::with_capacity(samples.len());
        for (i, s) in samples.iter().enumerate() {
            if s.texts.is_empty() {
                return Err(GvrtError::Config(format!("sample id {} has no texts", s.id)));
            }
            if index.insert((s.id, s.domain), i).is_some() {
                return Err(GvrtError::Config(format!(
                    "duplicate sample (id {}, domain {})",
                    s.id, s.domain
                )));
            }
        }
        let ds = MultiDomainDataset {
            samples,
            num_classes,
            num_domains,
            class_names,
            domain_names,
            channels,
            height,
            width,
            spec,
            index,
        };
        ds.check_siblings()?;
        Ok(ds)
    }

    fn check_siblings(&self) -> Result<()> {
        let mut seen: HashMap<u32, (u16, &Vec<String>)> = HashMap::new();
        for s in &self.samples {
            match seen.get(&s.id) {
                None => {
                    seen.insert(s.id, (s.label, &s.texts));
                }
                Some(&(label, texts)) => {
                    if label != s.label || texts != &s.texts {
                        return Err(GvrtError::Config(format!(
                            "siblings of id {} disagree on label or texts",
                            s.id
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn get(&self, id: u32, domain: u16) -> Option<&Sample> {
        self.index.get(&(id, domain)).map(|&i| &self.samples[i])
    }

    pub fn sample_index(&self, id: u32, domain: u16) -> Option<usize> {
        self.index.get(&(id, domain)).copied()
    }

    /// All distinct content ids, ascending.
    pub fn ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.samples.iter().map(|s| s.id).collect();
        ids.dedup();
        ids
    }

    pub fn label_of(&self, id: u32) -> Option<u16> {
        self.samples
            .binary_search_by(|s| (s.id, s.domain).cmp(&(id, 0)))
            .ok()
            .or_else(|| self.samples.iter().position(|s| s.id == id))
            .map(|i| self.samples[i].label)
    }

    /// The canonical (per-class) sentence: text 0 of any sample of the class.
    pub fn canonical_sentence(&self, label: u16) -> Option<&str> {
        self.samples
            .iter()
            .find(|s| s.label == label)
            .map(|s| s.texts[0].as_str())
    }

    /// Every sentence in the corpus, in stored order.
    pub fn all_sentences(&self) -> Vec<&str> {
        self.samples
            .iter()
            .flat_map(|s| s.texts.iter().map(|t| t.as_str()))
            .collect()
    }

    // ── Persistence ─────────────────────────────────────────────────────────

    /// Write `meta.json`, `samples.bin`, and `texts.jsonl` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| GvrtError::io(dir, e))?;
        let meta = Meta {
            num_classes: self.num_classes,
            num_domains: self.num_domains,
            class_names: self.class_names.clone(),
            domain_names: self.domain_names.clone(),
            channels: self.channels,
            height: self.height,
            width: self.width,
            num_samples: self.samples.len(),
            spec: self.spec.clone(),
        };
        let meta_path = dir.join("meta.json");
        fs::write(&meta_path, serde_json::to_string_pretty(&meta).unwrap())
            .map_err(|e| GvrtError::io(&meta_path, e))?;

        let bin_path = dir.join("samples.bin");
        let mut bin = BufWriter::new(fs::File::create(&bin_path).map_err(|e| GvrtError::io(&bin_path, e))?);
        for s in &self.samples {
            let n = s.image.len() as u32;
            bin.write_all(&n.to_le_bytes()).map_err(|e| GvrtError::io(&bin_path, e))?;
            for &v in &s.image {
                bin.write_all(&(v as f32).to_le_bytes())
                    .map_err(|e| GvrtError::io(&bin_path, e))?;
            }
        }
        bin.flush().map_err(|e| GvrtError::io(&bin_path, e))?;

        let txt_path = dir.join("texts.jsonl");
        let mut txt = BufWriter::new(fs::File::create(&txt_path).map_err(|e| GvrtError::io(&txt_path, e))?);
        for s in &self.samples {
            let row = TextRow {
                id: s.id,
                domain: s.domain,
                label: s.label,
                sentences: s.texts.clone(),
            };
            serde_json::to_writer(&mut txt, &row).map_err(|e| {
                GvrtError::io(&txt_path, std::io::Error::new(std::io::ErrorKind::Other, e))
            })?;
            txt.write_all(b"\n").map_err(|e| GvrtError::io(&txt_path, e))?;
        }
        txt.flush().map_err(|e| GvrtError::io(&txt_path, e))?;
        Ok(())
    }

    /// Load a dataset directory written by [`MultiDomainDataset::save`].
    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join("meta.json");
        let meta_raw = fs::read_to_string(&meta_path).map_err(|e| GvrtError::io(&meta_path, e))?;
        let meta: Meta = serde_json::from_str(&meta_raw).map_err(|e| GvrtError::Format {
            path: meta_path.clone(),
            reason: e.to_string(),
        })?;

        let txt_path = dir.join("texts.jsonl");
        let txt = fs::File::open(&txt_path).map_err(|e| GvrtError::io(&txt_path, e))?;
        let mut rows = Vec::with_capacity(meta.num_samples);
        for line in BufReader::new(txt).lines() {
            let line = line.map_err(|e| GvrtError::io(&txt_path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let row: TextRow = serde_json::from_str(&line).map_err(|e| GvrtError::Format {
                path: txt_path.clone(),
                reason: e.to_string(),
            })?;
            rows.push(row);
        }
        if rows.len() != meta.num_samples {
            return Err(GvrtError::Format {
                path: txt_path,
                reason: format!("expected {} rows, found {}", meta.num_samples, rows.len()),
            });
        }

        let bin_path = dir.join("samples.bin");
        let mut bin = BufReader::new(fs::File::open(&bin_path).map_err(|e| GvrtError::io(&bin_path, e))?);
        let expected = meta.channels * meta.height * meta.width;
        let mut samples = Vec::with_capacity(rows.len());
        for row in rows {
            let mut len_buf = [0u8; 4];
            bin.read_exact(&mut len_buf).map_err(|e| GvrtError::io(&bin_path, e))?;
            let n = u32::from_le_bytes(len_buf) as usize;
            if n != expected {
                return Err(GvrtError::Format {
                    path: bin_path.clone(),
                    reason: format!("record length {n} does not match tensor shape {expected}"),
                });
            }
            let mut raw = vec![0u8; n * 4];
            bin.read_exact(&mut raw).map_err(|e| GvrtError::io(&bin_path, e))?;
            let image = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                .collect();
            samples.push(Sample {
                id: row.id,
                domain: row.domain,
                label: row.label,
                image,
                texts: row.sentences,
            });
        }

        MultiDomainDataset::new(
            samples,
            meta.num_classes,
            meta.num_domains,
            meta.class_names,
            meta.domain_names,
            meta.channels,
            meta.height,
            meta.width,
            meta.spec,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> MultiDomainDataset {
        let mk = |id: u32, domain: u16, label: u16| Sample {
            id,
            domain,
            label,
            image: vec![0.5; 3 * 4 * 4],
            texts: vec![format!("class {label} canonical"), format!("item {id}")],
        };
        MultiDomainDataset::new(
            vec![mk(0, 0, 0), mk(0, 1, 0), mk(1, 0, 1), mk(1, 1, 1)],
            2,
            2,
            vec!["zero".into(), "one".into()],
            vec!["a".into(), "b".into()],
            3,
            4,
            4,
            None,
        )
        .unwrap()
    }

    #[test]
    fn sibling_disagreement_rejected() {
        let mut s0 = Sample {
            id: 0,
            domain: 0,
            label: 0,
            image: vec![0.0; 3],
            texts: vec!["x".into()],
        };
        let mut s1 = s0.clone();
        s1.domain = 1;
        s1.label = 1; // sibling with a different label
        s0.image = vec![0.0; 3];
        let err = MultiDomainDataset::new(
            vec![s0, s1],
            2,
            2,
            vec!["a".into(), "b".into()],
            vec!["x".into(), "y".into()],
            3,
            1,
            1,
            None,
        );
        assert!(err.is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let ds = tiny();
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        let back = MultiDomainDataset::load(dir.path()).unwrap();
        assert_eq!(back.samples.len(), 4);
        assert_eq!(back.num_classes, 2);
        assert_eq!(back.get(1, 1).unwrap().texts, ds.get(1, 1).unwrap().texts);
        // f32 storage of f64 0.5 is exact.
        assert_eq!(back.get(0, 0).unwrap().image, ds.get(0, 0).unwrap().image);
    }

    #[test]
    fn ids_are_distinct_and_sorted() {
        assert_eq!(tiny().ids(), vec![0, 1]);
    }

    #[test]
    fn canonical_sentence_is_text_zero() {
        assert_eq!(tiny().canonical_sentence(1).unwrap(), "class 1 canonical");
    }
}
