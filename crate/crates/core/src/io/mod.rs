// SPDX-License-Identifier: MIT OR Apache-2.0

//! File formats: tensor container, keyword lists, run configuration, and the
//! typed views (activations, dictionaries) stored in the container.

pub mod config;
pub mod tensor_file;

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use nalgebra::DMatrix;

use crate::head_analysis::{Aggregation, HeadActivationSet, HeadId};
use crate::sparse_recovery::{Dictionary, SignalMatrix};

pub use config::RunConfig;
pub use tensor_file::{read_tensor_file, write_tensor_file, DType, FormatError, Section};

pub const DICT_SECTION: &str = "dict/unembedding";
pub const LABELS_SECTION: &str = "dict/labels";
pub const AGGREGATION_SECTION: &str = "meta/aggregation";

/// Section name for head `id`'s activations.
pub fn activation_section_name(id: HeadId) -> String {
    format!("act/L{}/H{}", id.layer, id.head)
}

fn parse_activation_name(name: &str) -> Option<HeadId> {
    let rest = name.strip_prefix("act/L")?;
    let (l, h) = rest.split_once("/H")?;
    Some(HeadId::new(l.parse().ok()?, h.parse().ok()?))
}

/// Reads a keyword list: one keyword per line, `#` starts a comment, blank
/// lines skipped.
pub fn parse_keywords(text: &str) -> Vec<String> {
    text.lines()
        .map(|line| match line.find('#') {
            Some(i) => &line[..i],
            None => line,
        })
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect()
}

pub fn read_keywords(path: &Path) -> std::io::Result<Vec<String>> {
    Ok(parse_keywords(&std::fs::read_to_string(path)?))
}

/// Labels are stored as UTF-8 bytes (one byte per `f32` value), each label
/// terminated by a zero byte.
pub fn encode_labels(labels: &[String]) -> Result<Section, FormatError> {
    let mut bytes = Vec::new();
    for l in labels {
        if l.as_bytes().contains(&0) {
            return Err(FormatError::Malformed(format!("label {l:?} contains NUL")));
        }
        bytes.extend(l.bytes().map(f64::from));
        bytes.push(0.0);
    }
    Section::f32(LABELS_SECTION, vec![bytes.len()], bytes)
}

pub fn decode_labels(section: &Section) -> Result<Vec<String>, FormatError> {
    let bad = || FormatError::Malformed(format!("section '{}' is not a label list", section.name));
    if section.dims.len() != 1 {
        return Err(bad());
    }
    let mut bytes = Vec::with_capacity(section.data.len());
    for &v in &section.data {
        if !(0.0..=255.0).contains(&v) || v.fract() != 0.0 {
            return Err(bad());
        }
        bytes.push(v as u8);
    }
    if bytes.last().is_some_and(|&b| b != 0) {
        return Err(bad());
    }
    bytes
        .split(|&b| b == 0)
        .take(bytes.iter().filter(|&&b| b == 0).count())
        .map(|chunk| String::from_utf8(chunk.to_vec()).map_err(|_| bad()))
        .collect()
}

pub fn matrix_section(name: impl Into<String>, m: &DMatrix<f64>, dtype: DType) -> Result<Section, FormatError> {
    let (r, c) = m.shape();
    let mut data = Vec::with_capacity(r * c);
    for row in m.row_iter() {
        data.extend(row.iter().copied());
    }
    Section::new(name, vec![r, c], dtype, data)
}

pub fn section_matrix(section: &Section) -> Result<DMatrix<f64>, FormatError> {
    match section.dims.as_slice() {
        [r, c] => Ok(DMatrix::from_row_slice(*r, *c, &section.data)),
        _ => Err(FormatError::UnexpectedShape {
            name: section.name.clone(),
            dims: section.dims.clone(),
        }),
    }
}

fn find<'a>(sections: &'a [Section], name: &str) -> Result<&'a Section, FormatError> {
    sections
        .iter()
        .find(|s| s.name == name)
        .ok_or_else(|| FormatError::MissingSection(name.to_string()))
}

/// Dictionary and optional labels (`dict/unembedding`, `dict/labels`). A
/// model bundle is also a valid dictionary file.
pub fn dictionary_from_sections(sections: &[Section]) -> anyhow::Result<Dictionary> {
    let data = section_matrix(find(sections, DICT_SECTION)?)?;
    let labels = match sections.iter().find(|s| s.name == LABELS_SECTION) {
        Some(s) => decode_labels(s)?,
        None => Vec::new(),
    };
    Ok(Dictionary::new(data, labels)?)
}

pub fn dictionary_sections(dict: &Dictionary, dtype: DType) -> Result<Vec<Section>, FormatError> {
    let mut out = vec![matrix_section(DICT_SECTION, dict.data(), dtype)?];
    if !dict.labels().is_empty() {
        out.push(encode_labels(dict.labels())?);
    }
    Ok(out)
}

pub fn read_dictionary(path: &Path) -> anyhow::Result<Dictionary> {
    dictionary_from_sections(&read_tensor_file(path)?)
}

/// Vocabulary map from the dictionary's atom labels.
pub fn vocab_from_labels(labels: &[String]) -> HashMap<String, usize> {
    let mut vocab = HashMap::with_capacity(labels.len());
    for (i, l) in labels.iter().enumerate() {
        vocab.entry(l.clone()).or_insert(i);
    }
    vocab
}

pub fn activation_sections(acts: &HeadActivationSet, dtype: DType) -> Result<Vec<Section>, FormatError> {
    let mut out = Vec::with_capacity(acts.len() + 1);
    for (id, m) in acts.iter() {
        out.push(matrix_section(activation_section_name(*id), m.data(), dtype)?);
    }
    out.push(Section::f64(
        AGGREGATION_SECTION,
        vec![1],
        vec![acts.aggregation().code() as f64],
    )?);
    Ok(out)
}

/// Builds a head grid from `act/L{l}/H{h}` sections. Sections with other
/// names are ignored with a warning.
pub fn activations_from_sections(sections: &[Section]) -> anyhow::Result<HeadActivationSet> {
    let mut entries = BTreeMap::new();
    let mut aggregation = Aggregation::MeanAllTokens;
    for s in sections {
        if let Some(id) = parse_activation_name(&s.name) {
            entries.insert(id, SignalMatrix::new(section_matrix(s)?)?);
        } else if s.name == AGGREGATION_SECTION {
            aggregation = s
                .data
                .first()
                .and_then(|&c| Aggregation::from_code(c as u32))
                .ok_or_else(|| FormatError::Malformed("bad aggregation code".into()))?;
        } else if s.name != DICT_SECTION && s.name != LABELS_SECTION {
            log::warn!("ignoring unknown section '{}'", s.name);
        }
    }
    Ok(HeadActivationSet::new(entries, aggregation)?)
}

pub fn read_activations(path: &Path) -> anyhow::Result<HeadActivationSet> {
    activations_from_sections(&read_tensor_file(path)?)
}
