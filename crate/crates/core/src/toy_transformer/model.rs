// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{ModelConfig, ModelError, Result, Vocab, INIT_SCALE};
use crate::io::{self, DType, FormatError, Section};
use crate::sparse_recovery::Dictionary;

/// One block. Head `h` owns columns `h*d_head..(h+1)*d_head` of `wq`, `wk`,
/// `wv` and the same rows of `wo`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: DVector<f64>,
    pub wq: DMatrix<f64>,
    pub wk: DMatrix<f64>,
    pub wv: DMatrix<f64>,
    pub wo: DMatrix<f64>,
    pub mlp_norm: DVector<f64>,
    pub w_in: DMatrix<f64>,
    pub w_out: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    /// vocab x d
    pub token_embedding: DMatrix<f64>,
    /// max_seq_len x d
    pub position_embedding: DMatrix<f64>,
    pub layers: Vec<LayerWeights>,
    pub final_norm: DVector<f64>,
    /// vocab x d; the dictionary for head analysis.
    pub unembedding: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub config: ModelConfig,
    pub weights: Weights,
    pub vocab: Vocab,
}

fn gaussian(rng: &mut ChaCha8Rng, normal: &Normal<f64>, rows: usize, cols: usize) -> DMatrix<f64> {
    // row-major draw order, independent of the storage layout
    let values: Vec<f64> = (0..rows * cols).map(|_| normal.sample(rng)).collect();
    DMatrix::from_row_slice(rows, cols, &values)
}

/// Seeded Gaussian init (std [`INIT_SCALE`]), unit norm gains, placeholder
/// vocabulary.
pub fn init_model(config: ModelConfig) -> Result<ModelBundle> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let normal = Normal::new(0.0, INIT_SCALE).expect("valid std");
    let d = config.d_model;
    let ff = config.d_ff();

    let token_embedding = gaussian(&mut rng, &normal, config.vocab_size, d);
    let position_embedding = gaussian(&mut rng, &normal, config.max_seq_len, d);
    let layers = (0..config.n_layers)
        .map(|_| LayerWeights {
            attn_norm: DVector::from_element(d, 1.0),
            wq: gaussian(&mut rng, &normal, d, d),
            wk: gaussian(&mut rng, &normal, d, d),
            wv: gaussian(&mut rng, &normal, d, d),
            wo: gaussian(&mut rng, &normal, d, d),
            mlp_norm: DVector::from_element(d, 1.0),
            w_in: gaussian(&mut rng, &normal, d, ff),
            w_out: gaussian(&mut rng, &normal, ff, d),
        })
        .collect();
    let unembedding = gaussian(&mut rng, &normal, config.vocab_size, d);

    Ok(ModelBundle {
        config,
        weights: Weights {
            token_embedding,
            position_embedding,
            layers,
            final_norm: DVector::from_element(d, 1.0),
            unembedding,
        },
        vocab: Vocab::placeholder(config.vocab_size),
    })
}

const CONFIG_SECTION: &str = "model/config";

fn layer_name(l: usize, what: &str) -> String {
    format!("L{l}/{what}")
}

fn vector_section(name: String, v: &DVector<f64>) -> std::result::Result<Section, FormatError> {
    Section::f64(name, vec![v.len()], v.iter().copied().collect())
}

impl ModelBundle {
    pub fn with_vocab(mut self, vocab: Vocab) -> Result<Self> {
        if vocab.len() != self.config.vocab_size {
            return Err(ModelError::InvalidConfig(format!(
                "vocab has {} tokens, model expects {}",
                vocab.len(),
                self.config.vocab_size
            )));
        }
        self.vocab = vocab;
        Ok(self)
    }

    /// Unembedding rows labeled with the vocabulary.
    pub fn dictionary(&self) -> Result<Dictionary> {
        Dictionary::new(self.weights.unembedding.clone(), self.vocab.tokens().to_vec())
            .map_err(|e| ModelError::InvalidConfig(format!("unembedding: {e}")))
    }

    /// Named tensors in a fixed order.
    pub fn tensors(&self) -> Vec<(String, DMatrix<f64>)> {
        let w = &self.weights;
        let col = |v: &DVector<f64>| DMatrix::from_column_slice(v.len(), 1, v.as_slice());
        let mut out = vec![
            ("embed/tokens".to_string(), w.token_embedding.clone()),
            ("embed/positions".to_string(), w.position_embedding.clone()),
        ];
        for (l, layer) in w.layers.iter().enumerate() {
            out.push((layer_name(l, "attn_norm"), col(&layer.attn_norm)));
            out.push((layer_name(l, "wq"), layer.wq.clone()));
            out.push((layer_name(l, "wk"), layer.wk.clone()));
            out.push((layer_name(l, "wv"), layer.wv.clone()));
            out.push((layer_name(l, "wo"), layer.wo.clone()));
            out.push((layer_name(l, "mlp_norm"), col(&layer.mlp_norm)));
            out.push((layer_name(l, "w_in"), layer.w_in.clone()));
            out.push((layer_name(l, "w_out"), layer.w_out.clone()));
        }
        out.push(("final_norm".to_string(), col(&w.final_norm)));
        out.push((io::DICT_SECTION.to_string(), w.unembedding.clone()));
        out
    }

    /// CRC-32 over every weight's little-endian `f64` bytes in
    /// [`Self::tensors`] order.
    pub fn checksum(&self) -> u32 {
        let mut hasher = crc32fast::Hasher::new();
        for (_, t) in self.tensors() {
            for row in t.row_iter() {
                for v in row.iter() {
                    hasher.update(&v.to_le_bytes());
                }
            }
        }
        hasher.finalize()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    pub fn to_sections(&self) -> std::result::Result<Vec<Section>, FormatError> {
        let c = &self.config;
        let mut out = vec![Section::f64(
            CONFIG_SECTION,
            vec![7],
            vec![
                c.n_layers as f64,
                c.n_heads as f64,
                c.d_model as f64,
                c.vocab_size as f64,
                c.max_seq_len as f64,
                (c.seed >> 32) as f64,
                (c.seed & 0xffff_ffff) as f64,
            ],
        )?];
        let w = &self.weights;
        out.push(io::matrix_section("embed/tokens", &w.token_embedding, DType::F64)?);
        out.push(io::matrix_section(
            "embed/positions",
            &w.position_embedding,
            DType::F64,
        )?);
        for (l, layer) in w.layers.iter().enumerate() {
            out.push(vector_section(layer_name(l, "attn_norm"), &layer.attn_norm)?);
            out.push(io::matrix_section(layer_name(l, "wq"), &layer.wq, DType::F64)?);
            out.push(io::matrix_section(layer_name(l, "wk"), &layer.wk, DType::F64)?);
            out.push(io::matrix_section(layer_name(l, "wv"), &layer.wv, DType::F64)?);
            out.push(io::matrix_section(layer_name(l, "wo"), &layer.wo, DType::F64)?);
            out.push(vector_section(layer_name(l, "mlp_norm"), &layer.mlp_norm)?);
            out.push(io::matrix_section(layer_name(l, "w_in"), &layer.w_in, DType::F64)?);
            out.push(io::matrix_section(layer_name(l, "w_out"), &layer.w_out, DType::F64)?);
        }
        out.push(vector_section("final_norm".into(), &w.final_norm)?);
        out.push(io::matrix_section(io::DICT_SECTION, &w.unembedding, DType::F64)?);
        out.push(io::encode_labels(self.vocab.tokens())?);
        Ok(out)
    }

    pub fn from_sections(sections: &[Section]) -> Result<Self> {
        let get = |name: &str| -> Result<&Section> {
            sections
                .iter()
                .find(|s| s.name == name)
                .ok_or_else(|| FormatError::MissingSection(name.to_string()).into())
        };
        let shape_err = |s: &Section| -> ModelError {
            FormatError::UnexpectedShape {
                name: s.name.clone(),
                dims: s.dims.clone(),
            }
            .into()
        };
        let matrix = |name: &str, rows: usize, cols: usize| -> Result<DMatrix<f64>> {
            let s = get(name)?;
            if s.dims != [rows, cols] {
                return Err(shape_err(s));
            }
            Ok(io::section_matrix(s)?)
        };
        let vector = |name: &str, len: usize| -> Result<DVector<f64>> {
            let s = get(name)?;
            if s.dims != [len] {
                return Err(shape_err(s));
            }
            Ok(DVector::from_vec(s.data.clone()))
        };

        let cfg = get(CONFIG_SECTION)?;
        if cfg.dims != [7]
            || cfg
                .data
                .iter()
                .any(|v| *v < 0.0 || v.fract() != 0.0 || *v > 4294967295.0)
        {
            return Err(shape_err(cfg));
        }
        let u = |i: usize| cfg.data[i] as usize;
        let config = ModelConfig {
            n_layers: u(0),
            n_heads: u(1),
            d_model: u(2),
            vocab_size: u(3),
            max_seq_len: u(4),
            seed: ((cfg.data[5] as u64) << 32) | cfg.data[6] as u64,
        };
        config.validate()?;
        let (v, d, ff) = (config.vocab_size, config.d_model, config.d_ff());

        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            layers.push(LayerWeights {
                attn_norm: vector(&layer_name(l, "attn_norm"), d)?,
                wq: matrix(&layer_name(l, "wq"), d, d)?,
                wk: matrix(&layer_name(l, "wk"), d, d)?,
                wv: matrix(&layer_name(l, "wv"), d, d)?,
                wo: matrix(&layer_name(l, "wo"), d, d)?,
                mlp_norm: vector(&layer_name(l, "mlp_norm"), d)?,
                w_in: matrix(&layer_name(l, "w_in"), d, ff)?,
                w_out: matrix(&layer_name(l, "w_out"), ff, d)?,
            });
        }
        let weights = Weights {
            token_embedding: matrix("embed/tokens", v, d)?,
            position_embedding: matrix("embed/positions", config.max_seq_len, d)?,
            layers,
            final_norm: vector("final_norm", d)?,
            unembedding: matrix(io::DICT_SECTION, v, d)?,
        };
        let vocab = match sections.iter().find(|s| s.name == io::LABELS_SECTION) {
            Some(s) => Vocab::new(io::decode_labels(s)?)?,
            None => Vocab::placeholder(v),
        };
        let bundle = ModelBundle {
            config,
            weights,
            vocab: Vocab::placeholder(v),
        }
        .with_vocab(vocab)?;
        if !bundle.all_finite() {
            return Err(ModelError::InvalidConfig("non-finite weight".into()));
        }
        Ok(bundle)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(io::write_tensor_file(path, &self.to_sections()?)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_sections(&io::read_tensor_file(path)?)
    }
}
