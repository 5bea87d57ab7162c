use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::dataset::{load_vocab, DatasetMeta, DatasetPaths};
use crate::error::{Error, Result};
use crate::repd;

/// Word-prediction layer: `softmax(E h + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    /// V x d.
    pub embeddings: Array2<f32>,
    pub bias: Option<Vec<f32>>,
    pub vocab: Vec<String>,
}

impl Decoder {
    pub fn new(embeddings: Array2<f32>, bias: Option<Vec<f32>>, vocab: Vec<String>) -> Result<Self> {
        let v = embeddings.nrows();
        if vocab.len() != v {
            return Err(Error::DimensionMismatch {
                expected: v,
                found: vocab.len(),
            });
        }
        if let Some(b) = &bias {
            if b.len() != v {
                return Err(Error::DimensionMismatch {
                    expected: v,
                    found: b.len(),
                });
            }
        }
        Ok(Decoder {
            embeddings,
            bias,
            vocab,
        })
    }

    /// Decoder without a vocabulary file; tokens are named by index.
    pub fn unnamed(embeddings: Array2<f32>, bias: Option<Vec<f32>>) -> Result<Self> {
        let vocab = (0..embeddings.nrows()).map(|i| i.to_string()).collect();
        Decoder::new(embeddings, bias, vocab)
    }

    pub fn vocab_size(&self) -> usize {
        self.embeddings.nrows()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.ncols()
    }

    /// Logits for a block of rows (n x d -> n x V).
    pub fn logits(&self, reps: ArrayView2<f32>) -> Result<Array2<f32>> {
        self.check_dim(reps.ncols())?;
        let mut out = reps.dot(&self.embeddings.t());
        if let Some(b) = &self.bias {
            out += &ArrayView1::from(b.as_slice());
        }
        Ok(out)
    }

    pub(crate) fn check_dim(&self, found: usize) -> Result<()> {
        if found == self.dim() {
            Ok(())
        } else {
            Err(Error::DimensionMismatch {
                expected: self.dim(),
                found,
            })
        }
    }

    /// Loads the decoder named by a dataset's metadata.
    pub fn from_meta(meta: &DatasetMeta, paths: &DatasetPaths) -> Result<Self> {
        let file = meta.decoder_file.as_ref().ok_or_else(|| {
            Error::Consistency(format!(
                "{} does not name a decoder_file",
                paths.meta.display()
            ))
        })?;
        let embeddings = repd::read(paths.resolve(file))?;
        let bias = match &meta.decoder_bias_file {
            Some(f) => Some(repd::read_vector(paths.resolve(f))?),
            None => None,
        };
        let dec = match &meta.vocab_file {
            Some(f) => Decoder::new(embeddings, bias, load_vocab(paths.resolve(f))?)?,
            None => Decoder::unnamed(embeddings, bias)?,
        };
        if dec.vocab_size() != meta.vocab_size {
            return Err(Error::Consistency(format!(
                "decoder has {} rows but {} declares vocab_size {}",
                dec.vocab_size(),
                paths.meta.display(),
                meta.vocab_size
            )));
        }
        Ok(dec)
    }

    /// Writes `stem.repd` (and `stem.bias.repd` when there is a bias).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        repd::write(path, &self.embeddings)?;
        if let Some(b) = &self.bias {
            repd::write_vector(bias_path(path), b)?;
        }
        Ok(())
    }
}

/// Where [`Decoder::save`] puts the bias.
pub fn bias_path(path: &Path) -> std::path::PathBuf {
    path.with_extension("bias.repd")
}

/// Natural-log softmax of one row, in f64.
pub(crate) fn log_softmax(logits: ArrayView1<f32>) -> Array1<f64> {
    let max = logits
        .iter()
        .copied()
        .fold(f32::NEG_INFINITY, f32::max) as f64;
    let shifted = logits.mapv(|v| v as f64 - max);
    let lse = shifted.iter().map(|v| v.exp()).sum::<f64>().ln();
    shifted.mapv(|v| v - lse)
}

/// `softmax(E h + b)` for a single representation.
pub fn decode_distribution(h: ArrayView1<f32>, dec: &Decoder) -> Result<Array1<f64>> {
    let logits = dec.logits(h.insert_axis(Axis(0)))?;
    Ok(log_softmax(logits.row(0)).mapv(f64::exp))
}
