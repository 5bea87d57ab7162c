//! Per-layer datasets, per-layer removal and the two layer-wise measurements:
//! how much of a property later layers recover after removal at an earlier
//! layer, and how much removal at each layer costs word prediction.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use amnesic::dataset::{save_repr_dataset, DatasetMeta};
use amnesic::eval::lm_accuracy;
use amnesic::inlp::{random_projection, run_inlp, InlpConfig, InlpResult, Projection};
use amnesic::probe::{probe_accuracy, train_linear_probe, ProbeConfig};
use amnesic::{label_stats, seed, ReprDataset};
use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{SyntheticCorpus, TAG_PROPERTY};
use crate::error::{EncoderError, Result};
use crate::model::LayeredEncoder;

/// Model name written into exported metadata.
pub const MODEL_NAME: &str = "toy-encoder";

/// Rows of one sentence: per layer, one row per content position.
struct SentenceRows {
    layers: Vec<Vec<f32>>,
    positions: Vec<usize>,
}

/// Encodes every content token of `corpus` and returns one dataset per layer
/// (`0..=L`). In masked mode each token is encoded with itself replaced by
/// `[MASK]`, one pass per token; otherwise one pass per sentence.
///
/// With `intervention = Some((i, P))` layer `i` is projected before the
/// remaining blocks run; layers below `i` are the vanilla ones.
pub fn export_layers(
    enc: &LayeredEncoder,
    corpus: &SyntheticCorpus,
    masked: bool,
    intervention: Option<(usize, &Projection)>,
) -> Result<Vec<ReprDataset>> {
    let num_layers = enc.num_layers();
    let d = enc.hidden();
    if let Some((at, p)) = intervention {
        if at > num_layers {
            return Err(EncoderError::IndexOutOfRange {
                index: at,
                len: num_layers + 1,
            });
        }
        if p.dim() != d {
            return Err(amnesic::Error::DimensionMismatch {
                expected: d,
                found: p.dim(),
            }
            .into());
        }
    }
    let per_sentence: Vec<Result<SentenceRows>> = corpus
        .sentences
        .par_iter()
        .map(|s| {
            let positions: Vec<usize> = s.content_positions().collect();
            let mut layers = vec![Vec::with_capacity(positions.len() * d); num_layers + 1];
            if masked {
                for &p in &positions {
                    let input = enc.masked_input(&s.ids, Some(p))?;
                    let out = enc.forward(&input, intervention, None);
                    for (dst, m) in layers.iter_mut().zip(&out) {
                        dst.extend(m.row(p).iter());
                    }
                }
            } else {
                let input = enc.masked_input(&s.ids, None)?;
                let out = enc.forward(&input, intervention, None);
                for (dst, m) in layers.iter_mut().zip(&out) {
                    for &p in &positions {
                        dst.extend(m.row(p).iter());
                    }
                }
            }
            Ok(SentenceRows { layers, positions })
        })
        .collect();

    let mut flat = vec![Vec::new(); num_layers + 1];
    let mut tokens = Vec::new();
    let mut task_labels = Vec::new();
    let mut tags = Vec::new();
    let mut sentence_ids = Vec::new();
    let mut positions = Vec::new();
    for (sid, (rows, s)) in per_sentence.into_iter().zip(&corpus.sentences).enumerate() {
        let rows = rows?;
        for (dst, src) in flat.iter_mut().zip(rows.layers) {
            dst.extend(src);
        }
        for p in rows.positions {
            tokens.push(enc.vocab.token(s.ids[p])?.to_string());
            task_labels.push(s.ids[p]);
            tags.push(s.tags[p].clone());
            sentence_ids.push(sid as u32);
            positions.push((p - 1) as u32);
        }
    }
    let n = tokens.len();
    let mut properties = BTreeMap::new();
    properties.insert(TAG_PROPERTY.to_string(), tags);
    let mut declared = BTreeMap::new();
    declared.insert(TAG_PROPERTY.to_string(), corpus.tags.clone());
    flat.into_iter()
        .enumerate()
        .map(|(layer, values)| {
            let reps = Array2::from_shape_vec((n, d), values).expect("row-major layout");
            let ds = ReprDataset {
                reps,
                tokens: tokens.clone(),
                task_labels: task_labels.clone(),
                properties: properties.clone(),
                sentence_ids: sentence_ids.clone(),
                positions: positions.clone(),
                meta: DatasetMeta {
                    model: MODEL_NAME.to_string(),
                    layer: layer as i64,
                    masked,
                    properties: declared.clone(),
                    vocab_size: enc.vocab_size(),
                    decoder_file: None,
                    decoder_bias_file: None,
                    vocab_file: None,
                },
            };
            ds.validate()?;
            Ok(ds)
        })
        .collect()
}

/// Writes `layer{i}.repd` (+ sidecars) for every dataset, plus the
/// encoder's decoder and vocabulary, all referenced from the metadata.
pub fn write_layer_datasets(
    datasets: &[ReprDataset],
    enc: &LayeredEncoder,
    dir: impl AsRef<Path>,
) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| crate::error::io_error(dir, e))?;
    let dec_path = dir.join("decoder.repd");
    enc.decoder().save(&dec_path)?;
    amnesic::dataset::save_vocab(enc.vocab.tokens(), dir.join("vocab.txt"))?;
    let bias_name = amnesic::eval::bias_path(Path::new("decoder.repd"));
    datasets
        .iter()
        .map(|ds| {
            let mut ds = ds.clone();
            ds.meta.decoder_file = Some(PathBuf::from("decoder.repd"));
            ds.meta.decoder_bias_file = Some(bias_name.clone());
            ds.meta.vocab_file = Some(PathBuf::from("vocab.txt"));
            let path = dir.join(format!("layer{}.repd", ds.meta.layer));
            save_repr_dataset(&ds, &path)?;
            Ok(path)
        })
        .collect()
}

/// Removal computed at one layer: the INLP run and its rank-matched random
/// counterpart.
#[derive(Debug, Clone)]
pub struct LayerRemoval {
    pub layer: usize,
    pub inlp: InlpResult,
    pub random: Projection,
}

impl LayerRemoval {
    /// Identity removal of width `dim`, useful as a control.
    pub fn identity(layer: usize, dim: usize) -> Self {
        LayerRemoval {
            layer,
            inlp: InlpResult {
                projection: Projection::identity(dim),
                iterations: Vec::new(),
                stopped_reason: amnesic::inlp::StopReason::ReachedMajority,
                majority: 0.0,
                num_classes: 0,
                classifiers: Vec::new(),
            },
            random: Projection::identity(dim),
        }
    }
}

/// Runs INLP on every layer's training representations (stopping on the
/// matching dev layer) and draws a rank-matched random projection per layer.
/// Layers run one after another; each INLP run is itself parallel.
pub fn layerwise_inlp(
    train: &[ReprDataset],
    dev: &[ReprDataset],
    property: &str,
    config: &InlpConfig,
    rand_seed: u64,
) -> Result<Vec<LayerRemoval>> {
    if train.len() != dev.len() {
        return Err(EncoderError::Config(format!(
            "{} training layers but {} dev layers",
            train.len(),
            dev.len()
        )));
    }
    train
        .iter()
        .zip(dev)
        .enumerate()
        .map(|(layer, (tr, dv))| layer_removal(tr, dv, layer, property, config, rand_seed))
        .collect()
}

/// The removal [`layerwise_inlp`] computes for one layer.
pub fn layer_removal(
    train: &ReprDataset,
    dev: &ReprDataset,
    layer: usize,
    property: &str,
    config: &InlpConfig,
    rand_seed: u64,
) -> Result<LayerRemoval> {
    let cfg = InlpConfig {
        seed: seed::derive(config.seed, seed::stream::INLP, layer as u64),
        ..*config
    };
    let inlp = run_inlp(train, dev, property, &cfg)?;
    let random = random_projection(
        train.dim(),
        inlp.removed(),
        seed::derive(rand_seed, seed::stream::RANDOM_PROJECTION, layer as u64),
    )?;
    Ok(LayerRemoval { layer, inlp, random })
}

/// Probe accuracy after removal at layer `i` (rows) measured at layer `j`
/// (columns). Cells with `j < i` are empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoverabilityMatrix {
    pub property: String,
    /// Majority baseline of the test rows.
    pub majority: f64,
    /// Probe accuracy per layer without any removal.
    pub vanilla: Vec<f64>,
    pub cells: Vec<Vec<Option<f64>>>,
}

impl RecoverabilityMatrix {
    pub fn num_layers(&self) -> usize {
        self.vanilla.len()
    }

    /// CSV with a `none` row for the vanilla accuracies; percentages.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("removed_at");
        for j in 0..self.num_layers() {
            let _ = write!(out, ",layer{j}");
        }
        out.push('\n');
        let fmt = |v: Option<f64>| v.map(|x| format!("{:.2}", 100.0 * x)).unwrap_or_default();
        out.push_str("none");
        for &v in &self.vanilla {
            out.push(',');
            out.push_str(&fmt(Some(v)));
        }
        out.push('\n');
        for (i, row) in self.cells.iter().enumerate() {
            out.push_str(&i.to_string());
            for &v in row {
                out.push(',');
                out.push_str(&fmt(v));
            }
            out.push('\n');
        }
        out
    }
}

fn probe_cell(
    train: &ReprDataset,
    test: &ReprDataset,
    property: &str,
    probe: &ProbeConfig,
    cell: u64,
) -> Result<f64> {
    let cfg = ProbeConfig {
        seed: seed::derive(probe.seed, seed::stream::PROBE, cell),
        ..*probe
    };
    let p = train_linear_probe(train, property, &cfg)?;
    Ok(probe_accuracy(&p, test, property)?)
}

/// Trains a fresh probe per cell on `train` sentences and scores it on
/// `test` sentences. `projections[i]` is the removal applied at layer `i`.
pub fn recoverability_matrix(
    enc: &LayeredEncoder,
    train: &SyntheticCorpus,
    test: &SyntheticCorpus,
    masked: bool,
    property: &str,
    projections: &[Projection],
    probe: &ProbeConfig,
) -> Result<RecoverabilityMatrix> {
    let size = enc.num_layers() + 1;
    if projections.len() != size {
        return Err(EncoderError::Config(format!(
            "expected {size} projections, got {}",
            projections.len()
        )));
    }
    let vanilla_train = export_layers(enc, train, masked, None)?;
    let vanilla_test = export_layers(enc, test, masked, None)?;
    let majority = label_stats(vanilla_test[0].property(property)?)?.majority_fraction;
    let vanilla = (0..size)
        .map(|j| probe_cell(&vanilla_train[j], &vanilla_test[j], property, probe, j as u64))
        .collect::<Result<Vec<_>>>()?;
    let mut cells = vec![vec![None; size]; size];
    for (i, p) in projections.iter().enumerate() {
        let (tr, te) = if p.is_identity() {
            (vanilla_train.clone(), vanilla_test.clone())
        } else {
            (
                export_layers(enc, train, masked, Some((i, p)))?,
                export_layers(enc, test, masked, Some((i, p)))?,
            )
        };
        for j in i..size {
            let acc = if p.is_identity() {
                vanilla[j]
            } else {
                probe_cell(&tr[j], &te[j], property, probe, ((i + 1) * size + j) as u64)?
            };
            cells[i][j] = Some(acc);
        }
    }
    Ok(RecoverabilityMatrix {
        property: property.to_string(),
        majority,
        vanilla,
        cells,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerImpact {
    pub layer: usize,
    pub removed: usize,
    pub vanilla_acc: f64,
    pub amnesic_acc: f64,
    pub rand_acc: f64,
    /// `rand_acc - amnesic_acc`.
    pub delta: f64,
}

/// Final-layer word accuracy after removal at each layer.
pub fn layerwise_impact(
    enc: &LayeredEncoder,
    eval: &SyntheticCorpus,
    masked: bool,
    removals: &[LayerRemoval],
) -> Result<Vec<LayerImpact>> {
    let top = enc.num_layers();
    let dec = enc.decoder();
    let vanilla = export_layers(enc, eval, masked, None)?;
    let vanilla_acc = lm_accuracy(&vanilla[top], &dec, None)?;
    removals
        .iter()
        .map(|r| {
            let acc = |p: &Projection| -> Result<f64> {
                if p.is_identity() {
                    return Ok(vanilla_acc);
                }
                let layers = export_layers(enc, eval, masked, Some((r.layer, p)))?;
                Ok(lm_accuracy(&layers[top], &dec, None)?)
            };
            let amnesic_acc = acc(&r.inlp.projection)?;
            let rand_acc = acc(&r.random)?;
            Ok(LayerImpact {
                layer: r.layer,
                removed: r.inlp.removed(),
                vanilla_acc,
                amnesic_acc,
                rand_acc,
                delta: rand_acc - amnesic_acc,
            })
        })
        .collect()
}

/// Layer with the largest delta; ties go to the lowest layer.
pub fn max_delta_layer(impacts: &[LayerImpact]) -> Option<usize> {
    impacts
        .iter()
        .fold(None::<&LayerImpact>, |best, x| match best {
            Some(b) if b.delta >= x.delta => Some(b),
            _ => Some(x),
        })
        .map(|x| x.layer)
}

/// `layer,removed,vanilla,amnesic,rand,delta` with percentages.
pub fn layer_impact_csv(impacts: &[LayerImpact]) -> String {
    let mut out = String::from("layer,removed,vanilla,amnesic,rand,delta\n");
    for x in impacts {
        let _ = writeln!(
            out,
            "{},{},{:.2},{:.2},{:.2},{:.2}",
            x.layer,
            x.removed,
            100.0 * x.vanilla_acc,
            100.0 * x.amnesic_acc,
            100.0 * x.rand_acc,
            100.0 * x.delta
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_synthetic_corpus, GrammarConfig};
    use crate::model::EncoderConfig;

    fn setup() -> (LayeredEncoder, SyntheticCorpus) {
        let corpus = build_synthetic_corpus(&GrammarConfig::det_noun_verb(40), 5).unwrap();
        let cfg = EncoderConfig {
            num_layers: 2,
            hidden: 16,
            heads: 2,
            ff: 32,
            max_len: 8,
            ..Default::default()
        };
        let enc = LayeredEncoder::new(cfg, corpus.vocab.clone(), 1).unwrap();
        (enc, corpus)
    }

    #[test]
    fn export_shapes_and_alignment() {
        let (enc, corpus) = setup();
        for masked in [false, true] {
            let layers = export_layers(&enc, &corpus, masked, None).unwrap();
            assert_eq!(layers.len(), 3);
            for (l, ds) in layers.iter().enumerate() {
                assert_eq!(ds.len(), corpus.num_tokens());
                assert_eq!(ds.dim(), 16);
                assert_eq!(ds.meta.layer, l as i64);
                assert_eq!(ds.meta.masked, masked);
            }
            let s = &corpus.sentences[3];
            let all = enc.encode_all(&s.ids, masked.then_some(2)).unwrap();
            let row = layers[2]
                .sentence_ids
                .iter()
                .zip(&layers[2].positions)
                .position(|(&sid, &p)| sid == 3 && p == 1)
                .unwrap();
            assert_eq!(layers[2].reps.row(row), all[2].row(2));
            assert_eq!(layers[2].task_labels[row], s.ids[2]);
        }
    }

    #[test]
    fn intervention_leaves_lower_layers_alone() {
        let (enc, corpus) = setup();
        let p = random_projection(16, 4, 3).unwrap();
        let base = export_layers(&enc, &corpus, false, None).unwrap();
        let hit = export_layers(&enc, &corpus, false, Some((1, &p))).unwrap();
        assert_eq!(base[0].reps, hit[0].reps);
        assert_ne!(base[1].reps, hit[1].reps);
        assert_ne!(base[2].reps, hit[2].reps);
    }

    #[test]
    fn identity_removals_are_neutral() {
        let (enc, corpus) = setup();
        let removals: Vec<LayerRemoval> = (0..3).map(|l| LayerRemoval::identity(l, 16)).collect();
        let impacts = layerwise_impact(&enc, &corpus, false, &removals).unwrap();
        assert!(impacts.iter().all(|x| x.delta == 0.0 && x.removed == 0));
        let ids: Vec<Projection> = (0..3).map(|_| Projection::identity(16)).collect();
        let m = recoverability_matrix(&enc, &corpus, &corpus, false, TAG_PROPERTY, &ids, &ProbeConfig::default())
            .unwrap();
        for (i, row) in m.cells.iter().enumerate() {
            for j in 0..3 {
                assert_eq!(row[j], (j >= i).then_some(m.vanilla[j]));
            }
        }
        let csv = m.to_csv();
        assert!(csv.starts_with("removed_at,layer0,layer1,layer2\nnone,"));
        assert!(csv.lines().nth(4).unwrap().starts_with("2,,,"));
    }

    #[test]
    fn max_delta_prefers_the_first_of_equals() {
        let mk = |layer, delta| LayerImpact {
            layer,
            removed: 1,
            vanilla_acc: 1.0,
            amnesic_acc: 0.0,
            rand_acc: 0.0,
            delta,
        };
        assert_eq!(max_delta_layer(&[mk(0, 0.1), mk(1, 0.3), mk(2, 0.3)]), Some(1));
        assert_eq!(max_delta_layer(&[]), None);
        assert!(layer_impact_csv(&[mk(0, 0.25)]).ends_with("0,1,100.00,0.00,0.00,25.00\n"));
    }

    #[test]
    fn bad_intervention_layer() {
        let (enc, corpus) = setup();
        let p = Projection::identity(16);
        assert_eq!(
            export_layers(&enc, &corpus, false, Some((3, &p))).unwrap_err().kind(),
            "IndexOutOfRange"
        );
        let q = Projection::identity(8);
        assert_eq!(
            export_layers(&enc, &corpus, false, Some((1, &q))).unwrap_err().kind(),
            "DimensionMismatch"
        );
    }
}
