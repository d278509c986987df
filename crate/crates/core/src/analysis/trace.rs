use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::{LmError, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::{Tape, Tensor};

/// Attention probabilities of one attention layer: `heads[h]` is
/// `n x n` with row `i` the distribution of position `i` over `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    /// Index into the layer list (1-based position in the stack).
    pub layer: usize,
    pub heads: Vec<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActivationTrace {
    pub ids: Vec<usize>,
    pub layer_index: Vec<usize>,
    pub labels: Vec<String>,
    /// `n x p` per captured layer.
    pub layers: Vec<Tensor>,
    pub attention: Vec<AttentionMap>,
}

/// `embed`, `1.attn`, `2.ffn`, ... for a transformer of the given depth.
pub fn layer_labels(depth: usize) -> Vec<String> {
    let mut v = vec!["embed".to_string()];
    v.extend((1..=depth).map(|l| format!("{l}.{}", if l % 2 == 1 { "attn" } else { "ffn" })));
    v
}

/// Runs one forward pass over `ids` and keeps the selected layer outputs
/// (0 = embedding plus positions, `l` = after layer `l`); empty selects all.
pub fn capture_activations(
    model: &Model,
    ids: &[usize],
    layers: &[usize],
    with_attention: bool,
) -> Result<ActivationTrace> {
    let ModelConfig::Transformer(c) = model.config() else {
        return Err(LmError::Unsupported(format!(
            "activation capture needs a transformer, got {}",
            model.config().kind()
        )));
    };
    let all: Vec<usize> = (0..=c.depth).collect();
    let selected = if layers.is_empty() { all } else { layers.to_vec() };
    if let Some(&l) = selected.iter().find(|&&l| l > c.depth) {
        return Err(LmError::Config(format!("layer {l} out of range 0..={}", c.depth)));
    }
    let tape = Tape::new();
    let vars = model.bind(&tape, false);
    let fwd = model.forward(&vars, &[ids])?;
    let labels = layer_labels(c.depth);
    let mut attention = Vec::new();
    if with_attention {
        for (k, &att) in fwd.attention.iter().enumerate() {
            let (spec, probs) = tape.attention_weights(att).expect("attention node");
            let n = ids.len();
            let heads = (0..spec.heads)
                .map(|h| Tensor::matrix(n, n, probs[h * n * n..(h + 1) * n * n].to_vec()))
                .collect();
            attention.push(AttentionMap { layer: 2 * k + 1, heads });
        }
    }
    Ok(ActivationTrace {
        ids: ids.to_vec(),
        labels: selected.iter().map(|&l| labels[l].clone()).collect(),
        layers: selected.iter().map(|&l| fwd.layers[l].value()).collect(),
        layer_index: selected,
        attention,
    })
}

#[derive(Serialize)]
struct Manifest<'a> {
    format_version: u32,
    ids: &'a [usize],
    layers: Vec<ManifestEntry>,
    attention: Vec<ManifestEntry>,
}

#[derive(Serialize)]
struct ManifestEntry {
    label: String,
    layer: usize,
    file: String,
    shape: Vec<usize>,
}

impl ActivationTrace {
    /// Writes one tensor file per layer (and per attention head) plus
    /// `manifest.json` into `dir`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut layers = Vec::new();
        for ((label, &layer), t) in self.labels.iter().zip(&self.layer_index).zip(&self.layers) {
            let file = format!("layer{layer}.tlm");
            fs::write(dir.join(&file), t.to_bytes())?;
            layers.push(ManifestEntry {
                label: label.clone(),
                layer,
                file,
                shape: t.shape().to_vec(),
            });
        }
        let mut attention = Vec::new();
        for a in &self.attention {
            for (h, t) in a.heads.iter().enumerate() {
                let file = format!("attn{}_head{h}.tlm", a.layer);
                fs::write(dir.join(&file), t.to_bytes())?;
                attention.push(ManifestEntry {
                    label: format!("{}.attn.head{h}", a.layer),
                    layer: a.layer,
                    file,
                    shape: t.shape().to_vec(),
                });
            }
        }
        let m = Manifest {
            format_version: 1,
            ids: &self.ids,
            layers,
            attention,
        };
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&m).expect("plain struct"))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TransformerConfig;
    use crate::rng::seeded;

    fn model() -> Model {
        Model::init(
            ModelConfig::Transformer(TransformerConfig::new(9, 16, 2, 4, 8)),
            &mut seeded(2),
        )
        .unwrap()
    }

    #[test]
    fn layer_zero_is_embedding_plus_positions() {
        let m = model();
        let ModelConfig::Transformer(c) = m.config() else { unreachable!() };
        let ids = [0, 4, 5, 8];
        let t = capture_activations(&m, &ids, &[0], false).unwrap();
        let pos = crate::model::positional_encoding(4, c.d_pos).unwrap();
        let e = m.param_by_name("embed").unwrap();
        for (i, &id) in ids.iter().enumerate() {
            let mut expect = e.row(id).to_vec();
            expect.extend_from_slice(pos.row(i));
            assert_eq!(t.layers[0].row(i), &expect[..]);
        }
        assert_eq!(t.labels, vec!["embed"]);
    }

    #[test]
    fn attention_rows_are_causal_distributions() {
        let m = model();
        let t = capture_activations(&m, &[0, 3, 4, 5, 6, 7], &[], true).unwrap();
        assert_eq!(t.attention.len(), 2);
        assert_eq!(t.layers.len(), 5);
        for a in &t.attention {
            for h in &a.heads {
                for i in 0..6 {
                    let row = h.row(i);
                    assert!((row[..=i].iter().sum::<f64>() - 1.0).abs() < 1e-9);
                    assert!(row[i + 1..].iter().all(|&x| x == 0.0));
                }
            }
        }
    }

    #[test]
    fn capture_is_pure() {
        let m = model();
        let ids = [0, 3, 4, 5];
        let before = m.logits(&ids).unwrap();
        capture_activations(&m, &ids, &[], true).unwrap();
        assert_eq!(m.logits(&ids).unwrap(), before);
        assert!(capture_activations(&m, &ids, &[5], false).is_err());
    }

    #[test]
    fn writes_manifest() {
        let m = model();
        let t = capture_activations(&m, &[0, 3, 4], &[0, 2], true).unwrap();
        let dir = tempfile::tempdir().unwrap();
        t.write_dir(dir.path()).unwrap();
        let manifest = fs::read_to_string(dir.path().join("manifest.json")).unwrap();
        assert!(manifest.contains("\"label\": \"2.ffn\""));
        let back = Tensor::read_from(&mut fs::File::open(dir.path().join("layer2.tlm")).unwrap()).unwrap();
        assert_eq!(back, t.layers[1]);
    }
}
