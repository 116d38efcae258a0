use std::path::Path;

use crate::error::{config_err, shape_err, Result};
use crate::graphprep::write_matrix_csv;
use crate::model::{AttentionTrace, TokenLayout};
use crate::numerics::Tensor;

/// Attention averaged down to node-to-node and step-to-step maps.
#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapBundle {
    /// `N x N`.
    pub node_node: Tensor<f64>,
    /// `T' x T'`.
    pub time_time: Tensor<f64>,
    /// Per-layer `(node_node, time_time)`, when requested.
    pub per_layer: Vec<(Tensor<f64>, Tensor<f64>)>,
}

/// Mean `l x l` attention of every layer: over samples, then over heads.
fn layer_means(traces: &[AttentionTrace], l: usize) -> Result<Vec<Vec<f64>>> {
    let first = traces.first().ok_or_else(|| config_err!("no attention traces to aggregate"))?;
    let layers = first.layers.len();
    let heads = first.layers.first().map_or(0, Vec::len);
    if layers == 0 || heads == 0 {
        return Err(shape_err!("attention trace holds no matrices"));
    }
    let mut sums = vec![vec![0.0; l * l]; layers];
    for tr in traces {
        if tr.layers.len() != layers || tr.layers.iter().any(|hs| hs.len() != heads) {
            return Err(shape_err!("attention traces disagree in layer or head count"));
        }
        for (sum, hs) in sums.iter_mut().zip(&tr.layers) {
            for a in hs {
                if a.shape() != [l, l] {
                    return Err(shape_err!("attention matrix of shape {:?}, layout has {l} tokens", a.shape()));
                }
                sum.iter_mut().zip(a.data()).for_each(|(s, &v)| *s += v);
            }
        }
    }
    let scale = 1.0 / (traces.len() * heads) as f64;
    for sum in &mut sums {
        sum.iter_mut().for_each(|s| *s *= scale);
    }
    Ok(sums)
}

/// Projects an `l x l` map onto node pairs and step pairs, skipping special tokens.
fn project(s: &[f64], layout: &TokenLayout) -> (Tensor<f64>, Tensor<f64>) {
    let (steps, n, l) = (layout.steps(), layout.nodes(), layout.len());
    let mut nn = vec![0.0; n * n];
    let mut tt = vec![0.0; steps * steps];
    for t1 in 0..steps {
        for i in 0..n {
            let p = layout.position(t1, i);
            for t2 in 0..steps {
                for j in 0..n {
                    let v = s[p * l + layout.position(t2, j)];
                    nn[i * n + j] += v;
                    tt[t1 * steps + t2] += v;
                }
            }
        }
    }
    let (sn, st) = (1.0 / (steps * steps) as f64, 1.0 / (n * n) as f64);
    nn.iter_mut().for_each(|v| *v *= sn);
    tt.iter_mut().for_each(|v| *v *= st);
    (
        Tensor::new(vec![n, n], nn).expect("n x n"),
        Tensor::new(vec![steps, steps], tt).expect("steps x steps"),
    )
}

/// Averages traces over samples, then over layers and heads, and
/// projects the result onto node pairs and step pairs.
pub fn attention_heatmaps(traces: &[AttentionTrace], layout: &TokenLayout, per_layer: bool) -> Result<HeatmapBundle> {
    let l = layout.len();
    let layers = layer_means(traces, l)?;
    let mut overall = vec![0.0; l * l];
    for m in &layers {
        overall.iter_mut().zip(m).for_each(|(o, &v)| *o += v);
    }
    let k = 1.0 / layers.len() as f64;
    overall.iter_mut().for_each(|o| *o *= k);
    let (node_node, time_time) = project(&overall, layout);
    let per_layer = if per_layer { layers.iter().map(|m| project(m, layout)).collect() } else { Vec::new() };
    Ok(HeatmapBundle { node_node, time_time, per_layer })
}

impl HeatmapBundle {
    /// Writes `node_node.csv`, `time_time.csv` and one `layer_<j>.csv`
    /// (node-to-node) per layer.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let csv = |name: String, t: &Tensor<f64>| -> Result<()> {
            let f = std::io::BufWriter::new(std::fs::File::create(dir.join(name))?);
            write_matrix_csv(f, t.cols(), t.data())
        };
        csv("node_node.csv".into(), &self.node_node)?;
        csv("time_time.csv".into(), &self.time_time)?;
        for (j, (nn, _)) in self.per_layer.iter().enumerate() {
            csv(format!("layer_{j}.csv"), nn)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::model::TokenMode;
    use crate::numerics::softmax_rows;

    fn random_trace(rng: &mut ChaCha8Rng, layers: usize, heads: usize, l: usize) -> AttentionTrace {
        AttentionTrace {
            layers: (0..layers)
                .map(|_| {
                    (0..heads).map(|_| softmax_rows(&Tensor::from_fn(&[l, l], |_| rng.random_range(-3.0..3.0)))).collect()
                })
                .collect(),
        }
    }

    #[test]
    fn uniform_attention_gives_uniform_maps() {
        let layout = TokenLayout::new(TokenMode::None, 3, 4).unwrap();
        let tr = AttentionTrace { layers: vec![vec![Tensor::filled(&[12, 12], 1.0 / 12.0)]] };
        let b = attention_heatmaps(&[tr], &layout, false).unwrap();
        assert!(b.node_node.data().iter().all(|&v| (v - 1.0 / 12.0).abs() < 1e-15));
        assert!(b.time_time.data().iter().all(|&v| (v - 1.0 / 12.0).abs() < 1e-15));
    }

    #[test]
    fn duplicated_traces_match_single() {
        let layout = TokenLayout::new(TokenMode::Cls, 2, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tr = random_trace(&mut rng, 2, 2, 7);
        let one = attention_heatmaps(std::slice::from_ref(&tr), &layout, true).unwrap();
        let two = attention_heatmaps(&[tr.clone(), tr], &layout, true).unwrap();
        for (a, b) in one.node_node.data().iter().zip(two.node_node.data()) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(two.per_layer.len(), 2);
    }

    #[test]
    fn nested_loop_oracle() {
        for mode in [TokenMode::Cls, TokenMode::Graph, TokenMode::None] {
            let (steps, n, layers, heads) = (3, 4, 2, 2);
            let layout = TokenLayout::new(mode, steps, n).unwrap();
            let l = layout.len();
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            let traces: Vec<_> = (0..2).map(|_| random_trace(&mut rng, layers, heads, l)).collect();
            let b = attention_heatmaps(&traces, &layout, false).unwrap();

            let s = |p: usize, q: usize| {
                let mut layer_avg = 0.0;
                for j in 0..layers {
                    let mut acc = 0.0;
                    for tr in &traces {
                        for h in 0..heads {
                            acc += tr.layers[j][h].at(p, q);
                        }
                    }
                    layer_avg += acc / (traces.len() * heads) as f64;
                }
                layer_avg / layers as f64
            };
            let mut global = 0.0;
            for i in 0..n {
                for j in 0..n {
                    let mut acc = 0.0;
                    for t1 in 0..steps {
                        for t2 in 0..steps {
                            let v = s(layout.position(t1, i), layout.position(t2, j));
                            acc += v;
                            global += v;
                        }
                    }
                    assert!((b.node_node.at(i, j) - acc / 9.0).abs() < 1e-12);
                }
            }
            for t1 in 0..steps {
                for t2 in 0..steps {
                    let mut acc = 0.0;
                    for i in 0..n {
                        for j in 0..n {
                            acc += s(layout.position(t1, i), layout.position(t2, j));
                        }
                    }
                    assert!((b.time_time.at(t1, t2) - acc / 16.0).abs() < 1e-12);
                }
            }
            global /= (steps * n * steps * n) as f64;
            let mean = |t: &Tensor<f64>| t.data().iter().sum::<f64>() / t.numel() as f64;
            assert!((mean(&b.node_node) - global).abs() < 1e-12);
            assert!((mean(&b.time_time) - global).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_input() {
        let layout = TokenLayout::new(TokenMode::None, 2, 2).unwrap();
        assert!(attention_heatmaps(&[], &layout, false).is_err());
        let tr = AttentionTrace { layers: vec![vec![Tensor::filled(&[3, 3], 1.0 / 3.0)]] };
        assert!(attention_heatmaps(&[tr], &layout, false).is_err());
    }

    #[test]
    fn writes_csv_files() {
        let layout = TokenLayout::new(TokenMode::Cls, 2, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = attention_heatmaps(&[random_trace(&mut rng, 3, 1, 7)], &layout, true).unwrap();
        let dir = tempfile::tempdir().unwrap();
        b.write(dir.path()).unwrap();
        let nn = std::fs::read_to_string(dir.path().join("node_node.csv")).unwrap();
        assert_eq!(nn.lines().count(), 3);
        assert_eq!(nn.lines().next().unwrap().split(',').count(), 3);
        assert!(dir.path().join("layer_2.csv").exists());
        assert!(!dir.path().join("layer_3.csv").exists());
    }
}
