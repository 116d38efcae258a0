//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any FAIL.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use st_graphormer::dataset::{chronological_split, impute_historical_average, Normalizer, SplitSpec};
use st_graphormer::eval::{
    attention_heatmaps, evaluate, persistence_report, train_and_test, MetricsReport, Variant,
};
use st_graphormer::graphprep::{compute_degrees, compute_spd, GraphSpec, WeightedAdjacency, UNREACHABLE};
use st_graphormer::model::{
    parameter_count, AttentionTrace, Bound, EncodingFlags, GraphMaxima, ModelConfig, ParameterSet, Pass, Preset,
    TGraphormer, TokenLayout, TokenMode,
};
use st_graphormer::numerics::{finite_difference_check, huber, huber_grad, softmax_rows};
use st_graphormer::pipeline::{prepare, Prepared};
use st_graphormer::synth::{generate, SynthConfig};
use st_graphormer::training::{huber_loss, lr_at, train, TrainConfig, TrainOutput};
use st_graphormer::{Tape, Tensor};

type Check = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random_graph(rng: &mut ChaCha8Rng, n: usize, p: f64) -> WeightedAdjacency {
    let mut w = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j && rng.random_bool(p) {
                w[i * n + j] = rng.random_range(0.05..1.0);
            }
        }
    }
    WeightedAdjacency::from_dense(n, w).unwrap()
}

fn tiny_model(mode: TokenMode, encodings: EncodingFlags, seed: u64) -> TGraphormer {
    let cfg = ModelConfig {
        d_model: 8,
        layers: 2,
        heads: 2,
        ffn_ratio: 4,
        dropout: 0.0,
        token_mode: mode,
        encodings,
        context: 3,
        horizon: 3,
        num_nodes: 4,
        in_channels: 3,
        out_channels: 1,
        directed: true,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let adj = random_graph(&mut rng, 4, 0.4);
    TGraphormer::new(cfg, &compute_degrees(&adj), &compute_spd(&adj), Normalizer { mean: 0.5, std: 2.0 }).unwrap()
}

fn random_input(seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[3, 4, 3], |_| rng.random_range(-1.0..1.0))
}

fn gradient_correctness() -> Check {
    let start = Instant::now();
    let m = tiny_model(TokenMode::Cls, EncodingFlags::default(), 20);
    let p = m.init_parameters::<f64>(20);
    let x = random_input(21);
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let target: Vec<f64> = (0..12).map(|_| rng.random_range(-3.0..3.0)).collect();
    let mask = vec![true; 12];
    let report = finite_difference_check(p.tensors(), 1e-6, |tape, vars| {
        let b = Bound::new(&p, vars.to_vec());
        let out = m.forward(tape, &b, &x, &mut Pass::eval())?;
        tape.huber_sum(out, &target, &mask, 1.5)
    })
    .map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    ensure(
        report.max_rel_error < 1e-4 && secs < 60.0,
        format!("max rel error {:.2e} over {} coordinates in {secs:.1}s", report.max_rel_error, report.coordinates),
    )
}

fn floyd_warshall(w: &WeightedAdjacency) -> Vec<u32> {
    let n = w.num_nodes();
    let inf = u64::MAX / 4;
    let mut d = vec![inf; n * n];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                d[i * n + j] = 0;
            } else if w.get(i, j) > 0.0 {
                d[i * n + j] = 1;
            }
        }
    }
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                let via = d[i * n + k] + d[k * n + j];
                if via < d[i * n + j] {
                    d[i * n + j] = via;
                }
            }
        }
    }
    d.into_iter().map(|v| if v >= inf { UNREACHABLE } else { v as u32 }).collect()
}

fn spd_oracle() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut mismatches = 0;
    for _ in 0..100 {
        let n = rng.random_range(1..=16);
        let p = rng.random_range(0.0..0.5);
        let w = random_graph(&mut rng, n, p);
        if compute_spd(&w).as_slice() != floyd_warshall(&w).as_slice() {
            mismatches += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(mismatches == 0 && secs < 5.0, format!("{mismatches} mismatches on 100 graphs in {secs:.3}s"))
}

fn embed(m: &TGraphormer, p: &ParameterSet<f64>, x: &Tensor<f64>) -> Tensor<f64> {
    let mut tape = Tape::new();
    let b = m.bind(&mut tape, p, false);
    let h = m.embed_inputs(&mut tape, &b, x).unwrap();
    tape.value(h).clone()
}

fn bits(t: &Tensor<f64>) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

fn encoding_invariances() -> Check {
    let mut failures = Vec::new();
    // Centrality: with W0 and positions off, a node's embedding is the same at every step.
    for mode in [TokenMode::None, TokenMode::Cls, TokenMode::Graph] {
        let m = tiny_model(mode, EncodingFlags { use_positional: false, ..Default::default() }, 2);
        let mut p = m.init_parameters::<f64>(2);
        p.get_mut("embed.w0").unwrap().data_mut().fill(0.0);
        let h = embed(&m, &p, &random_input(3));
        for i in 0..4 {
            let first = h.row(m.layout().position(0, i)).to_vec();
            if (1..3).any(|t| h.row(m.layout().position(t, i)) != first.as_slice()) {
                failures.push(format!("centrality varies over time ({mode:?})"));
            }
        }
    }
    // Spatial bias: bucket of (t1, i) -> (t2, j) ignores t1, t2.
    for mode in [TokenMode::None, TokenMode::Cls, TokenMode::Graph] {
        let m = tiny_model(mode, EncodingFlags::default(), 4);
        let (layout, idx) = (m.layout(), m.bias_index());
        for i in 0..4 {
            for j in 0..4 {
                let b0 = idx.bucket(layout.position(0, i), layout.position(0, j));
                for t1 in 0..3 {
                    for t2 in 0..3 {
                        if idx.bucket(layout.position(t1, i), layout.position(t2, j)) != b0 {
                            failures.push(format!("bias bucket varies over time ({mode:?})"));
                        }
                    }
                }
            }
        }
    }
    // Disabled flag gives the same bits as zeroing the table it controls.
    let x = random_input(5);
    let cases: [(&str, &[&str]); 3] = [
        ("positional", &["embed.pos"]),
        ("centrality", &["embed.z_in", "embed.z_out"]),
        ("spatial", &["spatial_bias"]),
    ];
    for (flag, tables) in cases {
        let mut off = EncodingFlags::default();
        match flag {
            "positional" => off.use_positional = false,
            "centrality" => off.use_centrality = false,
            _ => off.use_spatial_bias = false,
        }
        let on_model = tiny_model(TokenMode::Cls, EncodingFlags::default(), 6);
        let off_model = tiny_model(TokenMode::Cls, off, 6);
        let full = on_model.init_parameters::<f64>(7);
        let mut zeroed = full.clone();
        for t in tables {
            zeroed.get_mut(t).unwrap().data_mut().fill(0.0);
        }
        let a = off_model.predict(&full, &x).unwrap();
        let b = on_model.predict(&zeroed, &x).unwrap();
        if bits(&a) != bits(&b) {
            failures.push(format!("{flag} flag differs from zeroed table"));
        }
    }
    ensure(
        failures.is_empty(),
        if failures.is_empty() { "centrality, bias buckets and 3 flag/table pairs exact".into() } else { failures.join("; ") },
    )
}

fn parameter_counts() -> Check {
    // PEMS-BAY: 325 sensors, 5-minute slots, T' = 12.
    let maxima = GraphMaxima { max_in: 12, max_out: 12, max_spd: 40 };
    let mut parts = Vec::new();
    let mut ok = true;
    for (preset, target) in [(Preset::Micro, 0.58e6), (Preset::Mini, 1.76e6), (Preset::Small, 4.44e6)] {
        let cfg = ModelConfig::from_preset(preset, 12, 12, 325, 289);
        let count = parameter_count(&cfg, &maxima) as f64;
        let rel = (count - target) / target;
        ok &= rel.abs() < 0.1;
        parts.push(format!("{preset:?} {:.3}M ({:+.1}%)", count / 1e6, 100.0 * rel));
    }
    ensure(ok, parts.join(", "))
}

fn huber_definition() -> Check {
    let d = 1.5;
    let values = [huber(1.0, d), huber(1.5, d), huber(3.0, d)];
    let loss = huber_loss(&[1.0, 1.5, 3.0], &[0.0; 3], d, &[true; 3]).map_err(|e| e.to_string())?;
    let eps = 1e-7;
    let left = (huber(d, d) - huber(d - eps, d)) / eps;
    let right = (huber(d + eps, d) - huber(d, d)) / eps;
    let grad_gap = (huber_grad(d - 1e-12, d) - huber_grad(d + 1e-12, d)).abs();
    ensure(
        values == [0.5, 1.125, 3.375] && loss == (0.5 + 1.125 + 3.375) / 3.0 && (left - right).abs() < 1e-6 && grad_gap < 1e-6,
        format!("values {values:?}, one-sided slopes {left:.9} / {right:.9}"),
    )
}

fn pipeline_numerics(data: &Prepared, synth: &SynthConfig) -> Check {
    let series = generate(synth).map_err(|e| e.to_string())?.series;
    let (train_raw, _, _) = chronological_split(&series, &SplitSpec::TRAFFIC_SPEED, 24).map_err(|e| e.to_string())?;
    let imputed = impute_historical_average(&train_raw).map_err(|e| e.to_string())?;
    let norm = Normalizer::fit(&imputed).map_err(|e| e.to_string())?;
    let roundtrip = imputed.values().iter().map(|&v| (norm.invert(norm.apply(v)) - v).abs()).fold(0.0, f64::max);
    let z = norm.apply_series(&imputed);
    let n = z.values().len() as f64;
    let mean = z.values().iter().sum::<f64>() / n;
    let std = (z.values().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let logits = Tensor::from_fn(&[64, 121], |_| rng.random_range(-30.0..30.0));
    let soft = softmax_rows(&logits);
    let row_err = soft.data().chunks(121).map(|r| (r.iter().sum::<f64>() - 1.0).abs()).fold(0.0, f64::max);

    let (base, warmup, epochs) = (1e-3, 2.0, 10.0);
    let lr0 = lr_at(0.0, warmup, epochs, base);
    let lr_w = lr_at(warmup, warmup, epochs, base);
    let lr_end = lr_at(epochs, warmup, epochs, base);

    let ok = roundtrip < 1e-9
        && mean.abs() < 1e-6
        && (std - 1.0).abs() < 1e-6
        && row_err < 1e-12
        && lr0 == 0.0
        && lr_w == base
        && lr_end.abs() < 1e-12 * base
        && norm == data.manifest.normalizer;
    ensure(
        ok,
        format!(
            "roundtrip {roundtrip:.1e}, z mean {mean:.1e} std {std:.9}, softmax {row_err:.1e}, lr {lr0}/{lr_w}/{lr_end:.1e}"
        ),
    )
}

fn heatmap_aggregation() -> Check {
    let mut worst: f64 = 0.0;
    let mut mean_gap: f64 = 0.0;
    for mode in [TokenMode::Cls, TokenMode::Graph, TokenMode::None] {
        let (steps, n, layers, heads) = (3, 4, 2, 2);
        let layout = TokenLayout::new(mode, steps, n).unwrap();
        let l = layout.len();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let traces: Vec<AttentionTrace> = (0..2)
            .map(|_| AttentionTrace {
                layers: (0..layers)
                    .map(|_| {
                        (0..heads)
                            .map(|_| softmax_rows(&Tensor::from_fn(&[l, l], |_| rng.random_range(-3.0..3.0))))
                            .collect()
                    })
                    .collect(),
            })
            .collect();
        let b = attention_heatmaps(&traces, &layout, false).map_err(|e| e.to_string())?;
        let s = |p: usize, q: usize| {
            let mut total = 0.0;
            for j in 0..layers {
                let mut acc = 0.0;
                for tr in &traces {
                    for h in 0..heads {
                        acc += tr.layers[j][h].at(p, q);
                    }
                }
                total += acc / (traces.len() * heads) as f64;
            }
            total / layers as f64
        };
        let mut global = 0.0;
        for i in 0..n {
            for j in 0..n {
                let mut acc = 0.0;
                for t1 in 0..steps {
                    for t2 in 0..steps {
                        acc += s(layout.position(t1, i), layout.position(t2, j));
                    }
                }
                global += acc;
                worst = worst.max((b.node_node.at(i, j) - acc / (steps * steps) as f64).abs());
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
                worst = worst.max((b.time_time.at(t1, t2) - acc / (n * n) as f64).abs());
            }
        }
        global /= (steps * n * steps * n) as f64;
        let mean = |t: &Tensor<f64>| t.data().iter().sum::<f64>() / t.numel() as f64;
        mean_gap = mean_gap.max((mean(&b.node_node) - global).abs()).max((mean(&b.time_time) - global).abs());
    }
    ensure(
        worst < 1e-12 && mean_gap < 1e-12,
        format!("max oracle gap {worst:.1e}, global-mean gap {mean_gap:.1e}"),
    )
}

/// Pooled masked MAE over every horizon step.
fn pooled_mae(r: &MetricsReport) -> f64 {
    r.last().mae
}

fn observed_std(data: &SynthConfig) -> f64 {
    let series = generate(data).unwrap().series;
    let obs: Vec<f64> = series.values().iter().copied().filter(|&v| v != 0.0).collect();
    let n = obs.len() as f64;
    let mean = obs.iter().sum::<f64>() / n;
    (obs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

fn learning_config() -> TrainConfig {
    TrainConfig { epochs: 5, warmup_epochs: 1, max_steps: Some(2000), batch_size: 8, seed: 0, ..Default::default() }
}

fn learning_sanity(data: &Prepared, synth: &SynthConfig, full_report: &mut Option<MetricsReport>) -> Check {
    let start = Instant::now();
    let cfg = ModelConfig::from_preset(Preset::Micro, 12, 12, 10, data.manifest.channels);
    let (best, test) = train_and_test::<f32>(&cfg, &learning_config(), data, None).map_err(|e| e.to_string())?;
    let model = TGraphormer::new(cfg, &data.degrees, &data.spd, data.manifest.normalizer).map_err(|e| e.to_string())?;
    let train_mae = pooled_mae(&evaluate(&model, &best.params, &data.train, None).map_err(|e| e.to_string())?);
    let persistence = pooled_mae(&persistence_report(&data.test).map_err(|e| e.to_string())?);
    let secs = start.elapsed().as_secs_f64();
    let std = observed_std(synth);
    let test_mae = pooled_mae(&test);
    let gain = 1.0 - test_mae / persistence;
    *full_report = Some(test);
    ensure(
        train_mae < 0.1 * std && gain >= 0.2 && secs < 600.0,
        format!(
            "train MAE {train_mae:.4} vs 10% of std {:.4}; test MAE {test_mae:.4} vs persistence {persistence:.4} ({:.1}% better); {secs:.0}s",
            0.1 * std,
            100.0 * gain
        ),
    )
}

fn ablation_direction(data: &Prepared, full: Option<&MetricsReport>) -> Check {
    let full = full.ok_or("full-model run unavailable")?;
    let base = ModelConfig::from_preset(Preset::Micro, 12, 12, 10, data.manifest.channels);
    let cfg = Variant::NoPositional.apply(&base);
    let (_, report) = train_and_test::<f32>(&cfg, &learning_config(), data, None).map_err(|e| e.to_string())?;
    let (a, b) = (pooled_mae(&report), pooled_mae(full));
    ensure(a > b, format!("no_positional test MAE {a:.4} vs full {b:.4} ({:+.1}%)", 100.0 * (a / b - 1.0)))
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

fn determinism(data: &Prepared) -> Check {
    let cfg = ModelConfig::from_preset(Preset::Micro, 12, 12, 10, data.manifest.channels);
    let model = TGraphormer::new(cfg, &data.degrees, &data.spd, data.manifest.normalizer).map_err(|e| e.to_string())?;
    let tc = TrainConfig { epochs: 3, max_steps: Some(90), val_limit: Some(120), seed: 3, ..Default::default() };
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let out = TrainOutput { dir: root.path().join(run) };
        train::<f64>(&model, &tc, &data.train, &data.val, None, Some(&out)).map_err(|e| e.to_string())?;
        outputs.push(dir_bytes(&out.dir));
    }
    let names: Vec<&str> = outputs[0].iter().map(|(n, _)| n.as_str()).collect();
    ensure(
        outputs[0] == outputs[1] && names.len() == 5,
        format!("{} files byte-identical across runs: {}", names.len(), names.join(", ")),
    )
}

fn main() {
    // `cargo test -- --list` probes every target; this one has no listable cases.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let synth = SynthConfig::default();
    let data = {
        let d = generate(&synth).unwrap();
        let graph = GraphSpec::new(d.series.num_nodes(), true, d.edges, f64::MAX).unwrap();
        prepare(&d.series, &graph, &SplitSpec::TRAFFIC_SPEED, 12, 12, 0).unwrap()
    };
    let mut full_report = None;
    let mut failed = 0;
    let mut run = |id: u32, name: &str, f: &mut dyn FnMut() -> Check| {
        let start = Instant::now();
        let res = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or(p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        let secs = start.elapsed().as_secs_f64();
        match res {
            Ok(detail) => println!("PASS {id:>2} {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {id:>2} {name}: {detail} [{secs:.1}s]");
            }
        }
    };
    run(1, "gradient correctness", &mut gradient_correctness);
    run(2, "SPD oracle equivalence", &mut spd_oracle);
    run(3, "encoding invariances", &mut encoding_invariances);
    run(4, "parameter counts", &mut parameter_counts);
    run(5, "Huber loss definition", &mut huber_definition);
    run(6, "pipeline numerics", &mut || pipeline_numerics(&data, &synth));
    run(7, "learning sanity", &mut || learning_sanity(&data, &synth, &mut full_report));
    run(8, "ablation direction", &mut || ablation_direction(&data, full_report.as_ref()));
    run(9, "heatmap aggregation", &mut heatmap_aggregation);
    run(10, "determinism", &mut || determinism(&data));
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
