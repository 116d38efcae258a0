use st_graphormer::dataset::SplitSpec;
use st_graphormer::graphprep::GraphSpec;
use st_graphormer::model::{ModelConfig, ParameterSet, Preset, TGraphormer};
use st_graphormer::pipeline::{prepare, Prepared};
use st_graphormer::synth::{generate, SynthConfig};
use st_graphormer::training::{train, train_until, Checkpoint, TrainConfig, TrainOutput};
use st_graphormer::Error;

fn data() -> Prepared {
    let d = generate(&SynthConfig { steps: 400, ..Default::default() }).unwrap();
    let graph = GraphSpec::new(10, true, d.edges, 4.0).unwrap();
    prepare(&d.series, &graph, &SplitSpec::TRAFFIC_SPEED, 3, 3, 0).unwrap()
}

fn model(p: &Prepared) -> TGraphormer {
    let cfg = ModelConfig {
        d_model: 8,
        layers: 2,
        heads: 2,
        dropout: 0.0,
        ..ModelConfig::from_preset(Preset::Micro, 3, 3, 10, p.manifest.channels)
    };
    TGraphormer::new(cfg, &p.degrees, &p.spd, p.manifest.normalizer).unwrap()
}

fn config() -> TrainConfig {
    TrainConfig { epochs: 2, base_lr: 3e-3, dropout: 0.0, seed: 5, ..Default::default() }
}

fn assert_params_close(a: &ParameterSet<f64>, b: &ParameterSet<f64>, tol: f64) {
    for (x, y) in a.tensors().iter().zip(b.tensors()) {
        for (u, v) in x.data().iter().zip(y.data()) {
            assert!((u - v).abs() <= tol, "{u} vs {v}");
        }
    }
}

#[test]
fn accumulation_matches_large_batch() {
    let p = data();
    let m = model(&p);
    let big = train::<f64>(&m, &TrainConfig { batch_size: 8, ..config() }, &p.train, &p.val, None, None).unwrap();
    let acc = train::<f64>(
        &m,
        &TrainConfig { batch_size: 4, grad_accum_steps: 2, ..config() },
        &p.train,
        &p.val,
        None,
        None,
    )
    .unwrap();
    assert_params_close(&big.last.params, &acc.last.params, 1e-10);
    assert_eq!(big.last.optimizer.step, acc.last.optimizer.step);
}

#[test]
fn rerun_is_identical_with_dropout() {
    let p = data();
    let m = model(&p);
    let cfg = TrainConfig { dropout: 0.1, ..config() };
    let a = train::<f64>(&m, &cfg, &p.train, &p.val, None, None).unwrap();
    let b = train::<f64>(&m, &cfg, &p.train, &p.val, None, None).unwrap();
    assert_eq!(a.last.logs, b.last.logs);
    assert_eq!(a.last.params, b.last.params);
    let other = train::<f64>(&m, &TrainConfig { seed: 6, ..cfg }, &p.train, &p.val, None, None).unwrap();
    assert_ne!(a.last.logs[0].train_loss, other.last.logs[0].train_loss);
}

#[test]
fn logs_and_checkpoints_on_disk() {
    let p = data();
    let m = model(&p);
    let dir = tempfile::tempdir().unwrap();
    let out = TrainOutput { dir: dir.path().to_path_buf() };
    let cfg = TrainConfig { epochs: 3, ..config() };
    let res = train::<f64>(&m, &cfg, &p.train, &p.val, None, Some(&out)).unwrap();
    assert_eq!(res.last.logs.len(), 3);
    let log = std::fs::read_to_string(out.log()).unwrap();
    let mut lines = log.lines();
    assert_eq!(lines.next().unwrap(), "epoch,train_loss,val_mae,val_rmse,val_mape,lr");
    assert_eq!(lines.count(), 3);

    let best = Checkpoint::<f64>::load(&out.best()).unwrap();
    assert_eq!(best.params, res.best.params);
    assert_eq!(best.optimizer.step, res.best.optimizer.step);
    assert_eq!(best.val, res.best.val);
    let best_logged = res.last.logs.iter().map(|l| l.val_mae).fold(f64::INFINITY, f64::min);
    assert_eq!(best.val.last().mae, best_logged);

    let x = p.test.sample(0).x;
    assert_eq!(m.predict(&best.params, &x).unwrap(), m.predict(&res.best.params, &x).unwrap());
}

#[test]
fn resume_continues_where_it_stopped() {
    let p = data();
    let m = model(&p);
    let cfg = TrainConfig { epochs: 3, dropout: 0.1, ..config() };
    let full = train::<f64>(&m, &cfg, &p.train, &p.val, None, None).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let out = TrainOutput { dir: dir.path().to_path_buf() };
    let first = train_until::<f64>(&m, &cfg, &p.train, &p.val, None, Some(&out), Some(1)).unwrap();
    let per_epoch = p.train.len().div_ceil(8) as u64;
    assert_eq!(first.last.optimizer.step, per_epoch);
    assert_eq!(first.last.logs.len(), 1);

    let saved = Checkpoint::<f64>::load(&out.last()).unwrap();
    assert_eq!(saved.optimizer, first.last.optimizer);
    let resumed = train::<f64>(&m, &cfg, &p.train, &p.val, Some(saved), Some(&out)).unwrap();
    assert_eq!(resumed.last.optimizer.step, 3 * per_epoch);
    assert_eq!(resumed.last.logs, full.last.logs);
    assert_eq!(resumed.last.params, full.last.params);
    assert_eq!(resumed.best.params, full.best.params);
    assert_eq!(std::fs::read_to_string(out.log()).unwrap().lines().count(), 4);
}

#[test]
fn non_finite_loss_aborts_and_keeps_last_good() {
    let p = data();
    let m = model(&p);
    let dir = tempfile::tempdir().unwrap();
    let out = TrainOutput { dir: dir.path().to_path_buf() };
    let cfg = TrainConfig { epochs: 3, ..config() };
    let good = train_until::<f64>(&m, &cfg, &p.train, &p.val, None, Some(&out), Some(1)).unwrap();
    let before = std::fs::read(out.best().with_extension("bin")).unwrap();

    let mut poisoned = good.last.clone();
    let name = poisoned.params.specs()[0].name.clone();
    poisoned.params.get_mut(&name).unwrap().data_mut()[0] = f64::NAN;
    let err = train::<f64>(&m, &cfg, &p.train, &p.val, Some(poisoned), Some(&out)).err().unwrap();
    assert!(matches!(err, Error::Numeric(_)), "{err}");
    assert_eq!(std::fs::read(out.best().with_extension("bin")).unwrap(), before);
}

#[test]
fn resume_rejects_other_model() {
    let p = data();
    let m = model(&p);
    let cfg = TrainConfig { epochs: 2, ..config() };
    let ck = train_until::<f64>(&m, &cfg, &p.train, &p.val, None, None, Some(1)).unwrap().last;
    let wider = ModelConfig { d_model: 12, ..m.config().clone() };
    let other = TGraphormer::new(wider, &p.degrees, &p.spd, p.manifest.normalizer).unwrap();
    assert!(train::<f64>(&other, &cfg, &p.train, &p.val, Some(ck), None).is_err());
}
