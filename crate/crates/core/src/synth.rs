//! Synthetic traffic-speed corpus: congestion with daily rush hours that
//! diffuses over a random geometric graph.

use chrono::{NaiveDate, NaiveDateTime};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::RawSeries;
use crate::error::{config_err, Result};
use crate::graphprep::Edge;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub num_nodes: usize,
    pub steps: usize,
    pub interval_minutes: u32,
    pub seed: u64,
    /// Side of the square the sensors are scattered over, in km.
    pub area_km: f64,
    /// Sensor pairs closer than this are listed in the distance table.
    pub link_km: f64,
    pub free_flow: f64,
    /// Largest rush-hour speed drop at any sensor.
    pub peak_drop: f64,
    /// Share of congestion inherited from neighbours at each step.
    pub diffusion: f64,
    /// Day-to-day relative variation of rush-hour intensity.
    pub day_jitter: f64,
    /// Innovation std of the AR(1) sensor noise.
    pub noise_std: f64,
    /// Fraction of readings replaced by 0 (missing).
    pub missing_rate: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_nodes: 10,
            steps: 5000,
            interval_minutes: 5,
            seed: 7,
            area_km: 10.0,
            link_km: 5.0,
            free_flow: 65.0,
            peak_drop: 25.0,
            diffusion: 0.6,
            day_jitter: 0.1,
            noise_std: 0.2,
            missing_rate: 0.001,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthDataset {
    pub series: RawSeries,
    /// Directed sensor pairs and their distances in km.
    pub edges: Vec<Edge>,
    pub positions: Vec<(f64, f64)>,
}

pub fn synth_start() -> NaiveDateTime {
    NaiveDate::from_ymd_opt(2024, 1, 1).expect("valid date").and_hms_opt(0, 0, 0).expect("valid time")
}

fn bump(hour: f64, centre: f64, width: f64) -> f64 {
    (-0.5 * ((hour - centre) / width).powi(2)).exp()
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthDataset> {
    if cfg.num_nodes < 2 || cfg.steps == 0 || cfg.interval_minutes == 0 {
        return Err(config_err!("synthetic data needs at least two sensors, one step and a positive interval"));
    }
    if !(0.0..1.0).contains(&cfg.diffusion) || !(0.0..1.0).contains(&cfg.missing_rate) {
        return Err(config_err!("diffusion and missing_rate must lie in [0, 1)"));
    }
    let n = cfg.num_nodes;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let positions: Vec<(f64, f64)> =
        (0..n).map(|_| (rng.random_range(0.0..cfg.area_km), rng.random_range(0.0..cfg.area_km))).collect();
    let dist = |i: usize, j: usize| {
        let (a, b) = (positions[i], positions[j]);
        ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
    };

    // Link close pairs, and every sensor to its nearest neighbour so none is isolated.
    let mut linked = vec![false; n * n];
    for i in 0..n {
        let nearest = (0..n).filter(|&j| j != i).min_by(|&a, &b| dist(i, a).total_cmp(&dist(i, b))).expect("n >= 2");
        for j in 0..n {
            if j != i && (dist(i, j) <= cfg.link_km || j == nearest) {
                linked[i * n + j] = true;
                linked[j * n + i] = true;
            }
        }
    }
    let edges: Vec<Edge> = (0..n)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .filter(|&(i, j)| linked[i * n + j])
        .map(|(i, j)| Edge { from: i, to: j, dist: (dist(i, j) * 1e4).round() / 1e4 })
        .collect();

    // Row-normalized neighbour weights for diffusion.
    let mut mix = vec![0.0; n * n];
    for i in 0..n {
        let row: Vec<f64> = (0..n).map(|j| if linked[i * n + j] { (-dist(i, j) / cfg.link_km).exp() } else { 0.0 }).collect();
        let total: f64 = row.iter().sum();
        for j in 0..n {
            mix[i * n + j] = row[j] / total;
        }
    }

    let amplitude: Vec<f64> = (0..n).map(|_| cfg.peak_drop * rng.random_range(0.5..1.0)).collect();
    let lag: Vec<f64> = positions.iter().map(|p| 0.75 * p.0 / cfg.area_km).collect();
    let per_day = 24 * 60 / cfg.interval_minutes as usize;
    let days = cfg.steps.div_ceil(per_day) + 1;
    let day_factor: Vec<f64> = (0..days).map(|_| 1.0 + cfg.day_jitter * rng.random_range(-1.0..1.0)).collect();
    let noise = Normal::new(0.0, cfg.noise_std.max(0.0)).map_err(|e| config_err!("noise_std: {e}"))?;

    let mut congestion = vec![0.0; n];
    let mut ar = vec![0.0; n];
    let mut values = Vec::with_capacity(cfg.steps * n);
    for t in 0..cfg.steps {
        let minutes = t * cfg.interval_minutes as usize;
        let hour = (minutes % (24 * 60)) as f64 / 60.0;
        let day = minutes / (24 * 60);
        let local: Vec<f64> = (0..n)
            .map(|i| {
                let rush = bump(hour, 8.0 + lag[i], 1.0) + 0.8 * bump(hour, 17.5 + lag[i], 1.3);
                amplitude[i] * day_factor[day] * rush
            })
            .collect();
        let spread: Vec<f64> = (0..n).map(|i| (0..n).map(|j| mix[i * n + j] * congestion[j]).sum()).collect();
        for i in 0..n {
            congestion[i] = (1.0 - cfg.diffusion) * local[i] + cfg.diffusion * spread[i];
            ar[i] = 0.8 * ar[i] + noise.sample(&mut rng);
            let speed = (cfg.free_flow - congestion[i] + ar[i]).max(1.0);
            let missing = cfg.missing_rate > 0.0 && rng.random_bool(cfg.missing_rate);
            values.push(if missing { 0.0 } else { (speed * 1e4).round() / 1e4 });
        }
    }
    let series = RawSeries::regular(values, n, synth_start(), cfg.interval_minutes)?;
    Ok(SynthDataset { series, edges, positions })
}
