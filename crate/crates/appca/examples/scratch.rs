use appca::data::{generate_synthetic, SyntheticSpec};
use appca::model::center_observations;
use appca::samplers::{fit, RunConfig, SamplerKind};
use appca::Hyperparameters;
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let d: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(15);
    let iters: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(400);
    let alpha: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(2.0);
    let ks: Vec<usize> = args.get(4).map(|s| s.split(',').map(|v| v.parse().unwrap()).collect())
        .unwrap_or_else(|| vec![1, 2, 4, 7, 9]);
    for k in ks {
        let spec = SyntheticSpec { dims: d, k_plus: k, n_points: 1000, sigma_x: 1.5, sigma_y: 0.5, seed: 40 + k as u64 };
        let obs = center_observations(&generate_synthetic(&spec).unwrap().y).unwrap();
        let hyper = Hyperparameters::new(alpha, 1.5, 0.5, 1.0).unwrap();
        let mut cfg = RunConfig::new(SamplerKind::Hybrid);
        cfg.max_iter = iters;
        cfg.burn_in = iters / 2;
        cfg.track_every = 20;
        let t = Instant::now();
        let result = fit(&obs, &hyper, &cfg).unwrap();
        let elapsed = t.elapsed().as_secs_f64();
        let path: Vec<String> = result
            .trace
            .iter()
            .map(|r| format!("{}:{:.3}", r.iteration, r.mae))
            .collect();
        println!("D={d} Ktrue={k}  {}  [{elapsed:.0}s, K+={}]", path.join(" "), result.final_state.k_plus());
    }
}
