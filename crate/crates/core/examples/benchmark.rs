//! Runs the desk-scale comparison for the given seeds and prints every
//! metric as CSV. Arguments are seeds or `key=value` config overrides.
//!
//! cargo run --release --example benchmark -- 0 1 2 view_dim=3

use std::time::Instant;

use cigmo::baselines::BaselineKind;
use cigmo::cli::ExperimentConfig;
use cigmo::eval::{MetricsReport, CSV_HEADER};
use cigmo::experiment::{EvalPlan, Method};

fn main() -> anyhow::Result<()> {
    env_logger::init();
    let mut cfg = ExperimentConfig::default();
    let mut seeds = Vec::new();
    for arg in std::env::args().skip(1) {
        match arg.split_once('=') {
            Some((k, v)) => cfg.set(k, v)?,
            None => seeds.push(arg.parse::<u64>()?),
        }
    }
    let p = cfg.protocol;
    println!("{CSV_HEADER}");
    let print = |r: &MetricsReport| r.csv_rows().iter().for_each(|row| println!("{row}"));
    for seed in if seeds.is_empty() { vec![0] } else { seeds } {
        let t = Instant::now();
        let bench = p.benchmark(seed)?;
        let (m3, _) = p.fit(&bench, Method::Cigmo, 3, 3, seed)?;
        print(&p.evaluate(&m3, Method::Cigmo, &bench.test, seed, EvalPlan::ALL)?);
        let (m6, _) = p.fit(&bench, Method::Cigmo, 6, 3, seed)?;
        print(&p.evaluate(&m6, Method::Cigmo, &bench.test, seed, EvalPlan::CLUSTERING)?);
        let mix = Method::Baseline(BaselineKind::MixtureVae);
        let (mm, _) = p.fit(&bench, mix, 3, 1, seed)?;
        print(&p.evaluate(&mm, mix, &bench.test, seed, EvalPlan::CLUSTERING)?);
        let gvae = Method::Baseline(BaselineKind::Gvae);
        let (g, _) = p.fit(&bench, gvae, 1, 3, seed)?;
        print(&p.evaluate(&g, gvae, &bench.test, seed, EvalPlan::ALL)?);
        for k in [3, 6] {
            print(&p.evaluate_kmeans(&g, gvae, &bench.test, k, seed)?);
        }
        eprintln!("seed {seed} took {:.0?}", t.elapsed());
    }
    Ok(())
}
