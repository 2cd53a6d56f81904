use rangewalk::lattice::{Dim, ScaleRelation};
use rangewalk::sampler::{ChainConfig, RangeChain, StartPath};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let n: u32 = args[1].parse().unwrap();
    let burn_units: u64 = args[2].parse().unwrap();
    let blocks: usize = args[3].parse().unwrap();
    let start = match args.get(4).map(|s| s.as_str()) {
        Some("line") => StartPath::Straight(0),
        _ => StartPath::Compact,
    };
    let dim = Dim::new(3).unwrap();
    let scale = ScaleRelation::new(dim, n).unwrap();
    let mut cfg = ChainConfig::new(dim, scale.n_steps(), 1.0, 99).unwrap();
    cfg.start = start;
    cfg.burn_in = burn_units * cfg.thinning;
    let mut chain = RangeChain::new(cfg).unwrap();
    let mut means = Vec::new();
    for _ in 0..blocks {
        let mut acc = 0.0;
        let bs = 300;
        chain.sample(bs, |_i, w| acc += w.range_size() as f64);
        means.push((acc / bs as f64 * 10.0).round() / 10.0);
    }
    println!("n={n} burn={burn_units}: {means:?}");
}
