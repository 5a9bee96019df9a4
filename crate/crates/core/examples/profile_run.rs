//! Scratch driver for profiling a single model-guided run.

use nasbot::archgraph::NetClass;
use nasbot::objectives::ObjectiveSpec;
use nasbot::search::{run, Method, SearchConfig};

fn main() {
    let budget: usize = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(60);
    let config = SearchConfig {
        workers: 2,
        seed: 11,
        ..SearchConfig::new(
            Method::Nasbot,
            NetClass::Mlp,
            ObjectiveSpec::synthetic(nasbot::objectives::Synthetic::F2),
            budget,
        )
    };
    let out = run(&config).unwrap();
    println!("best {:?}", out.best.map(|(_, v)| v));
}
