//! Regenerates the bundled fixture corpus and the reference loss trace of a
//! 200-step seed-7 desk run: `make_fixtures [dir]`.

use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;

use fsat_core::network::{Network, NetworkConfig};
use fsat_core::pipeline::{fixtures, train_loop, write_trace, DatasetIndex, TrainConfig};

fn main() -> fsat_core::Result<()> {
    let dir = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/../../fixtures")));
    fixtures::write_fixture_corpus(&dir)?;

    let (pairs, _) = DatasetIndex::open(dir.join("train"))?.load_all()?;
    let net = Network::<f32>::new(NetworkConfig::default())?;
    let cfg = TrainConfig {
        seed: 7,
        max_steps: Some(200),
        ..TrainConfig::desk()
    };
    let out = train_loop(&net, &net.init_params(7), &pairs, &cfg)?;
    let trace = dir.join("golden_trace_seed7.csv");
    write_trace(&out.trace, BufWriter::new(File::create(&trace)?))?;
    println!("wrote {}", dir.display());
    Ok(())
}
