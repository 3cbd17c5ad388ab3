use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::anyhow;
use fsat_core::network::verify::{GradientProbe, PROBE_SIDE};
use fsat_core::network::{read_model, ModelParams, Network, NetworkConfig, StructureRegistry};
use fsat_core::pipeline::{
    bench_runtime, evaluate_dataset, fuse_rgb_pipeline, load_netpbm, load_pgm, load_ppm, luma,
    save_pgm, save_ppm, train_loop, write_trace, DatasetIndex, TrainConfig,
};
use fsat_core::tensor::GradCheckOptions;
use fsat_core::Error;
use log::info;

use crate::{
    BenchArgs, Command, EvalArgs, FuseArgs, GradcheckArgs, TrainArgs, EXIT_DATA, EXIT_USAGE,
    EXIT_VERIFY,
};

/// An error with the process exit code it maps to.
pub struct Failure {
    pub error: anyhow::Error,
    pub code: u8,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) | Error::UnknownStructure { .. } => EXIT_USAGE,
            _ => EXIT_DATA,
        };
        Self {
            error: e.into(),
            code,
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Error::from(e).into()
    }
}

trait Ctx<T> {
    fn at(self, what: &str, path: &Path) -> Result<T, Failure>;
}

impl<T> Ctx<T> for fsat_core::Result<T> {
    fn at(self, what: &str, path: &Path) -> Result<T, Failure> {
        self.map_err(|e| {
            let mut f = Failure::from(e);
            f.error = f.error.context(format!("{what} {}", path.display()));
            f
        })
    }
}

pub fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Fuse(a) => fuse(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Bench(a) => bench(a),
        Command::Gradcheck(a) => gradcheck(a),
    }
}

fn load_model(path: &Path) -> Result<(Network<f32>, ModelParams<f32>), Failure> {
    read_model(path, &StructureRegistry::with_defaults()).at("loading model", path)
}

fn load_pairs(dir: &Path) -> Result<Vec<fsat_core::pipeline::ImagePair>, Failure> {
    let index = DatasetIndex::open(dir).at("opening dataset", dir)?;
    let (pairs, skipped) = index.load_all().at("loading dataset", dir)?;
    if skipped > 0 {
        eprintln!("skipped {skipped} unreadable or unmatched entries");
    }
    Ok(pairs)
}

fn fuse(a: FuseArgs) -> Result<(), Failure> {
    let (net, params) = load_model(&a.model)?;
    let ir = load_pgm(&a.ir).at("reading", &a.ir)?;
    if a.rgb {
        let vi = load_ppm(&a.vi).at("reading", &a.vi)?;
        let out = fuse_rgb_pipeline(&net, &params, &ir, &vi)?;
        save_ppm(&a.out, &out).at("writing", &a.out)?;
    } else {
        let vi = luma(&load_netpbm(&a.vi).at("reading", &a.vi)?)?;
        let out = net.fuse(&params, &ir, &vi)?;
        save_pgm(&a.out, &out).at("writing", &a.out)?;
    }
    Ok(())
}

fn train(a: TrainArgs) -> Result<(), Failure> {
    let base = if a.desk {
        TrainConfig::desk()
    } else {
        TrainConfig::default()
    };
    let cfg = TrainConfig {
        epochs: a.epochs.unwrap_or(base.epochs),
        batch: a.batch.unwrap_or(base.batch),
        lr: a.lr.unwrap_or(base.lr),
        lr_min: a.lr_min.unwrap_or(base.lr_min),
        patch: a.patch.unwrap_or(base.patch),
        max_steps: a.max_steps.or(base.max_steps),
        seed: a.seed,
        ..base
    };
    let net = Network::<f32>::new(NetworkConfig {
        n_fsat: a.n_fsat,
        structure: a.ablation.clone(),
        ..NetworkConfig::default()
    })?;
    let pairs = load_pairs(&a.data)?;
    let init = net.init_params(a.seed);
    info!(
        "training {} on {} pairs for {} steps",
        a.ablation,
        pairs.len(),
        cfg.total_steps(pairs.len())
    );
    let start = Instant::now();
    let outcome = train_loop(&net, &init, &pairs, &cfg)?;
    net.save(&a.out, &outcome.params)
        .at("writing model", &a.out)?;

    let trace_path = a.trace.unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".trace.csv");
        PathBuf::from(p)
    });
    let file = File::create(&trace_path)
        .map_err(Error::from)
        .at("writing", &trace_path)?;
    write_trace(&outcome.trace, BufWriter::new(file)).at("writing", &trace_path)?;
    println!(
        "steps {}  loss {:.4} -> {:.4}  ({:.1} s)",
        outcome.trace.len(),
        outcome.initial_loss().unwrap_or(f64::NAN),
        outcome.final_loss().unwrap_or(f64::NAN),
        start.elapsed().as_secs_f64()
    );
    Ok(())
}

fn eval(a: EvalArgs) -> Result<(), Failure> {
    let (net, params) = load_model(&a.model)?;
    let pairs = load_pairs(&a.data)?;
    let report = evaluate_dataset(&net, &params, &pairs)?;
    let file = File::create(&a.csv)
        .map_err(Error::from)
        .at("writing", &a.csv)?;
    report
        .write_csv(BufWriter::new(file))
        .at("writing", &a.csv)?;
    let m = report.mean().expect("dataset is non-empty");
    println!(
        "mean over {} pairs: MI {:.4}  NCIE {:.4}  Qabf {:.4}  SSIM {:.4}",
        report.rows.len(),
        m.mi,
        m.ncie,
        m.qabf,
        m.ssim
    );
    Ok(())
}

fn bench(a: BenchArgs) -> Result<(), Failure> {
    let (net, params) = load_model(&a.model)?;
    let pairs = load_pairs(&a.data)?;
    let report = bench_runtime(&net, &params, &pairs, a.repeats)?;
    report.write_table(io::stdout().lock())?;
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<(), Failure> {
    let start = Instant::now();
    let probe = GradientProbe::new(a.seed, PROBE_SIDE)?;
    let opts = GradCheckOptions {
        samples_per_tensor: a.samples,
        tolerance: a.tolerance,
        seed: a.seed,
        ..GradCheckOptions::default()
    };
    let report = probe.check(&opts)?;
    let mut out = io::stdout().lock();
    for t in &report.tensors {
        writeln!(
            out,
            "{:<28} {:>5} checked  max rel err {:.2e}",
            t.name, t.checked, t.max_rel_error
        )?;
    }
    writeln!(
        out,
        "{} tensors, worst {:.2e}, {:.1} s",
        report.tensors.len(),
        report.max_rel_error(),
        start.elapsed().as_secs_f64()
    )?;
    if report.passes(a.tolerance) {
        writeln!(out, "gradcheck passed")?;
        Ok(())
    } else {
        let worst = report.worst().expect("failing report has tensors");
        Err(Failure {
            error: anyhow!(
                "gradient mismatch in {}: analytic {:e} vs numeric {:e}",
                worst.name,
                worst.analytic,
                worst.numeric
            ),
            code: EXIT_VERIFY,
        })
    }
}
