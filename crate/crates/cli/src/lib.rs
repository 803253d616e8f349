//! Command-line front end: training, evaluation, packed export, parameter
//! inspection, and the built-in verification suites.
//!
//! Exit codes: 0 success, 1 contract/format/usage errors, 2 failed
//! selfcheck.

use std::collections::BTreeMap;
use std::path::Path;

use n2uq_core::nn::checkpoint::{network_from_checkpoint, Checkpoint};
use n2uq_core::nn::config::TrainConfig;
use n2uq_core::nn::layers::Network;
use n2uq_core::nn::trainer::{evaluate, train, worker_threads};
use n2uq_core::packfile::{evaluate_packed, load_packed, pack_network, save_packed};
use n2uq_core::quant::weight::entropy_bits;
use n2uq_core::selfcheck::{run_bitwise_suite, run_oracle_suite};
use n2uq_core::Error;

const USAGE: &str = "\
usage: n2uq <command> [flags]

commands:
  train      --config <file> [--seed N] [--bits-w K] [--bits-a M]
             [--out <ckpt>] [--metrics-out <csv>]
  eval       --checkpoint <ckpt> [--config <file>] [--packed <model>]
  export     --checkpoint <ckpt> --out <model>
  inspect    --checkpoint <ckpt> [--weights] [--out <csv>]
  selfcheck  [--seed N]

flags override config-file keys. N2UQ_THREADS sets evaluation workers
(default 1).
";

/// Runs the CLI against parsed arguments (without the program name).
pub fn run(args: &[String]) -> i32 {
    match dispatch(args) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

struct Flags {
    values: BTreeMap<String, String>,
    switches: Vec<String>,
}

impl Flags {
    fn get(&self, name: &str) -> Option<&str> {
        self.values.get(name).map(String::as_str)
    }

    fn has(&self, name: &str) -> bool {
        self.switches.iter().any(|s| s == name)
    }

    fn require(&self, name: &str) -> Result<&str, Error> {
        self.get(name)
            .ok_or_else(|| Error::Parse(format!("missing required flag --{name}")))
    }
}

fn parse_flags(args: &[String], valued: &[&str], switches: &[&str]) -> Result<Flags, Error> {
    let mut flags = Flags { values: BTreeMap::new(), switches: Vec::new() };
    let mut i = 0;
    while i < args.len() {
        let arg = &args[i];
        let name = arg
            .strip_prefix("--")
            .ok_or_else(|| Error::Parse(format!("unexpected argument '{arg}'")))?;
        if switches.contains(&name) {
            flags.switches.push(name.to_string());
            i += 1;
        } else if valued.contains(&name) {
            let value = args
                .get(i + 1)
                .ok_or_else(|| Error::Parse(format!("flag --{name} needs a value")))?;
            flags.values.insert(name.to_string(), value.clone());
            i += 2;
        } else {
            return Err(Error::Parse(format!("unknown flag --{name}")));
        }
    }
    Ok(flags)
}

fn dispatch(args: &[String]) -> Result<i32, Error> {
    let Some(verb) = args.first() else {
        eprint!("{USAGE}");
        return Ok(1);
    };
    match verb.as_str() {
        "train" => cmd_train(&args[1..]),
        "eval" => cmd_eval(&args[1..]),
        "export" => cmd_export(&args[1..]),
        "inspect" => cmd_inspect(&args[1..]),
        "selfcheck" => cmd_selfcheck(&args[1..]),
        other => {
            eprintln!("unknown command '{other}'");
            eprint!("{USAGE}");
            Ok(1)
        }
    }
}

fn config_with_overrides(flags: &Flags) -> Result<TrainConfig, Error> {
    let path = flags.require("config")?;
    let mut cfg = TrainConfig::from_file(Path::new(path))?;
    if let Some(seed) = flags.get("seed") {
        cfg.seed = seed
            .parse()
            .map_err(|_| Error::Parse(format!("bad --seed '{seed}'")))?;
    }
    if let Some(bits) = flags.get("bits-w") {
        cfg.bits_w = bits
            .split(',')
            .map(|v| v.trim().parse().map_err(|_| Error::Parse(format!("bad --bits-w '{bits}'"))))
            .collect::<Result<_, _>>()?;
    }
    if let Some(bits) = flags.get("bits-a") {
        cfg.bits_a = bits
            .split(',')
            .map(|v| v.trim().parse().map_err(|_| Error::Parse(format!("bad --bits-a '{bits}'"))))
            .collect::<Result<_, _>>()?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(args: &[String]) -> Result<i32, Error> {
    let flags = parse_flags(args, &["config", "seed", "bits-w", "bits-a", "out", "metrics-out"], &[])?;
    let cfg = config_with_overrides(&flags)?;
    let outcome = train(&cfg)?;
    let ckpt_path = flags.get("out").unwrap_or("checkpoint.bin");
    outcome.checkpoint.save(Path::new(ckpt_path))?;
    match flags.get("metrics-out") {
        Some(path) => std::fs::write(path, &outcome.metrics_csv)?,
        None => print!("{}", outcome.metrics_csv),
    }
    if let Some(diag) = outcome.diverged {
        eprintln!("training aborted: {diag}; last good checkpoint written to {ckpt_path}");
        return Ok(1);
    }
    eprintln!(
        "trained {} epochs: final loss {:.6}, eval accuracy {:.6}; checkpoint at {ckpt_path}",
        cfg.epochs, outcome.final_train_loss, outcome.final_eval_acc
    );
    Ok(0)
}

fn load_eval_config(flags: &Flags, ck: &Checkpoint) -> Result<TrainConfig, Error> {
    match flags.get("config") {
        Some(path) => TrainConfig::from_file(Path::new(path)),
        None => TrainConfig::parse(ck.text("config")?),
    }
}

fn cmd_eval(args: &[String]) -> Result<i32, Error> {
    let flags = parse_flags(args, &["checkpoint", "config", "packed"], &[])?;
    let ck = Checkpoint::load(Path::new(flags.require("checkpoint")?))?;
    let cfg = load_eval_config(&flags, &ck)?;
    let (_, eval_set) = cfg.load_datasets()?;
    let threads = worker_threads();
    let accuracy = match flags.get("packed") {
        Some(path) => {
            let packed = load_packed(Path::new(path))?.cast::<f64>();
            evaluate_packed(&packed, &eval_set, threads)?
        }
        None => {
            let net = network_from_checkpoint::<f64>(&ck)?;
            evaluate(&net, &eval_set, threads)?
        }
    };
    println!("accuracy,{accuracy:.6}");
    Ok(0)
}

fn cmd_export(args: &[String]) -> Result<i32, Error> {
    let flags = parse_flags(args, &["checkpoint", "out"], &[])?;
    let ck = Checkpoint::load(Path::new(flags.require("checkpoint")?))?;
    let net = network_from_checkpoint::<f64>(&ck)?;
    let packed = pack_network(&net)?;
    save_packed(&packed, Path::new(flags.require("out")?))?;
    Ok(0)
}

fn cmd_inspect(args: &[String]) -> Result<i32, Error> {
    let flags = parse_flags(args, &["checkpoint", "out"], &["weights"])?;
    let ck = Checkpoint::load(Path::new(flags.require("checkpoint")?))?;
    let net = network_from_checkpoint::<f64>(&ck)?;
    let csv = if flags.has("weights") {
        weights_csv(&net)?
    } else {
        thresholds_csv(&net)?
    };
    match flags.get("out") {
        Some(path) => std::fs::write(path, csv)?,
        None => print!("{csv}"),
    }
    Ok(0)
}

/// Learned interval widths and the cut points they imply, per quantized
/// layer.
fn thresholds_csv(net: &Network<f64>) -> Result<String, Error> {
    let mut out = String::from("layer,field,index,value\n");
    for (i, layer) in net.layers.iter().enumerate() {
        let Some(act) = &layer.act else { continue };
        let p = act.to_quant(layer.spec.n_a)?;
        out.push_str(&format!("{i},start,0,{}\n", p.start));
        out.push_str(&format!("{i},beta1,0,{}\n", p.beta1));
        out.push_str(&format!("{i},beta2,0,{}\n", p.beta2));
        for (j, w) in p.widths.iter().enumerate() {
            out.push_str(&format!("{i},width,{j},{w}\n"));
        }
        for (j, c) in p.cut_points().iter().enumerate() {
            out.push_str(&format!("{i},cut,{j},{c}\n"));
        }
    }
    Ok(out)
}

/// Per-layer quantized-weight level occupancy and entropy.
fn weights_csv(net: &Network<f64>) -> Result<String, Error> {
    let mut out = String::from("layer,field,index,value\n");
    for i in 0..net.layers.len() {
        let Some(q) = net.quantized_weights(i)? else { continue };
        let hist = q.level_histogram();
        let total: usize = hist.iter().sum();
        for (level, &count) in hist.iter().enumerate() {
            out.push_str(&format!("{i},occupancy,{level},{}\n", count as f64 / total as f64));
        }
        out.push_str(&format!("{i},entropy_bits,0,{}\n", entropy_bits(&q)));
    }
    Ok(out)
}

fn cmd_selfcheck(args: &[String]) -> Result<i32, Error> {
    let flags = parse_flags(args, &["seed"], &[])?;
    let seed: u64 = match flags.get("seed") {
        Some(s) => s.parse().map_err(|_| Error::Parse(format!("bad --seed '{s}'")))?,
        None => 2024,
    };
    let oracle = run_oracle_suite(seed, 100_000);
    for c in &oracle.configs {
        println!(
            "oracle n={} set={} max_deviation={:.6} tolerance={}",
            c.n, c.param_set, c.max_deviation, oracle.tolerance
        );
    }
    println!(
        "oracle overall: max_deviation={:.6} threshold_mismatches={} {}",
        oracle.max_deviation,
        oracle.threshold_mismatches,
        if oracle.pass { "PASS" } else { "FAIL" }
    );
    let bitwise = run_bitwise_suite(seed);
    for p in &bitwise.pairs {
        println!(
            "bitwise M={} K={} pairs={} mismatches={} max_layer_deviation={:.3e}",
            p.m_bits, p.k_bits, p.vector_pairs, p.integer_mismatches, p.max_layer_deviation
        );
    }
    println!(
        "bitwise overall: mismatches={} max_layer_deviation={:.3e} tolerance={:.0e} {}",
        bitwise.integer_mismatches,
        bitwise.max_layer_deviation,
        bitwise.layer_tolerance,
        if bitwise.pass { "PASS" } else { "FAIL" }
    );
    Ok(if oracle.pass && bitwise.pass { 0 } else { 2 })
}
