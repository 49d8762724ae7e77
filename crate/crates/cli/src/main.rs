use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use kyber_shuffle::experiment::{self, flat_secret};
use kyber_shuffle::kem::{self, Ciphertext, KeyPair, ParamSet};
use kyber_shuffle::leakage::{
    CiphertextSource, FixedCiphertext, LeakPoint, LeakageConfig, RandomCiphertexts, Synthesizer, TraceHeader,
    TraceSet, TraceWriter, UniformCiphertexts,
};
use kyber_shuffle::prng::{fill_bytes, mix_seed, SeedStream};
use kyber_shuffle::rpg::{self, is_restricted, RpgMachine, PERM_LEN, RPG_CYCLES};
use kyber_shuffle::sca::{self, svg_plot, TVLA_THRESHOLD};
use kyber_shuffle::Error;

const EXIT_FAIL: u8 = 1;
const EXIT_INVARIANT: u8 = 2;
const EXIT_FORMAT: u8 = 3;
const EXIT_PARAM: u8 = 4;

#[derive(Parser)]
#[command(name = "kyshuf", version, about = "Shuffled Kyber decryption simulator and side-channel lab")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Encrypt/decrypt round trips.
    Kat(KatArgs),
    /// Random permutation generator.
    #[command(subcommand)]
    Rpg(RpgCmd),
    /// Writes a key pair file.
    Keygen(KeygenArgs),
    /// Trace synthesis.
    #[command(subcommand)]
    Sim(SimCmd),
    /// CPA or TVLA on trace files.
    #[command(subcommand)]
    Attack(AttackCmd),
    /// Renders a CSV report as an SVG line plot.
    Report(ReportArgs),
    /// Calibration table: sigma vs. disclosure budget and predicted TVLA.
    Pilot(PilotArgs),
    /// Unprotected vs. protected contrast experiments.
    #[command(subcommand)]
    Contrast(ContrastCmd),
}

fn parse_hex_u64(s: &str) -> Result<u64, String> {
    let t = s.trim_start_matches("0x").trim_start_matches("0X");
    u64::from_str_radix(t, 16).map_err(|e| format!("expected hexadecimal u64: {e}"))
}

fn parse_lfsr_seed(s: &str) -> Result<u32, String> {
    let t = s.trim_start_matches("0x").trim_start_matches("0X");
    match u32::from_str_radix(t, 16) {
        Ok(0) => Err("the LFSR seed must be nonzero".into()),
        Ok(v) => Ok(v),
        Err(e) => Err(format!("expected hexadecimal u32: {e}")),
    }
}

fn parse_count(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(0) => Err("count must be at least 1".into()),
        Ok(v) => Ok(v),
        Err(e) => Err(e.to_string()),
    }
}

#[derive(Args)]
struct KatArgs {
    #[arg(long, default_value = "kyber768")]
    param: ParamSet,
    #[arg(long, value_parser = parse_count, default_value = "1000")]
    count: usize,
    #[arg(long, value_parser = parse_hex_u64, default_value = "1")]
    seed: u64,
    /// Flips one secret coefficient before decrypting (negative control).
    #[arg(long)]
    corrupt_key: bool,
}

#[derive(Subcommand)]
enum RpgCmd {
    /// Prints permutations as 64 hex values per line.
    Gen {
        /// Nonzero 32-bit LFSR seed, hex.
        #[arg(long, value_parser = parse_lfsr_seed)]
        seed: u32,
        #[arg(long, value_parser = parse_count, default_value = "1")]
        count: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Checks bijectivity, restricted positions and latency over random seeds
    /// and writes the position/value histogram.
    Audit {
        #[arg(long, value_parser = parse_count, default_value = "100000")]
        trials: usize,
        #[arg(long, value_parser = parse_hex_u64, default_value = "1")]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct KeygenArgs {
    #[arg(long, default_value = "kyber512")]
    param: ParamSet,
    #[arg(long, value_parser = parse_hex_u64, default_value = "1")]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum SimCmd {
    /// Writes an SKTL trace file.
    Traces(SimArgs),
}

#[derive(Args)]
struct SimArgs {
    #[arg(long, default_value = "kyber512")]
    param: ParamSet,
    #[arg(long, value_parser = parse_hex_u64, default_value = "1")]
    seed: u64,
    #[arg(long, value_parser = parse_count, default_value = "1000")]
    traces: usize,
    #[arg(long, default_value_t = 1.0)]
    noise_sigma: f64,
    #[arg(long)]
    protected: bool,
    #[arg(long, default_value = "point2")]
    target: LeakPoint,
    /// Every trace uses one fixed ciphertext.
    #[arg(long, conflicts_with = "random")]
    fixed: bool,
    /// Fresh ciphertext per trace (default).
    #[arg(long)]
    random: bool,
    /// Random class uses honest encryptions instead of uniform ciphertexts.
    #[arg(long)]
    honest: bool,
    /// Key file; derived from the seed when absent.
    #[arg(long)]
    key: Option<PathBuf>,
    /// Ciphertext file for the fixed class.
    #[arg(long, requires = "fixed")]
    ct: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum AttackCmd {
    /// Extend-and-prune CPA.
    Cpa {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value = "point2")]
        target: LeakPoint,
        #[arg(long, default_value_t = 0)]
        first: usize,
        #[arg(long, value_parser = parse_count, default_value = "1")]
        coeffs: usize,
        /// Key file used as ground truth for ranks and the success flag.
        #[arg(long)]
        key: Option<PathBuf>,
        /// Hypotheses per coefficient in the CSV.
        #[arg(long, default_value_t = 10)]
        top: usize,
        #[arg(long)]
        out: PathBuf,
        /// Correlation-vs-sample CSV of the first attacked coefficient.
        #[arg(long)]
        curve: Option<PathBuf>,
    },
    /// Welch t-test, fixed vs. random.
    Tvla {
        #[arg(long, requires = "random")]
        fixed: Option<PathBuf>,
        #[arg(long, requires = "fixed")]
        random: Option<PathBuf>,
        /// Single file holding both classes.
        #[arg(long = "in", conflicts_with_all = ["fixed", "random"])]
        input: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PilotArgs {
    #[arg(long, default_value = "kyber512")]
    param: ParamSet,
    #[arg(long, value_parser = parse_hex_u64, default_value = "1")]
    seed: u64,
    #[arg(long, value_delimiter = ',', default_value = "0,8,24")]
    sigmas: Vec<f64>,
    #[arg(long, default_value_t = 1_000_000)]
    max_traces: usize,
    /// Noiseless traces per class for the TVLA bias estimate.
    #[arg(long, default_value_t = experiment::TVLA_PROTECTED_TRACES)]
    bias_traces: usize,
    /// Only predict the protected TVLA outcome; skip the budget search.
    #[arg(long)]
    tvla_only: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum ContrastCmd {
    Cpa {
        #[arg(long, default_value = "kyber512")]
        param: ParamSet,
        #[arg(long, value_parser = parse_hex_u64, default_value = "1")]
        seed: u64,
        #[arg(long, default_value_t = experiment::DEFAULT_SIGMA)]
        noise_sigma: f64,
        #[arg(long, default_value_t = experiment::DEFAULT_BUDGET)]
        budget: usize,
        #[arg(long, default_value_t = experiment::REPETITIONS)]
        reps: usize,
        /// Repetitions that also run the unprotected attack at the protected
        /// budget for the peak ratio.
        #[arg(long, default_value_t = experiment::PEAK_REPETITIONS)]
        peak_reps: usize,
    },
    Tvla {
        #[arg(long, default_value = "kyber512")]
        param: ParamSet,
        #[arg(long, value_parser = parse_hex_u64, default_value = "1")]
        seed: u64,
        #[arg(long, default_value_t = experiment::DEFAULT_SIGMA)]
        noise_sigma: f64,
        #[arg(long, default_value_t = experiment::TVLA_UNPROTECTED_TRACES)]
        unprotected_traces: usize,
        #[arg(long, default_value_t = experiment::TVLA_PROTECTED_TRACES)]
        protected_traces: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Command failure carrying its exit status.
struct Failure(u8, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Format(_) => EXIT_FORMAT,
            Error::ParamMismatch(_) => EXIT_PARAM,
            _ => EXIT_FAIL,
        };
        Failure(code, e.to_string())
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure(EXIT_FAIL, e.to_string())
    }
}

type CmdResult = Result<(), Failure>;

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path).map(BufWriter::new).map_err(|e| Failure(EXIT_FAIL, format!("{}: {e}", path.display())))
}

fn open(path: &Path) -> Result<BufReader<File>, Failure> {
    File::open(path).map(BufReader::new).map_err(|e| Failure(EXIT_FAIL, format!("{}: {e}", path.display())))
}

fn read_key(path: &Path) -> Result<KeyPair, Failure> {
    Ok(KeyPair::read_from(&mut open(path)?)?)
}

fn read_traces(path: &Path) -> Result<TraceSet, Failure> {
    Ok(TraceSet::read_from(open(path)?)?)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Kat(a) => cmd_kat(a),
        Cmd::Rpg(c) => cmd_rpg(c),
        Cmd::Keygen(a) => cmd_keygen(a),
        Cmd::Sim(SimCmd::Traces(a)) => cmd_sim(a),
        Cmd::Attack(c) => cmd_attack(c),
        Cmd::Report(a) => cmd_report(a),
        Cmd::Pilot(a) => cmd_pilot(a),
        Cmd::Contrast(c) => cmd_contrast(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure(code, msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}

fn key_from_seed(param: ParamSet, seed: u64) -> Result<KeyPair, Failure> {
    Ok(experiment::experiment_key(param.params(), seed, 0)?)
}

fn cmd_kat(a: KatArgs) -> CmdResult {
    println!("master seed: {:#x}", a.seed);
    let params = a.param.params();
    let mut key = key_from_seed(a.param, a.seed)?;
    if a.corrupt_key {
        key = kem::corrupt_secret(&key, 0)?;
    }
    let mut failures = 0usize;
    for i in 0..a.count {
        let mut m = [0u8; kem::MESSAGE_BYTES];
        let mut coins = [0u8; kem::SEED_BYTES];
        fill_bytes(mix_seed(a.seed, 2 * i as u64 + 1), &mut m);
        fill_bytes(mix_seed(a.seed, 2 * i as u64 + 2), &mut coins);
        let ct = kem::encrypt(params, &key.public, &m, &coins)?;
        if kem::decrypt(&key, &ct)? != m {
            failures += 1;
        }
    }
    println!("kat {}: {}/{} round trips passed", a.param, a.count - failures, a.count);
    if failures == 0 {
        Ok(())
    } else {
        Err(Failure(EXIT_FAIL, format!("{failures} round trips failed")))
    }
}

fn cmd_rpg(c: RpgCmd) -> CmdResult {
    match c {
        RpgCmd::Gen { seed, count, out } => {
            println!("lfsr seed: {seed:#x}");
            let mut w: Box<dyn Write> = match out {
                Some(p) => Box::new(create(&p)?),
                None => Box::new(io::stdout().lock()),
            };
            let mut m = RpgMachine::new(seed)?;
            for i in 0..count {
                if i > 0 {
                    m.rearm();
                }
                let (p, _) = m.run()?;
                writeln!(w, "{p}")?;
            }
            w.flush()?;
            Ok(())
        }
        RpgCmd::Audit { trials, seed, out } => {
            println!("master seed: {seed:#x}");
            let mut hist = vec![[0u64; PERM_LEN]; PERM_LEN];
            for s in SeedStream::new(seed).take(trials) {
                let (p, cycles) = rpg::generate(s)?;
                let e = p.entries();
                let mut seen = [false; PERM_LEN];
                let mut violation = None;
                for (pos, &v) in e.iter().enumerate() {
                    if std::mem::replace(&mut seen[v as usize], true) {
                        violation = Some(format!("value {v:#04x} repeated"));
                    }
                    if (pos < 6 || pos >= PERM_LEN - 6) && is_restricted(v) {
                        violation = Some(format!("restricted value {v:#04x} at position {pos}"));
                    }
                    hist[pos][v as usize] += 1;
                }
                if cycles != RPG_CYCLES {
                    violation = Some(format!("{cycles} cycles"));
                }
                if let Some(v) = violation {
                    println!("violation for seed {s:#010x}: {v}");
                    return Err(Failure(EXIT_INVARIANT, format!("invariant violated for seed {s:#010x}")));
                }
            }
            if let Some(p) = out {
                let mut w = create(&p)?;
                write!(w, "position")?;
                for v in 0..PERM_LEN {
                    write!(w, ",v{v:02x}")?;
                }
                writeln!(w)?;
                for (pos, row) in hist.iter().enumerate() {
                    write!(w, "{pos}")?;
                    for c in row {
                        write!(w, ",{c}")?;
                    }
                    writeln!(w)?;
                }
                w.flush()?;
            }
            println!("audit: {trials} seeds, all invariants hold");
            Ok(())
        }
    }
}

fn cmd_keygen(a: KeygenArgs) -> CmdResult {
    println!("master seed: {:#x}", a.seed);
    let key = key_from_seed(a.param, a.seed)?;
    let mut w = create(&a.out)?;
    key.write_to(&mut w)?;
    w.flush()?;
    Ok(())
}

fn cmd_sim(a: SimArgs) -> CmdResult {
    println!("master seed: {:#x}", a.seed);
    let key = match &a.key {
        Some(p) => read_key(p)?,
        None => key_from_seed(a.param, a.seed)?,
    };
    if key.params.set != a.param {
        return Err(Failure(EXIT_PARAM, format!("key is {}, --param is {}", key.params.set, a.param)));
    }
    let params = key.params;
    let ct_seed = mix_seed(a.seed, 1);
    let source: Box<dyn CiphertextSource> = if a.fixed {
        let ct = match &a.ct {
            Some(p) => Ciphertext::read_from(&mut open(p)?)?,
            None => UniformCiphertexts { params, seed: ct_seed, count: 1 }.get(0)?.0,
        };
        if ct.params.set != a.param {
            return Err(Failure(EXIT_PARAM, format!("ciphertext is {}, --param is {}", ct.params.set, a.param)));
        }
        Box::new(FixedCiphertext { ct, count: a.traces })
    } else if a.honest {
        Box::new(RandomCiphertexts { params, pk: key.public.clone(), seed: ct_seed, count: a.traces })
    } else {
        Box::new(UniformCiphertexts { params, seed: ct_seed, count: a.traces })
    };
    let cfg = LeakageConfig::new(a.target, a.noise_sigma, mix_seed(a.seed, 2));
    let synth = Synthesizer::new(&key, source.as_ref(), experiment::factory(a.protected), cfg)?;
    let mut flags = kyber_shuffle::leakage::FLAG_NON_INTEROPERABLE;
    if a.protected {
        flags |= kyber_shuffle::leakage::FLAG_PROTECTED;
    }
    let header = TraceHeader {
        param: a.param,
        flags,
        n_traces: a.traces as u32,
        n_samples: synth.n_samples() as u32,
        assoc_len: kyber_shuffle::leakage::assoc_len(params) as u32,
    };
    let mut w = TraceWriter::new(File::create(&a.out)?, header)?;
    for start in (0..a.traces).step_by(sca::CHUNK) {
        for t in synth.traces(start..(start + sca::CHUNK).min(a.traces))? {
            w.write(&t)?;
        }
    }
    w.finish()?;
    println!("wrote {} traces x {} samples to {}", a.traces, synth.n_samples(), a.out.display());
    Ok(())
}

fn cmd_attack(c: AttackCmd) -> CmdResult {
    match c {
        AttackCmd::Cpa { input, target, first, coeffs, key, top, out, curve } => {
            let set = read_traces(&input)?;
            let truth = match &key {
                Some(p) => {
                    let k = read_key(p)?;
                    if k.params.set != set.param {
                        return Err(Failure(EXIT_PARAM, format!("key is {}, traces are {}", k.params.set, set.param)));
                    }
                    Some(flat_secret(&k))
                }
                None => None,
            };
            // Without ground truth the prefix before `first` is unknown;
            // only a start inside the first word needs none.
            let prior: Vec<u16> = match &truth {
                Some(t) => t[..first.min(t.len())].to_vec(),
                None if first < 4 => vec![0; first],
                None => return Err(Failure(EXIT_FAIL, "--first beyond the first word needs --key".into())),
            };
            let report = sca::cpa_attack(&set, target, first, coeffs, &prior, truth.as_deref())?;
            let mut w = create(&out)?;
            report.write_csv(&mut w, top)?;
            w.flush()?;
            if let Some(p) = curve {
                let mut w = create(&p)?;
                report.write_curve_csv(&mut w, 0)?;
                w.flush()?;
            }
            for c in &report.coeffs {
                let rank = c.truth_rank.map_or("-".into(), |r| r.to_string());
                println!("coeff {}: best {} (score {:.4}), true rank {rank}", c.coeff, c.best, c.ranking[0].1);
            }
            match report.success() {
                Some(s) => println!("success: {s}"),
                None => println!("success: unknown (no key given)"),
            }
            Ok(())
        }
        AttackCmd::Tvla { fixed, random, input, out } => {
            let report = match (fixed, random, input) {
                (Some(f), Some(r), None) => {
                    let (f, r) = (read_traces(&f)?, read_traces(&r)?);
                    sca::tvla(&f, &r)?
                }
                (None, None, Some(i)) => sca::tvla_by_class(&read_traces(&i)?)?,
                _ => return Err(Failure(EXIT_FAIL, "give --fixed and --random, or --in".into())),
            };
            let mut w = create(&out)?;
            report.write_csv(&mut w)?;
            w.flush()?;
            println!(
                "tvla: max |t| = {:.3} at sample {} ({} fixed, {} random, {} degenerate); threshold {TVLA_THRESHOLD}: {}",
                report.max_abs_t,
                report.argmax,
                report.n_fixed,
                report.n_random,
                report.degenerate,
                if report.leaks() { "LEAK" } else { "pass" }
            );
            Ok(())
        }
    }
}

fn cmd_report(a: ReportArgs) -> CmdResult {
    let r = open(&a.input)?;
    let mut lines = r.lines();
    let header = match lines.next() {
        Some(h) => h?,
        None => return Err(Failure(EXIT_FORMAT, format!("{} is empty", a.input.display()))),
    };
    let cols: Vec<String> = header.split(',').map(|s| s.trim().to_string()).collect();
    if cols.len() < 2 {
        return Err(Failure(EXIT_FORMAT, "need at least two columns".into()));
    }
    let mut data: Vec<Vec<f64>> = vec![Vec::new(); cols.len() - 1];
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols.len() {
            return Err(Failure(EXIT_FORMAT, format!("row {} has {} fields, expected {}", i + 2, fields.len(), cols.len())));
        }
        for (d, f) in data.iter_mut().zip(&fields[1..]) {
            d.push(f.trim().parse().unwrap_or(f64::NAN));
        }
    }
    if data[0].is_empty() {
        return Err(Failure(EXIT_FORMAT, format!("{} has no data rows", a.input.display())));
    }
    let series: Vec<(&str, &[f64])> = cols[1..].iter().map(String::as_str).zip(data.iter().map(Vec::as_slice)).collect();
    let guides: Vec<f64> = if cols.iter().any(|c| c == "t") { vec![TVLA_THRESHOLD, -TVLA_THRESHOLD] } else { Vec::new() };
    let title = a.input.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let mut w = create(&a.out)?;
    w.write_all(svg_plot(&title, &cols[0], &series, &guides).as_bytes())?;
    w.flush()?;
    Ok(())
}

fn cmd_pilot(a: PilotArgs) -> CmdResult {
    println!("master seed: {:#x}", a.seed);
    let rows = experiment::pilot(a.param.params(), &a.sigmas, a.seed, a.max_traces, a.bias_traces, !a.tvla_only)?;
    let mut w: Box<dyn Write> = match &a.out {
        Some(p) => Box::new(create(p)?),
        None => Box::new(io::stdout().lock()),
    };
    writeln!(w, "sigma,budget,protected_tvla_t,protected_tvla_pass")?;
    for r in rows {
        let b = match (a.tvla_only, r.budget) {
            (true, _) => "skipped".to_string(),
            (false, None) => "none".to_string(),
            (false, Some(b)) => b.to_string(),
        };
        writeln!(w, "{},{b},{:.3},{:.4}", r.sigma, r.protected_tvla_t, r.protected_tvla_pass)?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_contrast(c: ContrastCmd) -> CmdResult {
    match c {
        ContrastCmd::Cpa { param, seed, noise_sigma, budget, reps, peak_reps } => {
            println!("master seed: {seed:#x}");
            let s = experiment::cpa_experiment(param.params(), noise_sigma, budget, seed, reps, peak_reps)?;
            for r in &s.reps {
                println!(
                    "rep {}: unprotected {} ({} coeffs), protected {} ({} coeffs)",
                    r.rep,
                    outcome(r.unprotected.success()),
                    r.unprotected.coeffs.len(),
                    outcome(r.protected.success()),
                    r.protected.coeffs.len()
                );
            }
            println!("unprotected successes: {}/{}", s.unprotected_successes(), s.reps.len());
            println!("protected failures: {}/{}", s.protected_failures(), s.reps.len());
            println!("peak ratio protected/unprotected: {:.4}", s.peak_ratio());
            Ok(())
        }
        ContrastCmd::Tvla { param, seed, noise_sigma, unprotected_traces, protected_traces, out } => {
            println!("master seed: {seed:#x}");
            let params = param.params();
            let u = experiment::tvla_run(params, false, noise_sigma, unprotected_traces, seed)?;
            let p = experiment::tvla_run(params, true, noise_sigma, protected_traces, seed)?;
            println!("unprotected: max |t| = {:.3} ({} traces/class)", u.max_abs_t, unprotected_traces);
            println!("protected:   max |t| = {:.3} ({} traces/class)", p.max_abs_t, protected_traces);
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir)?;
                for (name, r) in [("tvla_unprotected", &u), ("tvla_protected", &p)] {
                    let csv = dir.join(format!("{name}.csv"));
                    let mut w = create(&csv)?;
                    r.write_csv(&mut w)?;
                    w.flush()?;
                    let svg = svg_plot(name, "sample", &[("t", &r.t)], &[TVLA_THRESHOLD, -TVLA_THRESHOLD]);
                    std::fs::write(dir.join(format!("{name}.svg")), svg)?;
                }
            }
            Ok(())
        }
    }
}

fn outcome(s: Option<bool>) -> &'static str {
    match s {
        Some(true) => "recovered",
        Some(false) => "failed",
        None => "unknown",
    }
}
