//! Command-line front end.
//!
//! A JSON config file given with `--config` supplies default flag values:
//! every key names a flag (`seq_lens` or `seq-lens`), arrays become comma
//! lists and booleans become `on`/`off`. Flags on the command line win.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use qcache::attention::{AttentionConfig, ModelDims};
use qcache::cache::{CacheConfig, WindowConfig};
use qcache::quant::{GroupingAxis, QuantConfig, QuantMode};

use crate::commands::{
    bench_matmul, bench_quant, build_cache, dump, error_report, load, simulate_decode, BenchSpec,
    CommandOutput, ErrorReportSpec, SimulationSpec,
};
use crate::data::{DistKind, SyntheticDataSpec};
use crate::presets::{ModelList, ModelPreset, SeqLens};
use crate::report::Format;
use crate::{BenchError, Result};

/// Bit width that turns quantization off.
pub const FULL_PRECISION_BITS: u8 = 16;

const SCHEMAS: &str = "\
CSV schemas (one header row, columns fixed per command):
  bench-matmul    model,method,seq_len,median_ms,speedup_vs_ref_pct,speedup_vs_outer_pct
                  then a blank line and (or into --traffic-out)
                  model,seq_len,method,median_ms,scale_loads,aux_loads,code_bytes,flops,scale_loads_vs_inner
  bench-quant     model,seq_len,sym_ms,hybrid_ms,ratio
  error-report    metric,value
  simulate-decode step,tokens,max_abs_err,sink,k_middle,v_middle,k_recent,v_recent,
                  packed_bytes,estimated_packed_bytes,window_bytes,conserved
  dump            file,bytes
  load            metric,value

Exit codes: 0 success, 1 verification or invariant failure, 2 usage error.";

#[derive(Debug, Parser)]
#[command(
    name = "qcache-bench",
    version,
    about = "Benchmarks and simulations for the quantized key/value cache",
    after_help = SCHEMAS,
    args_override_self = true
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Time dense, outer-grouped and inner-grouped GEMV over the model/length grid.
    BenchMatmul(MatmulArgs),
    /// Time symmetric against hybrid quantization of whole matrices.
    BenchQuant(QuantArgs),
    /// Per-mode quantization error and the effect of key normalization.
    ErrorReport(ErrorArgs),
    /// Run a random-weight model through prefill and decode.
    SimulateDecode(SimulateArgs),
    /// Build a cache like simulate-decode and write a snapshot directory.
    Dump(DumpArgs),
    /// Load a snapshot and check it re-dumps byte for byte.
    Load(LoadArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

impl Switch {
    pub fn is_on(self) -> bool {
        self == Switch::On
    }
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 32)]
    pub group_size: usize,
    /// Code width; 16 keeps everything in full precision.
    #[arg(long, default_value_t = 2)]
    pub bits: u8,
    /// asym, sym, hybrid or hybrid-prefill.
    #[arg(long, default_value = "hybrid")]
    pub mode: QuantMode,
    #[arg(long, default_value_t = 32)]
    pub w_sink: usize,
    #[arg(long, default_value_t = 96)]
    pub w_recent: usize,
    #[arg(long, value_enum, default_value = "on")]
    pub normalize: Switch,
    /// Write the main table here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// csv or md.
    #[arg(long, default_value = "csv")]
    pub format: Format,
    /// JSON file of default flag values.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

impl CommonArgs {
    fn quantizing(&self) -> bool {
        self.bits != FULL_PRECISION_BITS
    }

    pub fn quant_config(&self) -> Result<QuantConfig> {
        if !self.quantizing() {
            return Err(BenchError::usage("this command needs a quantized bit width"));
        }
        Ok(QuantConfig::new(self.bits, self.group_size, self.mode)?)
    }

    pub fn cache_config(&self, quantize: bool) -> Result<CacheConfig> {
        let quantize = quantize && self.quantizing();
        let quant = if self.quantizing() {
            QuantConfig::new(self.bits, self.group_size, self.mode)?
        } else {
            QuantConfig::default()
        };
        Ok(CacheConfig {
            quant,
            windows: WindowConfig {
                w_sink: self.w_sink,
                w_recent: self.w_recent,
            },
            quantize,
        })
    }
}

#[derive(Debug, Clone, Args)]
pub struct GridArgs {
    /// Comma list of llama-3.2-1b, llama-3.1-8b, llama-2-13b or custom:<d>:<n_h>.
    #[arg(long = "model", default_value = "llama-3.2-1b,llama-3.1-8b,llama-2-13b")]
    pub models: ModelList,
    #[arg(long, default_value = "512,1024,2048,4096,8192,16384,32768,65536,131072")]
    pub seq_lens: SeqLens,
    /// Skip grid points whose matrices need more bytes than this.
    #[arg(long, default_value_t = 256 << 20)]
    pub max_bytes: u64,
}

#[derive(Debug, Clone, Args)]
pub struct MatmulArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub grid: GridArgs,
    #[arg(long, default_value_t = 100)]
    pub warmup: usize,
    #[arg(long, default_value_t = 1000)]
    pub reps: usize,
    /// Write the traffic table here instead of after the timing table.
    #[arg(long)]
    pub traffic_out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct QuantArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub grid: GridArgs,
    #[arg(long, default_value_t = 10)]
    pub warmup: usize,
    #[arg(long, default_value_t = 100)]
    pub reps: usize,
}

#[derive(Debug, Clone, Args)]
pub struct ErrorArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// gaussian or outliers.
    #[arg(long, default_value = "outliers")]
    pub dist: DistKind,
    #[arg(long, default_value_t = 1.0)]
    pub sigma: f32,
    #[arg(long, default_value_t = 4)]
    pub outlier_channels: usize,
    #[arg(long, default_value_t = 50.0)]
    pub outlier_scale: f32,
    /// Matrix rows.
    #[arg(long, default_value_t = 1024)]
    pub tokens: usize,
    /// Matrix columns.
    #[arg(long, default_value_t = 128)]
    pub width: usize,
    /// inner or outer.
    #[arg(long, default_value = "inner")]
    pub axis: GroupingAxis,
}

#[derive(Debug, Clone, Args)]
pub struct ModelRunArgs {
    /// One model preset or custom:<d>:<n_h>.
    #[arg(long, default_value = "custom:256:4")]
    pub model: ModelPreset,
    #[arg(long, default_value_t = 300)]
    pub prefill_len: usize,
    #[arg(long, default_value_t = 64)]
    pub decode_steps: usize,
    #[arg(long, value_enum, default_value = "on")]
    pub quantize: Switch,
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub run: ModelRunArgs,
    /// Fail when the output error against the shadow exceeds this.
    #[arg(long)]
    pub tolerance: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct DumpArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub run: ModelRunArgs,
    #[command(flatten)]
    pub path: PathArg,
}

#[derive(Debug, Clone, Args)]
pub struct LoadArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub path: PathArg,
}

/// Snapshot directory, positional or as `--path` (the config-file form).
#[derive(Debug, Clone, Args)]
pub struct PathArg {
    #[arg(value_name = "DIR")]
    pub dir: Option<PathBuf>,
    #[arg(long = "path", hide = true)]
    pub flag: Option<PathBuf>,
}

impl PathArg {
    fn get(&self) -> Result<&Path> {
        self.dir
            .as_deref()
            .or(self.flag.as_deref())
            .ok_or_else(|| BenchError::usage("missing snapshot directory"))
    }
}

fn simulation_spec(common: &CommonArgs, run: &ModelRunArgs, tolerance: Option<f64>) -> Result<SimulationSpec> {
    let dims: ModelDims = run.model.dims()?;
    Ok(SimulationSpec {
        dims,
        attention: AttentionConfig {
            cache: common.cache_config(run.quantize.is_on())?,
            normalize: common.normalize.is_on(),
            ..AttentionConfig::default()
        },
        prefill_len: run.prefill_len,
        decode_steps: run.decode_steps,
        seed: common.seed,
        shadow: true,
        tolerance,
    })
}

fn bench_spec(grid: &GridArgs, warmup: usize, reps: usize, seed: u64) -> BenchSpec {
    BenchSpec {
        models: grid.models.0.clone(),
        seq_lens: grid.seq_lens.0.clone(),
        warmup,
        reps,
        seed,
        max_bytes: grid.max_bytes,
    }
}

fn skipped_notes(skipped: &[(ModelPreset, usize)], max_bytes: u64) -> Vec<String> {
    skipped
        .iter()
        .map(|(m, n)| format!("skipped {m} at {n} tokens: over --max-bytes {max_bytes}"))
        .collect()
}

impl Command {
    pub fn common(&self) -> &CommonArgs {
        match self {
            Command::BenchMatmul(a) => &a.common,
            Command::BenchQuant(a) => &a.common,
            Command::ErrorReport(a) => &a.common,
            Command::SimulateDecode(a) => &a.common,
            Command::Dump(a) => &a.common,
            Command::Load(a) => &a.common,
        }
    }

    /// Runs the command. Failed checks land in `violations`; errors are
    /// usage problems or failed pre-timing verification.
    pub fn execute(&self) -> Result<CommandOutput> {
        let mut out = CommandOutput::default();
        match self {
            Command::BenchMatmul(a) => {
                let cfg = a.common.quant_config()?;
                let spec = bench_spec(&a.grid, a.warmup, a.reps, a.common.seed);
                let r = bench_matmul(&spec, &cfg)?;
                for (m, n, outer, inner) in r.scale_load_pairs() {
                    if outer != inner * cfg.group_size() as u64 {
                        out.violations.push(format!(
                            "{m} at {n}: outer scale loads {outer} are not G times inner {inner}"
                        ));
                    }
                }
                out.notes = skipped_notes(&r.skipped, spec.max_bytes);
                out.table = Some(r.timing_table());
                out.extra.push(r.traffic_table());
            }
            Command::BenchQuant(a) => {
                let spec = bench_spec(&a.grid, a.warmup, a.reps, a.common.seed);
                if !a.common.quantizing() {
                    return Err(BenchError::usage("bench-quant needs a quantized bit width"));
                }
                let r = bench_quant(&spec, a.common.bits)?;
                out.notes = skipped_notes(&r.skipped, spec.max_bytes);
                out.notes.push("groups of 32 along rows; mode and group size flags are ignored".into());
                out.table = Some(r.table());
            }
            Command::ErrorReport(a) => {
                let data = match a.dist {
                    DistKind::Gaussian => SyntheticDataSpec::gaussian(a.sigma, a.common.seed),
                    DistKind::Outliers => SyntheticDataSpec::with_outliers(
                        a.sigma,
                        a.outlier_channels,
                        a.outlier_scale,
                        a.common.seed,
                    ),
                };
                let cfg = a.common.quant_config()?;
                let r = error_report(&ErrorReportSpec {
                    data,
                    rows: a.tokens,
                    cols: a.width,
                    bits: cfg.bits(),
                    group_size: cfg.group_size(),
                    axis: a.axis,
                    norm_mode: cfg.mode(),
                })?;
                out.violations = r.violations();
                out.table = Some(r.table());
            }
            Command::SimulateDecode(a) => {
                let r = simulate_decode(&simulation_spec(&a.common, &a.run, a.tolerance)?)?;
                if let Some(e) = r.max_abs_err() {
                    out.notes.push(format!("max output error against the shadow: {e:e}"));
                }
                out.violations = r.violations.clone();
                out.table = Some(r.table());
            }
            Command::Dump(a) => {
                let cache = build_cache(&simulation_spec(&a.common, &a.run, None)?)?;
                out.table = Some(dump(&cache, a.path.get()?)?);
            }
            Command::Load(a) => {
                let r = load(a.path.get()?)?;
                out.violations = r.violations();
                out.notes.push(format!("loaded {}", r.path.display()));
                out.table = Some(r.table());
                out.extra.push(r.files.clone());
            }
        }
        Ok(out)
    }
}

/// Rewrites `args` so the flags from a `--config` file come right after the
/// subcommand name, ahead of the explicit flags that override them.
pub fn expand_config(args: Vec<OsString>) -> Result<Vec<OsString>> {
    let Some(path) = config_path(&args) else {
        return Ok(args);
    };
    let text = fs::read_to_string(&path)
        .map_err(|e| BenchError::usage(format!("cannot read config {}: {e}", path.display())))?;
    let extra = config_flags(&text)?;
    let cmd = <Cli as clap::CommandFactory>::command();
    let names: Vec<&str> = cmd.get_subcommands().map(|c| c.get_name()).collect();
    let Some(sub) = args.iter().skip(1).position(|a| names.iter().any(|n| a == n)) else {
        return Ok(args);
    };
    let at = sub + 2;
    let mut out = args[..at].to_vec();
    out.extend(extra.into_iter().map(OsString::from));
    out.extend_from_slice(&args[at..]);
    Ok(out)
}

fn config_path(args: &[OsString]) -> Option<PathBuf> {
    let mut found = None;
    let mut it = args.iter().map(|a| a.to_string_lossy());
    while let Some(a) = it.next() {
        if a == "--config" {
            found = it.next().map(|p| PathBuf::from(p.as_ref()));
        } else if let Some(p) = a.strip_prefix("--config=") {
            found = Some(PathBuf::from(p));
        }
    }
    found
}

/// Flags for the keys of a JSON object, sorted by key.
pub fn config_flags(text: &str) -> Result<Vec<String>> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| BenchError::usage(format!("bad config file: {e}")))?;
    let serde_json::Value::Object(map) = value else {
        return Err(BenchError::usage("config file must hold a JSON object"));
    };
    let mut flags = Vec::new();
    for (key, v) in map {
        let name = key.replace('_', "-");
        if name == "config" {
            return Err(BenchError::usage("config files cannot name another config file"));
        }
        let text = scalar_text(&v)
            .or_else(|| match &v {
                serde_json::Value::Array(items) => {
                    items.iter().map(scalar_text).collect::<Option<Vec<_>>>().map(|s| s.join(","))
                }
                _ => None,
            })
            .ok_or_else(|| BenchError::usage(format!("config key `{key}` has an unsupported value")))?;
        flags.push(format!("--{name}={text}"));
    }
    Ok(flags)
}

fn scalar_text(v: &serde_json::Value) -> Option<String> {
    match v {
        serde_json::Value::String(s) => Some(s.clone()),
        serde_json::Value::Number(n) => Some(n.to_string()),
        serde_json::Value::Bool(b) => Some(if *b { "on" } else { "off" }.to_string()),
        _ => None,
    }
}

/// Parses and runs a command line, writing tables to stdout (or the files
/// named by the flags) and diagnostics to stderr. Returns the exit code.
pub fn run(args: Vec<OsString>, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32 {
    let args = match expand_config(args) {
        Ok(a) => a,
        Err(e) => return fail(stderr, &e),
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let sink: &mut dyn Write = if code == 0 { stdout } else { stderr };
            let _ = write!(sink, "{}", e.render());
            return code;
        }
    };
    match cli.command.execute().and_then(|out| emit(&cli.command, &out, stdout, stderr).map(|()| out)) {
        Ok(out) if out.violations.is_empty() => 0,
        Ok(out) => {
            for v in &out.violations {
                let _ = writeln!(stderr, "violation: {v}");
            }
            1
        }
        Err(e) => fail(stderr, &e),
    }
}

fn fail(stderr: &mut dyn Write, e: &BenchError) -> i32 {
    let _ = writeln!(stderr, "error: {e}");
    e.exit_code()
}

fn emit(cmd: &Command, out: &CommandOutput, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<()> {
    let common = cmd.common();
    let fmt = common.format;
    for n in &out.notes {
        writeln!(stderr, "{n}")?;
    }
    let traffic_out = match cmd {
        Command::BenchMatmul(a) => a.traffic_out.as_deref(),
        _ => None,
    };
    let mut main = match &out.table {
        Some(t) => t.render(fmt)?,
        None => String::new(),
    };
    let mut extra = String::new();
    for t in &out.extra {
        if !extra.is_empty() {
            extra.push('\n');
        }
        extra.push_str(&t.render(fmt)?);
    }
    match traffic_out {
        Some(p) => fs::write(p, extra)?,
        None if !extra.is_empty() => {
            main.push('\n');
            main.push_str(&extra);
        }
        None => {}
    }
    match &common.out {
        Some(p) => fs::write(p, main)?,
        None => stdout.write_all(main.as_bytes())?,
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn os(args: &[&str]) -> Vec<OsString> {
        args.iter().map(OsString::from).collect()
    }

    #[test]
    fn config_values_become_flags() {
        let flags = config_flags(r#"{"seq_lens": [512, 1024], "normalize": false, "bits": 4, "mode": "sym"}"#).unwrap();
        assert_eq!(flags, ["--bits=4", "--mode=sym", "--normalize=off", "--seq-lens=512,1024"]);
        assert!(config_flags("[1]").is_err());
        assert!(config_flags(r#"{"bits": {"a": 1}}"#).is_err());
    }

    #[test]
    fn config_flags_go_after_the_subcommand() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, r#"{"bits": 4}"#).unwrap();
        let args = os(&["x", "bench-quant", "--bits", "3", "--config", p.to_str().unwrap()]);
        let got = expand_config(args).unwrap();
        assert_eq!(got[1], "bench-quant");
        assert_eq!(got[2], "--bits=4");
        assert_eq!(got[3], "--bits");
        let cli = Cli::try_parse_from(got).unwrap();
        assert_eq!(cli.command.common().bits, 3);
    }

    #[test]
    fn later_flags_override_earlier() {
        let cli = Cli::try_parse_from(os(&["x", "simulate-decode", "--bits=4", "--bits", "3"])).unwrap();
        assert_eq!(cli.command.common().bits, 3);
    }

    #[test]
    fn full_precision_bits_disable_quantization() {
        let cli = Cli::try_parse_from(os(&["x", "simulate-decode", "--bits", "16"])).unwrap();
        let c = cli.command.common().cache_config(true).unwrap();
        assert!(!c.quantize);
        assert!(cli.command.common().quant_config().is_err());
    }

    #[test]
    fn unknown_mode_is_a_parse_error() {
        let e = Cli::try_parse_from(os(&["x", "bench-quant", "--mode", "fancy"])).unwrap_err();
        assert_eq!(e.exit_code(), 2);
    }
}
