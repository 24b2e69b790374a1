use std::fmt::Display;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gconv::accel::AccelError;
use gconv::pipeline::{self, PipelineOutput};
use gconv::{
    parse_network, preset, run_pipeline, verify_network, AcceleratorSpec, IsaError, NetworkIR,
    ParseError, PipelineError, PipelineOptions,
};
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "gconv", version, about = "Lower, map, analyze and emit GCONV chains")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Lower a network to an unfused GCONV chain.
    Lower {
        network: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Lower and fuse a network.
    Fuse {
        network: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the unroll plan of every node.
    Map {
        #[command(flatten)]
        c: Target,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the performance report.
    Analyze {
        #[command(flatten)]
        c: Target,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the whole pipeline and write the compile report.
    Compile {
        #[command(flatten)]
        c: Target,
        /// Include the lowered chain, the final chain and the plans in the report.
        #[arg(long)]
        dump_chain: bool,
        /// Report destination; stdout when absent.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Binary instruction stream destination.
        #[arg(long)]
        emit: Option<PathBuf>,
        /// Disassembly destination.
        #[arg(long)]
        disasm: Option<PathBuf>,
    },
    /// Check the interpreted chain against the reference layers.
    Verify {
        network: PathBuf,
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        #[arg(long)]
        no_fuse: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Emit the instruction stream; prints the disassembly when no file is given.
    Emit {
        #[command(flatten)]
        c: Target,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        text: Option<PathBuf>,
    },
    /// Disassemble a binary instruction stream.
    Disasm { stream: PathBuf },
}

#[derive(Args)]
struct Target {
    network: PathBuf,
    /// Preset name or path to an accelerator JSON file.
    #[arg(long, default_value = "eyeriss")]
    accel: String,
    #[arg(long)]
    no_fuse: bool,
    #[arg(long)]
    no_exchange: bool,
}

struct Failure {
    kind: &'static str,
    stage: Option<String>,
    message: String,
    code: u8,
}

impl Failure {
    fn new(kind: &'static str, message: impl Display) -> Self {
        Failure {
            kind,
            stage: None,
            message: message.to_string(),
            code: 1,
        }
    }

    fn json(&self) -> Value {
        json!({ "error": self.kind, "stage": self.stage, "message": self.message })
    }
}

impl From<ParseError> for Failure {
    fn from(e: ParseError) -> Self {
        Failure::new(e.kind(), &e)
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        Failure {
            stage: Some(e.stage.to_string()),
            ..Failure::new("pipeline", &e.msg)
        }
    }
}

impl From<AccelError> for Failure {
    fn from(e: AccelError) -> Self {
        Failure::new("accelerator", e)
    }
}

impl From<IsaError> for Failure {
    fn from(e: IsaError) -> Self {
        Failure::new("isa", e)
    }
}

fn read(path: &Path) -> Result<Vec<u8>, Failure> {
    std::fs::read(path).map_err(|e| Failure::new("io", format!("{}: {e}", path.display())))
}

fn network(path: &Path) -> Result<NetworkIR, Failure> {
    let bytes = read(path)?;
    let text = String::from_utf8(bytes)
        .map_err(|_| Failure::new("parse", format!("{}: not UTF-8", path.display())))?;
    Ok(parse_network(&text)?)
}

fn accelerator(arg: &str) -> Result<AcceleratorSpec, Failure> {
    let p = Path::new(arg);
    if p.is_file() {
        let bytes = read(p)?;
        return Ok(AcceleratorSpec::from_json(&String::from_utf8_lossy(&bytes))?);
    }
    Ok(preset(arg)?)
}

fn compile(c: &Target) -> Result<PipelineOutput, Failure> {
    let net = network(&c.network)?;
    let accel = accelerator(&c.accel)?;
    let opts = PipelineOptions {
        fuse: !c.no_fuse,
        exchange: !c.no_exchange,
    };
    Ok(run_pipeline(&net, &accel, opts)?)
}

/// Write through a temporary file in the destination directory.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    let io = |e: &dyn Display| Failure::new("io", format!("{}: {e}", path.display()));
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(|e| io(&e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| io(&e))?;
    tmp.write_all(bytes).map_err(|e| io(&e))?;
    tmp.as_file().sync_all().map_err(|e| io(&e))?;
    tmp.persist(path).map_err(|e| io(&e.error))?;
    Ok(())
}

fn put(out: Option<&Path>, bytes: &[u8]) -> Result<(), Failure> {
    match out {
        Some(p) => write_atomic(p, bytes),
        None => std::io::stdout()
            .write_all(bytes)
            .map_err(|e| Failure::new("io", format!("stdout: {e}"))),
    }
}

fn put_json(out: Option<&Path>, v: Value) -> Result<(), Failure> {
    let mut s = serde_json::to_string_pretty(&v).map_err(|e| Failure::new("io", e))?;
    s.push('\n');
    put(out, s.as_bytes())
}

fn run(cmd: Cmd) -> Result<(), Failure> {
    match cmd {
        Cmd::Lower { network: n, out } => {
            let l = pipeline::lower(&network(&n)?)?;
            put_json(
                out.as_deref(),
                json!({ "chain": l.chain, "layer_outputs": l.layer_outputs }),
            )
        }
        Cmd::Fuse { network: n, out } => {
            let l = pipeline::lower(&network(&n)?)?;
            let fused = pipeline::fuse(&l.chain)?;
            put_json(
                out.as_deref(),
                json!({ "unfused_chain_length": l.chain.nodes.len(), "chain": fused }),
            )
        }
        Cmd::Map { c, out } => put_json(out.as_deref(), json!(compile(&c)?.plans)),
        Cmd::Analyze { c, out } => put_json(out.as_deref(), json!(compile(&c)?.report.perf)),
        Cmd::Compile {
            c,
            dump_chain,
            report,
            emit,
            disasm,
        } => {
            let o = compile(&c)?;
            if let Some(p) = &emit {
                write_atomic(p, &o.stream.bytes)?;
            }
            if let Some(p) = &disasm {
                write_atomic(p, o.stream.text.as_bytes())?;
            }
            let mut v = json!(o.report);
            if dump_chain {
                v["stages"] = json!({
                    "lowered": o.lowered.chain,
                    "chain": o.chain,
                    "plans": o.plans,
                });
            }
            put_json(report.as_deref(), v)
        }
        Cmd::Verify {
            network: n,
            seeds,
            no_fuse,
            out,
        } => {
            let s = verify_network(&network(&n)?, seeds, !no_fuse)?;
            put_json(out.as_deref(), json!(s))?;
            if s.passed {
                Ok(())
            } else {
                Err(Failure {
                    stage: Some("verify".into()),
                    ..Failure::new(
                        "verification",
                        format!("{} mismatching layer outputs", s.mismatches.len()),
                    )
                })
            }
        }
        Cmd::Emit { c, out, text } => {
            let o = compile(&c)?;
            if let Some(p) = &out {
                write_atomic(p, &o.stream.bytes)?;
            }
            if let Some(p) = &text {
                write_atomic(p, o.stream.text.as_bytes())?;
            }
            if out.is_none() && text.is_none() {
                put(None, o.stream.text.as_bytes())?;
            }
            Ok(())
        }
        Cmd::Disasm { stream } => {
            let text = gconv::isa::disassemble(&read(&stream)?)?;
            put(None, text.as_bytes())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let f = Failure {
                code: 2,
                ..Failure::new("usage", e.render().to_string().trim_end())
            };
            eprintln!("{}", f.json());
            return ExitCode::from(f.code);
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", f.json());
            ExitCode::from(f.code)
        }
    }
}
