//! Command-line front end.
//!
//! Exit codes: 0 when no leak is found (or nothing needed fencing), 1 when
//! leaks are found (or `corpus` sees a mismatch), 2 on any error.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::acfg::build_acfg;
use crate::axiom::{enumerate_event_structures, SpecConfig};
use crate::corpus;
use crate::dot::candidate_dot;
use crate::exec::{enumerate_candidates, ExecConfig};
use crate::ir::{parse, Program};
use crate::leakage::{analyze_engines, Class, Engine, EngineConfig};
use crate::repair::{repair, RepairConfig};
use crate::report::{render_json, render_text};
use crate::{Error, Result};

#[derive(Parser, Debug)]
#[command(
    name = "lcm",
    version,
    about = "Speculative leakage analysis for litmus programs"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Validate a program and print it in canonical form.
    Parse {
        file: PathBuf,
        /// Write the summarized control-flow graph (Graphviz) here.
        #[arg(long)]
        dump_acfg: Option<PathBuf>,
    },
    /// Count event structures and consistent candidate executions.
    Enumerate {
        file: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
        /// Primitives to speculate on (default: none).
        #[arg(long, value_delimiter = ',')]
        primitives: Vec<Primitive>,
        /// Write one graph per candidate into this directory.
        #[arg(long)]
        dot: Option<PathBuf>,
    },
    /// Analyze programs for leaks.
    Check {
        #[arg(required = true)]
        files: Vec<PathBuf>,
        #[command(flatten)]
        analysis: AnalysisArgs,
        /// Write one witness graph per finding into this directory.
        #[arg(long)]
        dot: Option<PathBuf>,
    },
    /// Insert a minimal set of lfences and print the fenced program.
    Repair {
        file: PathBuf,
        #[command(flatten)]
        analysis: AnalysisArgs,
        /// Write the fenced program here instead of stdout.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Run every program under a directory against its expectation sidecar.
    Corpus {
        dir: PathBuf,
        #[command(flatten)]
        analysis: AnalysisArgs,
        /// Files analyzed concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Primitive {
    Branch,
    Stl,
    Psf,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum EngineArg {
    V1,
    V4,
    Psf,
    All,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Mcm {
    Tso,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Json,
}

#[derive(Args, Debug, Clone)]
pub struct ModelArgs {
    /// Transient window length in fetched instructions.
    #[arg(long, default_value_t = 250)]
    pub spec_depth: usize,
    #[arg(long, value_enum, default_value_t = Mcm::Tso)]
    pub mcm: Mcm,
    /// Model stores that leave memory unchanged as compare-only accesses.
    #[arg(long)]
    pub silent_stores: bool,
}

#[derive(Args, Debug, Clone)]
pub struct AnalysisArgs {
    #[arg(long, value_enum, default_value_t = EngineArg::All)]
    pub engine: EngineArg,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Override the engine's primitives.
    #[arg(long, value_delimiter = ',')]
    pub primitives: Vec<Primitive>,
    /// Sliding window: chain members at most this many instructions back.
    #[arg(long)]
    pub window: Option<usize>,
    /// Classes to report: address, C, D, U_C, U_D, or all.
    #[arg(long, value_delimiter = ',', default_value = "U_D")]
    pub classes: Vec<String>,
    /// Only report chains whose first address link is base-plus-index.
    #[arg(long)]
    pub require_gep: bool,
    /// Also report committed transmitters.
    #[arg(long)]
    pub include_committed: bool,
    /// Per-file timeout in seconds.
    #[arg(long, default_value_t = 60)]
    pub timeout: u64,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    pub format: Format,
    /// Omit the elapsed-time footer.
    #[arg(long)]
    pub no_timing: bool,
}

fn spec_flags(ps: &[Primitive]) -> (bool, bool, bool) {
    (
        ps.contains(&Primitive::Branch),
        ps.contains(&Primitive::Stl),
        ps.contains(&Primitive::Psf),
    )
}

impl AnalysisArgs {
    pub fn engines(&self) -> Vec<Engine> {
        match self.engine {
            EngineArg::V1 => vec![Engine::V1],
            EngineArg::V4 => vec![Engine::V4],
            EngineArg::Psf => vec![Engine::Psf],
            EngineArg::All => Engine::ALL.to_vec(),
        }
    }

    pub fn config(&self) -> std::result::Result<EngineConfig, String> {
        let mut classes = BTreeSet::new();
        for c in &self.classes {
            if c == "all" {
                classes.extend(Class::ALL);
            } else {
                classes.insert(Class::parse(c).ok_or_else(|| format!("unknown class {c:?}"))?);
            }
        }
        Ok(EngineConfig {
            d_spec: self.model.spec_depth,
            primitives: (!self.primitives.is_empty()).then(|| spec_flags(&self.primitives)),
            window: self.window,
            classes,
            require_gep: self.require_gep,
            silent_stores: self.model.silent_stores,
            transient_only: !self.include_committed,
            exclude_prefetch_variant: !self.include_committed,
            timeout: Some(Duration::from_secs(self.timeout)),
            graphs: false,
            ..EngineConfig::default()
        })
    }
}

fn read_program(path: &Path) -> Result<Program> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    Ok(parse(&text)?)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "program".into())
}

/// Runs a command, writing to `out`; returns the exit code.
pub fn run(cli: Cli, out: &mut dyn std::io::Write) -> Result<i32> {
    let start = Instant::now();
    let mut emit = |s: &str| {
        let _ = out.write_all(s.as_bytes());
    };
    match cli.command {
        Command::Parse { file, dump_acfg } => {
            let p = read_program(&file)?;
            emit(&p.to_string());
            if let Some(path) = dump_acfg {
                let graphs = build_acfg(&p)?;
                let text: String = graphs.iter().map(|g| g.to_dot()).collect();
                write_file(&path, &text)?;
            }
            Ok(0)
        }
        Command::Enumerate {
            file,
            model,
            primitives,
            dot,
        } => {
            let p = read_program(&file)?;
            let graphs = build_acfg(&p)?;
            let (branch, stl, psf) = spec_flags(&primitives);
            let spec = SpecConfig {
                d_spec: model.spec_depth,
                branch,
                stl,
                psf,
            };
            let structures = enumerate_event_structures(&graphs, &p.aliases, &spec);
            let exec = ExecConfig {
                silent_stores: model.silent_stores,
            };
            if let Some(d) = &dot {
                create_dir(d)?;
            }
            let mut total = 0;
            for (i, s) in structures.iter().enumerate() {
                for (j, c) in enumerate_candidates(s, &exec).iter().enumerate() {
                    total += 1;
                    if let Some(d) = &dot {
                        let g = candidate_dot(s, c, None, &[], &BTreeSet::new());
                        write_file(&d.join(format!("{}-s{i}-c{j}.dot", stem(&file))), &g)?;
                    }
                }
            }
            emit(&format!(
                "{} event structures, {} consistent candidate executions\n",
                structures.len(),
                total
            ));
            Ok(0)
        }
        Command::Check {
            files,
            analysis,
            dot,
        } => {
            let mut cfg = analysis.config().map_err(Error::Config)?;
            cfg.graphs = dot.is_some();
            if let Some(d) = &dot {
                create_dir(d)?;
            }
            let mut leaks = false;
            for file in &files {
                let p = read_program(file)?;
                let r = analyze_engines(&p, &analysis.engines(), &cfg)?;
                let name = file.display().to_string();
                emit(&match analysis.format {
                    Format::Text => render_text(&name, &r),
                    Format::Json => render_json(&name, &r),
                });
                if let Some(d) = &dot {
                    for (i, f) in r.findings.iter().enumerate() {
                        if let Some(g) = &f.graph {
                            write_file(
                                &d.join(format!("{}-{i}-{}.dot", stem(file), f.transmitter)),
                                g,
                            )?;
                        }
                    }
                }
                leaks |= !r.findings.is_empty();
            }
            if !analysis.no_timing {
                emit(&format!("elapsed: {} ms\n", start.elapsed().as_millis()));
            }
            Ok(i32::from(leaks))
        }
        Command::Repair {
            file,
            analysis,
            output,
        } => {
            let p = read_program(&file)?;
            let cfg = analysis.config().map_err(Error::Config)?;
            let outcome = repair(&p, &RepairConfig::new(analysis.engines(), cfg))?;
            let program = outcome.program.to_string();
            match &output {
                Some(path) => write_file(path, &program)?,
                None => emit(&program),
            }
            for fp in &outcome.fences {
                let f = p.function(&fp.func).expect("fence in known function");
                let before = f.display_name(fp.index);
                match analysis.format {
                    Format::Json => emit(&format!(
                        "{}\n",
                        serde_json::json!({"fence": "lfence", "func": fp.func, "before": before, "index": fp.index})
                    )),
                    Format::Text => emit(&format!(
                        "; lfence inserted before {before} in {}\n",
                        fp.func
                    )),
                }
            }
            if !analysis.no_timing {
                emit(&format!("; elapsed: {} ms\n", start.elapsed().as_millis()));
            }
            Ok(i32::from(!outcome.fences.is_empty()))
        }
        Command::Corpus {
            dir,
            analysis,
            jobs,
        } => {
            let cases = corpus::load(&dir)?;
            let cfg = analysis.config().map_err(Error::Config)?;
            let next = AtomicUsize::new(0);
            let results = Mutex::new(Vec::new());
            std::thread::scope(|scope| {
                for _ in 0..jobs.max(1) {
                    scope.spawn(|| loop {
                        let i = next.fetch_add(1, Ordering::SeqCst);
                        let Some(case) = cases.get(i) else { break };
                        let r = corpus::run_case(case, &cfg);
                        results.lock().unwrap().push((i, r));
                    });
                }
            });
            let mut results = results.into_inner().unwrap();
            results.sort_by_key(|(i, _)| *i);
            let mut rows = Vec::new();
            for (_, r) in results {
                rows.push(r?);
            }
            emit(&corpus::table(&rows));
            for r in &rows {
                if let Some(reason) = &r.reason {
                    emit(&format!("{}: {reason}\n", r.name));
                }
            }
            let failed = rows.iter().filter(|r| r.pass == Some(false)).count();
            emit(&format!(
                "{} case(s), {} mismatch(es)\n",
                rows.len(),
                failed
            ));
            if !analysis.no_timing {
                emit(&format!("elapsed: {} ms\n", start.elapsed().as_millis()));
            }
            Ok(i32::from(failed > 0))
        }
    }
}

pub fn main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    match run(cli, &mut lock) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}
