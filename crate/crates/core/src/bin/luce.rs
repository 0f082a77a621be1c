//! Command-line front end. `run` executes a scenario from scratch; every
//! other verb acts on a session directory (`.luce` by default) holding the
//! session settings and the steps taken so far as a replayable scenario.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use luce::ledger::{export_chain, import_chain, verify_chain};
use luce::license::{render_deed, LicenseCode};
use luce::monitor::MonitorMode;
use luce::simnet::{golden_trace, run_scenario, scenario::parse_step, Command, Scenario, SimConfig, Simulation, BUNDLED};

#[derive(Parser)]
#[command(name = "luce", version, about = "Licensed data sharing on a simulated ledger")]
struct Cli {
    /// RNG seed; fixed seed and steps give a byte-identical chain.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Monitoring mode for newly opened datasets.
    #[arg(long, global = true)]
    mode: Option<MonitorMode>,
    /// Replicas per event log.
    #[arg(long, global = true)]
    replicas: Option<usize>,
    /// Session directory.
    #[arg(long, global = true, default_value = ".luce")]
    session: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Actor {
    /// Node acting; defaults to `provider` or `alice` depending on the verb.
    #[arg(long = "as")]
    actor: Option<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a bundled scenario by name or a scenario file.
    Run {
        scenario: String,
        /// Write the final chain as JSON lines.
        #[arg(long)]
        export: Option<PathBuf>,
        /// Print the committed-transaction trace.
        #[arg(long)]
        trace: bool,
    },
    /// List bundled scenarios.
    Scenarios,
    /// Render a license code as permits / prohibits / requires.
    License { code: String },
    /// Register a node.
    Join { id: String, role: String },
    /// List a dataset from a profile file; creates its contract.
    Publish {
        #[arg(long)]
        profile: PathBuf,
        #[arg(long)]
        license: String,
        #[arg(long)]
        period: Option<u64>,
        /// CSV with an `anon_id` first column.
        #[arg(long)]
        data: Option<PathBuf>,
        #[command(flatten)]
        who: Actor,
    },
    /// Add a subject's record to a dataset.
    Record {
        dataset: String,
        subject: String,
        anon_id: String,
        row: String,
        #[command(flatten)]
        who: Actor,
    },
    Query {
        keywords: Vec<String>,
        #[command(flatten)]
        who: Actor,
    },
    /// Ask the provider for access, stating a purpose.
    Request {
        dataset: String,
        #[arg(long)]
        purpose: String,
        #[command(flatten)]
        who: Actor,
    },
    /// Agree to the license of a granted dataset (id or contract address).
    Agree {
        contract: String,
        #[arg(long)]
        license: String,
        #[arg(long)]
        institution: Option<String>,
        #[arg(long)]
        processing: Option<String>,
        #[command(flatten)]
        who: Actor,
    },
    /// Download and unseal an agreed dataset.
    Open {
        dataset: String,
        #[command(flatten)]
        who: Actor,
    },
    /// Perform an action on an open dataset; handle is `requester/dataset`.
    Act {
        handle: String,
        action: String,
        #[arg(long)]
        notice: bool,
        #[arg(long)]
        attrib: bool,
        #[arg(long)]
        deriv_license: Option<String>,
        #[command(flatten)]
        who: Actor,
    },
    Tick { n: u64 },
    Erase {
        subject: String,
        #[command(flatten)]
        who: Actor,
    },
    Rectify {
        subject: String,
        #[arg(long)]
        row: String,
        #[command(flatten)]
        who: Actor,
    },
    AccessReport {
        subject: String,
        #[command(flatten)]
        who: Actor,
    },
    /// chain | contract <id> | replicas | node <id>
    Inspect {
        target: Vec<String>,
        /// Verify an exported chain file instead of the session.
        #[arg(long)]
        chain: Option<PathBuf>,
    },
    /// Write the session chain as JSON lines.
    Export { file: PathBuf },
    /// Delete the session.
    Reset,
}

#[derive(Serialize, Deserialize)]
struct SessionFile {
    seed: u64,
    mode: String,
    replicas: usize,
}

struct Session {
    dir: PathBuf,
    config: SimConfig,
}

impl Session {
    const SETTINGS: &'static str = "session.toml";
    const STEPS: &'static str = "steps.scn";

    fn open(cli: &Cli) -> Result<Self> {
        let dir = cli.session.clone();
        let settings = dir.join(Self::SETTINGS);
        let file = if settings.exists() {
            let f: SessionFile = toml::from_str(&fs::read_to_string(&settings)?).context("reading session settings")?;
            if cli.seed.is_some_and(|s| s != f.seed) {
                eprintln!("note: session uses seed {}; --seed ignored (luce reset to start over)", f.seed);
            }
            f
        } else {
            fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
            let f = SessionFile {
                seed: cli.seed.unwrap_or(0),
                mode: cli.mode.map_or("full", mode_str).to_owned(),
                replicas: cli.replicas.unwrap_or(luce::replication::DEFAULT_REPLICAS),
            };
            fs::write(&settings, toml::to_string(&f)?)?;
            f
        };
        let config = SimConfig {
            seed: file.seed,
            mode: file.mode.parse().map_err(|e: String| anyhow!(e))?,
            replicas: file.replicas,
            base_dir: Some(dir.clone()),
            ..SimConfig::default()
        };
        Ok(Session { dir, config })
    }

    fn replay(&self) -> Result<Simulation> {
        let text = fs::read_to_string(self.dir.join(Self::STEPS)).unwrap_or_default();
        let scenario = Scenario::parse(&text).context("session steps are corrupt")?;
        let mut sim = Simulation::new(self.config.clone())?;
        for step in &scenario.steps {
            sim.execute(step).with_context(|| format!("replaying step at line {}", step.line))?;
        }
        Ok(sim)
    }

    /// Copies a user file into the session so replays do not depend on it.
    fn adopt(&self, src: &Path, prefix: &str) -> Result<String> {
        let n = fs::read_dir(&self.dir)?.filter(|e| e.as_ref().is_ok_and(|e| e.file_name().to_string_lossy().starts_with(prefix))).count();
        let ext = src.extension().and_then(|e| e.to_str()).unwrap_or("txt");
        let name = format!("{prefix}-{}.{ext}", n + 1);
        fs::copy(src, self.dir.join(&name)).with_context(|| format!("reading {}", src.display()))?;
        Ok(name)
    }

    /// Executes one step at the current clock; state-changing steps are
    /// recorded for replay.
    fn step(&self, sim: &mut Simulation, actor: &str, words: Vec<String>) -> Result<String> {
        let mut tokens = vec![sim.clock().to_string(), actor.to_owned()];
        tokens.extend(words);
        let line = shlex::try_join(tokens.iter().map(String::as_str)).map_err(|e| anyhow!("{e}"))?;
        let step = parse_step(1, &line)?;
        let out = sim.execute(&step)?;
        if matches!(step.command, Command::Query(_) | Command::Inspect(_) | Command::AccessReport(_)) {
            return Ok(out);
        }
        let mut f = fs::OpenOptions::new().create(true).append(true).open(self.dir.join(Self::STEPS))?;
        writeln!(f, "{line}")?;
        Ok(out)
    }
}

fn mode_str(m: MonitorMode) -> &'static str {
    match m {
        MonitorMode::Full => "full",
        MonitorMode::Attest => "attest",
    }
}

fn actor(who: &Actor, default: &str) -> String {
    who.actor.clone().unwrap_or_else(|| default.to_owned())
}

fn main() -> ExitCode {
    match real_main() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn real_main() -> Result<ExitCode> {
    let cli = Cli::parse();
    let config = SimConfig {
        seed: cli.seed.unwrap_or(0),
        mode: cli.mode.unwrap_or(MonitorMode::Full),
        replicas: cli.replicas.unwrap_or(luce::replication::DEFAULT_REPLICAS),
        ..SimConfig::default()
    };
    let (actor_name, words): (String, Vec<String>) = match &cli.cmd {
        Cmd::Run { scenario, export, trace } => {
            let (sim, result) = run_scenario(scenario, config)?;
            print!("{}", result.transcript());
            if *trace {
                print!("{}", golden_trace(sim.platform().ledger().chain()));
            }
            if let Some(path) = export {
                fs::write(path, export_chain(sim.platform().ledger().chain()))?;
            }
            return Ok(if result.all_ok() { ExitCode::SUCCESS } else { ExitCode::FAILURE });
        }
        Cmd::Scenarios => {
            for (name, text) in BUNDLED {
                let summary = text.lines().next().unwrap_or("").trim_start_matches('#').trim();
                println!("{name:20} {summary}");
            }
            return Ok(ExitCode::SUCCESS);
        }
        Cmd::License { code } => {
            let code: LicenseCode = code.parse()?;
            print!("{}", render_deed(code, &code.terms()?));
            return Ok(ExitCode::SUCCESS);
        }
        Cmd::Inspect { target, chain: Some(file) } => {
            if !target.is_empty() && target != &["chain"] {
                bail!("--chain only applies to `inspect chain`");
            }
            let text = fs::read_to_string(file).with_context(|| format!("reading {}", file.display()))?;
            let chain = match import_chain(&text) {
                Ok(c) => c,
                Err(e) => {
                    println!("verify: FAILED: {e}");
                    return Ok(ExitCode::FAILURE);
                }
            };
            let report = verify_chain(&chain);
            println!("{} block(s), {} transaction(s)", chain.blocks.len(), chain.committed().count());
            println!("verify: {report}");
            return Ok(if report.ok { ExitCode::SUCCESS } else { ExitCode::FAILURE });
        }
        Cmd::Reset => {
            if cli.session.join(Session::SETTINGS).exists() {
                fs::remove_dir_all(&cli.session)?;
            }
            return Ok(ExitCode::SUCCESS);
        }
        Cmd::Join { id, role } => (id.clone(), vec!["join".into(), role.clone()]),
        Cmd::Publish { who, .. } => (actor(who, "provider"), Vec::new()),
        Cmd::Record { dataset, subject, anon_id, row, who } => (
            actor(who, "provider"),
            vec!["record".into(), dataset.clone(), subject.clone(), anon_id.clone(), row.clone()],
        ),
        Cmd::Query { keywords, who } => {
            let mut w = vec!["query".to_owned()];
            w.extend(keywords.iter().cloned());
            (actor(who, "alice"), w)
        }
        Cmd::Request { dataset, purpose, who } => {
            (actor(who, "alice"), vec!["request".into(), dataset.clone(), format!("purpose={purpose}")])
        }
        Cmd::Agree { contract, license, institution, processing, who } => {
            let mut w = vec!["agree".into(), contract.clone(), format!("license={license}")];
            w.extend(institution.iter().map(|i| format!("institution={i}")));
            w.extend(processing.iter().map(|p| format!("processing={p}")));
            (actor(who, "alice"), w)
        }
        Cmd::Open { dataset, who } => (actor(who, "alice"), vec!["open".into(), dataset.clone()]),
        Cmd::Act { handle, action, notice, attrib, deriv_license, who } => {
            let (requester, dataset) = match handle.split_once('/') {
                Some((r, d)) => (r.to_owned(), d.to_owned()),
                None => (actor(who, "alice"), handle.clone()),
            };
            let mut w = vec!["act".into(), dataset, action.clone()];
            if *notice {
                w.push("notice".into());
            }
            if *attrib {
                w.push("attrib".into());
            }
            w.extend(deriv_license.iter().map(|d| format!("deriv={d}")));
            (requester, w)
        }
        Cmd::Tick { n } => ("-".into(), vec!["tick".into(), n.to_string()]),
        Cmd::Erase { subject, who } => (actor(who, "provider"), vec!["erase".into(), subject.clone()]),
        Cmd::Rectify { subject, row, who } => {
            (actor(who, "provider"), vec!["rectify".into(), subject.clone(), format!("row={row}")])
        }
        Cmd::AccessReport { subject, who } => (actor(who, "provider"), vec!["access-report".into(), subject.clone()]),
        Cmd::Inspect { target, chain: None } => {
            let mut w = vec!["inspect".to_owned()];
            w.extend(target.iter().cloned());
            ("-".into(), w)
        }
        Cmd::Export { .. } => ("-".into(), Vec::new()),
    };

    let session = Session::open(&cli)?;
    let mut sim = session.replay()?;
    let words = match &cli.cmd {
        Cmd::Publish { profile, license, period, data, .. } => {
            let mut w = vec!["publish".into(), format!("profile={}", session.adopt(profile, "profile")?), format!("license={license}")];
            w.extend(period.iter().map(|p| format!("period={p}")));
            if let Some(d) = data {
                w.push(format!("data={}", session.adopt(d, "data")?));
            }
            w
        }
        Cmd::Export { file } => {
            fs::write(file, export_chain(sim.platform().ledger().chain()))?;
            let pending = sim.platform().ledger().pending().len();
            if pending > 0 {
                eprintln!("note: {pending} pending transaction(s) are sealed on the next tick");
            }
            return Ok(ExitCode::SUCCESS);
        }
        _ => words,
    };
    let out = session.step(&mut sim, &actor_name, words)?;
    if !out.is_empty() {
        println!("{out}");
    }
    Ok(ExitCode::SUCCESS)
}
