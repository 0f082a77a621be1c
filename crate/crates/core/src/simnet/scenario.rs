//! Scenario files: one step per line, `tick actor command args...`, with
//! `#` starting a comment. Arguments are shell-quoted; `key=value` options
//! may appear in any order after the positional arguments.
//!
//! ```text
//! # tick actor     command   args
//! 0     provider   publish   id=cohort desc="T2D cohort" license=63 purposes=general-research personal=true
//! 0     provider   record    ds-1 s-001 anon-17 54,T2D
//! 1     alice      request   ds-1 purpose=general-research
//! 3     alice      agree     ds-1 license=63
//! 3     alice      open      ds-1
//! 4     alice      act       ds-1 commercial-use
//! 4     -          tick      10
//! ```
//!
//! The actor `-` stands for the simulation itself and is accepted by the
//! commands that have no sender (`tick`, `inspect`, `offline`, `online`,
//! `replication`).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use thiserror::Error;

use crate::gdpr::SubjectId;
use crate::ledger::{NodeId, Role, Tick};
use crate::license::{ActionKind, DataAction, LicenseCode};
use crate::registry::{PurposeKind, PurposeTag};

pub const SYSTEM_ACTOR: &str = "-";
pub const DEFAULT_PERIOD: Tick = 10;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("line {line}: {reason}")]
pub struct ParseError {
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum InspectTarget {
    Chain,
    Contract(String),
    Replicas,
    Node(String),
}

impl fmt::Display for InspectTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InspectTarget::Chain => f.write_str("chain"),
            InspectTarget::Contract(c) => write!(f, "contract {c}"),
            InspectTarget::Replicas => f.write_str("replicas"),
            InspectTarget::Node(n) => write!(f, "node {n}"),
        }
    }
}

impl InspectTarget {
    pub fn parse(args: &[String]) -> Result<Self, String> {
        match args {
            [t] if t == "chain" => Ok(InspectTarget::Chain),
            [t] if t == "replicas" => Ok(InspectTarget::Replicas),
            [t, a] if t == "contract" => Ok(InspectTarget::Contract(a.clone())),
            [t, n] if t == "node" => Ok(InspectTarget::Node(n.clone())),
            _ => Err(format!("unknown inspect target `{}`", args.join(" "))),
        }
    }
}

/// Publication options; a profile file, or the profile fields inline.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PublishArgs {
    pub profile_file: Option<String>,
    pub profile_id: Option<String>,
    pub description: Option<String>,
    pub purposes: BTreeSet<PurposeKind>,
    pub purpose_detail: String,
    pub personal: bool,
    pub license: LicenseCode,
    pub period: Tick,
    pub link: Option<String>,
    pub columns: Vec<String>,
    pub data_file: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Command {
    Join(Role),
    Publish(Box<PublishArgs>),
    Record { dataset: String, subject: SubjectId, anon_id: String, row: Vec<String> },
    Query(Vec<String>),
    Request { dataset: String, purpose: PurposeTag },
    Agree { target: String, license: LicenseCode, institution: String, processing: String },
    Open { dataset: String },
    Act { dataset: String, action: DataAction },
    Tick(u64),
    Erase(SubjectId),
    Rectify { subject: SubjectId, row: Vec<String> },
    AccessReport(SubjectId),
    Inspect(InspectTarget),
    Offline(NodeId),
    Online(NodeId),
    Replication(bool),
}

impl Command {
    pub fn verb(&self) -> &'static str {
        match self {
            Command::Join(_) => "join",
            Command::Publish(_) => "publish",
            Command::Record { .. } => "record",
            Command::Query(_) => "query",
            Command::Request { .. } => "request",
            Command::Agree { .. } => "agree",
            Command::Open { .. } => "open",
            Command::Act { .. } => "act",
            Command::Tick(_) => "tick",
            Command::Erase(_) => "erase",
            Command::Rectify { .. } => "rectify",
            Command::AccessReport(_) => "access-report",
            Command::Inspect(_) => "inspect",
            Command::Offline(_) => "offline",
            Command::Online(_) => "online",
            Command::Replication(_) => "replication",
        }
    }

    fn system(&self) -> bool {
        matches!(
            self,
            Command::Tick(_) | Command::Inspect(_) | Command::Offline(_) | Command::Online(_) | Command::Replication(_)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Step {
    pub line: usize,
    pub tick: Tick,
    pub actor: NodeId,
    pub command: Command,
    pub source: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Scenario {
    pub steps: Vec<Step>,
}

/// Splits tokens into positionals and `key=value` options; a repeated key
/// is an error.
fn split_args(tokens: &[String]) -> Result<(Vec<String>, BTreeMap<String, String>), String> {
    let mut pos = Vec::new();
    let mut opts = BTreeMap::new();
    for t in tokens {
        match t.split_once('=') {
            Some((k, v)) if !k.is_empty() && k.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') => {
                if opts.insert(k.to_owned(), v.to_owned()).is_some() {
                    return Err(format!("option `{k}` given twice"));
                }
            }
            _ => pos.push(t.clone()),
        }
    }
    Ok((pos, opts))
}

pub fn parse_row(s: &str) -> Vec<String> {
    s.split(',').map(|c| c.trim().to_owned()).collect()
}

fn parse_bool(s: &str) -> Result<bool, String> {
    match s {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(format!("expected a boolean, got `{s}`")),
    }
}

fn take_opt(opts: &mut BTreeMap<String, String>, key: &str) -> Option<String> {
    opts.remove(key)
}

fn need_opt(opts: &mut BTreeMap<String, String>, key: &str) -> Result<String, String> {
    opts.remove(key).ok_or_else(|| format!("missing `{key}=`"))
}

fn arity(verb: &str, pos: &[String], n: usize) -> Result<(), String> {
    if pos.len() == n {
        Ok(())
    } else {
        Err(format!("`{verb}` takes {n} positional argument(s), got {}", pos.len()))
    }
}

fn parse_command(verb: &str, args: &[String]) -> Result<Command, String> {
    let (pos, mut opts) = split_args(args)?;
    let cmd = match verb {
        "join" => {
            arity(verb, &pos, 1)?;
            Command::Join(pos[0].parse()?)
        }
        "publish" => {
            arity(verb, &pos, 0)?;
            let license = need_opt(&mut opts, "license")?.parse::<LicenseCode>().map_err(|e| e.to_string())?;
            let purposes = match take_opt(&mut opts, "purposes") {
                Some(p) if !p.is_empty() => {
                    p.split(',').map(|s| s.trim().parse::<PurposeKind>()).collect::<Result<_, _>>().map_err(|e| e.to_string())?
                }
                _ => BTreeSet::new(),
            };
            let period = match take_opt(&mut opts, "period") {
                Some(p) => p.parse::<Tick>().map_err(|_| format!("bad period `{p}`"))?,
                None => DEFAULT_PERIOD,
            };
            if period == 0 {
                return Err("period must be positive".into());
            }
            Command::Publish(Box::new(PublishArgs {
                profile_file: take_opt(&mut opts, "profile"),
                profile_id: take_opt(&mut opts, "id"),
                description: take_opt(&mut opts, "desc"),
                purposes,
                purpose_detail: take_opt(&mut opts, "detail").unwrap_or_default(),
                personal: take_opt(&mut opts, "personal").map(|s| parse_bool(&s)).transpose()?.unwrap_or(false),
                license,
                period,
                link: take_opt(&mut opts, "link"),
                columns: take_opt(&mut opts, "columns")
                    .map(|c| parse_row(&c))
                    .unwrap_or_else(|| vec!["age".into(), "diagnosis".into()]),
                data_file: take_opt(&mut opts, "data"),
            }))
        }
        "record" => {
            arity(verb, &pos, 4)?;
            Command::Record {
                dataset: pos[0].clone(),
                subject: SubjectId(pos[1].clone()),
                anon_id: pos[2].clone(),
                row: parse_row(&pos[3]),
            }
        }
        "query" => Command::Query(pos),
        "request" => {
            arity(verb, &pos, 1)?;
            let purpose = PurposeTag::parse(&need_opt(&mut opts, "purpose")?).map_err(|e| e.to_string())?;
            Command::Request { dataset: pos[0].clone(), purpose }
        }
        "agree" => {
            arity(verb, &pos, 1)?;
            let license = need_opt(&mut opts, "license")?.parse::<LicenseCode>().map_err(|e| e.to_string())?;
            Command::Agree {
                target: pos[0].clone(),
                license,
                institution: take_opt(&mut opts, "institution").unwrap_or_default(),
                processing: take_opt(&mut opts, "processing").unwrap_or_default(),
            }
        }
        "open" => {
            arity(verb, &pos, 1)?;
            Command::Open { dataset: pos[0].clone() }
        }
        "act" => {
            // flags: notice, attrib
            let (flags, rest): (Vec<&String>, Vec<&String>) =
                pos.iter().partition(|p| p.as_str() == "notice" || p.as_str() == "attrib");
            if rest.len() != 2 {
                return Err("`act` takes a dataset and an action".into());
            }
            let kind: ActionKind = rest[1].parse()?;
            let deriv = take_opt(&mut opts, "deriv")
                .map(|d| d.parse::<LicenseCode>().map_err(|e| e.to_string()))
                .transpose()?;
            let action = DataAction::new(
                kind,
                flags.iter().any(|f| f.as_str() == "notice"),
                flags.iter().any(|f| f.as_str() == "attrib"),
                deriv,
            )?;
            Command::Act { dataset: rest[0].clone(), action }
        }
        "tick" => {
            arity(verb, &pos, 1)?;
            let n: u64 = pos[0].parse().map_err(|_| format!("bad tick count `{}`", pos[0]))?;
            if n == 0 {
                return Err("tick count must be at least 1".into());
            }
            Command::Tick(n)
        }
        "erase" => {
            arity(verb, &pos, 1)?;
            Command::Erase(SubjectId(pos[0].clone()))
        }
        "rectify" => {
            arity(verb, &pos, 1)?;
            Command::Rectify { subject: SubjectId(pos[0].clone()), row: parse_row(&need_opt(&mut opts, "row")?) }
        }
        "access-report" => {
            arity(verb, &pos, 1)?;
            Command::AccessReport(SubjectId(pos[0].clone()))
        }
        "inspect" => Command::Inspect(InspectTarget::parse(&pos)?),
        "offline" | "online" => {
            arity(verb, &pos, 1)?;
            let n = NodeId(pos[0].clone());
            if verb == "offline" {
                Command::Offline(n)
            } else {
                Command::Online(n)
            }
        }
        "replication" => {
            arity(verb, &pos, 1)?;
            match pos[0].as_str() {
                "up" => Command::Replication(true),
                "down" => Command::Replication(false),
                other => return Err(format!("replication takes up|down, got `{other}`")),
            }
        }
        other => return Err(format!("unknown command `{other}`")),
    };
    if let Some(k) = opts.keys().next() {
        return Err(format!("unexpected option `{k}=` for `{verb}`"));
    }
    Ok(cmd)
}

/// Parses one non-empty, non-comment line.
pub fn parse_step(line_no: usize, text: &str) -> Result<Step, ParseError> {
    let err = |reason: String| ParseError { line: line_no, reason };
    let tokens = shlex::split(text).ok_or_else(|| err("unbalanced quotes".into()))?;
    if tokens.len() < 3 {
        return Err(err("expected `tick actor command args...`".into()));
    }
    let tick: Tick = tokens[0].parse().map_err(|_| err(format!("bad tick `{}`", tokens[0])))?;
    let command = parse_command(&tokens[2], &tokens[3..]).map_err(err)?;
    if tokens[1] == SYSTEM_ACTOR && !command.system() {
        return Err(err(format!("`{}` needs an actor", command.verb())));
    }
    Ok(Step { line: line_no, tick, actor: NodeId(tokens[1].clone()), command, source: text.trim().to_owned() })
}

fn strip_comment(line: &str) -> &str {
    // a `#` inside quotes is kept
    let mut quote = None;
    for (i, c) in line.char_indices() {
        match (quote, c) {
            (None, '"' | '\'') => quote = Some(c),
            (Some(q), c) if c == q => quote = None,
            (None, '#') => return &line[..i],
            _ => {}
        }
    }
    line
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Self, ParseError> {
        let mut steps: Vec<Step> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let body = strip_comment(raw);
            if body.trim().is_empty() {
                continue;
            }
            let step = parse_step(i + 1, body)?;
            if let Some(prev) = steps.last() {
                if step.tick < prev.tick {
                    return Err(ParseError {
                        line: step.line,
                        reason: format!("tick {} goes back from {}", step.tick, prev.tick),
                    });
                }
            }
            steps.push(step);
        }
        Ok(Scenario { steps })
    }

    /// Checks that every actor exists in `topology` or joined earlier.
    pub fn validate(&self, topology: &[(NodeId, Role)]) -> Result<(), ParseError> {
        let mut known: BTreeSet<&NodeId> = topology.iter().map(|(n, _)| n).collect();
        for s in &self.steps {
            if let Command::Join(_) = s.command {
                if !known.insert(&s.actor) {
                    return Err(ParseError { line: s.line, reason: format!("node {} already exists", s.actor) });
                }
                continue;
            }
            if s.actor.as_str() != SYSTEM_ACTOR && !known.contains(&s.actor) {
                return Err(ParseError { line: s.line, reason: format!("unknown actor {}", s.actor) });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_commands_and_comments() {
        let s = Scenario::parse(
            "# header\n\n0 provider publish id=c desc=\"T2D # cohort\" license=63 purposes=general-research personal=true\n\
             1 alice request ds-1 purpose=general-research:diabetes # trailing\n\
             4 alice act ds-1 share-derivative notice attrib deriv=63\n\
             4 - tick 10\n",
        )
        .unwrap();
        assert_eq!(s.steps.len(), 4);
        let Command::Publish(p) = &s.steps[0].command else { panic!() };
        assert_eq!(p.description.as_deref(), Some("T2D # cohort"));
        assert_eq!(p.period, DEFAULT_PERIOD);
        assert!(p.personal);
        let Command::Request { purpose, .. } = &s.steps[1].command else { panic!() };
        assert_eq!(purpose.detail, "diabetes");
        let Command::Act { action, .. } = &s.steps[2].command else { panic!() };
        assert_eq!(action.derivative_license(), Some(LicenseCode(63)));
        assert!(action.carried_notice() && action.carried_attribution());
        assert_eq!(s.steps[3].command, Command::Tick(10));
        assert_eq!(s.steps[3].line, 6);
    }

    #[test]
    fn malformed_lines_report_their_number() {
        for (text, line) in [
            ("0 provider publish license=63\nx alice query\n", 2),
            ("0 alice frobnicate\n", 1),
            ("0 alice act ds-1 share-derivative\n", 1),
            ("0 alice act ds-1 read deriv=63\n", 1),
            ("0 provider publish license=64\n", 1),
            ("0 - tick 0\n", 1),
            ("5 - tick 1\n3 - tick 1\n", 2),
            ("0 - publish license=63\n", 1),
            ("0 alice agree ds-1\n", 1),
            ("0 alice query x=1 x=2\n", 1),
            ("0 alice inspect galaxy\n", 1),
            ("0 alice request 'ds-1 purpose=x\n", 1),
        ] {
            assert_eq!(Scenario::parse(text).unwrap_err().line, line, "{text}");
        }
    }

    #[test]
    fn validation_tracks_joins() {
        let topo = vec![(NodeId::from("provider"), Role::Provider)];
        let s = Scenario::parse("0 carol join requester\n1 carol query\n2 dave query\n").unwrap();
        assert_eq!(s.validate(&topo).unwrap_err().line, 3);
        let dup = Scenario::parse("0 provider join provider\n").unwrap();
        assert!(dup.validate(&topo).is_err());
    }
}
