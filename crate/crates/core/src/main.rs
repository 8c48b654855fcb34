use std::fs::OpenOptions;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand, ValueEnum};
use indexmap::IndexMap;
use serde_json::{json, Map, Value};

use fairflow::exemplars::{self, ExemplarError, Surrogate};
use fairflow::manifest::{describe, input_summary, output_summary, RevisionTag};
use fairflow::registry::{PublishMetadata, Registry, RegistryError};
use fairflow::resultsdb::{Column, ColumnKind, DbError, QueryPredicate, Table};
use fairflow::runner::{CachePolicy, Engine, RunError, RunRequest, DEFAULT_TIME_LIMIT, RUN_DIR_ENV};
use fairflow::values::{TypedValue, ValueError};

#[derive(Parser)]
#[command(name = "fairflow", version, about = "Run, cache and query simulation tools with declared inputs and outputs")]
struct Cli {
    /// Root of the registry, cache and results stores [default: ~/.fairflow]
    #[arg(long, global = true, env = "FAIRFLOW_HOME")]
    home: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Table,
    Csv,
    Jsonl,
}

#[derive(Subcommand)]
enum Command {
    /// List installed and published tools
    List {
        /// Case-insensitive match on name or description
        #[arg(long)]
        filter: Option<String>,
        #[arg(long, value_enum, default_value = "table")]
        format: Format,
    },
    /// Resolve a tool and show where it lives
    Search {
        name: String,
        #[arg(long)]
        rev: Option<RevisionTag>,
    },
    /// Describe a tool's inputs and outputs
    Describe {
        name: String,
        #[arg(long)]
        rev: Option<RevisionTag>,
    },
    /// Declared inputs of a tool
    Inputs {
        name: String,
        #[arg(long)]
        rev: Option<RevisionTag>,
        #[arg(long, value_enum, default_value = "table")]
        format: Format,
    },
    /// Declared outputs of a tool
    Outputs {
        name: String,
        #[arg(long)]
        rev: Option<RevisionTag>,
        #[arg(long, value_enum, default_value = "table")]
        format: Format,
    },
    /// Check inputs without running anything
    Validate {
        name: String,
        #[arg(long)]
        rev: Option<RevisionTag>,
        /// Input assignment NAME=VALUE; VALUE is JSON, a quantity such as "5 nm", or text
        #[arg(long = "set", value_name = "NAME=VALUE")]
        sets: Vec<String>,
    },
    /// Run a tool
    Run {
        name: String,
        #[arg(long)]
        rev: Option<RevisionTag>,
        #[arg(long = "set", value_name = "NAME=VALUE")]
        sets: Vec<String>,
        /// use, bypass, bypass-read or bypass-write
        #[arg(long, default_value = "use")]
        cache: CachePolicy,
        /// Wall-time limit in seconds
        #[arg(long)]
        timeout: Option<f64>,
        #[arg(long, value_enum, default_value = "table")]
        format: Format,
    },
    /// Publish a bundle directory as the next revision
    Publish {
        dir: PathBuf,
        #[arg(long = "author")]
        authors: Vec<String>,
        #[arg(long = "reference")]
        references: Vec<String>,
    },
    /// Register a bundle directory as the tool's dev working copy
    Install { dir: PathBuf },
    /// Query recorded runs
    Query {
        #[arg(long)]
        tool: Option<String>,
        /// Predicate such as 'output.coexistence = true AND input.T_solid > 1000'
        #[arg(long = "where", value_name = "EXPR")]
        expr: Option<String>,
        /// Columns to return (repeatable)
        #[arg(long = "field")]
        fields: Vec<String>,
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long, value_enum, default_value = "table")]
        format: Format,
    },
    /// Table of all runs of a tool
    Summary {
        name: String,
        #[arg(long)]
        rev: Option<RevisionTag>,
        #[arg(long, value_enum, default_value = "table")]
        format: Format,
    },
    #[command(hide = true)]
    Surrogate {
        #[arg(value_enum)]
        which: SurrogateArg,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SurrogateArg {
    Melt,
    Pn,
}

/// An error on its way to the user, with its exit code.
struct Failure {
    code: u8,
    message: String,
}

const USER: u8 = 1;
const EXECUTION: u8 = 2;
const INTERNAL: u8 = 3;

impl Failure {
    fn user(message: impl Into<String>) -> Failure {
        Failure {
            code: USER,
            message: message.into(),
        }
    }
}

fn registry_code(e: &RegistryError) -> u8 {
    match e {
        RegistryError::ToolNotFound(_) | RegistryError::RevisionNotFound { .. } | RegistryError::Schema(_) => USER,
        _ => INTERNAL,
    }
}

fn db_code(e: &DbError) -> u8 {
    match e {
        DbError::NotFound(_)
        | DbError::UnknownField(_)
        | DbError::TypeErrorInPredicate { .. }
        | DbError::BadPredicate(_) => USER,
        _ => INTERNAL,
    }
}

impl From<RunError> for Failure {
    fn from(e: RunError) -> Failure {
        let code = match &e {
            RunError::Validation(_) | RunError::InvalidRequest(_) => USER,
            RunError::Registry(r) => registry_code(r),
            RunError::Db(d) => db_code(d),
            RunError::StepFailed { .. }
            | RunError::Timeout { .. }
            | RunError::OutputMissing(_)
            | RunError::OutputInvalid { .. } => EXECUTION,
            RunError::Cache(_) | RunError::Io { .. } => INTERNAL,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl From<RegistryError> for Failure {
    fn from(e: RegistryError) -> Failure {
        Failure {
            code: registry_code(&e),
            message: e.to_string(),
        }
    }
}

impl From<DbError> for Failure {
    fn from(e: DbError) -> Failure {
        Failure {
            code: db_code(&e),
            message: e.to_string(),
        }
    }
}

impl From<ValueError> for Failure {
    fn from(e: ValueError) -> Failure {
        Failure::user(e.to_string())
    }
}

impl From<ExemplarError> for Failure {
    fn from(e: ExemplarError) -> Failure {
        let code = match &e {
            ExemplarError::Inputs(_) | ExemplarError::DegenerateSweep { .. } => USER,
            ExemplarError::Registry(r) => registry_code(r),
            _ => INTERNAL,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn home_dir(flag: Option<PathBuf>) -> Result<PathBuf, Failure> {
    if let Some(h) = flag {
        return Ok(h);
    }
    match std::env::var_os("HOME") {
        Some(h) => Ok(PathBuf::from(h).join(".fairflow")),
        None => Err(Failure::user("set FAIRFLOW_HOME or HOME")),
    }
}

fn internal(context: &str, e: impl std::fmt::Display) -> Failure {
    Failure {
        code: INTERNAL,
        message: format!("{context}: {e}"),
    }
}

/// Publish the bundled exemplars into a home that has no registry yet.
fn bootstrap(home: &Path, registry: &Registry) -> Result<(), Failure> {
    if registry.has_index() {
        return Ok(());
    }
    let lock_path = home.join(".bootstrap.lock");
    let lock = OpenOptions::new()
        .create(true)
        .truncate(false)
        .write(true)
        .open(&lock_path)
        .map_err(|e| internal(&lock_path.display().to_string(), e))?;
    lock.lock().map_err(|e| internal(&lock_path.display().to_string(), e))?;
    if registry.has_index() {
        return Ok(());
    }
    let exe = std::env::current_exe().map_err(|e| internal("cannot locate the fairflow executable", e))?;
    exemplars::install_exemplars(registry, &home.join("exemplars"), &exe)?;
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    if let Command::Surrogate { which } = cli.command {
        let dir = match std::env::var_os(RUN_DIR_ENV) {
            Some(d) => PathBuf::from(d),
            None => std::env::current_dir().map_err(|e| internal("current directory", e))?,
        };
        let s = match which {
            SurrogateArg::Melt => Surrogate::Melt,
            SurrogateArg::Pn => Surrogate::Pn,
        };
        return Ok(s.run(&dir)?);
    }

    let home = home_dir(cli.home)?;
    let engine = Engine::open(&home)?;
    bootstrap(&home, engine.registry())?;
    let registry = engine.registry();

    match cli.command {
        Command::List { filter, format } => {
            let rows = registry.find_tools(filter.as_deref())?;
            let table = Table {
                columns: vec![
                    Column::new("name", ColumnKind::Text),
                    Column::new("latest", ColumnKind::Text),
                    Column::new("description", ColumnKind::Text),
                ],
                rows: rows
                    .into_iter()
                    .map(|t| vec![json!(t.name), json!(t.latest.to_string()), json!(t.description)])
                    .collect(),
            };
            print_table(&table, format);
        }
        Command::Search { name, rev } => {
            let t = registry.search_tool(&name, rev)?;
            println!("{} {}", t.name, t.revision);
            println!("path: {}", t.root.display());
            if let Some(p) = &t.publication {
                println!("doi: {}", p.doi);
                println!("digest: sha256:{}", p.digest);
                println!("published: {}", p.published.to_rfc3339());
            }
        }
        Command::Describe { name, rev } => {
            let t = registry.search_tool(&name, rev)?;
            print!("{}", describe(&t.manifest));
            if let Some(p) = &t.publication {
                println!("\ndoi: {}", p.doi);
            }
        }
        Command::Inputs { name, rev, format } => {
            let inputs = registry.get_inputs(&name, rev)?;
            match format {
                Format::Table => inputs.iter().for_each(|(n, s)| println!("{}", input_summary(n, s))),
                _ => {
                    let rows = inputs.iter().map(|(n, s)| {
                        vec![
                            json!(n),
                            json!(s.kind.name()),
                            json!(s.units.as_ref().map(|u| u.as_str().to_string())),
                            json!(s.min),
                            json!(s.max),
                            s.options.as_ref().map_or(Value::Null, |o| json!(o.join("|"))),
                            s.property.map_or(Value::Null, |p| json!(p.name())),
                            s.default.clone().unwrap_or(Value::Null),
                            json!(s.description),
                        ]
                    });
                    let names = ["name", "type", "units", "min", "max", "options", "property", "default", "description"];
                    print_table(&text_table(&names, rows), format);
                }
            }
        }
        Command::Outputs { name, rev, format } => {
            let outputs = registry.get_outputs(&name, rev)?;
            match format {
                Format::Table => outputs.iter().for_each(|(n, s)| println!("{}", output_summary(n, s))),
                _ => {
                    let rows = outputs.iter().map(|(n, s)| {
                        vec![
                            json!(n),
                            json!(s.kind.name()),
                            json!(s.units.as_ref().map(|u| u.as_str().to_string())),
                            json!(s.description),
                        ]
                    });
                    print_table(&text_table(&["name", "type", "units", "description"], rows), format);
                }
            }
        }
        Command::Validate { name, rev, sets } => {
            let overrides = parse_sets(&sets)?;
            let (tool, inputs) = engine.validate(&name, rev, &overrides)?;
            println!("{} {}: inputs are valid", tool.name, tool.revision);
            for (n, v) in inputs.iter() {
                println!("  {n} = {v}");
            }
        }
        Command::Run {
            name,
            rev,
            sets,
            cache,
            timeout,
            format,
        } => {
            let time_limit = match timeout {
                None => DEFAULT_TIME_LIMIT,
                Some(s) if s.is_finite() && s > 0.0 => Duration::from_secs_f64(s),
                Some(s) => return Err(Failure::user(format!("--timeout must be a positive number of seconds, got {s}"))),
            };
            let req = RunRequest {
                tool: name,
                revision: rev,
                overrides: parse_sets(&sets)?,
                cache,
                time_limit,
            };
            let out = engine.run(&req)?;
            let r = &out.record;
            match format {
                Format::Jsonl => {
                    let outputs: Map<String, Value> = r
                        .outputs
                        .iter()
                        .map(|(n, v)| (n.clone(), output_json(v)))
                        .collect();
                    let line = json!({
                        "id": r.id.to_string(),
                        "tool": r.tool,
                        "revision": r.revision.to_string(),
                        "status": r.status.to_string(),
                        "cache_hit": r.cache_hit,
                        "cache_key": r.cache_key.as_str(),
                        "dir": out.dir.display().to_string(),
                        "outputs": outputs,
                    });
                    println!("{line}");
                }
                _ => {
                    if r.cache_hit {
                        println!("cache hit: {} {} (record {})", r.tool, r.revision, r.id);
                    } else {
                        println!("completed: {} {} (record {})", r.tool, r.revision, r.id);
                    }
                    println!("directory: {}", out.dir.display());
                    for (n, v) in &r.outputs {
                        println!("  {n} = {v}");
                    }
                }
            }
        }
        Command::Publish {
            dir,
            authors,
            references,
        } => {
            let p = registry.publish(&dir, PublishMetadata { authors, references })?;
            println!("published r{} doi {}", p.revision, p.doi);
        }
        Command::Install { dir } => {
            let m = registry.install(&dir)?;
            println!("installed {} (dev) from {}", m.name, dir.display());
        }
        Command::Query {
            tool,
            expr,
            fields,
            limit,
            format,
        } => {
            let mut p = match &expr {
                Some(e) => QueryPredicate::parse(e)?,
                None => QueryPredicate::all(),
            };
            if let Some(t) = &tool {
                p = p.and("tool", fairflow::resultsdb::Op::Eq, t.as_str())?;
            }
            let fields = (!fields.is_empty()).then_some(fields);
            let rows = engine.query(&p, fields.as_deref(), limit)?;
            match format {
                Format::Jsonl => {
                    for row in rows {
                        println!("{}", Value::Object(row.columns.into_iter().collect()));
                    }
                }
                _ => {
                    let mut names: Vec<String> = Vec::new();
                    for row in &rows {
                        for k in row.columns.keys() {
                            if !names.contains(k) {
                                names.push(k.clone());
                            }
                        }
                    }
                    let table = Table {
                        columns: names.iter().map(|n| Column::new(n.as_str(), ColumnKind::Text)).collect(),
                        rows: rows
                            .iter()
                            .map(|r| names.iter().map(|n| r.get(n).cloned().unwrap_or(Value::Null)).collect())
                            .collect(),
                    };
                    print_table(&table, format);
                }
            }
        }
        Command::Summary { name, rev, format } => {
            print_table(&engine.summary(&name, rev)?, format);
        }
        Command::Surrogate { .. } => unreachable!("handled above"),
    }
    Ok(())
}

fn text_table(names: &[&str], rows: impl Iterator<Item = Vec<Value>>) -> Table {
    Table {
        columns: names.iter().map(|n| Column::new(*n, ColumnKind::Text)).collect(),
        rows: rows.collect(),
    }
}

fn print_table(t: &Table, format: Format) {
    match format {
        Format::Table => print!("{}", t.render()),
        Format::Csv => print!("{}", t.to_csv()),
        Format::Jsonl => print!("{}", t.to_jsonl()),
    }
}

fn output_json(v: &TypedValue) -> Value {
    match v {
        TypedValue::Image(img) => json!({
            "type": "Image",
            "sha256": img.sha256,
            "format": img.format.extension(),
            "bytes": img.byte_len,
        }),
        other => other.canonical_raw(|_| String::new()),
    }
}

/// `NAME=VALUE` pairs: VALUE as JSON when it parses, text otherwise.
fn parse_sets(sets: &[String]) -> Result<IndexMap<String, Value>, Failure> {
    let mut out = IndexMap::new();
    for s in sets {
        let (name, raw) = s
            .split_once('=')
            .ok_or_else(|| Failure::user(format!("--set '{s}': expected NAME=VALUE")))?;
        let name = name.trim();
        if name.is_empty() {
            return Err(Failure::user(format!("--set '{s}': missing input name")));
        }
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        if out.insert(name.to_string(), value).is_some() {
            return Err(Failure::user(format!("--set: input '{name}' given twice")));
        }
    }
    Ok(out)
}
