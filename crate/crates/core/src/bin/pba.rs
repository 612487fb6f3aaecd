//! `pba` command-line front end over a workspace store.

use std::io::{self, BufRead, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use pba_core::elicitation::{CompletionMode, HypotheticalPolicy, QuestionPrompt, SessionTranscript, StepAnswers};
use pba_core::linear_belief::VariableSet;
use pba_core::workbench::api::{self, parse_declared};
use pba_core::workbench::documents::{self, BatchDocument, ClassDocument, Document, PriorDocument};
use pba_core::workbench::render::{render_matrix, render_report};
use pba_core::workbench::service::{BuildClassesRequest, CreateSession, SynthesisRequest, WhatIfRequest};
use pba_core::workbench::{ErrorKind, ServiceError, Workbench};

#[derive(Parser)]
#[command(name = "pba", version, about = "Posterior belief assessment workbench")]
struct Cli {
    /// Workspace store root.
    #[arg(long, env = "PBA_STORE", default_value = "pba-store", global = true)]
    store: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum DocKind {
    Prior,
    Classes,
    Batch,
}

#[derive(Subcommand)]
enum Command {
    /// Elicit a covariance matrix by conditional previsions, interactively
    /// on the terminal or by replaying a transcript file.
    Elicit {
        /// Comma-separated variable names.
        #[arg(long, value_delimiter = ',', required_unless_present = "transcript")]
        variables: Vec<String>,
        #[arg(long, default_value = "")]
        unit: String,
        /// Treat every variable as a count (hypotheticals are rounded).
        #[arg(long)]
        integral: bool,
        #[arg(long, required_unless_present = "transcript")]
        first_prevision: Option<f64>,
        #[arg(long, required_unless_present = "transcript")]
        first_variance: Option<f64>,
        /// Standard deviations added to form each hypothetical value.
        #[arg(long, default_value_t = 0.5)]
        multiplier: f64,
        /// Replay answers from a session transcript (JSON).
        #[arg(long, conflicts_with_all = ["variables", "first_prevision", "first_variance"])]
        transcript: Option<PathBuf>,
    },
    /// Ingest a model-output CSV (`class,model_id,variable,value`).
    Ingest {
        csv: PathBuf,
        /// Prior whose variables the outputs must match.
        #[arg(long)]
        prior: String,
        /// Declared models as `class:model_id,...`.
        #[arg(long, default_value = "")]
        expect: String,
    },
    /// Store a document file and print its id.
    Import { kind: DocKind, file: PathBuf },
    /// Build a class structure from correlation and variance-fraction
    /// judgements.
    BuildClasses {
        #[arg(long)]
        prior: String,
        /// Class elicitation inputs (JSON).
        #[arg(long)]
        elicitation: PathBuf,
        /// Fill unspecified cross-class entries with zero instead of using
        /// belief separations.
        #[arg(long)]
        zero_fill: bool,
    },
    /// Run the posterior belief assessment and persist the report.
    Synthesize {
        #[arg(long)]
        prior: String,
        #[arg(long)]
        classes: String,
        #[arg(long)]
        batch: String,
        /// Print the report document instead of the table.
        #[arg(long)]
        json: bool,
    },
    /// Show a stored report.
    Report {
        id: String,
        #[arg(long)]
        json: bool,
    },
    /// Recompute a report with overrides read from a JSON array.
    Whatif {
        report: String,
        #[arg(long)]
        overrides: Option<PathBuf>,
        #[arg(long)]
        save: bool,
        #[arg(long)]
        json: bool,
    },
    /// Import the shipped case-study documents and print their ids.
    CaseStudy {
        /// Also run the assessment.
        #[arg(long)]
        synthesize: bool,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        bind: String,
    },
}

type Result<T> = std::result::Result<T, ServiceError>;

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| ServiceError::input("io_error", format!("{}: {e}", path.display())))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_slice(&read_file(path)?)
        .map_err(|e| ServiceError::input("invalid_document", format!("{}: {e}", path.display())))
}

fn import<D: Document + serde::Serialize + serde::de::DeserializeOwned>(
    path: &Path,
    put: impl FnOnce(&D) -> Result<String>,
) -> Result<String> {
    let doc: D = documents::from_bytes(&read_file(path)?)?;
    put(&doc)
}

fn print_report(bytes: &[u8], text: &str, json: bool) {
    if json {
        print!("{}", String::from_utf8_lossy(bytes));
    } else {
        print!("{text}");
    }
}

struct Terminal<R> {
    input: R,
}

impl<R: BufRead> Terminal<R> {
    fn ask(&mut self, prompt: &str) -> Result<String> {
        eprint!("{prompt} ");
        io::stderr().flush().ok();
        let mut line = String::new();
        let n = self
            .input
            .read_line(&mut line)
            .map_err(|e| ServiceError::input("io_error", e.to_string()))?;
        if n == 0 {
            return Err(ServiceError::input("aborted", "input ended before the session was complete"));
        }
        Ok(line.trim().to_string())
    }

    fn number(&mut self, prompt: &str) -> Result<f64> {
        loop {
            let s = self.ask(prompt)?;
            match s.parse::<f64>() {
                Ok(v) if v.is_finite() => return Ok(v),
                _ => eprintln!("  not a number: {s:?}"),
            }
        }
    }

    fn numbers(&mut self, prompt: &str, n: usize) -> Result<Vec<f64>> {
        loop {
            let s = self.ask(prompt)?;
            let parsed: std::result::Result<Vec<f64>, _> =
                s.split([',', ' ']).filter(|t| !t.is_empty()).map(str::parse::<f64>).collect();
            match parsed {
                Ok(v) if v.len() == n => return Ok(v),
                _ => eprintln!("  expected {n} numbers"),
            }
        }
    }
}

fn elicit_interactive(wb: &Workbench, id: &str) -> Result<()> {
    let stdin = io::stdin();
    let mut term = Terminal { input: stdin.lock() };
    loop {
        match wb.next_question(id)? {
            QuestionPrompt::ConditionalPrevisions {
                variable,
                conditioning,
                questions,
                ..
            } => {
                eprintln!("\n-- {variable} --");
                // the last question asks for the variance and the unconditional
                // expectation, which are read separately below
                let mut conditional_previsions = Vec::new();
                for q in questions.iter().take(conditioning.len()) {
                    conditional_previsions.push(term.number(&format!("{q}\n>"))?);
                }
                let conditional_variance = term.number(&format!("Variance of {variable} given all of the above:"))?;
                let prior_prevision = term.number(&format!("Unconditional expectation of {variable}:"))?;
                let answers = StepAnswers {
                    conditional_previsions,
                    conditional_variance,
                    prior_prevision,
                };
                match wb.submit_answers(id, &answers) {
                    Ok(summary) => eprintln!("  Var({variable}) = {:.4}", summary.variance),
                    Err(e) if e.kind == ErrorKind::Incoherent || e.kind == ErrorKind::Input => {
                        eprintln!("  rejected: {}; please answer again", e.message);
                    }
                    Err(e) => return Err(e),
                }
            }
            QuestionPrompt::MarginalVariances {
                variables,
                elicited_variances,
            } => {
                eprintln!("\nElicited variances: {elicited_variances:?}");
                let mv = term.numbers(
                    &format!("Directly assessed variances of {} (comma-separated):", variables.join(", ")),
                    variables.len(),
                )?;
                return finish_session(wb, id, &mv);
            }
        }
    }
}

fn finish_session(wb: &Workbench, id: &str, marginal_variances: &[f64]) -> Result<()> {
    let saved = wb.finalize(id, marginal_variances)?;
    let spec = saved.doc.to_spec()?;
    let labels = spec.variables().names().to_vec();
    let corr = documents::matrix_rows(&spec.correlation());
    eprintln!("\nCorrelation:\n{}", render_matrix(&labels, &corr, 2));
    println!("{}", saved.id);
    Ok(())
}

fn elicit_transcript(wb: &Workbench, path: &Path) -> Result<()> {
    let t: SessionTranscript = read_json(path)?;
    let saved = wb.create_session(&CreateSession {
        variables: t.variables.clone(),
        first_prevision: t.first_prevision,
        first_variance: t.first_variance,
        policy: Some(t.policy),
    })?;
    for step in &t.steps {
        wb.submit_answers(&saved.id, step)?;
    }
    match &t.marginal_variances {
        Some(mv) => finish_session(wb, &saved.id, mv),
        None => {
            eprintln!("transcript has no marginal variances; session left open");
            println!("{}", saved.id);
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let wb = Workbench::open(&cli.store)?;
    match cli.command {
        Command::Elicit {
            variables,
            unit,
            integral,
            first_prevision,
            first_variance,
            multiplier,
            transcript,
        } => {
            if let Some(path) = transcript {
                return elicit_transcript(&wb, &path);
            }
            let vars = VariableSet::uniform(&variables, &unit, integral)?;
            let saved = wb.create_session(&CreateSession {
                variables: vars,
                first_prevision: first_prevision.unwrap_or_default(),
                first_variance: first_variance.unwrap_or_default(),
                policy: Some(HypotheticalPolicy { multiplier }),
            })?;
            eprintln!("session {}", saved.id);
            elicit_interactive(&wb, &saved.id)
        }
        Command::Ingest { csv, prior, expect } => {
            let prior = wb.store().load::<PriorDocument>(&prior)?;
            let declared = parse_declared(&expect)?;
            let file = std::fs::File::open(&csv)
                .map_err(|e| ServiceError::input("io_error", format!("{}: {e}", csv.display())))?;
            let saved = wb.ingest_csv(file, &prior.doc.variables, &declared, Some(csv.display().to_string()))?;
            println!("{}", saved.id);
            Ok(())
        }
        Command::Import { kind, file } => {
            let id = match kind {
                DocKind::Prior => import::<PriorDocument>(&file, |d| Ok(wb.put_prior(d)?.id))?,
                DocKind::Classes => import::<ClassDocument>(&file, |d| Ok(wb.put_classes(d)?.id))?,
                DocKind::Batch => import::<BatchDocument>(&file, |d| Ok(wb.put_batch(d)?.id))?,
            };
            println!("{id}");
            Ok(())
        }
        Command::BuildClasses {
            prior,
            elicitation,
            zero_fill,
        } => {
            let saved = wb.build_classes(&BuildClassesRequest {
                prior_id: prior,
                elicitation: read_json(&elicitation)?,
                completion: if zero_fill {
                    CompletionMode::ZeroFill
                } else {
                    CompletionMode::Separation
                },
            })?;
            println!("{}", saved.id);
            Ok(())
        }
        Command::Synthesize {
            prior,
            classes,
            batch,
            json,
        } => {
            let out = wb.run_synthesis(&SynthesisRequest {
                prior_id: prior,
                class_id: classes,
                batch_id: batch,
            })?;
            if let Some(id) = &out.id {
                eprintln!("report {id}");
            }
            print_report(&out.bytes, &out.text, json);
            Ok(())
        }
        Command::Report { id, json } => {
            let loaded = wb.report(&id)?;
            print_report(&loaded.bytes, &render_report(&loaded.doc), json);
            Ok(())
        }
        Command::Whatif {
            report,
            overrides,
            save,
            json,
        } => {
            let overrides = match overrides {
                Some(p) => read_json(&p)?,
                None => Vec::new(),
            };
            let out = wb.whatif(
                &WhatIfRequest {
                    report_id: report,
                    overrides,
                },
                save,
            )?;
            if let Some(id) = &out.id {
                eprintln!("report {id}");
            }
            print_report(&out.bytes, &out.text, json);
            Ok(())
        }
        Command::CaseStudy { synthesize } => {
            let ids = wb.import_case_study()?;
            println!("prior {}\nclasses {}\nbatch {}", ids.prior_id, ids.class_id, ids.batch_id);
            if synthesize {
                let out = wb.run_synthesis(&SynthesisRequest {
                    prior_id: ids.prior_id,
                    class_id: ids.class_id,
                    batch_id: ids.batch_id,
                })?;
                println!("report {}", out.id.unwrap_or_default());
                print!("{}", out.text);
            }
            Ok(())
        }
        Command::Serve { port, bind } => {
            let addr: SocketAddr = format!("{bind}:{port}")
                .parse()
                .map_err(|e| ServiceError::input("invalid_address", format!("{bind}:{port}: {e}")))?;
            let rt = tokio::runtime::Runtime::new()
                .map_err(|e| ServiceError::new(ErrorKind::Internal, "runtime", e.to_string()))?;
            rt.block_on(api::serve(Arc::new(wb), addr))
                .map_err(|e| ServiceError::new(ErrorKind::Internal, "serve_failed", e.to_string()))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error [{}]: {}", e.code, e.message);
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
