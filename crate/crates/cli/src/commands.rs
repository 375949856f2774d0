//! Subcommand implementations.

use crate::config::{Format, RunConfig};
use crate::render::{self, AnnotationRecord};
use crate::Command;
use anyhow::{bail, Context, Result};
use dsd_core::corpus::{dataset_stats, export_bio, load_dataset, parse_pair, write_bio, Sentence};
use dsd_core::downstream::{
    accuracy_of, all_features, read_paws, tune_thresholds, GateMode, LabeledPair, PairFeatures, PawsColumns,
};
use dsd_core::embeddings::Provider;
use dsd_core::evaluation::{evaluate, sweep_threshold, EvalReport, Metrics, StandardError};
use dsd_core::llm_dsd::HttpChatBackend;
use dsd_core::methods::{
    Annotator, EmbeddingDsd, LimeDsd, LlmDsd, MethodKind, NaiveDsd, NoDsd, ShapDsd, Thresholded, TokenScorer,
};
use dsd_core::spans::{SpanAnnotation, SpanLabel, TokenSpan};
use dsd_core::thresholds;
use rayon::prelude::*;
use serde::Serialize;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

/// Backends a method borrows from.
struct Backends {
    provider: Option<Provider>,
    chat: Option<(HttpChatBackend, dsd_core::llm_dsd::LlmConfig)>,
}

impl Backends {
    fn for_method(cfg: &RunConfig) -> Result<Self> {
        let provider = if cfg.method.needs_embeddings() {
            Some(open_provider(cfg)?)
        } else {
            None
        };
        let chat = if cfg.method == MethodKind::Llm {
            let llm = cfg.llm_config()?;
            Some((HttpChatBackend::from_config(&llm)?, llm))
        } else {
            None
        };
        Ok(Self { provider, chat })
    }

    fn provider(&self) -> &Provider {
        self.provider.as_ref().expect("provider opened for this method")
    }

    fn scorer(&self, cfg: &RunConfig) -> Result<Box<dyn TokenScorer + Send + '_>> {
        Ok(match cfg.method {
            MethodKind::Embedding => Box::new(EmbeddingDsd {
                provider: self.provider(),
                max_ngram_size: cfg.max_ngram,
            }),
            MethodKind::Lime => Box::new(LimeDsd {
                provider: self.provider(),
                config: cfg.lime(),
                seed: cfg.seed,
            }),
            MethodKind::Shap => Box::new(ShapDsd {
                provider: self.provider(),
                config: cfg.shap(),
                seed: cfg.seed,
            }),
            m => bail!("method {m} has no threshold to sweep"),
        })
    }

    fn annotator(&self, cfg: &RunConfig) -> Result<Box<dyn Annotator + Send + '_>> {
        Ok(match cfg.method {
            MethodKind::NoDsd => Box::new(NoDsd),
            MethodKind::Naive => Box::new(NaiveDsd),
            MethodKind::Llm => {
                let (backend, config) = self.chat.as_ref().expect("chat backend opened for llm");
                Box::new(LlmDsd {
                    backend,
                    config: config.clone(),
                })
            }
            _ => Box::new(Thresholded {
                scorer: self.scorer(cfg)?,
                threshold: cfg.effective_threshold(),
            }),
        })
    }
}

fn open_provider(cfg: &RunConfig) -> Result<Provider> {
    if let Some(dir) = &cfg.cache_dir {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(Provider::from_config(&cfg.provider_config()?)?)
}

fn read_input(path: Option<&Path>) -> Result<String> {
    match path {
        Some(p) if p != Path::new("-") => {
            std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))
        }
        _ => {
            let mut s = String::new();
            std::io::stdin().read_to_string(&mut s).context("reading stdin")?;
            Ok(s)
        }
    }
}

fn dissimilar(spans: Vec<SpanAnnotation>) -> Vec<TokenSpan> {
    spans
        .into_iter()
        .filter(|s| s.label == SpanLabel::Dissimilar)
        .map(|s| s.span)
        .collect()
}

/// Plain sentences of one input line: two fields, or an annotated
/// four-field record whose markers are dropped.
fn input_pair(line: &str) -> Result<(Sentence, Sentence)> {
    let fields: Vec<&str> = line.split('\t').collect();
    let (s1, s2) = match fields.len() {
        2 => (Sentence::new(fields[0]), Sentence::new(fields[1])),
        4 => {
            let p = parse_pair(line)?;
            (p.sentence1, p.sentence2)
        }
        n => bail!("expected 2 or 4 tab-separated fields, found {n}"),
    };
    if s1.is_empty() || s2.is_empty() {
        bail!("empty sentence");
    }
    Ok((s1, s2))
}

fn annotate_line(line_no: usize, line: &str, method: &dyn Annotator, cfg: &RunConfig) -> AnnotationRecord {
    let go = || -> Result<AnnotationRecord> {
        let (s1, s2) = input_pair(line)?;
        let spans2 = dissimilar(method.annotate(&s1, &s2)?);
        let spans1 = if cfg.bidirectional.unwrap_or(false) {
            Some(dissimilar(method.annotate(&s2, &s1)?))
        } else {
            None
        };
        Ok(AnnotationRecord {
            line: line_no,
            method: Some(cfg.method.name().into()),
            sentence1: Some(s1.text),
            sentence2: Some(s2.text),
            spans2: Some(spans2),
            spans1,
            error: None,
        })
    };
    go().unwrap_or_else(|e| {
        log::warn!("line {line_no}: {e:#}");
        AnnotationRecord::failed(line_no, format!("{e:#}"))
    })
}

fn emit_records(records: &[AnnotationRecord], format: Format) -> Result<()> {
    let stdout = std::io::stdout();
    let mut out = std::io::BufWriter::new(stdout.lock());
    if format == Format::Html {
        out.write_all(render::HTML_HEAD.as_bytes())?;
    }
    for r in records {
        let text = match format {
            Format::Table => render::table_line(r)? + "\n",
            Format::JsonLines => serde_json::to_string(r)? + "\n",
            Format::Ansi => render::ansi_block(r)? + "\n",
            Format::Html => render::html_block(r)?,
        };
        out.write_all(text.as_bytes())?;
    }
    if format == Format::Html {
        out.write_all(render::HTML_TAIL.as_bytes())?;
    }
    out.flush()?;
    Ok(())
}

fn status(records: &[AnnotationRecord]) -> ExitCode {
    if records.iter().any(|r| r.error.is_some()) {
        ExitCode::from(1)
    } else {
        ExitCode::SUCCESS
    }
}

fn annotate(input: Option<&Path>, cfg: &RunConfig) -> Result<ExitCode> {
    let text = read_input(input)?;
    let backends = Backends::for_method(cfg)?;
    let method = backends.annotator(cfg)?;
    let lines: Vec<(usize, &str)> = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty())
        .collect();
    let records: Vec<AnnotationRecord> = lines
        .par_iter()
        .map(|&(n, l)| annotate_line(n, l, &*method, cfg))
        .collect();
    emit_records(&records, cfg.format)?;
    Ok(status(&records))
}

fn render_cmd(input: Option<&Path>, cfg: &RunConfig) -> Result<ExitCode> {
    let text = read_input(input)?;
    let records: Vec<AnnotationRecord> = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str::<AnnotationRecord>(l)
                .unwrap_or_else(|e| AnnotationRecord::failed(i + 1, format!("not an annotation record: {e}")))
        })
        .collect();
    // a record whose spans do not fit its sentence is reported, not fatal
    let records: Vec<AnnotationRecord> = records
        .into_iter()
        .map(|r| match render::table_line(&r) {
            Ok(_) => r,
            Err(e) => AnnotationRecord::failed(r.line, e),
        })
        .collect();
    emit_records(&records, cfg.format)?;
    Ok(status(&records))
}

fn threshold_label(cfg: &RunConfig) -> Option<f64> {
    cfg.method.is_thresholded().then(|| cfg.effective_threshold())
}

#[derive(Serialize)]
#[serde(rename_all = "camelCase")]
struct EvalRecord<'a> {
    method: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    threshold: Option<f64>,
    folds: usize,
    seconds: f64,
    #[serde(flatten)]
    report: &'a EvalReport,
}

fn cell(m: &Metrics, se: &StandardError) -> [String; 3] {
    [
        format!("{:.3} ± {:.3}", m.precision, se.precision),
        format!("{:.3} ± {:.3}", m.recall, se.recall),
        format!("{:.3} ± {:.3}", m.f1, se.f1),
    ]
}

fn report_table(r: &EvalReport) -> String {
    let mut out = format!(
        "{:<8} {:>6}  {:<15} {:<15} {:<15}\n",
        "slice", "pairs", "precision", "recall", "f1"
    );
    for (name, m, se) in [
        ("Global", &r.global, &r.standard_error.global),
        ("NoDiff", &r.no_diff, &r.standard_error.no_diff),
        ("Diff", &r.diff, &r.standard_error.diff),
    ] {
        let [p, rc, f] = cell(m, se);
        out += &format!("{name:<8} {:>6}  {p:<15} {rc:<15} {f:<15}\n", m.count);
    }
    out
}

fn evaluate_cmd(path: &Path, cfg: &RunConfig) -> Result<ExitCode> {
    let ds = load_dataset(path)?;
    let backends = Backends::for_method(cfg)?;
    let method = backends.annotator(cfg)?;
    let threshold = threshold_label(cfg);
    let started = Instant::now();
    let (report, _) = evaluate(&ds, &*method, &cfg.protocol())?;
    let seconds = started.elapsed().as_secs_f64();
    match cfg.format {
        Format::JsonLines => {
            let rec = EvalRecord {
                method: cfg.method.name(),
                threshold,
                folds: cfg.folds,
                seconds,
                report: &report,
            };
            println!("{}", serde_json::to_string(&rec)?);
        }
        _ => {
            let t = threshold.map_or(String::new(), |t| format!("  threshold {t}"));
            println!(
                "method {}{t}  folds {}  pairs {}  time {seconds:.2}s",
                cfg.method,
                cfg.folds,
                ds.len()
            );
            print!("{}", report_table(&report));
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn default_grid() -> Vec<f64> {
    (0..=30).map(|i| i as f64 / 1000.0).collect()
}

fn sweep_cmd(path: &Path, grid: &[f64], cfg: &RunConfig) -> Result<ExitCode> {
    if !cfg.method.is_thresholded() {
        bail!("method {} has no threshold to sweep", cfg.method);
    }
    let grid = if grid.is_empty() { default_grid() } else { grid.to_vec() };
    let ds = load_dataset(path)?;
    let backends = Backends::for_method(cfg)?;
    let scorer = backends.scorer(cfg)?;
    let rows = sweep_threshold(&ds, &*scorer, &grid, &cfg.protocol())?;
    match cfg.format {
        Format::JsonLines => {
            for row in &rows {
                println!("{}", serde_json::to_string(row)?);
            }
        }
        _ => {
            println!(
                "{:>9} {:>7}  {:<15} {:<15} {:<15}",
                "threshold", "spans", "global f1", "noDiff f1", "diff f1"
            );
            for row in &rows {
                let r = &row.report;
                let se = &r.standard_error;
                println!(
                    "{:>9} {:>7}  {:<15} {:<15} {:<15}",
                    row.threshold,
                    row.span_count,
                    format!("{:.3} ± {:.3}", r.global.f1, se.global.f1),
                    format!("{:.3} ± {:.3}", r.no_diff.f1, se.no_diff.f1),
                    format!("{:.3} ± {:.3}", r.diff.f1, se.diff.f1),
                );
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
#[serde(rename_all = "camelCase")]
struct GateRecord {
    gate: &'static str,
    sts_threshold: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    dsd_threshold: Option<f64>,
    accuracy: f64,
    tuned: bool,
}

fn read_labeled(path: &Path, columns: &PawsColumns) -> Result<Vec<LabeledPair>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    read_paws(&text, columns).with_context(|| format!("in {}", path.display()))
}

fn steps(to: f64, step: f64) -> Vec<f64> {
    let n = (to / step).round() as usize;
    (0..=n).map(|i| i as f64 * step).collect()
}

struct ParaphraseArgs<'a> {
    test: &'a Path,
    validation: Option<&'a PathBuf>,
    sts_threshold: Option<f64>,
    dsd_threshold: Option<f64>,
    no_header: bool,
}

fn paraphrase_cmd(a: ParaphraseArgs, cfg: &RunConfig) -> Result<ExitCode> {
    let columns = PawsColumns {
        header: !a.no_header,
        ..PawsColumns::default()
    };
    let provider = open_provider(cfg)?;
    let bidirectional = cfg.bidirectional.unwrap_or(true);
    let features = |set: &[LabeledPair]| -> Result<(Vec<PairFeatures>, Vec<bool>)> {
        let f = all_features(set, bidirectional, cfg.max_ngram, &provider)?;
        Ok((f, set.iter().map(|p| p.paraphrase).collect()))
    };
    let test = read_labeled(a.test, &columns)?;
    let (test_f, test_l) = features(&test)?;

    let (sts_only, gated, tuned) = if let Some(v) = a.validation {
        let valid = read_labeled(v, &columns)?;
        let (vf, vl) = features(&valid)?;
        let sts_grid = steps(1.0, 0.01);
        let dsd_grid = steps(0.03, 0.001);
        let s = tune_thresholds(&vf, &vl, &sts_grid, &[0.0], GateMode::Sts)?;
        let g = tune_thresholds(&vf, &vl, &sts_grid, &dsd_grid, GateMode::StsDsd)?;
        ((s.sts_threshold, 0.0), (g.sts_threshold, g.dsd_threshold), true)
    } else {
        let model = cfg.model_id();
        let published = thresholds::paraphrase_thresholds(&model);
        if published.is_none() && (a.sts_threshold.is_none() || a.dsd_threshold.is_none()) {
            log::warn!("no published paraphrase thresholds for model {model:?}; using 0.65 and 0.008 (pass --validation to tune)");
        }
        let (ps, pd) = published.unwrap_or((0.65, 0.008));
        let sts = a.sts_threshold.unwrap_or(ps);
        let dsd = a.dsd_threshold.unwrap_or(pd);
        ((sts, 0.0), (sts, dsd), false)
    };
    let records = [
        GateRecord {
            gate: "sts",
            sts_threshold: sts_only.0,
            dsd_threshold: None,
            accuracy: accuracy_of(&test_f, &test_l, sts_only.0, sts_only.1, GateMode::Sts)?,
            tuned,
        },
        GateRecord {
            gate: "sts+dsd",
            sts_threshold: gated.0,
            dsd_threshold: Some(gated.1),
            accuracy: accuracy_of(&test_f, &test_l, gated.0, gated.1, GateMode::StsDsd)?,
            tuned,
        },
    ];
    match cfg.format {
        Format::JsonLines => {
            for r in &records {
                println!("{}", serde_json::to_string(r)?);
            }
        }
        _ => {
            println!("{:<8} {:>6} {:>6} {:>9}", "gate", "sts", "dsd", "accuracy");
            for r in &records {
                let dsd = r.dsd_threshold.map_or("-".to_string(), |d| format!("{d:.3}"));
                println!("{:<8} {:>6.2} {dsd:>6} {:>9.4}", r.gate, r.sts_threshold, r.accuracy);
            }
            println!("{} test pairs{}", test.len(), if tuned { ", thresholds tuned on validation" } else { "" });
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn stats_cmd(path: &Path, cfg: &RunConfig) -> Result<ExitCode> {
    let ds = load_dataset(path)?;
    let s = dataset_stats(&ds);
    match cfg.format {
        Format::JsonLines => println!("{}", serde_json::to_string(&s)?),
        _ => {
            let ms = |m: &dsd_core::corpus::MeanSd| format!("{:.2} ± {:.2}", m.mean, m.sd);
            println!("pairs                {}", s.pair_count);
            println!("  dissimilar pairs   {}", s.dissimilar_pair_count);
            println!("  equivalent pairs   {}", s.equivalent_pair_count);
            println!("span pairs           {}", s.span_pair_count);
            println!("  dissimilar         {}", s.dissimilar_span_count);
            println!("  equivalent         {}", s.equivalent_span_count);
            println!("words per sentence   {}", ms(&s.sentence_word_length));
            println!("words per span       {}", ms(&s.span_word_length));
            println!("spans per sentence   {}", ms(&s.spans_per_sentence));
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn export_bio_cmd(path: &Path, output: Option<&Path>) -> Result<ExitCode> {
    let ds = load_dataset(path)?;
    let text = write_bio(&export_bio(&ds));
    match output {
        Some(o) => std::fs::write(o, text).with_context(|| format!("writing {}", o.display()))?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(ExitCode::SUCCESS)
}

pub fn run(command: &Command, cfg: &RunConfig) -> Result<ExitCode> {
    match command {
        Command::Annotate { input } => annotate(input.as_deref(), cfg),
        Command::Evaluate { dataset } => evaluate_cmd(dataset, cfg),
        Command::Sweep { dataset, grid } => sweep_cmd(dataset, grid, cfg),
        Command::Paraphrase {
            test,
            validation,
            sts_threshold,
            dsd_threshold,
            no_header,
        } => paraphrase_cmd(
            ParaphraseArgs {
                test,
                validation: validation.as_ref(),
                sts_threshold: *sts_threshold,
                dsd_threshold: *dsd_threshold,
                no_header: *no_header,
            },
            cfg,
        ),
        Command::Stats { dataset } => stats_cmd(dataset, cfg),
        Command::ExportBio { dataset, output } => export_bio_cmd(dataset, output.as_deref()),
        Command::Render { input } => render_cmd(input.as_deref(), cfg),
    }
}
