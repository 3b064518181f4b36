use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use dsaudit_agent::{await_warnings, run_scenario, to_jsonl, InstallScenario, RunOptions};
use dsaudit_bus::Broker;
use dsaudit_core::analysis::RuntimeBehavior;
use dsaudit_core::analyst::{analyze, AnalysisRequest};
use dsaudit_core::ingest::{load_declared_or_empty, load_fixture};
use dsaudit_core::kb::{
    dedupe_permissions, load_mapping, load_permission_snapshot, load_taxonomy, validate_kb,
    KnowledgeBase,
};
use dsaudit_core::{
    AnalystKind, AnalyzeOptions, GenerationClient, PackageName, RelevanceTable, RetrievalIndex,
};
use dsaudit_server::{
    analyze_corpus, load_corpus, CorpusOptions, HttpGenerationClient, ServeOptions, Server,
    ServerDeps,
};
use dsaudit_store::{AnalysisStore, FileStore, KeyValueStore, MemoryStore};

use crate::report;
use crate::{AnalystFlags, CliError, Command};

pub fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::BuildKb {
            data_dir,
            out,
            version,
        } => build_kb(&data_dir, &out, &version),
        Command::ValidateKb { kb } => validate_kb_cmd(kb.as_deref()),
        Command::Ingest { package, fixtures } => ingest(&package, &fixtures),
        Command::Analyze {
            package,
            fixtures,
            kb,
            analyst,
            json,
            out,
        } => analyze_cmd(&package, &fixtures, kb.as_deref(), &analyst, json, out.as_deref()),
        Command::Simulate {
            scenario,
            fixtures,
            kb,
            analyst,
            realtime,
            store,
            out,
            timeout_secs,
        } => simulate(
            &scenario,
            &fixtures,
            kb.as_deref(),
            &analyst,
            realtime,
            store.as_deref(),
            out.as_deref(),
            timeout_secs,
        ),
        Command::Serve {
            fixtures,
            kb,
            analyst,
            store,
            scenario,
            duration_secs,
            realtime,
        } => serve(
            &fixtures,
            kb.as_deref(),
            &analyst,
            store.as_deref(),
            &scenario,
            duration_secs,
            realtime,
        ),
        Command::Stats {
            corpus,
            fixtures,
            kb,
            workers,
            json,
            out,
        } => stats(&corpus, &fixtures, kb.as_deref(), workers, json, out.as_deref()),
        Command::Evict { store, target } => evict(&store, &target),
    }
}

fn load_kb(path: Option<&Path>) -> Result<KnowledgeBase, CliError> {
    match path {
        Some(path) => KnowledgeBase::load(path).map_err(CliError::data),
        None => Ok(KnowledgeBase::bundled().clone()),
    }
}

fn parse_package(name: &str) -> Result<PackageName, CliError> {
    PackageName::new(name).map_err(CliError::data)
}

fn analyze_options(flags: &AnalystFlags) -> Result<(AnalyzeOptions, Option<Arc<dyn GenerationClient>>), CliError> {
    let analyst: AnalystKind = flags.analyst.into();
    let client: Option<Arc<dyn GenerationClient>> = match (&analyst, &flags.endpoint) {
        (AnalystKind::External, Some(endpoint)) => {
            Some(Arc::new(HttpGenerationClient::new(endpoint.clone())))
        }
        (AnalystKind::External, None) => {
            return Err(CliError::Usage(
                "--analyst external requires --endpoint".to_string(),
            ))
        }
        (AnalystKind::Rules, _) => None,
    };
    Ok((
        AnalyzeOptions {
            analyst,
            use_retrieval: !flags.no_retrieval,
            fallback_to_rules: false,
        },
        client,
    ))
}

fn write_or_print(out: Option<&Path>, text: &str) -> Result<(), CliError> {
    match out {
        Some(path) => std::fs::write(path, format!("{text}\n"))
            .map_err(|err| CliError::Data(format!("cannot write {}: {err}", path.display()))),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn build_kb(data_dir: &Path, out: &Path, version: &str) -> Result<(), CliError> {
    let raw = load_permission_snapshot(&data_dir.join("permissions.json")).map_err(CliError::data)?;
    let record_count = raw.len();
    let permissions = dedupe_permissions(raw).map_err(CliError::data)?;
    let categories = load_taxonomy(&data_dir.join("categories.json")).map_err(CliError::data)?;
    let mapping = load_mapping(&data_dir.join("mapping.json")).map_err(CliError::data)?;
    let kb = KnowledgeBase::new(version, permissions, categories, mapping);
    let validation = validate_kb(&kb);
    if !validation.is_clean() {
        return Err(CliError::Data(validation.to_string()));
    }
    kb.save(out).map_err(CliError::data)?;
    println!(
        "{}",
        serde_json::json!({
            "out": out.display().to_string(),
            "snapshot_version": kb.snapshot_version(),
            "permission_records": record_count,
            "permissions": kb.permissions().len(),
            "categories": kb.categories().len(),
        })
    );
    Ok(())
}

fn validate_kb_cmd(path: Option<&Path>) -> Result<(), CliError> {
    let kb = load_kb(path)?;
    let report = validate_kb(&kb);
    println!("{report}");
    if report.is_clean() {
        Ok(())
    } else {
        Err(CliError::Data(format!(
            "{} violation(s) in snapshot {}",
            report.violations.len(),
            kb.snapshot_version()
        )))
    }
}

fn ingest(package: &str, fixtures: &Path) -> Result<(), CliError> {
    let package = parse_package(package)?;
    let fixture = load_fixture(&package, &fixtures.join("declared")).map_err(CliError::data)?;
    println!(
        "{}",
        serde_json::to_string_pretty(&fixture).expect("fixture serializes")
    );
    Ok(())
}

fn load_runtime(package: &PackageName, fixtures: &Path) -> Result<RuntimeBehavior, CliError> {
    let path = fixtures.join("runtime").join(format!("{package}.json"));
    let text = std::fs::read_to_string(&path).map_err(|err| {
        CliError::Data(format!(
            "no runtime fixture for {package} at {}: {err}",
            path.display()
        ))
    })?;
    let runtime: RuntimeBehavior = serde_json::from_str(&text)
        .map_err(|err| CliError::Data(format!("cannot parse {}: {err}", path.display())))?;
    if runtime.package_name != *package {
        return Err(CliError::Data(format!(
            "runtime fixture at {} is for {}, not {package}",
            path.display(),
            runtime.package_name
        )));
    }
    Ok(runtime)
}

fn analyze_cmd(
    package: &str,
    fixtures: &Path,
    kb_path: Option<&Path>,
    flags: &AnalystFlags,
    json: bool,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let package = parse_package(package)?;
    let kb = load_kb(kb_path)?;
    let index = RetrievalIndex::build(&kb).map_err(CliError::data)?;
    let (options, client) = analyze_options(flags)?;

    let runtime = load_runtime(&package, fixtures)?;
    let (declared, ingest_diagnostics) =
        load_declared_or_empty(&package, &fixtures.join("declared")).map_err(CliError::data)?;
    let request = AnalysisRequest { runtime, declared };
    let outcome = analyze(
        &request,
        &kb,
        &index,
        RelevanceTable::bundled(),
        options,
        client.as_deref(),
    )
    .map_err(CliError::data)?;
    let mut result = outcome.result;
    result.diagnostics.extend(ingest_diagnostics);
    let warning = dsaudit_core::summary::summarize(&result);

    let document = serde_json::json!({
        "result": result,
        "warning": warning,
        "fell_back_to_rules": outcome.fell_back_to_rules,
    });
    let rendered = serde_json::to_string_pretty(&document).expect("document serializes");
    if let Some(path) = out {
        std::fs::write(path, &rendered)
            .map_err(|err| CliError::Data(format!("cannot write {}: {err}", path.display())))?;
    }
    if json {
        println!("{rendered}");
    } else {
        println!("{}", report::render_analysis(&result, &warning));
    }
    Ok(())
}

fn open_store(path: Option<&Path>) -> Result<Arc<AnalysisStore>, CliError> {
    let kv: Arc<dyn KeyValueStore> = match path {
        Some(dir) => Arc::new(FileStore::open(dir).map_err(CliError::data)?),
        None => Arc::new(MemoryStore::new()),
    };
    Ok(Arc::new(AnalysisStore::new(kv)))
}

fn server_deps(
    kb: KnowledgeBase,
    store: Arc<AnalysisStore>,
    client: Option<Arc<dyn GenerationClient>>,
) -> Result<ServerDeps, CliError> {
    let index = RetrievalIndex::build(&kb).map_err(CliError::data)?;
    Ok(ServerDeps {
        kb: Arc::new(kb),
        index: Arc::new(index),
        relevance: Arc::new(RelevanceTable::bundled().clone()),
        store,
        client,
    })
}

#[allow(clippy::too_many_arguments)]
fn simulate(
    scenario_path: &Path,
    fixtures: &Path,
    kb_path: Option<&Path>,
    flags: &AnalystFlags,
    realtime: bool,
    store_path: Option<&Path>,
    out: Option<&Path>,
    timeout_secs: u64,
) -> Result<(), CliError> {
    let scenario = InstallScenario::load(scenario_path).map_err(CliError::data)?;
    let kb = load_kb(kb_path)?;
    let (options, client) = analyze_options(flags)?;
    let store = open_store(store_path)?;
    store
        .register_device(&scenario.device_id)
        .map_err(CliError::data)?;

    let bus = Broker::new();
    let mut serve_options = ServeOptions::new(fixtures.join("declared"));
    serve_options.analyze = options;
    let server = Server::start(bus.clone(), server_deps(kb, store, client)?, serve_options);

    let run_options = RunOptions {
        realtime,
        ..RunOptions::default()
    };
    let emitted = run_scenario(&scenario, &bus, &run_options)
        .map_err(|failure| CliError::Data(failure.to_string()))?;

    let outcome = await_warnings(
        &scenario.device_id,
        emitted.len(),
        Duration::from_secs(timeout_secs),
        &bus,
    )
    .map_err(CliError::data)?;

    write_or_print(out, to_jsonl(&outcome.reports).trim_end())?;
    let stats = server.shutdown();
    tracing::info!(
        component = "cli",
        emitted = emitted.len(),
        received = outcome.reports.len(),
        cache_hits = stats.cache_hits,
        "simulation finished"
    );
    if outcome.timed_out {
        return Err(CliError::Data(format!(
            "timed out: received {} of {} warnings",
            outcome.reports.len(),
            emitted.len()
        )));
    }
    Ok(())
}

fn serve(
    fixtures: &Path,
    kb_path: Option<&Path>,
    flags: &AnalystFlags,
    store_path: Option<&Path>,
    scenarios: &[PathBuf],
    duration_secs: Option<u64>,
    realtime: bool,
) -> Result<(), CliError> {
    let kb = load_kb(kb_path)?;
    let (options, client) = analyze_options(flags)?;
    let store = open_store(store_path)?;

    let bus = Broker::new();
    let mut serve_options = ServeOptions::new(fixtures.join("declared"));
    serve_options.analyze = options;
    let server = Server::start(bus.clone(), server_deps(kb, store, client)?, serve_options);

    let run_options = RunOptions {
        realtime,
        ..RunOptions::default()
    };
    for path in scenarios {
        let scenario = InstallScenario::load(path).map_err(CliError::data)?;
        let emitted = run_scenario(&scenario, &bus, &run_options)
            .map_err(|failure| CliError::Data(failure.to_string()))?;
        tracing::info!(
            component = "cli",
            scenario = %path.display(),
            emitted = emitted.len(),
            "scenario replayed"
        );
    }

    match duration_secs {
        Some(secs) => std::thread::sleep(Duration::from_secs(secs)),
        None => loop {
            std::thread::sleep(Duration::from_secs(3600));
        },
    }
    let stats = server.shutdown();
    println!(
        "{}",
        serde_json::to_string(&stats).expect("stats serialize")
    );
    Ok(())
}

fn stats(
    corpus_path: &Path,
    fixtures: &Path,
    kb_path: Option<&Path>,
    workers: usize,
    json: bool,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let entries = load_corpus(corpus_path).map_err(CliError::data)?;
    let kb = load_kb(kb_path)?;
    let index = RetrievalIndex::build(&kb).map_err(CliError::data)?;
    let options = CorpusOptions {
        workers,
        ..CorpusOptions::default()
    };
    let (results, stats) = analyze_corpus(
        &entries,
        &fixtures.join("declared"),
        &kb,
        &index,
        RelevanceTable::bundled(),
        &options,
    )
    .map_err(CliError::data)?;

    let document = serde_json::json!({ "stats": stats, "apps": results });
    if let Some(path) = out {
        let rendered = serde_json::to_string_pretty(&document).expect("document serializes");
        std::fs::write(path, rendered)
            .map_err(|err| CliError::Data(format!("cannot write {}: {err}", path.display())))?;
    }
    if json {
        println!(
            "{}",
            serde_json::to_string_pretty(&document).expect("document serializes")
        );
    } else {
        println!("{}", stats.text_table().trim_end());
    }
    Ok(())
}

fn evict(store_dir: &Path, target: &str) -> Result<(), CliError> {
    let store = open_store(Some(store_dir))?;
    let evicted = if PackageName::new(target).is_ok() {
        store.evict_package(target).map_err(CliError::data)?
    } else {
        store.evict_kb_version(target).map_err(CliError::data)?
    };
    println!("{}", serde_json::json!({ "target": target, "evicted": evicted }));
    Ok(())
}
