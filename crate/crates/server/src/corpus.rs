//! Batch analysis over an app corpus plus the statistics model.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use dsaudit_core::analysis::{AnalysisResult, RuntimeBehavior, Verdict};
use dsaudit_core::analyst::{analyze, AnalysisRequest, AnalystError};
use dsaudit_core::ingest::{load_declared_or_empty, IngestError};
use dsaudit_core::kb::KnowledgeBase;
use dsaudit_core::summary::{summarize, WarningReport};
use dsaudit_core::{
    AnalyzeOptions, FindingKind, GenerationClient, PackageName, RelevanceTable, RetrievalIndex,
};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read corpus {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse corpus {path}: {source}")]
    Parse {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("no apps to analyze")]
    Empty,
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Analysis(#[from] AnalystError),
    #[error("worker pool: {0}")]
    Pool(#[from] rayon::ThreadPoolBuildError),
}

/// One corpus row: an app and what it was granted. Declared behavior comes
/// from the fixture directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub package_name: PackageName,
    pub granted: BTreeSet<String>,
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<CorpusEntry>, CorpusError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| CorpusError::Parse {
        path: path.display().to_string(),
        source,
    })
}

#[derive(Clone)]
pub struct CorpusOptions {
    /// 0 lets the pool pick its own width.
    pub workers: usize,
    pub analyze: AnalyzeOptions,
    pub client: Option<Arc<dyn GenerationClient>>,
}

impl Default for CorpusOptions {
    fn default() -> Self {
        CorpusOptions {
            workers: 0,
            analyze: AnalyzeOptions::default(),
            client: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppAnalysis {
    pub package_name: String,
    pub result: AnalysisResult,
    pub warning: WarningReport,
}

/// Corpus-level breakdown. The four verdict counts partition the corpus:
/// a fully-matching run of 2,347 apps split 376 consistent / 751 Case 1 /
/// 563 Case 2 / 657 Case 3 accounts for every app.
///
/// ```
/// assert_eq!(376 + 751 + 563 + 657, 2347);
/// ```
///
/// Counts are the ground truth; percentages are presentation derived with
/// half-up rounding, which cannot reproduce every published figure
/// (751/1971 prints as 38.10).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub total: usize,
    pub consistent: usize,
    pub case1: usize,
    pub case2: usize,
    pub case3: usize,
    /// Store category → share of its apps with any inconsistency.
    pub per_app_category: BTreeMap<String, f64>,
    /// Category → occurrences across Case-1 findings.
    pub omitted_categories: BTreeMap<String, usize>,
}

impl CorpusStats {
    pub fn from_results(results: &[AppAnalysis]) -> CorpusStats {
        let mut consistent = 0;
        let mut case1 = 0;
        let mut case2 = 0;
        let mut case3 = 0;
        let mut by_category: BTreeMap<String, (usize, usize)> = BTreeMap::new();
        let mut omitted: BTreeMap<String, usize> = BTreeMap::new();

        for app in results {
            match app.result.verdict {
                Verdict::Consistent => consistent += 1,
                Verdict::Case1 => case1 += 1,
                Verdict::Case2 => case2 += 1,
                Verdict::Case3 => case3 += 1,
            }
            let slot = by_category
                .entry(app.result.app_category.clone())
                .or_default();
            slot.1 += 1;
            if app.result.verdict != Verdict::Consistent {
                slot.0 += 1;
            }
            for finding in &app.result.findings {
                if finding.kind == FindingKind::UndeclaredCollection {
                    for category in &finding.categories {
                        *omitted.entry(category.clone()).or_default() += 1;
                    }
                }
            }
        }

        CorpusStats {
            total: results.len(),
            consistent,
            case1,
            case2,
            case3,
            per_app_category: by_category
                .into_iter()
                .map(|(category, (bad, all))| (category, bad as f64 / all as f64))
                .collect(),
            omitted_categories: omitted,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let sum = self.consistent + self.case1 + self.case2 + self.case3;
        if sum != self.total {
            return Err(format!(
                "verdict counts {sum} do not partition total {}",
                self.total
            ));
        }
        for (category, rate) in &self.per_app_category {
            if !(0.0..=1.0).contains(rate) {
                return Err(format!("rate for {category} out of range: {rate}"));
            }
        }
        Ok(())
    }

    /// Aligned-column text rendering; counts first, percentages beside.
    pub fn text_table(&self) -> String {
        let mut out = String::new();
        let rows = [
            ("consistent", self.consistent),
            ("case1", self.case1),
            ("case2", self.case2),
            ("case3", self.case3),
            ("total", self.total),
        ];
        out.push_str(&format!("{:<12} {:>8} {:>8}\n", "verdict", "count", "pct"));
        for (label, count) in rows {
            out.push_str(&format!(
                "{:<12} {:>8} {:>7.2}%\n",
                label,
                count,
                percent_half_up(count, self.total)
            ));
        }
        if !self.per_app_category.is_empty() {
            out.push_str(&format!(
                "\n{:<28} {:>14}\n",
                "app category", "inconsistency"
            ));
            for (category, rate) in &self.per_app_category {
                out.push_str(&format!(
                    "{:<28} {:>13.2}%\n",
                    category,
                    percent_half_up((rate * 10_000.0).round() as usize, 10_000)
                ));
            }
        }
        if !self.omitted_categories.is_empty() {
            out.push_str(&format!("\n{:<28} {:>8}\n", "omitted category", "count"));
            for (category, count) in &self.omitted_categories {
                out.push_str(&format!("{:<28} {:>8}\n", category, count));
            }
        }
        out
    }
}

/// Percentage with two decimals, exact half-up rounding.
///
/// ```
/// use dsaudit_server::percent_half_up;
/// assert_eq!(percent_half_up(376, 2347), 16.02);
/// assert_eq!(percent_half_up(751, 1971), 38.10);
/// assert_eq!(percent_half_up(1, 8), 12.5);
/// assert_eq!(percent_half_up(1, 800), 0.13); // 0.125% rounds up
/// ```
pub fn percent_half_up(numerator: usize, denominator: usize) -> f64 {
    if denominator == 0 {
        return 0.0;
    }
    let scaled = numerator as u128 * 10_000;
    let d = denominator as u128;
    let mut q = scaled / d;
    if (scaled % d) * 2 >= d {
        q += 1;
    }
    q as f64 / 100.0
}

fn analyze_one(
    entry: &CorpusEntry,
    fixtures_dir: &Path,
    kb: &KnowledgeBase,
    index: &RetrievalIndex,
    relevance: &RelevanceTable,
    options: &CorpusOptions,
) -> Result<AppAnalysis, CorpusError> {
    let runtime = RuntimeBehavior::new(entry.package_name.clone(), entry.granted.iter().cloned());
    let (declared, ingest_diagnostics) = load_declared_or_empty(&entry.package_name, fixtures_dir)?;
    let request = AnalysisRequest {
        runtime,
        declared,
    };
    let outcome = analyze(
        &request,
        kb,
        index,
        relevance,
        options.analyze,
        options.client.as_deref(),
    )?;
    let mut result = outcome.result;
    result.diagnostics.extend(ingest_diagnostics);
    let warning = summarize(&result);
    Ok(AppAnalysis {
        package_name: entry.package_name.to_string(),
        result,
        warning,
    })
}

/// Analyzes every corpus entry, in parallel, deterministically: results are
/// sorted by package name, so any worker count yields identical output.
pub fn analyze_corpus(
    entries: &[CorpusEntry],
    fixtures_dir: &Path,
    kb: &KnowledgeBase,
    index: &RetrievalIndex,
    relevance: &RelevanceTable,
    options: &CorpusOptions,
) -> Result<(Vec<AppAnalysis>, CorpusStats), CorpusError> {
    if entries.is_empty() {
        return Err(CorpusError::Empty);
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(options.workers)
        .build()?;
    let mut results = pool.install(|| {
        entries
            .par_iter()
            .map(|entry| analyze_one(entry, fixtures_dir, kb, index, relevance, options))
            .collect::<Result<Vec<_>, _>>()
    })?;
    results.sort_by(|a, b| a.package_name.cmp(&b.package_name));
    let stats = CorpusStats::from_results(&results);
    debug_assert!(stats.validate().is_ok());
    Ok((results, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;

    fn fixtures_dir() -> PathBuf {
        Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/declared")
    }

    fn corpus_path() -> PathBuf {
        Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/corpus/bundled.json")
    }

    fn run(entries: &[CorpusEntry], workers: usize) -> (Vec<AppAnalysis>, CorpusStats) {
        let kb = KnowledgeBase::bundled();
        let index = RetrievalIndex::build(kb).unwrap();
        let options = CorpusOptions {
            workers,
            ..CorpusOptions::default()
        };
        analyze_corpus(
            entries,
            &fixtures_dir(),
            kb,
            &index,
            RelevanceTable::bundled(),
            &options,
        )
        .unwrap()
    }

    #[test]
    fn bundled_corpus_matches_precomputed_labels() {
        let entries = load_corpus(corpus_path()).unwrap();
        assert_eq!(entries.len(), 10);
        let (results, stats) = run(&entries, 2);
        assert_eq!(results.len(), 10);
        assert_eq!(
            (stats.total, stats.consistent, stats.case1, stats.case2, stats.case3),
            (10, 2, 3, 2, 3)
        );
        stats.validate().unwrap();
    }

    #[test]
    fn worker_count_does_not_change_results() {
        let entries = load_corpus(corpus_path()).unwrap();
        let (serial, serial_stats) = run(&entries, 1);
        let (parallel, parallel_stats) = run(&entries, 8);
        assert_eq!(serial.len(), parallel.len());
        for (a, b) in serial.iter().zip(&parallel) {
            assert_eq!(a.package_name, b.package_name);
            assert_eq!(a.result, b.result);
            assert_eq!(a.warning.sentences, b.warning.sentences);
        }
        assert_eq!(serial_stats, parallel_stats);
    }

    #[test]
    fn single_consistent_app_partitions_trivially() {
        let entries = vec![CorpusEntry {
            package_name: PackageName::new("com.example.dayplanner").unwrap(),
            granted: ["READ_CALENDAR".to_string()].into_iter().collect(),
        }];
        let (results, stats) = run(&entries, 1);
        assert_eq!(results[0].result.verdict, Verdict::Consistent);
        assert_eq!(
            (stats.total, stats.consistent, stats.case1 + stats.case2 + stats.case3),
            (1, 1, 0)
        );
    }

    #[test]
    fn empty_corpus_is_an_error() {
        let kb = KnowledgeBase::bundled();
        let index = RetrievalIndex::build(kb).unwrap();
        let err = analyze_corpus(
            &[],
            &fixtures_dir(),
            kb,
            &index,
            RelevanceTable::bundled(),
            &CorpusOptions::default(),
        )
        .unwrap_err();
        assert_eq!(err.to_string(), "no apps to analyze");
    }

    #[test]
    fn missing_declared_fixture_degrades_with_diagnostic() {
        let entries = vec![CorpusEntry {
            package_name: PackageName::new("com.example.nofixture").unwrap(),
            granted: ["CAMERA".to_string()].into_iter().collect(),
        }];
        let (results, stats) = run(&entries, 1);
        assert_eq!(stats.case1, 1, "grants with empty declaration are Case 1");
        assert!(results[0]
            .result
            .diagnostics
            .iter()
            .any(|d| d.starts_with("declaration-unavailable")));
    }

    #[test]
    fn omitted_categories_count_case1_findings() {
        let entries = vec![
            CorpusEntry {
                package_name: PackageName::new("com.example.newsflash").unwrap(),
                granted: ["READ_CALL_LOG".to_string()].into_iter().collect(),
            },
            CorpusEntry {
                package_name: PackageName::new("com.example.nofixture").unwrap(),
                granted: ["READ_CALL_LOG".to_string()].into_iter().collect(),
            },
        ];
        let (_, stats) = run(&entries, 1);
        assert_eq!(stats.omitted_categories.get("Call logs"), Some(&2));
    }

    #[test]
    fn text_table_has_counts_and_percentages() {
        let entries = load_corpus(corpus_path()).unwrap();
        let (_, stats) = run(&entries, 1);
        let table = stats.text_table();
        assert!(table.contains("consistent"));
        assert!(table.contains("20.00%"), "2/10 consistent:\n{table}");
        assert!(table.contains("total"));
    }
}
