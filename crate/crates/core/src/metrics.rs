//! Evaluation metrics computed from transcripts: commit-guard compliance,
//! price accuracy, state transition matrices and usage statistics.
//!
//! Everything here is a pure function of its input transcripts.

use std::io::Write;

use serde::Serialize;
use thiserror::Error;

use crate::backend::UNREPORTED;
use crate::ppp::{verify_stated_total, TotalCheckError};
use crate::simulation::Transcript;
use crate::state_machine::DialogueState;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no transcripts to score")]
    Empty,
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StcrResult {
    pub compliant: u64,
    pub total_commit_dialogues: u64,
    /// Dialogues actually scored: all commit dialogues, or the first
    /// `normalized_n` of them when a cap was requested.
    pub normalized_n: u64,
    /// Absent when no dialogue reached a commit.
    pub stcr_percent: Option<f64>,
}

/// Whether the state before the first commit is the final check.
/// `None` when the dialogue never commits. Turns that failed to parse are
/// skipped when looking for the predecessor.
pub fn commit_compliance(t: &Transcript) -> Option<bool> {
    let mut prev = t.prior_state;
    for s in t.states() {
        if s == DialogueState::CommitSale {
            return Some(prev == Some(DialogueState::FinalCheck));
        }
        prev = Some(s);
    }
    None
}

/// State Transition Compliance Rate over one cell of transcripts. With
/// `normalized_n`, only the first that many commit dialogues in ascending
/// seed order are scored.
pub fn compute_stcr(transcripts: &[Transcript], normalized_n: Option<u64>) -> Result<StcrResult, MetricsError> {
    if transcripts.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut ordered: Vec<&Transcript> = transcripts.iter().collect();
    ordered.sort_by_key(|t| t.scenario.seed);
    let outcomes: Vec<bool> = ordered.iter().filter_map(|t| commit_compliance(t)).collect();
    let total = outcomes.len() as u64;
    let n = normalized_n.map_or(total, |cap| cap.min(total));
    let compliant = outcomes.iter().take(n as usize).filter(|c| **c).count() as u64;
    Ok(StcrResult {
        compliant,
        total_commit_dialogues: total,
        normalized_n: n,
        stcr_percent: percent(compliant, n),
    })
}

fn percent(part: u64, whole: u64) -> Option<f64> {
    (whole > 0).then(|| part as f64 * 100.0 / whole as f64)
}

/// Which turns a price or usage figure is aggregated over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Partition {
    /// OFFER_SELL turns.
    Os,
    /// NEGOTIATE, FINAL_CHECK and COMMIT_SALE turns.
    Others,
}

impl Partition {
    pub fn of(state: DialogueState) -> Option<Partition> {
        match state {
            DialogueState::OfferSell => Some(Partition::Os),
            DialogueState::Negotiate | DialogueState::FinalCheck | DialogueState::CommitSale => {
                Some(Partition::Others)
            }
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct PartitionAccuracy {
    pub checked: u64,
    pub consistent: u64,
    /// Consistent only because a granted discount was honoured.
    pub discounted: u64,
    /// Turns in the partition without items, left out of `checked`.
    pub excluded: u64,
}

impl PartitionAccuracy {
    pub fn percent(&self) -> Option<f64> {
        percent(self.consistent, self.checked)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct PriceAccuracyResult {
    pub os: PartitionAccuracy,
    pub others: PartitionAccuracy,
}

impl PriceAccuracyResult {
    pub fn partition(&self, p: Partition) -> &PartitionAccuracy {
        match p {
            Partition::Os => &self.os,
            Partition::Others => &self.others,
        }
    }
}

/// Share of trade turns whose stated total matches the items they list,
/// after post-processing.
pub fn compute_price_accuracy(transcripts: &[Transcript]) -> PriceAccuracyResult {
    let mut r = PriceAccuracyResult::default();
    for t in transcripts {
        for turn in &t.turns {
            let (Some(state), Some(resp)) = (turn.state, turn.final_response()) else {
                continue;
            };
            let Some(p) = Partition::of(state) else { continue };
            let acc = match p {
                Partition::Os => &mut r.os,
                Partition::Others => &mut r.others,
            };
            if resp.items.as_ref().is_none_or(|i| i.is_empty()) {
                acc.excluded += 1;
                continue;
            }
            acc.checked += 1;
            match verify_stated_total(resp, &t.ppp.currency_word) {
                Ok(c) if c.consistent => {
                    acc.consistent += 1;
                    acc.discounted += c.discounted as u64;
                }
                Ok(_) | Err(TotalCheckError::NoStatedTotal { .. }) | Err(TotalCheckError::Price(_)) => {}
            }
        }
    }
    r
}

/// Counts of consecutive NPC state pairs, indexed in [`DialogueState::ALL`] order.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct TransitionMatrix {
    pub counts: [[u64; 7]; 7],
}

impl TransitionMatrix {
    pub fn get(&self, from: DialogueState, to: DialogueState) -> u64 {
        self.counts[from.index()][to.index()]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn row_sum(&self, from: DialogueState) -> u64 {
        self.counts[from.index()].iter().sum()
    }

    pub fn add(&mut self, other: &TransitionMatrix) {
        for (row, orow) in self.counts.iter_mut().zip(&other.counts) {
            for (c, o) in row.iter_mut().zip(orow) {
                *c += o;
            }
        }
    }

    /// A square CSV with state abbreviations as row and column labels.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), MetricsError> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["from\\to".to_string()];
        header.extend(DialogueState::ALL.iter().map(|s| s.abbrev().to_string()));
        w.write_record(&header)?;
        for from in DialogueState::ALL {
            let mut row = vec![from.abbrev().to_string()];
            row.extend(self.counts[from.index()].iter().map(u64::to_string));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Pairs are taken within each dialogue only, over turns that parsed.
pub fn compute_transition_matrix(transcripts: &[Transcript]) -> TransitionMatrix {
    let mut m = TransitionMatrix::default();
    for t in transcripts {
        let states: Vec<DialogueState> = t.states().collect();
        for pair in states.windows(2) {
            m.counts[pair[0].index()][pair[1].index()] += 1;
        }
    }
    m
}

/// Mean and population standard deviation; absent for an empty sample.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct Stat {
    pub n: u64,
    pub mean: Option<f64>,
    pub stddev: Option<f64>,
}

impl Stat {
    /// Welford's online update, stable for long runs.
    pub fn from_values(values: impl IntoIterator<Item = f64>) -> Self {
        let mut n = 0u64;
        let mut mean = 0.0;
        let mut m2 = 0.0;
        for x in values {
            n += 1;
            let delta = x - mean;
            mean += delta / n as f64;
            m2 += delta * (x - mean);
        }
        if n == 0 {
            return Stat::default();
        }
        Stat {
            n,
            mean: Some(mean),
            stddev: Some((m2 / n as f64).max(0.0).sqrt()),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct UsageStats {
    pub completion_tokens: Stat,
    pub thought_tokens: Stat,
    pub latency_seconds: Stat,
}

/// Usage of accepted NPC outputs in one partition. Unreported token
/// counts are left out of the token averages.
pub fn compute_usage_stats(transcripts: &[Transcript], partition: Partition) -> UsageStats {
    let usages: Vec<_> = transcripts
        .iter()
        .flat_map(|t| &t.turns)
        .filter(|turn| turn.state.and_then(Partition::of) == Some(partition))
        .map(|turn| turn.usage)
        .collect();
    let tokens = |f: fn(&crate::simulation::Usage) -> i64| {
        Stat::from_values(
            usages
                .iter()
                .map(f)
                .filter(|v| *v != UNREPORTED && *v >= 0)
                .map(|v| v as f64),
        )
    };
    UsageStats {
        completion_tokens: tokens(|u| u.completion_tokens),
        thought_tokens: tokens(|u| u.thought_tokens),
        latency_seconds: Stat::from_values(usages.iter().map(|u| u.latency_seconds)),
    }
}

/// All figures for one (variant, scenario) cell.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellSummary {
    pub variant: String,
    pub scenario: String,
    pub dialogues: u64,
    pub stcr: StcrResult,
    pub price: PriceAccuracyResult,
    pub os_usage: UsageStats,
    pub others_usage: UsageStats,
    pub matrix: TransitionMatrix,
}

pub fn summarize_cell(
    variant: &str,
    scenario: &str,
    transcripts: &[Transcript],
    normalized_n: Option<u64>,
) -> Result<CellSummary, MetricsError> {
    Ok(CellSummary {
        variant: variant.to_string(),
        scenario: scenario.to_string(),
        dialogues: transcripts.len() as u64,
        stcr: compute_stcr(transcripts, normalized_n)?,
        price: compute_price_accuracy(transcripts),
        os_usage: compute_usage_stats(transcripts, Partition::Os),
        others_usage: compute_usage_stats(transcripts, Partition::Others),
        matrix: compute_transition_matrix(transcripts),
    })
}

const SUMMARY_HEADER: &[&str] = &[
    "variant",
    "scenario",
    "dialogues",
    "commit_dialogues",
    "normalized_n",
    "compliant",
    "stcr",
    "os_checked",
    "os_consistent",
    "os_accuracy",
    "others_checked",
    "others_consistent",
    "others_accuracy",
    "others_discounted",
    "others_excluded",
    "os_completion_tokens_mean",
    "os_completion_tokens_std",
    "os_thought_tokens_mean",
    "os_thought_tokens_std",
    "os_time_mean",
    "os_time_std",
    "others_completion_tokens_mean",
    "others_completion_tokens_std",
    "others_thought_tokens_mean",
    "others_thought_tokens_std",
    "others_time_mean",
    "others_time_std",
];

fn fmt_opt(v: Option<f64>, decimals: usize) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.decimals$}"))
}

fn usage_cells(u: &UsageStats) -> [String; 6] {
    [
        fmt_opt(u.completion_tokens.mean, 1),
        fmt_opt(u.completion_tokens.stddev, 1),
        fmt_opt(u.thought_tokens.mean, 1),
        fmt_opt(u.thought_tokens.stddev, 1),
        fmt_opt(u.latency_seconds.mean, 2),
        fmt_opt(u.latency_seconds.stddev, 2),
    ]
}

/// One row per cell; undefined rates are written as `NA`.
pub fn write_summary_csv<W: Write>(cells: &[CellSummary], out: W) -> Result<(), MetricsError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SUMMARY_HEADER)?;
    for c in cells {
        let mut row = vec![
            c.variant.clone(),
            c.scenario.clone(),
            c.dialogues.to_string(),
            c.stcr.total_commit_dialogues.to_string(),
            c.stcr.normalized_n.to_string(),
            c.stcr.compliant.to_string(),
            fmt_opt(c.stcr.stcr_percent, 2),
            c.price.os.checked.to_string(),
            c.price.os.consistent.to_string(),
            fmt_opt(c.price.os.percent(), 1),
            c.price.others.checked.to_string(),
            c.price.others.consistent.to_string(),
            fmt_opt(c.price.others.percent(), 1),
            c.price.others.discounted.to_string(),
            c.price.others.excluded.to_string(),
        ];
        row.extend(usage_cells(&c.os_usage));
        row.extend(usage_cells(&c.others_usage));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
