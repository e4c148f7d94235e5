//! Scenario driver: run, measure, check, and sweep.

pub mod presets;

use std::fmt::Write as _;

use rayon::prelude::*;
use thiserror::Error;

use crate::checker::{self, CheckReport, Scope};
use crate::cluster::{self, OpRecord, RunOutput};
use crate::config::{ConfigError, SimConfig};
use crate::simnet::SimTime;
use crate::trace::{OpKind, Trace, TraceEvent};
use crate::types::{DcId, ReadLevel, WriteLevel};

pub const METRICS_SCHEMA: &str = "sessionkv-metrics/1";
pub const SWEEP_SCHEMA: &str = "sessionkv-sweep/1";
pub const REPORT_SCHEMA: &str = "sessionkv-violations/1";

#[derive(Debug, Clone, PartialEq)]
pub struct LatencyStats {
    pub count: usize,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub p99_ms: f64,
}

impl LatencyStats {
    pub fn from_ms(mut xs: Vec<f64>) -> Self {
        if xs.is_empty() {
            return LatencyStats {
                count: 0,
                mean_ms: 0.0,
                median_ms: 0.0,
                p99_ms: 0.0,
            };
        }
        xs.sort_by(f64::total_cmp);
        let n = xs.len();
        let rank = |q: f64| xs[((q * n as f64).ceil() as usize).clamp(1, n) - 1];
        LatencyStats {
            count: n,
            mean_ms: xs.iter().sum::<f64>() / n as f64,
            median_ms: rank(0.5),
            p99_ms: rank(0.99),
        }
    }
}

/// Upper bounds (ms) of the park-time histogram buckets; the last bucket is open.
pub const PARK_BUCKETS_MS: [f64; 6] = [1.0, 2.0, 5.0, 10.0, 20.0, 50.0];

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub issued: u64,
    pub ok: u64,
    pub failed: u64,
    /// Successful operations, all levels.
    pub overall: LatencyStats,
    /// `(label, stats)` per operation kind and level, e.g. `GET/MRYW`.
    pub by_level: Vec<(String, LatencyStats)>,
    /// Completed operations per simulated second by datacenter-0 clients, measured while
    /// every client was still issuing.
    pub dc0_throughput: f64,
    /// Mean latency of datacenter-0 operations in the same window.
    pub dc0_mean_ms: f64,
    /// `throughput * mean latency / clients_per_dc`; 1.0 for a perfectly closed loop.
    pub little_ratio: f64,
    /// Counts per [`PARK_BUCKETS_MS`] bucket (plus one open bucket) of park durations.
    pub park_histogram: Vec<u64>,
}

fn level_label(op: &OpRecord) -> String {
    match op.kind {
        OpKind::Get => format!("GET/{}", op.read_level.short()),
        OpKind::Put => format!(
            "PUT/{}{}",
            op.write_level.short(),
            if op.hlc_mode { "" } else { "/PC" }
        ),
    }
}

impl Metrics {
    pub fn compute(cfg: &SimConfig, out: &RunOutput) -> Metrics {
        let ops = &out.ops;
        let ok: Vec<&OpRecord> = ops.iter().filter(|o| o.ok).collect();
        let overall = LatencyStats::from_ms(ok.iter().map(|o| o.latency_ms()).collect());
        let mut labels: Vec<String> = ok.iter().map(|o| level_label(o)).collect();
        labels.sort();
        labels.dedup();
        let by_level = labels
            .into_iter()
            .map(|l| {
                let xs = ok
                    .iter()
                    .filter(|o| level_label(o) == l)
                    .map(|o| o.latency_ms())
                    .collect();
                (l, LatencyStats::from_ms(xs))
            })
            .collect();

        // Steady-state window: from the first issue until the last issue, when every
        // client still had work.
        let start = ops.iter().map(|o| o.issued).min().unwrap_or(SimTime::ZERO);
        let end = ops.iter().map(|o| o.issued).max().unwrap_or(SimTime::ZERO);
        let span_s = (end - start) as f64 / 1e6;
        let dc0: Vec<&&OpRecord> = ok
            .iter()
            .filter(|o| o.home == DcId(0) && o.done <= end)
            .collect();
        let dc0_throughput = if span_s > 0.0 { dc0.len() as f64 / span_s } else { 0.0 };
        let dc0_mean_ms = LatencyStats::from_ms(dc0.iter().map(|o| o.latency_ms()).collect()).mean_ms;
        let little_ratio = if cfg.clients_per_dc > 0 {
            dc0_throughput * dc0_mean_ms / 1000.0 / cfg.clients_per_dc as f64
        } else {
            0.0
        };

        Metrics {
            issued: ops.len() as u64,
            ok: ok.len() as u64,
            failed: (ops.len() - ok.len()) as u64,
            overall,
            by_level,
            dc0_throughput,
            dc0_mean_ms,
            little_ratio,
            park_histogram: park_histogram(&out.trace),
        }
    }

    /// Checks that the operation counts agree with the trace.
    pub fn reconcile(&self, trace: &Trace) -> Result<(), String> {
        let (mut issued, mut ok, mut failed) = (0u64, 0u64, 0u64);
        for e in trace.events() {
            match e {
                TraceEvent::GetIssued { .. } | TraceEvent::PutIssued { .. } => issued += 1,
                TraceEvent::GetReplied { .. } | TraceEvent::PutReplied { .. } => ok += 1,
                TraceEvent::OpFailed { .. } => failed += 1,
                _ => {}
            }
        }
        let level_total: usize = self.by_level.iter().map(|(_, s)| s.count).sum();
        if (issued, ok, failed) != (self.issued, self.ok, self.failed) || level_total as u64 != ok {
            return Err(format!(
                "trace has {issued} issued / {ok} ok / {failed} failed, metrics have {} / {} / {} ({level_total} by level)",
                self.issued, self.ok, self.failed
            ));
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("# schema: {METRICS_SCHEMA}\nlevel,count,mean_ms,median_ms,p99_ms\n");
        let mut row = |label: &str, st: &LatencyStats| {
            let _ = writeln!(
                s,
                "{label},{},{:.4},{:.4},{:.4}",
                st.count, st.mean_ms, st.median_ms, st.p99_ms
            );
        };
        row("ALL", &self.overall);
        for (l, st) in &self.by_level {
            row(l, st);
        }
        s
    }
}

fn park_histogram(trace: &Trace) -> Vec<u64> {
    use std::collections::HashMap;
    let mut parked = HashMap::new();
    let mut hist = vec![0u64; PARK_BUCKETS_MS.len() + 1];
    for r in &trace.records {
        match &r.event {
            TraceEvent::Parked { client, req, .. } => {
                parked.insert((*client, *req), r.time_us);
            }
            TraceEvent::GetServed { client, req, .. }
            | TraceEvent::PutCommittedAtServer { client, req, .. }
            | TraceEvent::OpFailed { client, req, .. } => {
                if let Some(t0) = parked.remove(&(*client, *req)) {
                    let ms = (r.time_us - t0) as f64 / 1000.0;
                    let b = PARK_BUCKETS_MS.iter().position(|&ub| ms < ub).unwrap_or(PARK_BUCKETS_MS.len());
                    hist[b] += 1;
                }
            }
            _ => {}
        }
    }
    hist
}

/// Everything one scenario produced.
#[derive(Debug, Clone)]
pub struct ScenarioResult {
    pub config: SimConfig,
    pub output: RunOutput,
    pub metrics: Metrics,
    pub check: CheckReport,
    pub hlc_put_parks: usize,
}

impl ScenarioResult {
    /// Zero violations at the requested levels, a clean run, and reconciled metrics.
    pub fn passed(&self) -> bool {
        self.check.is_clean()
            && self.output.report.is_clean()
            && self.hlc_put_parks == 0
            && self.metrics.reconcile(&self.output.trace).is_ok()
    }

    pub fn summary(&self) -> String {
        let r = &self.output.report;
        let m = &self.metrics;
        let mut s = String::new();
        let _ = writeln!(
            s,
            "seed={} ops={} ok={} failed={} end={} quiesced={} crashes={}",
            self.config.seed, m.issued, m.ok, m.failed, r.end, r.quiesced, r.crashes
        );
        let _ = writeln!(
            s,
            "latency mean={:.3}ms median={:.3}ms p99={:.3}ms dc0_tput={:.1}/s little={:.3}",
            m.overall.mean_ms, m.overall.median_ms, m.overall.p99_ms, m.dc0_throughput, m.little_ratio
        );
        for (l, st) in &m.by_level {
            let _ = writeln!(s, "  {l:<14} n={:<6} mean={:.3}ms p99={:.3}ms", st.count, st.mean_ms, st.p99_ms);
        }
        let _ = writeln!(s, "trace records={} hash={}", self.output.trace.records.len(), self.output.trace.hash());
        let _ = writeln!(s, "violations={} hlc_put_parks={}", self.check.violations.len(), self.hlc_put_parks);
        for (d, n) in self.check.counts() {
            let _ = writeln!(s, "  {} {n}", d.short());
        }
        for e in r.errors.iter().chain(&r.raft_violations) {
            let _ = writeln!(s, "error: {e}");
        }
        s
    }
}

pub fn run_scenario(cfg: &SimConfig, scope: Scope) -> ScenarioResult {
    let output = cluster::run(cfg);
    let metrics = Metrics::compute(cfg, &output);
    let check = checker::check(&output.trace, scope);
    let hlc_put_parks = checker::hlc_put_parks(&output.trace);
    ScenarioResult {
        config: cfg.clone(),
        output,
        metrics,
        check,
        hlc_put_parks,
    }
}

/// Violation report text: a schema line, then one line per violation.
pub fn render_report(trace: &Trace, check: &CheckReport) -> String {
    format!(
        "# schema: {REPORT_SCHEMA} trace={} violations={}\n{}",
        trace.hash(),
        check.violations.len(),
        check.render()
    )
}

/// One column pair of the sweep CSV: a (write level, read level, clock) combination.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Variant {
    pub name: &'static str,
    pub write: WriteLevel,
    pub read: ReadLevel,
    pub hlc_mode: bool,
}

pub const VARIANTS: [Variant; 7] = [
    Variant {
        name: "E",
        write: WriteLevel::Eventual,
        read: ReadLevel::Eventual,
        hlc_mode: true,
    },
    Variant {
        name: "M/E",
        write: WriteLevel::MonotonicWriteFollowsReads,
        read: ReadLevel::Eventual,
        hlc_mode: false,
    },
    Variant {
        name: "E/M",
        write: WriteLevel::Eventual,
        read: ReadLevel::MonotonicReadYourWrite,
        hlc_mode: false,
    },
    Variant {
        name: "M/M",
        write: WriteLevel::MonotonicWriteFollowsReads,
        read: ReadLevel::MonotonicReadYourWrite,
        hlc_mode: false,
    },
    Variant {
        name: "M/E_HLC",
        write: WriteLevel::MonotonicWriteFollowsReads,
        read: ReadLevel::Eventual,
        hlc_mode: true,
    },
    Variant {
        name: "E/M_HLC",
        write: WriteLevel::Eventual,
        read: ReadLevel::MonotonicReadYourWrite,
        hlc_mode: true,
    },
    Variant {
        name: "M/M_HLC",
        write: WriteLevel::MonotonicWriteFollowsReads,
        read: ReadLevel::MonotonicReadYourWrite,
        hlc_mode: true,
    },
];

impl Variant {
    pub fn by_name(name: &str) -> Option<Variant> {
        VARIANTS.iter().copied().find(|v| v.name == name)
    }

    pub fn apply(&self, cfg: &SimConfig) -> SimConfig {
        SimConfig {
            write_level: self.write,
            read_level: self.read,
            hlc_mode: self.hlc_mode,
            ..cfg.clone()
        }
    }
}

#[derive(Debug, Error)]
pub enum SweepError {
    #[error("cannot sweep {0:?}; expected clients_per_dc, local_prob or write_prob")]
    Parameter(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
}

pub const SWEEP_PARAMETERS: [&str; 3] = ["clients_per_dc", "local_prob", "write_prob"];

#[derive(Debug, Clone)]
pub struct SweepCell {
    pub value: f64,
    pub variant: Variant,
    pub mean_ms: f64,
    pub throughput: f64,
    pub violations: usize,
    pub clean: bool,
}

#[derive(Debug, Clone)]
pub struct Sweep {
    pub parameter: String,
    pub values: Vec<f64>,
    pub cells: Vec<SweepCell>,
}

impl Sweep {
    pub fn cell(&self, value: f64, variant: &str) -> Option<&SweepCell> {
        self.cells
            .iter()
            .find(|c| c.value == value && c.variant.name == variant)
    }

    pub fn failures(&self) -> usize {
        self.cells.iter().filter(|c| !c.clean).count()
    }

    /// Parameter value, then `<variant>_lat_ms` and `<variant>_tput` per variant.
    pub fn to_csv(&self) -> String {
        let mut s = format!("# schema: {SWEEP_SCHEMA}\n{}", self.parameter);
        for v in VARIANTS {
            let _ = write!(s, ",{0}_lat_ms,{0}_tput", v.name);
        }
        s.push('\n');
        for &x in &self.values {
            let _ = write!(s, "{x}");
            for v in VARIANTS {
                match self.cell(x, v.name) {
                    Some(c) => {
                        let _ = write!(s, ",{:.4},{:.2}", c.mean_ms, c.throughput);
                    }
                    None => s.push_str(",,"),
                }
            }
            s.push('\n');
        }
        s
    }
}

/// Runs every variant at every value of `parameter`, in parallel.
pub fn sweep(base: &SimConfig, parameter: &str, values: &[f64]) -> Result<Sweep, SweepError> {
    if !SWEEP_PARAMETERS.contains(&parameter) {
        return Err(SweepError::Parameter(parameter.to_string()));
    }
    let mut jobs = Vec::new();
    for &x in values {
        let mut cfg = base.clone();
        cfg.apply_override(&format!("{parameter}={}", fmt_value(parameter, x)))?;
        for v in VARIANTS {
            jobs.push((x, v, v.apply(&cfg)));
        }
    }
    let cells = jobs
        .into_par_iter()
        .map(|(value, variant, cfg)| {
            let r = run_scenario(&cfg, Scope::Requested);
            SweepCell {
                value,
                variant,
                mean_ms: r.metrics.overall.mean_ms,
                throughput: r.metrics.dc0_throughput,
                violations: r.check.violations.len(),
                clean: r.passed(),
            }
        })
        .collect();
    Ok(Sweep {
        parameter: parameter.to_string(),
        values: values.to_vec(),
        cells,
    })
}

fn fmt_value(parameter: &str, x: f64) -> String {
    if parameter == "clients_per_dc" {
        format!("{}", x.round() as u64)
    } else {
        format!("{x:?}")
    }
}
