//! Named scenarios for the CLI and the acceptance suite.

use crate::checker::Scope;
use crate::config::{ClientScript, ScriptOp, ScriptOpKind, SimConfig};
use crate::types::{ReadLevel, WriteLevel};

#[derive(Debug, Clone)]
pub struct Preset {
    pub name: &'static str,
    pub about: &'static str,
    /// Checker scope the preset is meant to be judged under.
    pub scope: Scope,
    /// Whether a correct implementation reports zero violations.
    pub expect_clean: bool,
    build: fn() -> SimConfig,
}

impl Preset {
    pub fn config(&self) -> SimConfig {
        (self.build)()
    }
}

pub fn all() -> Vec<Preset> {
    vec![
        Preset {
            name: "local100",
            about: "all requests to the home datacenter",
            scope: Scope::Requested,
            expect_clean: true,
            build: local100,
        },
        Preset {
            name: "remote10",
            about: "10% of requests to a remote datacenter",
            scope: Scope::Requested,
            expect_clean: true,
            build: remote10,
        },
        Preset {
            name: "crash",
            about: "random leader, learner and replica crashes with 20ms clock skew",
            scope: Scope::Requested,
            expect_clean: true,
            build: crash,
        },
        Preset {
            name: "adversarial",
            about: "eventual levels, hot keys, 40ms skew; judged against every guarantee",
            scope: Scope::All,
            expect_clean: false,
            build: adversarial,
        },
        Preset {
            name: "adversarial-lag",
            about: "eventual levels, lossy intra-datacenter links, 20ms skew",
            scope: Scope::All,
            expect_clean: false,
            build: adversarial_lag,
        },
        Preset {
            name: "two-writes",
            about: "one client writes a key at DC0 then at a 40ms-slow DC1, physical clocks, no blocking",
            scope: Scope::Requested,
            expect_clean: false,
            build: two_writes,
        },
        Preset {
            name: "two-writes-hlc",
            about: "two-writes with hybrid logical clocks",
            scope: Scope::Requested,
            expect_clean: true,
            build: two_writes_hlc,
        },
        Preset {
            name: "two-writes-blocking",
            about: "two-writes with physical clocks and blocking vectors",
            scope: Scope::Requested,
            expect_clean: true,
            build: two_writes_blocking,
        },
        Preset {
            name: "fifo-off",
            about: "cross-datacenter links reorder (5ms jitter, no FIFO)",
            scope: Scope::Requested,
            expect_clean: false,
            build: fifo_off,
        },
    ]
}

pub fn by_name(name: &str) -> Option<Preset> {
    all().into_iter().find(|p| p.name == name)
}

fn local100() -> SimConfig {
    SimConfig::default()
}

fn remote10() -> SimConfig {
    SimConfig {
        local_prob: 0.9,
        ..SimConfig::default()
    }
}

fn crash() -> SimConfig {
    SimConfig {
        local_prob: 0.9,
        skew_ms: 20.0,
        crash_faults: true,
        read_level: ReadLevel::MonotonicReadYourWrite,
        write_level: WriteLevel::MonotonicWriteFollowsReads,
        ..SimConfig::default()
    }
}

fn adversarial() -> SimConfig {
    SimConfig {
        local_prob: 0.9,
        skew_ms: 40.0,
        key_space: 8,
        clients_per_dc: 20,
        ops: 4000,
        ..SimConfig::default()
    }
}

fn adversarial_lag() -> SimConfig {
    SimConfig {
        local_prob: 0.9,
        skew_ms: 20.0,
        drop_prob: 0.1,
        key_space: 16,
        clients_per_dc: 20,
        ops: 4000,
        ..SimConfig::default()
    }
}

fn step(op: ScriptOpKind, dc: u16, pause_ms: f64) -> ScriptOp {
    ScriptOp {
        op,
        key: "x".into(),
        dc,
        replica: None,
        read_level: Some(ReadLevel::Eventual),
        write_level: Some(WriteLevel::MonotonicWriteFollowsReads),
        hlc_mode: None,
        pause_ms,
    }
}

fn two_writes() -> SimConfig {
    use ScriptOpKind::{Get, Put};
    let mut ops = vec![step(Put, 0, 0.0), step(Put, 1, 0.0)];
    // Read every replica in both datacenters once things settle.
    for dc in 0..2 {
        for r in 0..3 {
            let mut g = step(Get, dc, if dc == 0 && r == 0 { 100.0 } else { 0.0 });
            g.replica = Some(r);
            ops.push(g);
        }
    }
    SimConfig {
        dc_offsets_ms: vec![0.0, -40.0],
        hlc_mode: false,
        write_blocking: false,
        partitions: 1,
        scripts: vec![ClientScript { home: 0, ops }],
        ops: 0,
        ..SimConfig::default()
    }
}

fn two_writes_hlc() -> SimConfig {
    SimConfig {
        hlc_mode: true,
        ..two_writes()
    }
}

fn two_writes_blocking() -> SimConfig {
    SimConfig {
        write_blocking: true,
        ..two_writes()
    }
}

fn fifo_off() -> SimConfig {
    SimConfig {
        xdc_fifo: false,
        xdc_jitter_ms: 5.0,
        ..SimConfig::default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_have_unique_names() {
        let ps = all();
        for p in &ps {
            p.config().validate().unwrap_or_else(|e| panic!("{}: {e}", p.name));
        }
        let mut names: Vec<_> = ps.iter().map(|p| p.name).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), ps.len());
        assert!(by_name("two-writes").is_some());
        assert!(by_name("nope").is_none());
    }
}
