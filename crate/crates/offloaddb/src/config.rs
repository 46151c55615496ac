//! Database configuration: sizing knobs, WAL sync mode, and per-level
//! compaction placement, parsed from `key=value` text.

use offload_core::SitePlan;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

/// When WAL appends become durable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WalSyncMode {
    /// Every write syncs before it is acknowledged.
    Each,
    /// Appends buffer in memory; a sync happens at flush/rotation or on an
    /// explicit `sync()`. Unsynced writes may be lost on crash.
    #[default]
    Lazy,
}

/// Who drives flushes and compactions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Maintenance {
    /// The writing thread flushes and compacts inline when triggers fire.
    /// Fully deterministic for a given op sequence.
    #[default]
    Sync,
    /// A background worker picks up triggers; writers only rotate.
    Thread,
}

#[derive(Debug, Clone)]
pub struct DbConfig {
    /// Active MemTable rotates once its accounted bytes reach this budget.
    pub memtable_bytes: u64,
    /// Compaction outputs split near this size.
    pub sst_target_bytes: u64,
    /// L0->L1 compaction triggers when live L0 tables exceed this count.
    pub l0_trigger: usize,
    /// Number of levels (level 0 through levels-1).
    pub levels: usize,
    /// Byte budget of level 1; each deeper level gets `level_fanout` more.
    pub l1_budget_bytes: u64,
    pub level_fanout: u64,
    /// Write-path caps.
    pub key_max: usize,
    pub value_max: usize,
    pub wal_sync: WalSyncMode,
    pub maintenance: Maintenance,
    /// Retained immutable MemTables (WAL-backed L0 tables) may hold at most
    /// this many bytes; beyond it a flush materializes locally instead.
    pub l0_cache_bytes: u64,
    /// Execution site per source level: `offload_levels[l]` places the
    /// L(l)->L(l+1) compaction. Defaults to local everywhere.
    pub offload_levels: Vec<SitePlan>,
}

impl Default for DbConfig {
    fn default() -> Self {
        let levels = 5;
        Self {
            memtable_bytes: 64 * 1024,
            sst_target_bytes: 256 * 1024,
            l0_trigger: 10,
            levels,
            l1_budget_bytes: 1024 * 1024,
            level_fanout: 10,
            key_max: 1024,
            value_max: 1024 * 1024,
            wal_sync: WalSyncMode::default(),
            maintenance: Maintenance::default(),
            l0_cache_bytes: 4 * 1024 * 1024,
            offload_levels: vec![SitePlan::Local; levels],
        }
    }
}

impl DbConfig {
    /// Parses `key=value` lines; `#` starts a comment. Unknown keys are
    /// rejected. `offload_levels` takes a comma list like
    /// `L0-L1:target,L1-L2:local,L2-L3:peer0`.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = DbConfig::default();
        let mut level_sites: Vec<(usize, SitePlan)> = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let s = raw.split('#').next().unwrap_or("").trim();
            if s.is_empty() {
                continue;
            }
            let (key, value) = s.split_once('=').ok_or(ConfigError::Parse {
                line,
                msg: format!("expected key=value, got {s:?}"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            let num = |what: &str| -> Result<u64, ConfigError> {
                value.parse::<u64>().map_err(|_| ConfigError::Parse {
                    line,
                    msg: format!("{what} must be an integer, got {value:?}"),
                })
            };
            match key {
                "memtable_bytes" => cfg.memtable_bytes = num(key)?,
                "sst_target_bytes" => cfg.sst_target_bytes = num(key)?,
                "l0_trigger" => cfg.l0_trigger = num(key)? as usize,
                "levels" => cfg.levels = num(key)? as usize,
                "l1_budget_bytes" => cfg.l1_budget_bytes = num(key)?,
                "level_fanout" => cfg.level_fanout = num(key)?,
                "key_max" => cfg.key_max = num(key)? as usize,
                "value_max" => cfg.value_max = num(key)? as usize,
                "l0_cache_bytes" => cfg.l0_cache_bytes = num(key)?,
                "wal_sync" => {
                    cfg.wal_sync = match value {
                        "each" => WalSyncMode::Each,
                        "lazy" => WalSyncMode::Lazy,
                        other => {
                            return Err(ConfigError::Parse {
                                line,
                                msg: format!("wal_sync must be each|lazy, got {other:?}"),
                            })
                        }
                    }
                }
                "maintenance" => {
                    cfg.maintenance = match value {
                        "sync" => Maintenance::Sync,
                        "thread" => Maintenance::Thread,
                        other => {
                            return Err(ConfigError::Parse {
                                line,
                                msg: format!("maintenance must be sync|thread, got {other:?}"),
                            })
                        }
                    }
                }
                "offload_levels" => {
                    for part in value.split(',').filter(|p| !p.trim().is_empty()) {
                        level_sites.push(parse_level_site(part.trim()).map_err(|msg| {
                            ConfigError::Parse { line, msg }
                        })?);
                    }
                }
                other => {
                    return Err(ConfigError::Parse {
                        line,
                        msg: format!("unknown key {other:?}"),
                    })
                }
            }
        }
        cfg.offload_levels = vec![SitePlan::Local; cfg.levels];
        for (level, site) in level_sites {
            if level + 1 >= cfg.levels {
                return Err(ConfigError::Invalid(format!(
                    "offload_levels names L{level}-L{}, but there are only {} levels",
                    level + 1,
                    cfg.levels
                )));
            }
            cfg.offload_levels[level] = site;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.memtable_bytes == 0 {
            return Err(ConfigError::Invalid("memtable_bytes must be > 0".into()));
        }
        if self.sst_target_bytes == 0 {
            return Err(ConfigError::Invalid("sst_target_bytes must be > 0".into()));
        }
        if self.l0_trigger == 0 {
            return Err(ConfigError::Invalid("l0_trigger must be > 0".into()));
        }
        if self.levels < 2 {
            return Err(ConfigError::Invalid("need at least 2 levels".into()));
        }
        if self.level_fanout == 0 || self.l1_budget_bytes == 0 {
            return Err(ConfigError::Invalid(
                "level_fanout and l1_budget_bytes must be > 0".into(),
            ));
        }
        if self.offload_levels.len() != self.levels {
            return Err(ConfigError::Invalid(format!(
                "offload_levels has {} entries for {} levels",
                self.offload_levels.len(),
                self.levels
            )));
        }
        Ok(())
    }

    /// Byte budget of level `l` (1-based levels; L0 triggers by count).
    pub fn level_budget(&self, l: usize) -> u64 {
        debug_assert!(l >= 1);
        self.l1_budget_bytes
            .saturating_mul(self.level_fanout.saturating_pow(l as u32 - 1))
    }
}

/// Parses one `L<i>-L<j>:<site>` element.
fn parse_level_site(part: &str) -> Result<(usize, SitePlan), String> {
    let (span, site) = part
        .split_once(':')
        .ok_or_else(|| format!("expected L<i>-L<j>:<site>, got {part:?}"))?;
    let (from, to) = span
        .split_once('-')
        .ok_or_else(|| format!("expected L<i>-L<j>, got {span:?}"))?;
    let parse_level = |s: &str| -> Result<usize, String> {
        s.trim()
            .strip_prefix('L')
            .and_then(|n| n.parse::<usize>().ok())
            .ok_or_else(|| format!("bad level {s:?}"))
    };
    let (i, j) = (parse_level(from)?, parse_level(to)?);
    if j != i + 1 {
        return Err(format!("levels must be adjacent, got L{i}-L{j}"));
    }
    let plan = match site.trim() {
        "local" => SitePlan::Local,
        "target" => SitePlan::Target,
        s if s.starts_with("peer") => {
            let k = s[4..]
                .parse::<usize>()
                .map_err(|_| format!("bad peer index in {s:?}"))?;
            SitePlan::Peer(k)
        }
        other => return Err(format!("site must be local|target|peer<k>, got {other:?}")),
    };
    Ok((i, plan))
}
