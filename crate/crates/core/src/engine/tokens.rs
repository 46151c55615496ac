//! Fixed-pool token circulation for admission control.
//!
//! A configured number of tokens rotate among registered initiators. A
//! token is held by at most one initiator; holding an unexpired token
//! admits exactly one submission (use consumes the token and returns it to
//! the pool). Unused tokens expire after the TTL and are re-granted. Grants
//! walk the initiator list round-robin, skipping initiators that already
//! hold a token, which equalizes admission shares over time.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use crate::clock::Clock;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenGrant {
    pub token_id: u64,
    pub expires_at_us: u64,
}

#[derive(Debug)]
struct Held {
    token_id: u64,
    holder: String,
    expires_at_us: u64,
}

#[derive(Default)]
struct TokInner {
    initiators: Vec<String>,
    /// Grant recency per initiator; free tokens go to the least recently
    /// granted, so rotation stays fair even as initiators join.
    last_grant: HashMap<String, u64>,
    grant_seq: u64,
    held: Vec<Held>,
    next_token_id: u64,
    grants: HashMap<String, u64>,
    uses: HashMap<String, u64>,
    expirations: u64,
}

pub struct TokenScheduler {
    token_count: usize,
    ttl: Duration,
    clock: Arc<dyn Clock>,
    inner: Mutex<TokInner>,
}

impl TokenScheduler {
    pub fn new(token_count: usize, ttl: Duration, clock: Arc<dyn Clock>) -> Self {
        assert!(token_count >= 1, "token_count must be at least 1");
        assert!(!ttl.is_zero(), "ttl must be positive");
        Self {
            token_count,
            ttl,
            clock,
            inner: Mutex::new(TokInner::default()),
        }
    }

    pub fn token_count(&self) -> usize {
        self.token_count
    }

    pub fn ttl(&self) -> Duration {
        self.ttl
    }

    /// Adds an initiator to the rotation (idempotent).
    pub fn register(&self, initiator: &str) {
        let mut inner = self.inner.lock().unwrap();
        if !inner.initiators.iter().any(|i| i == initiator) {
            inner.initiators.push(initiator.to_string());
        }
    }

    /// Expires overdue tokens and re-grants every free token round-robin.
    fn circulate(&self, inner: &mut TokInner) {
        let now = self.clock.now_us();
        let before = inner.held.len();
        inner.held.retain(|h| h.expires_at_us > now);
        inner.expirations += (before - inner.held.len()) as u64;

        if inner.initiators.is_empty() {
            return;
        }
        let ttl_us = self.ttl.as_micros() as u64;
        while inner.held.len() < self.token_count {
            // Next holder: the least recently granted initiator without a
            // token (ties break by registration order).
            let picked = inner
                .initiators
                .iter()
                .filter(|c| !inner.held.iter().any(|h| &h.holder == *c))
                .min_by_key(|c| inner.last_grant.get(*c).copied().unwrap_or(0))
                .cloned();
            let Some(holder) = picked else {
                break; // everyone already holds one
            };
            inner.grant_seq += 1;
            let seq = inner.grant_seq;
            inner.last_grant.insert(holder.clone(), seq);
            inner.next_token_id += 1;
            let token_id = inner.next_token_id;
            *inner.grants.entry(holder.clone()).or_insert(0) += 1;
            inner.held.push(Held {
                token_id,
                holder,
                expires_at_us: now + ttl_us,
            });
        }
    }

    /// The caller's current grant, if it holds an unexpired token. Also
    /// circulates, so a free token is assigned if the caller is next in
    /// rotation.
    pub fn acquire(&self, initiator: &str) -> Option<TokenGrant> {
        self.register(initiator);
        let mut inner = self.inner.lock().unwrap();
        self.circulate(&mut inner);
        inner
            .held
            .iter()
            .find(|h| h.holder == initiator)
            .map(|h| TokenGrant {
                token_id: h.token_id,
                expires_at_us: h.expires_at_us,
            })
    }

    /// Consumes the caller's token to admit one submission. Returns false
    /// if the caller holds no unexpired token.
    pub fn consume(&self, initiator: &str) -> bool {
        let mut inner = self.inner.lock().unwrap();
        self.circulate(&mut inner);
        let Some(pos) = inner.held.iter().position(|h| h.holder == initiator) else {
            return false;
        };
        inner.held.remove(pos);
        *inner.uses.entry(initiator.to_string()).or_insert(0) += 1;
        // The freed token immediately rotates onward.
        self.circulate(&mut inner);
        true
    }

    /// Returns a token to the pool without using it.
    pub fn give_back(&self, token_id: u64) {
        let mut inner = self.inner.lock().unwrap();
        inner.held.retain(|h| h.token_id != token_id);
        self.circulate(&mut inner);
    }

    /// Unexpired held tokens right now.
    pub fn held_count(&self) -> usize {
        let mut inner = self.inner.lock().unwrap();
        let now = self.clock.now_us();
        inner.held.retain(|h| h.expires_at_us > now);
        inner.held.len()
    }

    /// (grants, uses) per initiator, for fairness measurements.
    pub fn share_counts(&self) -> HashMap<String, (u64, u64)> {
        let inner = self.inner.lock().unwrap();
        let mut out: HashMap<String, (u64, u64)> = HashMap::new();
        for (k, v) in &inner.grants {
            out.entry(k.clone()).or_default().0 = *v;
        }
        for (k, v) in &inner.uses {
            out.entry(k.clone()).or_default().1 = *v;
        }
        out
    }

    pub fn expirations(&self) -> u64 {
        self.inner.lock().unwrap().expirations
    }
}
