//! Brute-force serializability check over committed transactions.
//!
//! Committed transactions are ordered by their first apply and cut into
//! windows of at most [`MAX_WINDOW`]. Each window is searched for a serial
//! order in which every read sees the latest earlier writer of its key,
//! starting from the state the previous window's witness left behind. The
//! last window must also reproduce the final store contents.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::trace::{EventTrace, TraceKind};
use crate::types::{Decision, Key, TxnId};

pub const MAX_WINDOW: usize = 8;

/// What one committed transaction observed and wrote.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TxnFootprint {
    pub tid: TxnId,
    /// Key and the writer whose value the read returned.
    pub reads: Vec<(Key, TxnId)>,
    pub writes: BTreeSet<Key>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SerialError {
    #[error("window {window} has {size} transactions, more than {MAX_WINDOW}")]
    WindowTooLarge { window: usize, size: usize },
    #[error("no serial order for window {window} ({tids:?})")]
    NoWitness { window: usize, tids: Vec<TxnId> },
}

/// Committed transactions in first-apply order.
pub fn committed_footprints(trace: &EventTrace) -> Vec<TxnFootprint> {
    let mut first_apply: BTreeMap<TxnId, u64> = BTreeMap::new();
    let mut reads: BTreeMap<TxnId, Vec<(Key, TxnId)>> = BTreeMap::new();
    let mut writes: BTreeMap<TxnId, BTreeSet<Key>> = BTreeMap::new();
    for e in trace.iter() {
        match &e.kind {
            TraceKind::Applied {
                tid,
                decision: Decision::Commit,
                shards,
                writes: w,
            } if !shards.is_empty() => {
                first_apply.entry(*tid).or_insert(e.idx);
                writes
                    .entry(*tid)
                    .or_default()
                    .extend(w.iter().map(|c| c.key.clone()));
            }
            TraceKind::Staged { tid, key } => {
                writes.entry(*tid).or_default().insert(key.clone());
            }
            TraceKind::Read {
                tid, key, writer, ..
            } => {
                reads.entry(*tid).or_default().push((key.clone(), *writer));
            }
            _ => {}
        }
    }
    let mut order: Vec<(u64, TxnId)> = first_apply.iter().map(|(t, i)| (*i, *t)).collect();
    order.sort_unstable();
    order
        .into_iter()
        .map(|(_, tid)| TxnFootprint {
            tid,
            reads: reads.remove(&tid).unwrap_or_default(),
            writes: writes.remove(&tid).unwrap_or_default(),
        })
        .collect()
}

/// Searches a serial order of `window` consistent with `state` (key to
/// last writer). On success `state` is advanced past the window.
fn search_window(
    window: &[TxnFootprint],
    state: &mut BTreeMap<Key, TxnId>,
    final_writers: Option<&BTreeMap<Key, TxnId>>,
) -> Option<Vec<TxnId>> {
    fn reads_ok(t: &TxnFootprint, state: &BTreeMap<Key, TxnId>) -> bool {
        t.reads
            .iter()
            .all(|(k, w)| state.get(k).copied().unwrap_or(TxnId::GENESIS) == *w)
    }

    fn dfs(
        window: &[TxnFootprint],
        used: &mut Vec<bool>,
        order: &mut Vec<usize>,
        state: &mut BTreeMap<Key, TxnId>,
        final_writers: Option<&BTreeMap<Key, TxnId>>,
    ) -> bool {
        if order.len() == window.len() {
            return final_writers
                .is_none_or(|f| state.iter().all(|(k, w)| f.get(k).is_none_or(|fw| fw == w)));
        }
        for i in 0..window.len() {
            if used[i] || !reads_ok(&window[i], state) {
                continue;
            }
            let saved: Vec<(Key, Option<TxnId>)> = window[i]
                .writes
                .iter()
                .map(|k| (k.clone(), state.insert(k.clone(), window[i].tid)))
                .collect();
            used[i] = true;
            order.push(i);
            if dfs(window, used, order, state, final_writers) {
                return true;
            }
            order.pop();
            used[i] = false;
            for (k, prev) in saved {
                match prev {
                    Some(p) => state.insert(k, p),
                    None => state.remove(&k),
                };
            }
        }
        false
    }

    let mut used = vec![false; window.len()];
    let mut order = Vec::with_capacity(window.len());
    if dfs(window, &mut used, &mut order, state, final_writers) {
        Some(order.into_iter().map(|i| window[i].tid).collect())
    } else {
        None
    }
}

/// Finds a serial witness for `txns` taken in windows of `window` (at most
/// [`MAX_WINDOW`]). `final_writers` maps each key to the writer of its
/// final committed value; keys absent from it are not checked.
pub fn check_serializable(
    txns: &[TxnFootprint],
    window: usize,
    final_writers: Option<&BTreeMap<Key, TxnId>>,
) -> Result<Vec<TxnId>, SerialError> {
    let size = window.clamp(1, MAX_WINDOW);
    if window > MAX_WINDOW {
        return Err(SerialError::WindowTooLarge {
            window: 0,
            size: window,
        });
    }
    let mut state = BTreeMap::new();
    let mut witness = Vec::with_capacity(txns.len());
    let chunks: Vec<&[TxnFootprint]> = txns.chunks(size).collect();
    for (i, chunk) in chunks.iter().enumerate() {
        let last = i + 1 == chunks.len();
        let order = search_window(chunk, &mut state, if last { final_writers } else { None })
            .ok_or_else(|| SerialError::NoWitness {
                window: i,
                tids: chunk.iter().map(|t| t.tid).collect(),
            })?;
        witness.extend(order);
    }
    Ok(witness)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fp(tid: u128, reads: &[(&str, u128)], writes: &[&str]) -> TxnFootprint {
        TxnFootprint {
            tid: TxnId(tid),
            reads: reads
                .iter()
                .map(|(k, w)| (k.to_string(), TxnId(*w)))
                .collect(),
            writes: writes.iter().map(|k| k.to_string()).collect(),
        }
    }

    #[test]
    fn disjoint_transactions_serialize() {
        let txns = [fp(1, &[("a", 0)], &["a"]), fp(2, &[("b", 0)], &["b"])];
        assert_eq!(
            check_serializable(&txns, 8, None).unwrap(),
            vec![TxnId(1), TxnId(2)]
        );
    }

    #[test]
    fn reads_force_the_order() {
        // 2 read 1's write, so 1 must come first even if listed second
        let txns = [fp(2, &[("a", 1)], &[]), fp(1, &[], &["a"])];
        assert_eq!(
            check_serializable(&txns, 8, None).unwrap(),
            vec![TxnId(1), TxnId(2)]
        );
    }

    #[test]
    fn write_skew_has_no_witness() {
        // each reads the other's key from the initial state and writes its own
        let txns = [
            fp(1, &[("x", 0), ("y", 0)], &["x"]),
            fp(2, &[("x", 0), ("y", 0)], &["y"]),
            fp(3, &[("x", 1), ("y", 2)], &[]),
        ];
        assert!(matches!(
            check_serializable(&txns, 8, None),
            Err(SerialError::NoWitness { .. })
        ));
    }

    #[test]
    fn final_state_must_match() {
        let txns = [fp(1, &[], &["a"]), fp(2, &[], &["a"])];
        let fin: BTreeMap<Key, TxnId> = [("a".to_string(), TxnId(1))].into();
        assert_eq!(
            check_serializable(&txns, 8, Some(&fin)).unwrap(),
            vec![TxnId(2), TxnId(1)]
        );
    }

    #[test]
    fn windows_carry_state_forward() {
        let txns: Vec<_> = (1..=10u128)
            .map(|i| fp(i, &[("k", i - 1)], &["k"]))
            .collect();
        let w = check_serializable(&txns, 3, None).unwrap();
        assert_eq!(w, (1..=10).map(TxnId).collect::<Vec<_>>());
    }

    #[test]
    fn oversized_window_is_an_error() {
        assert!(matches!(
            check_serializable(&[], 9, None),
            Err(SerialError::WindowTooLarge { .. })
        ));
    }
}
