//! In-memory columnar key-value store.
//!
//! Every element keeps its current value and the value it held at the last
//! snapshot of its container, plus a write version taken from a store-wide
//! clock. The built-in snapshot gives each container one reference point;
//! callers that need several independent reference points (one per
//! consuming step, say) capture [`Reference`]s and diff against them with
//! [`SinceReference`].
//!
//! Metrics never look at the store directly: they consume a [`ChangeSet`],
//! which every view in this module implements.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum StoreError {
    #[error("container `{0}` not found")]
    ContainerNotFound(String),
    #[error("key `{key}` not found in container `{container}`")]
    KeyNotFound { container: String, key: String },
}

/// A single versioned cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Element<T> {
    pub current: T,
    pub previous: T,
    pub dirty: bool,
    /// Store clock value of the last write.
    pub version: u64,
}

/// One change observed by a metric: the element's current value, the value
/// it is compared against, and whether it counts as modified (`m`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElementChange<'a, T> {
    pub key: &'a str,
    pub current: T,
    pub previous: T,
    pub modified: bool,
}

/// A set of elements with a reference state, as consumed by metrics.
///
/// `total()` is `n`; `changes()` yields every element (modified or not) so
/// that sums over all `n` elements are expressible.
pub trait ChangeSet<T: Scalar> {
    fn total(&self) -> usize;

    fn changes(&self) -> impl Iterator<Item = ElementChange<'_, T>>;

    fn modified_count(&self) -> usize {
        self.changes().filter(|c| c.modified).count()
    }
}

/// Read access to values by key, used as the stale side of a [`Divergence`].
pub trait ValueSource<T> {
    fn value_of(&self, key: &str) -> Option<T>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataContainer<T> {
    name: String,
    elements: BTreeMap<String, Element<T>>,
    modified: usize,
}

impl<T: Scalar> DataContainer<T> {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            elements: BTreeMap::new(),
            modified: 0,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// `n`: number of elements.
    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    /// `m`: number of elements written since the last snapshot.
    pub fn modified(&self) -> usize {
        self.modified
    }

    pub fn element(&self, key: &str) -> Option<&Element<T>> {
        self.elements.get(key)
    }

    pub fn get(&self, key: &str) -> Option<T> {
        self.elements.get(key).map(|e| e.current)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Element<T>)> {
        self.elements.iter().map(|(k, e)| (k.as_str(), e))
    }

    /// Current values in key order.
    pub fn values(&self) -> impl Iterator<Item = (&str, T)> {
        self.elements.iter().map(|(k, e)| (k.as_str(), e.current))
    }

    /// Returns the previous current value, if the key existed.
    fn write(&mut self, key: &str, value: T, version: u64) -> Option<T> {
        match self.elements.get_mut(key) {
            Some(element) => {
                let old = element.current;
                if !element.dirty {
                    element.dirty = true;
                    self.modified += 1;
                }
                element.current = value;
                element.version = version;
                Some(old)
            }
            None => {
                self.elements.insert(
                    key.to_owned(),
                    Element {
                        current: value,
                        previous: T::zero(),
                        dirty: true,
                        version,
                    },
                );
                self.modified += 1;
                None
            }
        }
    }

    fn snapshot(&mut self) {
        for element in self.elements.values_mut() {
            element.previous = element.current;
            element.dirty = false;
        }
        self.modified = 0;
    }
}

impl<T: Scalar> ChangeSet<T> for DataContainer<T> {
    fn total(&self) -> usize {
        self.len()
    }

    fn changes(&self) -> impl Iterator<Item = ElementChange<'_, T>> {
        self.elements.iter().map(|(key, e)| ElementChange {
            key,
            current: e.current,
            previous: if e.dirty { e.previous } else { e.current },
            modified: e.dirty,
        })
    }

    fn modified_count(&self) -> usize {
        self.modified
    }
}

impl<T: Scalar> ValueSource<T> for DataContainer<T> {
    fn value_of(&self, key: &str) -> Option<T> {
        self.get(key)
    }
}

/// A put as seen by update listeners.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateEvent<'a, T> {
    pub container: &'a str,
    pub key: &'a str,
    /// `None` when the key was inserted.
    pub old: Option<T>,
    pub new: T,
}

pub trait UpdateListener<T>: Send {
    fn on_update(&mut self, event: &UpdateEvent<'_, T>);
}

impl<T, F> UpdateListener<T> for F
where
    F: FnMut(&UpdateEvent<'_, T>) + Send,
{
    fn on_update(&mut self, event: &UpdateEvent<'_, T>) {
        self(event)
    }
}

/// Frozen copy of a container's values at a point of the store clock.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Reference<T> {
    container: String,
    watermark: u64,
    values: BTreeMap<String, T>,
}

impl<T: Scalar> Reference<T> {
    /// A reference that predates every write: all elements read as inserted.
    pub fn empty(container: impl Into<String>) -> Self {
        Self {
            container: container.into(),
            watermark: 0,
            values: BTreeMap::new(),
        }
    }

    pub fn container(&self) -> &str {
        &self.container
    }

    pub fn watermark(&self) -> u64 {
        self.watermark
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

impl<T: Scalar> ValueSource<T> for Reference<T> {
    fn value_of(&self, key: &str) -> Option<T> {
        self.values.get(key).copied()
    }
}

/// Elements written after a [`Reference`] was captured count as modified;
/// their previous state is the referenced value, or zero if they were
/// inserted afterwards.
#[derive(Debug, Clone, Copy)]
pub struct SinceReference<'a, T> {
    container: &'a DataContainer<T>,
    reference: &'a Reference<T>,
}

impl<'a, T: Scalar> SinceReference<'a, T> {
    pub fn new(container: &'a DataContainer<T>, reference: &'a Reference<T>) -> Self {
        Self {
            container,
            reference,
        }
    }
}

impl<T: Scalar> ChangeSet<T> for SinceReference<'_, T> {
    fn total(&self) -> usize {
        self.container.len()
    }

    fn changes(&self) -> impl Iterator<Item = ElementChange<'_, T>> {
        let watermark = self.reference.watermark;
        self.container.elements.iter().map(move |(key, e)| {
            let modified = e.version > watermark;
            let previous = if modified {
                self.reference.value_of(key).unwrap_or_else(T::zero)
            } else {
                e.current
            };
            ElementChange {
                key,
                current: e.current,
                previous,
                modified,
            }
        })
    }
}

/// Value-based comparison of a fresh container against a stale source.
///
/// An element is modified when its value differs from the stale one or is
/// absent there (previous state zero). Used to measure output error, where
/// write versions of two different stores are not comparable.
#[derive(Debug, Clone, Copy)]
pub struct Divergence<'a, T, S> {
    fresh: &'a DataContainer<T>,
    stale: &'a S,
}

impl<'a, T: Scalar, S: ValueSource<T>> Divergence<'a, T, S> {
    pub fn new(fresh: &'a DataContainer<T>, stale: &'a S) -> Self {
        Self { fresh, stale }
    }
}

impl<T: Scalar, S: ValueSource<T>> ChangeSet<T> for Divergence<'_, T, S> {
    fn total(&self) -> usize {
        self.fresh.len()
    }

    fn changes(&self) -> impl Iterator<Item = ElementChange<'_, T>> {
        self.fresh.elements.iter().map(move |(key, e)| {
            let (previous, modified) = match self.stale.value_of(key) {
                Some(v) => (v, v != e.current),
                None => (T::zero(), true),
            };
            ElementChange {
                key,
                current: e.current,
                previous,
                modified,
            }
        })
    }
}

/// Several change sets viewed as one: `n` and the element streams add up.
#[derive(Debug, Clone, Copy)]
pub struct Union<'a, C>(pub &'a [C]);

impl<T: Scalar, C: ChangeSet<T>> ChangeSet<T> for Union<'_, C> {
    fn total(&self) -> usize {
        self.0.iter().map(ChangeSet::total).sum()
    }

    fn changes(&self) -> impl Iterator<Item = ElementChange<'_, T>> {
        self.0.iter().flat_map(ChangeSet::changes)
    }

    fn modified_count(&self) -> usize {
        self.0.iter().map(ChangeSet::modified_count).sum()
    }
}

/// Saved container state for whole-wave rollback. Listeners are not part
/// of it.
#[derive(Debug, Clone)]
pub struct StoreCheckpoint<T> {
    containers: BTreeMap<String, DataContainer<T>>,
    clock: u64,
}

#[derive(Default)]
pub struct ColumnStore<T> {
    containers: BTreeMap<String, DataContainer<T>>,
    listeners: Vec<Box<dyn UpdateListener<T>>>,
    clock: u64,
}

impl<T> std::fmt::Debug for ColumnStore<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ColumnStore")
            .field("containers", &self.containers.keys().collect::<Vec<_>>())
            .field("listeners", &self.listeners.len())
            .field("clock", &self.clock)
            .finish()
    }
}

impl<T: Scalar> ColumnStore<T> {
    pub fn new() -> Self {
        Self {
            containers: BTreeMap::new(),
            listeners: Vec::new(),
            clock: 0,
        }
    }

    /// Creates the container if missing.
    pub fn create_container(&mut self, name: &str) -> &mut DataContainer<T> {
        self.containers
            .entry(name.to_owned())
            .or_insert_with(|| DataContainer::new(name))
    }

    pub fn has_container(&self, name: &str) -> bool {
        self.containers.contains_key(name)
    }

    pub fn container(&self, name: &str) -> Result<&DataContainer<T>, StoreError> {
        self.containers
            .get(name)
            .ok_or_else(|| StoreError::ContainerNotFound(name.to_owned()))
    }

    pub fn containers(&self) -> impl Iterator<Item = &DataContainer<T>> {
        self.containers.values()
    }

    pub fn put(&mut self, container: &str, key: &str, value: T) -> Result<(), StoreError> {
        let target = self
            .containers
            .get_mut(container)
            .ok_or_else(|| StoreError::ContainerNotFound(container.to_owned()))?;
        self.clock += 1;
        let old = target.write(key, value, self.clock);
        if !self.listeners.is_empty() {
            let event = UpdateEvent {
                container,
                key,
                old,
                new: value,
            };
            for listener in &mut self.listeners {
                listener.on_update(&event);
            }
        }
        Ok(())
    }

    /// Deletion is a write of zero, mirroring the insertion rule.
    pub fn delete(&mut self, container: &str, key: &str) -> Result<(), StoreError> {
        self.put(container, key, T::zero())
    }

    pub fn get(&self, container: &str, key: &str) -> Result<T, StoreError> {
        self.container(container)?
            .get(key)
            .ok_or_else(|| StoreError::KeyNotFound {
                container: container.to_owned(),
                key: key.to_owned(),
            })
    }

    /// Like [`get`](Self::get) but with a default for absent keys.
    pub fn get_or(&self, container: &str, key: &str, default: T) -> Result<T, StoreError> {
        Ok(self.container(container)?.get(key).unwrap_or(default))
    }

    pub fn snapshot(&mut self, container: &str) -> Result<(), StoreError> {
        self.containers
            .get_mut(container)
            .ok_or_else(|| StoreError::ContainerNotFound(container.to_owned()))?
            .snapshot();
        Ok(())
    }

    pub fn register_listener(&mut self, listener: impl UpdateListener<T> + 'static) {
        self.listeners.push(Box::new(listener));
    }

    /// Captures the container's values as a reference point.
    pub fn reference(&self, container: &str) -> Result<Reference<T>, StoreError> {
        let source = self.container(container)?;
        Ok(Reference {
            container: container.to_owned(),
            watermark: self.clock,
            values: source.values().map(|(k, v)| (k.to_owned(), v)).collect(),
        })
    }

    pub fn since<'a>(
        &'a self,
        reference: &'a Reference<T>,
    ) -> Result<SinceReference<'a, T>, StoreError> {
        Ok(SinceReference::new(
            self.container(&reference.container)?,
            reference,
        ))
    }

    pub fn clock(&self) -> u64 {
        self.clock
    }

    pub fn checkpoint(&self) -> StoreCheckpoint<T> {
        StoreCheckpoint {
            containers: self.containers.clone(),
            clock: self.clock,
        }
    }

    pub fn restore(&mut self, checkpoint: StoreCheckpoint<T>) {
        self.containers = checkpoint.containers;
        self.clock = checkpoint.clock;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::sync::{Arc, Mutex};

    fn store_with(names: &[&str]) -> ColumnStore<f64> {
        let mut store = ColumnStore::new();
        for name in names {
            store.create_container(name);
        }
        store
    }

    fn sum_abs_delta<C: ChangeSet<f64>>(set: &C) -> f64 {
        set.changes()
            .filter(|c| c.modified)
            .map(|c| (c.current - c.previous).abs())
            .sum()
    }

    #[test]
    fn insert_counts_as_change_from_zero() {
        let mut store = store_with(&["temps"]);
        store.put("temps", "s1", 20.0).unwrap();
        let c = store.container("temps").unwrap();
        let e = c.element("s1").unwrap();
        assert_eq!((e.current, e.previous, e.dirty), (20.0, 0.0, true));
        assert_eq!((c.modified(), c.len()), (1, 1));
    }

    #[test]
    fn snapshot_fixes_previous() {
        let mut store = store_with(&["temps"]);
        store.put("temps", "s1", 20.0).unwrap();
        store.snapshot("temps").unwrap();
        store.put("temps", "s1", 22.0).unwrap();
        let e = *store.container("temps").unwrap().element("s1").unwrap();
        assert_eq!((e.current, e.previous, e.dirty), (22.0, 20.0, true));
    }

    #[test]
    fn repeated_writes_use_last_state() {
        let mut store = store_with(&["temps"]);
        store.put("temps", "s1", 20.0).unwrap();
        store.snapshot("temps").unwrap();
        store.put("temps", "s1", 20.0).unwrap();
        store.put("temps", "s1", 21.0).unwrap();
        let c = store.container("temps").unwrap();
        assert_eq!(c.modified(), 1);
        assert_eq!(sum_abs_delta(c), 1.0);
        store.snapshot("temps").unwrap();
        assert_eq!(
            store
                .container("temps")
                .unwrap()
                .element("s1")
                .unwrap()
                .previous,
            21.0
        );
    }

    #[test]
    fn unchanged_rewrite_is_dirty_but_contributes_nothing() {
        let mut store = store_with(&["c"]);
        store.put("c", "k", 4.0).unwrap();
        store.snapshot("c").unwrap();
        store.put("c", "k", 4.0).unwrap();
        let c = store.container("c").unwrap();
        assert_eq!(c.modified(), 1);
        assert_eq!(sum_abs_delta(c), 0.0);
    }

    #[test]
    fn get_and_errors() {
        let mut store = store_with(&["c"]);
        store.put("c", "k", 5.0).unwrap();
        assert_eq!(store.get("c", "k").unwrap(), 5.0);
        store.snapshot("c").unwrap();
        assert_eq!(store.get("c", "k").unwrap(), 5.0);
        assert_eq!(
            store.get("c", "absent"),
            Err(StoreError::KeyNotFound {
                container: "c".into(),
                key: "absent".into()
            })
        );
        assert_eq!(
            store.put("nope", "k", 1.0),
            Err(StoreError::ContainerNotFound("nope".into()))
        );
        assert!(store.snapshot("nope").is_err());
    }

    #[test]
    fn snapshot_clears_modified() {
        let mut store = store_with(&["c"]);
        for (i, v) in [1.0, 2.0, 3.0].into_iter().enumerate() {
            store.put("c", &format!("k{i}"), v).unwrap();
        }
        assert_eq!(store.container("c").unwrap().modified(), 3);
        store.snapshot("c").unwrap();
        let c = store.container("c").unwrap();
        assert_eq!(c.modified(), 0);
        assert!(c.iter().all(|(_, e)| e.previous == e.current && !e.dirty));
    }

    #[test]
    fn delete_writes_zero() {
        let mut store = store_with(&["c"]);
        store.put("c", "k", 3.0).unwrap();
        store.snapshot("c").unwrap();
        store.delete("c", "k").unwrap();
        let c = store.container("c").unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(sum_abs_delta(c), 3.0);
    }

    #[test]
    fn listeners_receive_every_put() {
        let mut store = store_with(&["c"]);
        store.put("c", "before", 1.0).unwrap();
        let first = Arc::new(Mutex::new(Vec::new()));
        let second = Arc::new(Mutex::new(0usize));
        {
            let first = Arc::clone(&first);
            store.register_listener(move |e: &UpdateEvent<'_, f64>| {
                first.lock().unwrap().push((
                    e.container.to_owned(),
                    e.key.to_owned(),
                    e.old,
                    e.new,
                ));
            });
            let second = Arc::clone(&second);
            store.register_listener(move |_: &UpdateEvent<'_, f64>| *second.lock().unwrap() += 1);
        }
        store.put("c", "k", 2.0).unwrap();
        store.put("c", "k", 3.0).unwrap();
        let seen = first.lock().unwrap();
        assert_eq!(
            *seen,
            vec![
                ("c".to_owned(), "k".to_owned(), None, 2.0),
                ("c".to_owned(), "k".to_owned(), Some(2.0), 3.0)
            ]
        );
        assert_eq!(*second.lock().unwrap(), 2);
    }

    #[test]
    fn references_are_independent_of_snapshot() {
        let mut store = store_with(&["c"]);
        store.put("c", "a", 1.0).unwrap();
        store.put("c", "b", 2.0).unwrap();
        let early = store.reference("c").unwrap();
        store.put("c", "a", 4.0).unwrap();
        let late = store.reference("c").unwrap();
        store.put("c", "b", 7.0).unwrap();
        store.put("c", "new", 1.5).unwrap();

        let since_early = store.since(&early).unwrap();
        assert_eq!(since_early.total(), 3);
        assert_eq!(since_early.modified_count(), 3);
        assert_eq!(sum_abs_delta(&since_early), 3.0 + 5.0 + 1.5);

        let since_late = store.since(&late).unwrap();
        assert_eq!(since_late.modified_count(), 2);
        assert_eq!(sum_abs_delta(&since_late), 5.0 + 1.5);
    }

    #[test]
    fn divergence_is_value_based() {
        let mut a = store_with(&["c"]);
        let mut b = store_with(&["c"]);
        for (k, v) in [("x", 1.0), ("y", 2.0), ("z", 3.0)] {
            a.put("c", k, v).unwrap();
        }
        b.put("c", "x", 1.0).unwrap();
        b.put("c", "y", 5.0).unwrap();
        let fresh = a.container("c").unwrap();
        let stale = b.container("c").unwrap();
        let d = Divergence::new(fresh, stale);
        assert_eq!(d.total(), 3);
        assert_eq!(d.modified_count(), 2);
        assert_eq!(sum_abs_delta(&d), 3.0 + 3.0);
    }

    #[test]
    fn checkpoint_restores_values_and_clock() {
        let mut store = store_with(&["c"]);
        store.put("c", "k", 1.0).unwrap();
        let saved = store.checkpoint();
        store.put("c", "k", 9.0).unwrap();
        store.put("c", "j", 9.0).unwrap();
        store.restore(saved);
        assert_eq!(store.get("c", "k").unwrap(), 1.0);
        assert!(store.get("c", "j").is_err());
        assert_eq!(store.clock(), 1);
    }

    /// Scalar replay of a write sequence, independent of the container code.
    fn replay_oracle(writes: &[(u8, i32, bool)]) -> (f64, usize) {
        let mut current: BTreeMap<u8, f64> = BTreeMap::new();
        let mut previous: BTreeMap<u8, f64> = BTreeMap::new();
        let mut dirty: BTreeMap<u8, bool> = BTreeMap::new();
        for &(key, value, snapshot_after) in writes {
            current.insert(key, value as f64);
            previous.entry(key).or_insert(0.0);
            dirty.insert(key, true);
            if snapshot_after {
                for (k, v) in &current {
                    previous.insert(*k, *v);
                    dirty.insert(*k, false);
                }
            }
        }
        let mut sum = 0.0;
        let mut m = 0;
        for (k, d) in &dirty {
            if *d {
                m += 1;
                sum += (current[k] - previous[k]).abs();
            }
        }
        (sum, m)
    }

    proptest! {
        #[test]
        fn dirty_delta_sum_matches_replay(
            writes in prop::collection::vec((0u8..6, -50i32..50, prop::bool::weighted(0.2)), 0..40)
        ) {
            let mut store = store_with(&["c"]);
            for &(key, value, snapshot_after) in &writes {
                store.put("c", &key.to_string(), value as f64).unwrap();
                if snapshot_after {
                    store.snapshot("c").unwrap();
                }
            }
            let c = store.container("c").unwrap();
            let (sum, m) = replay_oracle(&writes);
            prop_assert_eq!(c.modified(), m);
            prop_assert!(c.modified() <= c.len());
            prop_assert_eq!(sum_abs_delta(c), sum);
        }

        #[test]
        fn snapshot_is_idempotent(values in prop::collection::vec(-10.0f64..10.0, 1..20)) {
            let mut once = store_with(&["c"]);
            for (i, v) in values.iter().enumerate() {
                once.put("c", &i.to_string(), *v).unwrap();
            }
            once.snapshot("c").unwrap();
            let single = once.container("c").unwrap().clone();
            once.snapshot("c").unwrap();
            prop_assert_eq!(once.container("c").unwrap(), &single);
        }
    }
}
