use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet, VecDeque};

use super::{Catalog, CatalogError, Commit};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MergeOutcome {
    /// Target already contains source; nothing changed.
    UpToDate { head: String },
    /// Target ref moved to source head without a new commit.
    FastForward { head: String },
    /// A two-parent merge commit was created on the target.
    Merged { head: String, commit: Commit },
}

impl MergeOutcome {
    pub fn head(&self) -> &str {
        match self {
            MergeOutcome::UpToDate { head } | MergeOutcome::FastForward { head } | MergeOutcome::Merged { head, .. } => head,
        }
    }
}

/// Table-granularity three-way merge. For each table, keep whichever side
/// moved away from `base`; if both moved to different snapshots, that table
/// conflicts. Absent entries count as a value, so removals merge the same way.
pub fn three_way_tables(
    base: &BTreeMap<String, String>,
    ours: &BTreeMap<String, String>,
    theirs: &BTreeMap<String, String>,
) -> Result<BTreeMap<String, String>, Vec<String>> {
    let names: BTreeSet<&String> = base.keys().chain(ours.keys()).chain(theirs.keys()).collect();
    let mut merged = BTreeMap::new();
    let mut conflicts = Vec::new();
    for name in names {
        let (b, o, t) = (base.get(name), ours.get(name), theirs.get(name));
        let pick = if o == t {
            o
        } else if o == b {
            t
        } else if t == b {
            o
        } else {
            conflicts.push(name.clone());
            continue;
        };
        if let Some(id) = pick {
            merged.insert(name.clone(), id.clone());
        }
    }
    if conflicts.is_empty() {
        Ok(merged)
    } else {
        Err(conflicts)
    }
}

impl Catalog {
    fn parents_of(&self, cache: &mut HashMap<String, Vec<String>>, hash: &str) -> Result<Vec<String>, CatalogError> {
        if let Some(p) = cache.get(hash) {
            return Ok(p.clone());
        }
        let parents = self.load_commit(hash)?.parents;
        cache.insert(hash.to_string(), parents.clone());
        Ok(parents)
    }

    fn ancestors(&self, cache: &mut HashMap<String, Vec<String>>, start: &str) -> Result<HashSet<String>, CatalogError> {
        let mut seen = HashSet::from([start.to_string()]);
        let mut queue = VecDeque::from([start.to_string()]);
        while let Some(h) = queue.pop_front() {
            for p in self.parents_of(cache, &h)? {
                if seen.insert(p.clone()) {
                    queue.push_back(p);
                }
            }
        }
        Ok(seen)
    }

    /// Lowest common ancestor of two commits.
    ///
    /// Fails with [`CatalogError::AmbiguousMergeBase`] when several common
    /// ancestors are each not an ancestor of another (criss-cross history).
    pub fn merge_base(&self, a: &str, b: &str) -> Result<String, CatalogError> {
        let a = self.resolve(a)?;
        let b = self.resolve(b)?;
        let mut cache = HashMap::new();
        let left = self.ancestors(&mut cache, &a)?;
        let right = self.ancestors(&mut cache, &b)?;
        let common: HashSet<&String> = left.intersection(&right).collect();

        // Anything reachable from a parent of a common ancestor is dominated.
        let mut dominated: HashSet<String> = HashSet::new();
        for c in &common {
            let mut queue: VecDeque<String> = self.parents_of(&mut cache, c)?.into();
            while let Some(h) = queue.pop_front() {
                if dominated.insert(h.clone()) {
                    queue.extend(self.parents_of(&mut cache, &h)?);
                }
            }
        }
        let mut lowest: Vec<String> = common.into_iter().filter(|c| !dominated.contains(*c)).cloned().collect();
        lowest.sort();
        match lowest.len() {
            0 => Err(CatalogError::NoCommonAncestor(a, b)),
            1 => Ok(lowest.pop().unwrap()),
            _ => Err(CatalogError::AmbiguousMergeBase(lowest)),
        }
    }

    /// Merges branch `source` into branch `target`.
    pub fn merge(&self, source: &str, target: &str) -> Result<MergeOutcome, CatalogError> {
        let source_head = self.head(source)?;
        let target_head = self.head(target)?;
        self.check_merge_permission(target)?;
        if source_head == target_head {
            return Ok(MergeOutcome::UpToDate { head: target_head });
        }
        let base = self.merge_base(&source_head, &target_head)?;
        if base == source_head {
            return Ok(MergeOutcome::UpToDate { head: target_head });
        }
        if base == target_head {
            self.advance(target, &target_head, &source_head)?;
            return Ok(MergeOutcome::FastForward { head: source_head });
        }
        let base_tables = self.load_commit(&base)?.tables;
        let ours = self.load_commit(&target_head)?.tables;
        let theirs = self.load_commit(&source_head)?.tables;
        let tables = three_way_tables(&base_tables, &ours, &theirs).map_err(CatalogError::MergeConflict)?;
        let commit = Commit {
            author: self.user.clone(),
            created_at: (self.clock)(),
            message: format!("merge {source} into {target}"),
            parents: vec![target_head.clone(), source_head],
            tables,
        };
        let hash = self.store_commit(&commit)?;
        self.advance(target, &target_head, &hash)?;
        Ok(MergeOutcome::Merged { head: hash, commit })
    }
}
