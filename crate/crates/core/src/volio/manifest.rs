//! Task manifest: ordered task names, mirror pairing for reflection
//! augmentation, auxiliary flags. Stored as comma-separated text, one
//! task per line: `name,mirror_index,is_auxiliary` (mirror blank when
//! unpaired).

use std::fs;
use std::path::Path;

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TaskEntry {
    pub name: String,
    pub mirror: Option<usize>,
    pub auxiliary: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskManifest {
    tasks: Vec<TaskEntry>,
}

impl TaskManifest {
    pub fn new(tasks: Vec<TaskEntry>) -> Result<Self> {
        if tasks.is_empty() || tasks.len() > 32 {
            return Err(Error::Invariant(format!(
                "task count {} outside 1..=32",
                tasks.len()
            )));
        }
        let mut names = std::collections::HashSet::new();
        for t in &tasks {
            if t.name.is_empty() || t.name.contains(',') || t.name.contains('\n') {
                return Err(Error::Invariant(format!("bad task name {:?}", t.name)));
            }
            if !names.insert(t.name.as_str()) {
                return Err(Error::Invariant(format!("duplicate task name {}", t.name)));
            }
        }
        for (i, t) in tasks.iter().enumerate() {
            if let Some(j) = t.mirror {
                let back = tasks
                    .get(j)
                    .ok_or_else(|| {
                        Error::Invariant(format!("task {} mirrors out-of-range {j}", t.name))
                    })?
                    .mirror;
                if j == i || back != Some(i) {
                    return Err(Error::Invariant(format!(
                        "mirror pairing not symmetric at task {}",
                        t.name
                    )));
                }
            }
        }
        let first_aux = tasks.iter().position(|t| t.auxiliary);
        if let Some(k) = first_aux {
            if tasks[k..].iter().any(|t| !t.auxiliary) {
                return Err(Error::Invariant(
                    "auxiliary tasks must be listed last".into(),
                ));
            }
        }
        Ok(TaskManifest { tasks })
    }

    pub fn tasks(&self) -> &[TaskEntry] {
        &self.tasks
    }

    pub fn n_tasks(&self) -> usize {
        self.tasks.len()
    }

    /// Indices of non-auxiliary tasks.
    pub fn structure_tasks(&self) -> Vec<usize> {
        (0..self.tasks.len())
            .filter(|&i| !self.tasks[i].auxiliary)
            .collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.tasks.iter().position(|t| t.name == name)
    }

    /// Task-index permutation applied when a volume is reflected about
    /// the midline: paired tasks swap, unpaired tasks stay.
    pub fn mirror_permutation(&self) -> Vec<usize> {
        (0..self.tasks.len())
            .map(|i| self.tasks[i].mirror.unwrap_or(i))
            .collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = String::from("# name,mirror_index,is_auxiliary\n");
        for t in &self.tasks {
            let mirror = t.mirror.map(|m| m.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{}\n",
                t.name,
                mirror,
                if t.auxiliary { 1 } else { 0 }
            ));
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut tasks = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.starts_with('#') || line.is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 3 {
                return Err(Error::parse(
                    path,
                    format!("line {}: expected 3 columns", lineno + 1),
                ));
            }
            let mirror = if cols[1].is_empty() {
                None
            } else {
                Some(cols[1].parse::<usize>().map_err(|_| {
                    Error::parse(path, format!("line {}: bad mirror index", lineno + 1))
                })?)
            };
            let auxiliary = match cols[2] {
                "0" => false,
                "1" => true,
                other => {
                    return Err(Error::parse(
                        path,
                        format!("line {}: bad auxiliary flag {other:?}", lineno + 1),
                    ))
                }
            };
            tasks.push(TaskEntry {
                name: cols[0].to_string(),
                mirror,
                auxiliary,
            });
        }
        TaskManifest::new(tasks)
    }
}
