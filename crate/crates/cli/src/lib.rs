//! Helpers behind the `asmscribe` binary.

pub mod curate;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use asmscribe_core::stats::Contingency2x2;
use asmscribe_core::tasks::{dataset_stats, read_examples, split_sizes, write_jsonl, DatasetSplit, Task, TaskExample};
use serde::Serialize;

pub fn read_dataset(path: &Path) -> Result<Vec<TaskExample>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_examples(BufReader::new(file)).with_context(|| format!("reading {}", path.display()))
}

pub fn write_dataset(path: &Path, examples: &[TaskExample]) -> Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    write_jsonl(BufWriter::new(file), examples).with_context(|| format!("writing {}", path.display()))
}

#[derive(Debug, Serialize)]
pub struct DatasetCounts {
    pub counts: BTreeMap<Task, usize>,
    pub total: usize,
}

pub fn count_tasks(examples: &[TaskExample]) -> DatasetCounts {
    DatasetCounts { counts: dataset_stats(examples), total: examples.len() }
}

#[derive(Debug, Serialize, PartialEq, Eq)]
pub struct PartSizes {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

/// Per-task sizes of each split part.
pub fn split_breakdown(split: &DatasetSplit) -> BTreeMap<Task, PartSizes> {
    let train = dataset_stats(&split.train);
    let validation = dataset_stats(&split.validation);
    let test = dataset_stats(&split.test);
    Task::ALL
        .iter()
        .map(|t| (*t, PartSizes { train: train[t], validation: validation[t], test: test[t] }))
        .collect()
}

/// Checks every task's part sizes against the floor/floor/remainder rule.
pub fn check_split_law(dataset: &[TaskExample], split: &DatasetSplit) -> Result<()> {
    let totals = dataset_stats(dataset);
    for (task, got) in split_breakdown(split) {
        let (train, validation, test) = split_sizes(totals[&task]);
        if got != (PartSizes { train, validation, test }) {
            bail!("{task}: split {got:?} does not match expected ({train}, {validation}, {test})");
        }
    }
    Ok(())
}

/// Writes `<prefix>.train.jsonl`, `<prefix>.validation.jsonl`, `<prefix>.test.jsonl`.
pub fn write_split(split: &DatasetSplit, prefix: &Path) -> Result<[PathBuf; 3]> {
    let path = |part: &str| {
        let mut name = prefix.as_os_str().to_owned();
        name.push(format!(".{part}.jsonl"));
        PathBuf::from(name)
    };
    let paths = [path("train"), path("validation"), path("test")];
    write_dataset(&paths[0], &split.train)?;
    write_dataset(&paths[1], &split.validation)?;
    write_dataset(&paths[2], &split.test)?;
    Ok(paths)
}

/// Parses `1,2,3` (whitespace and blank entries ignored).
pub fn parse_values(text: &str) -> Result<Vec<f64>> {
    text.split([',', '\n', ';'])
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>().with_context(|| format!("not a number: {s:?}")))
        .collect()
}

/// Reads values from a file when `arg` names one, else parses it as a literal list.
pub fn values_arg(arg: &str) -> Result<Vec<f64>> {
    let path = Path::new(arg);
    if path.is_file() {
        parse_values(&std::fs::read_to_string(path)?)
    } else {
        parse_values(arg)
    }
}

pub fn parse_table(text: &str) -> Result<Contingency2x2> {
    let cells: Vec<u64> = text
        .split(',')
        .map(|s| s.trim().parse::<u64>().with_context(|| format!("not a count: {s:?}")))
        .collect::<Result<_>>()?;
    let [a, b, c, d] = cells[..] else {
        bail!("expected four counts a,b,c,d, got {}", cells.len());
    };
    Ok(Contingency2x2::new(a, b, c, d)?)
}
