//! Turns a directory of listings plus an intent table into task records.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use asmscribe_core::asm::parse_sample_bytes;
use asmscribe_core::tasks::{
    make_code_intent, make_complete_the_code, make_header_comment, make_inline_comments, TaskExample,
};
use serde::Deserialize;

#[derive(Debug, thiserror::Error)]
pub enum CurateError {
    #[error("{0}: {1}")]
    Io(PathBuf, std::io::Error),
    #[error("intent table: {0}")]
    Csv(#[from] csv::Error),
    #[error("intent table names {0:?}, which is not under the source directory")]
    UnknownIntentSource(String),
    #[error("walking {0}: {1}")]
    Walk(PathBuf, walkdir::Error),
}

#[derive(Debug, Deserialize)]
struct IntentRow {
    source_id: String,
    intent: String,
}

/// Reads a `source_id,intent` table. Source ids are paths relative to the source directory.
pub fn read_intents(path: &Path) -> Result<BTreeMap<String, String>, CurateError> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let mut out = BTreeMap::new();
    for row in reader.deserialize::<IntentRow>() {
        let row = row?;
        out.insert(normalize_id(&row.source_id), row.intent);
    }
    Ok(out)
}

fn normalize_id(id: &str) -> String {
    id.trim().trim_start_matches("./").replace('\\', "/")
}

pub fn listing_files(src: &Path) -> Result<Vec<(String, PathBuf)>, CurateError> {
    let mut files = Vec::new();
    for entry in walkdir::WalkDir::new(src).sort_by_file_name() {
        let entry = entry.map_err(|e| CurateError::Walk(src.to_path_buf(), e))?;
        let path = entry.path();
        let is_listing = matches!(path.extension().and_then(|e| e.to_str()), Some("asm" | "s" | "S"));
        if entry.file_type().is_file() && is_listing {
            let rel = path.strip_prefix(src).unwrap_or(path);
            files.push((normalize_id(&rel.to_string_lossy()), path.to_path_buf()));
        }
    }
    Ok(files)
}

#[derive(Debug, Default)]
pub struct Curated {
    pub examples: Vec<TaskExample>,
    /// Files that produced nothing, with the reason.
    pub skipped: Vec<(String, String)>,
}

/// Derives every task a listing supports:
/// an intent row gives CodeIntent, a header gives HeaderComment, inline comments give
/// InlineComments. A listing with none of these becomes a CompleteTheCode exercise.
pub fn curate(src: &Path, intents: &BTreeMap<String, String>, seed: u64) -> Result<Curated, CurateError> {
    let files = listing_files(src)?;
    if let Some(missing) = intents.keys().find(|id| !files.iter().any(|(f, _)| f == *id)) {
        return Err(CurateError::UnknownIntentSource(missing.clone()));
    }
    let mut out = Curated::default();
    for (i, (id, path)) in files.iter().enumerate() {
        let bytes = std::fs::read(path).map_err(|e| CurateError::Io(path.clone(), e))?;
        let sample = match parse_sample_bytes(&bytes, id) {
            Ok(s) => s,
            Err(e) => {
                out.skipped.push((id.clone(), e.to_string()));
                continue;
            }
        };
        let mut derived = Vec::new();
        if let Some(intent) = intents.get(id) {
            derived.push(make_code_intent(&sample, intent));
        }
        if sample.header_comment.is_some() {
            derived.push(make_header_comment(&sample));
        }
        if !sample.inline_comments.is_empty() {
            derived.push(make_inline_comments(&sample));
        }
        if derived.is_empty() {
            derived.push(make_complete_the_code(&sample, seed.wrapping_add(i as u64)));
        }
        for r in derived {
            match r {
                Ok(ex) => out.examples.push(ex),
                Err(e) => out.skipped.push((id.clone(), e.to_string())),
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use asmscribe_core::tasks::Task;

    fn write(dir: &Path, name: &str, text: &str) {
        let p = dir.join(name);
        std::fs::create_dir_all(p.parent().unwrap()).unwrap();
        std::fs::write(p, text).unwrap();
    }

    #[test]
    fn derives_tasks_per_listing() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "xorpd/a.asm", "; swap two regs\n\nxor eax, ebx ; mix\nxor ebx, eax\nxor eax, ebx\n");
        write(dir.path(), "rosetta/b.asm", "mov eax, 1\nmov ebx, 2\nadd eax, ebx\nret\n");
        write(dir.path(), "shell/c.s", "xor eax, eax\nint 0x80\n");
        write(dir.path(), "notes.txt", "ignored");
        let intents = BTreeMap::from([("shell/c.s".to_string(), "exit the process".to_string())]);

        let got = curate(dir.path(), &intents, 7).unwrap();
        let tasks: Vec<(Task, &str)> = got.examples.iter().map(|e| (e.task, e.source_id.as_str())).collect();
        assert_eq!(
            tasks,
            vec![
                (Task::CompleteTheCode, "rosetta/b.asm"),
                (Task::CodeIntent, "shell/c.s"),
                (Task::HeaderComment, "xorpd/a.asm"),
                (Task::InlineComments, "xorpd/a.asm"),
            ]
        );
        assert!(got.skipped.is_empty());
        assert_eq!(got.examples[0].input.matches("# <MASKED>").count(), 1);
    }

    #[test]
    fn unknown_intent_source_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "a.asm", "ret\n");
        let intents = BTreeMap::from([("b.asm".to_string(), "x".to_string())]);
        assert!(matches!(curate(dir.path(), &intents, 0), Err(CurateError::UnknownIntentSource(_))));
    }

    #[test]
    fn intent_table_ids_are_normalized() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "t.csv", "source_id,intent\n./shell/c.s ,\"spawn a shell, then exit\"\n");
        let got = read_intents(&dir.path().join("t.csv")).unwrap();
        assert_eq!(got["shell/c.s"], "spawn a shell, then exit");
    }
}
