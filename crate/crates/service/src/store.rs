use std::path::Path;
use std::sync::Arc;

use asmscribe_llm::assist::ChatSession;
use redb::{Database, ReadableDatabase, ReadableTable, TableDefinition};

const SESSIONS: TableDefinition<&str, &[u8]> = TableDefinition::new("sessions");

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("session store: {0}")]
    Db(#[from] redb::Error),
    #[error("stored session is corrupt: {0}")]
    Corrupt(#[from] serde_json::Error),
    #[error("cannot prepare data directory: {0}")]
    Io(#[from] std::io::Error),
}

fn store_err<E: Into<redb::Error>>(e: E) -> StoreError {
    StoreError::Db(e.into())
}

/// Chat sessions in a single-file embedded database, stored as JSON.
#[derive(Clone)]
pub struct SessionStore {
    db: Arc<Database>,
}

impl SessionStore {
    pub fn open(data_dir: &Path) -> Result<Self, StoreError> {
        std::fs::create_dir_all(data_dir)?;
        let db = Database::create(data_dir.join("sessions.redb")).map_err(store_err)?;
        let txn = db.begin_write().map_err(store_err)?;
        txn.open_table(SESSIONS).map_err(store_err)?;
        txn.commit().map_err(store_err)?;
        Ok(SessionStore { db: Arc::new(db) })
    }

    pub fn get(&self, id: &str) -> Result<Option<ChatSession>, StoreError> {
        let txn = self.db.begin_read().map_err(store_err)?;
        let table = txn.open_table(SESSIONS).map_err(store_err)?;
        match table.get(id).map_err(store_err)? {
            Some(bytes) => Ok(Some(serde_json::from_slice(bytes.value())?)),
            None => Ok(None),
        }
    }

    pub fn put(&self, session: &ChatSession) -> Result<(), StoreError> {
        let bytes = serde_json::to_vec(session)?;
        let txn = self.db.begin_write().map_err(store_err)?;
        {
            let mut table = txn.open_table(SESSIONS).map_err(store_err)?;
            table.insert(session.session_id.as_str(), bytes.as_slice()).map_err(store_err)?;
        }
        txn.commit().map_err(store_err)
    }

    pub fn ids(&self) -> Result<Vec<String>, StoreError> {
        let txn = self.db.begin_read().map_err(store_err)?;
        let table = txn.open_table(SESSIONS).map_err(store_err)?;
        let mut out = Vec::new();
        for entry in table.iter().map_err(store_err)? {
            let (k, _) = entry.map_err(store_err)?;
            out.push(k.value().to_string());
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use asmscribe_llm::ChatMessage;

    #[test]
    fn round_trip_across_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = ChatSession::new("abc", "m", Some("sys"));
        s.transcript.push(ChatMessage::new("user", "hé\n\"quoted\""));
        {
            let store = SessionStore::open(dir.path()).unwrap();
            assert_eq!(store.get("abc").unwrap(), None);
            store.put(&s).unwrap();
        }
        let store = SessionStore::open(dir.path()).unwrap();
        assert_eq!(store.get("abc").unwrap(), Some(s));
        assert_eq!(store.ids().unwrap(), vec!["abc".to_string()]);
    }
}
