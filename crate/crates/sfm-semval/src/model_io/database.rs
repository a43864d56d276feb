//! Match counts from a COLMAP SQLite database.
//!
//! Only reads; two tables are of interest, both keyed by the pair id of
//! [`super::pair_id`]: `matches` (raw feature matches) and
//! `two_view_geometries` (geometrically verified matches). The `rows`
//! column holds the number of matched features of the pair.

use std::path::Path;

use rusqlite::{Connection, OpenFlags};

use super::{inverse_pair_id, MatchMatrix, ModelIoError};

/// Which table the match counts are read from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchSource {
    Matches,
    TwoViewGeometries,
}

impl MatchSource {
    fn table(self) -> &'static str {
        match self {
            MatchSource::Matches => "matches",
            MatchSource::TwoViewGeometries => "two_view_geometries",
        }
    }
}

fn db_err(path: &Path, message: impl Into<String>) -> ModelIoError {
    ModelIoError::Database {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

/// Loads the symmetric match-count matrix over all images in the database.
pub fn load_match_matrix(db: &Path, source: MatchSource) -> Result<MatchMatrix, ModelIoError> {
    if !db.exists() {
        return Err(ModelIoError::MissingFile(db.to_path_buf()));
    }
    let conn = Connection::open_with_flags(db, OpenFlags::SQLITE_OPEN_READ_ONLY)
        .map_err(|e| db_err(db, format!("cannot open: {e}")))?;

    let mut stmt = conn
        .prepare("SELECT image_id FROM images ORDER BY image_id")
        .map_err(|e| db_err(db, format!("missing table 'images': {e}")))?;
    let ids = stmt
        .query_map([], |row| row.get::<_, i64>(0))
        .map_err(|e| db_err(db, e.to_string()))?
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| db_err(db, e.to_string()))?;
    let image_ids = ids
        .into_iter()
        .map(|id| {
            u32::try_from(id).map_err(|_| db_err(db, format!("image id {id} out of range")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut matrix = MatchMatrix::zeros(image_ids);

    let table = source.table();
    let mut stmt = conn
        .prepare(&format!("SELECT pair_id, rows FROM {table}"))
        .map_err(|e| db_err(db, format!("missing table '{table}': {e}")))?;
    let pairs = stmt
        .query_map([], |row| {
            Ok((row.get::<_, i64>(0)?, row.get::<_, Option<i64>>(1)?))
        })
        .map_err(|e| db_err(db, e.to_string()))?;
    for pair in pairs {
        let (pid, rows) = pair.map_err(|e| db_err(db, e.to_string()))?;
        let (a, b) = inverse_pair_id(pid)?;
        let count = match rows.unwrap_or(0) {
            n if n < 0 => return Err(db_err(db, format!("pair {pid}: negative row count {n}"))),
            n => n as u64,
        };
        matrix
            .set(a, b, count)
            .map_err(|e| db_err(db, format!("pair {pid} ({a},{b}): {e}")))?;
    }
    Ok(matrix)
}
