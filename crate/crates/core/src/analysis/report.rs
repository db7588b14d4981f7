//! CSV and JSON report writers. CSV headers are the serialised field names
//! of the row type.

use std::path::Path;

use serde::Serialize;

use crate::error::{invalid, Result};

pub fn write_csv<R: Serialize>(path: &Path, rows: &[R]) -> Result<()> {
    if rows.is_empty() {
        return Err(invalid("report", format!("no rows for {}", path.display())));
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn to_csv_string<R: Serialize>(rows: &[R]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| invalid("report", e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| invalid("report", e.to_string()))
}

pub fn write_json<V: Serialize>(path: &Path, value: &V) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::complexity::{default_sweep, sweep};

    #[test]
    fn sweep_csv_has_fixed_columns() {
        let rows = sweep(&default_sweep()).unwrap();
        let text = to_csv_string(&rows).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "h,w,c,m,h0,w0,omega_msa,omega_wmsa,omega_gmsa,gmsa_over_msa,wmsa_over_msa"
        );
        assert!(lines.all(|l| l.split(',').count() == 11));
    }

    #[test]
    fn files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let rows = sweep(&default_sweep()).unwrap();
        write_csv(&dir.path().join("s.csv"), &rows).unwrap();
        write_json(&dir.path().join("s.json"), &rows).unwrap();
        let back: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("s.json")).unwrap()).unwrap();
        assert_eq!(back.as_array().unwrap().len(), 4);
        assert!(write_csv::<u8>(&dir.path().join("e.csv"), &[]).is_err());
    }
}
