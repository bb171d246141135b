//! Embedding tables for external plotting.

use std::io::Write;
use std::path::Path;

use serde::Serialize;

use super::embedding::SpeakerEmbedding;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize)]
pub struct EmbeddingRow<'a> {
    pub id: &'a str,
    pub label: Option<usize>,
    pub values: &'a [f64],
}

/// CSV with columns `id,label,e0,e1,…`.
pub fn write_csv(path: impl AsRef<Path>, rows: &[(String, SpeakerEmbedding)]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(e.to_string()))?;
    let dim = rows.first().map_or(0, |r| r.1.dim());
    let mut head = vec!["id".to_string(), "label".to_string()];
    head.extend((0..dim).map(|i| format!("e{i}")));
    w.write_record(&head).map_err(|e| Error::Format(e.to_string()))?;
    for (id, e) in rows {
        let mut rec = vec![id.clone(), e.label.map_or(String::new(), |l| l.to_string())];
        rec.extend(e.values().iter().map(|v| format!("{v:e}")));
        w.write_record(&rec).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_jsonl(path: impl AsRef<Path>, rows: &[(String, SpeakerEmbedding)]) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for (id, e) in rows {
        let row = EmbeddingRow {
            id,
            label: e.label,
            values: e.values(),
        };
        serde_json::to_writer(&mut f, &row).map_err(|e| Error::Format(e.to_string()))?;
        f.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}

/// Reads a table written by [`write_csv`].
pub fn read_csv(path: impl AsRef<Path>) -> Result<Vec<(String, SpeakerEmbedding)>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::Format(e.to_string()))?;
        let id = rec.get(0).unwrap_or_default().to_string();
        let label = match rec.get(1) {
            Some("") | None => None,
            Some(s) => Some(s.parse::<usize>().map_err(|e| Error::Format(format!("label `{s}`: {e}")))?),
        };
        let values = rec
            .iter()
            .skip(2)
            .map(|s| s.parse::<f64>().map_err(|e| Error::Format(format!("value `{s}`: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        let mut e = SpeakerEmbedding::new(values)?;
        e.label = label;
        out.push((id, e));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.csv");
        let rows = vec![
            ("a".to_string(), SpeakerEmbedding::new(vec![0.1, -1.0 / 3.0]).unwrap().with_label(4)),
            ("b".to_string(), SpeakerEmbedding::new(vec![1e-300, 2.5]).unwrap()),
        ];
        write_csv(&p, &rows).unwrap();
        assert_eq!(read_csv(&p).unwrap(), rows);
        let q = dir.path().join("e.jsonl");
        write_jsonl(&q, &rows).unwrap();
        let text = std::fs::read_to_string(q).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.starts_with("{\"id\":\"a\",\"label\":4"));
    }
}
