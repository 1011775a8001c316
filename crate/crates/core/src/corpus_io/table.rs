use std::io::Write;
use std::path::Path;

use super::Label;
use crate::error::{Error, Result};
use crate::features::FeatureVector;

pub const FEATURE_TABLE_HEADER: &str =
    "path,label,generator,group,nll0,nll1,nll2,h0,h1,h2,d0,d1,d2,delta01,abs_d0,abs_delta01";

/// One image's level-wise features plus its manifest metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRow {
    pub path: String,
    pub label: Label,
    pub generator: String,
    pub group: String,
    pub features: FeatureVector,
}

// 17 significant digits: every f64 survives the text round trip unchanged.
fn num(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn write_feature_table<W: Write>(out: W, rows: &[FeatureRow]) -> Result<()> {
    let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    let header: Vec<&str> = FEATURE_TABLE_HEADER.split(',').collect();
    let to_err = |e: csv::Error| Error::invalid(format!("feature table write failed: {e}"));
    writer.write_record(&header).map_err(to_err)?;
    for row in rows {
        let fv = &row.features;
        let st = fv.statistics();
        let mut record = vec![
            row.path.clone(),
            row.label.to_string(),
            row.generator.clone(),
            row.group.clone(),
        ];
        record.extend(
            fv.nll
                .iter()
                .chain(&fv.h)
                .chain(&st.d)
                .chain([&st.delta01, &st.abs_d0, &st.abs_delta01])
                .map(|&v| num(v)),
        );
        writer.write_record(&record).map_err(to_err)?;
    }
    writer
        .flush()
        .map_err(|e| Error::invalid(format!("feature table write failed: {e}")))?;
    Ok(())
}

/// Writes the feature-table CSV (header always present, even for no rows).
pub fn save_feature_table(rows: &[FeatureRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut buf = std::io::BufWriter::new(file);
    write_feature_table(&mut buf, rows).map_err(|e| Error::format(path, e.to_string()))?;
    buf.flush().map_err(|e| Error::io(path, e))
}

pub fn load_feature_table(path: impl AsRef<Path>) -> Result<Vec<FeatureRow>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_feature_table(&bytes, path)
}

/// Parses a feature table. The level-wise `nll*`/`h*` columns are
/// authoritative; derived columns are recomputed from them.
pub fn parse_feature_table(bytes: &[u8], origin: &Path) -> Result<Vec<FeatureRow>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(bytes);
    let headers = reader
        .headers()
        .map_err(|e| Error::format(origin, format!("unreadable header: {e}")))?
        .clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::format(origin, format!("feature table lacks column `{name}`")))
    };
    let meta = [
        column("path")?,
        column("label")?,
        column("generator")?,
        column("group")?,
    ];
    let mut value_cols = [0usize; 6];
    for (slot, name) in value_cols.iter_mut().zip(["nll0", "nll1", "nll2", "h0", "h1", "h2"]) {
        *slot = column(name)?;
    }

    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| Error::format(origin, format!("row {row}: {e}")))?;
        let get = |k: usize| record.get(k).unwrap_or("").trim();
        let label: Label = get(meta[1])
            .parse()
            .map_err(|e: String| Error::format(origin, format!("row {row}: {e}")))?;
        let mut values = [0.0f64; 6];
        for (v, &k) in values.iter_mut().zip(&value_cols) {
            *v = get(k)
                .parse()
                .map_err(|_| Error::format(origin, format!("row {row}: column `{}` is not a number", &headers[k])))?;
            if !v.is_finite() {
                return Err(Error::format(
                    origin,
                    format!("row {row}: column `{}` is not finite", &headers[k]),
                ));
            }
        }
        rows.push(FeatureRow {
            path: get(meta[0]).to_string(),
            label,
            generator: get(meta[2]).to_string(),
            group: get(meta[3]).to_string(),
            features: FeatureVector {
                nll: [values[0], values[1], values[2]],
                h: [values[3], values[4], values[5]],
            },
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(path: &str, seed: f64) -> FeatureRow {
        FeatureRow {
            path: path.into(),
            label: Label::Synthetic,
            generator: "gen, with comma".into(),
            group: "g".into(),
            features: FeatureVector {
                nll: [3.0 + seed, 2.5 / 3.0, 2.0],
                h: [2.0, 2.2 + seed * 1e-7, std::f64::consts::PI],
            },
        }
    }

    #[test]
    fn empty_table_is_header_only() {
        let mut out = Vec::new();
        write_feature_table(&mut out, &[]).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), format!("{FEATURE_TABLE_HEADER}\n"));
    }

    #[test]
    fn one_record_is_two_lines() {
        let mut out = Vec::new();
        write_feature_table(&mut out, &[row("a.png", 0.0)]).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text.lines().count(), 2);
        // ≥ 9 significant digits
        assert!(text.contains("8.3333333333333337e-1"), "{text}");
    }

    #[test]
    fn round_trip_within_1e_9() {
        let rows: Vec<_> = (0..5).map(|i| row(&format!("img{i}.png"), i as f64 / 7.0)).collect();
        let mut out = Vec::new();
        write_feature_table(&mut out, &rows).unwrap();
        let back = parse_feature_table(&out, Path::new("t.csv")).unwrap();
        assert_eq!(back.len(), rows.len());
        for (a, b) in rows.iter().zip(&back) {
            assert_eq!(a.path, b.path);
            assert_eq!(a.generator, b.generator);
            for l in 0..3 {
                assert!((a.features.nll[l] - b.features.nll[l]).abs() <= 1e-9);
                assert!((a.features.h[l] - b.features.h[l]).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn save_to_unwritable_path_fails() {
        let err = save_feature_table(&[], "/nonexistent-dir/x/features.csv").unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn non_numeric_value_is_rejected() {
        let text = format!("{FEATURE_TABLE_HEADER}\na,real,g,g,1,2,x,1,1,1,0,0,0,0,0,0\n");
        let err = parse_feature_table(text.as_bytes(), Path::new("t.csv")).unwrap_err();
        assert!(err.to_string().contains("nll2"));
    }
}
