use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::{Dataset, FeatureKind, FeatureSpec, LabourState, SyntheticTruth, UnitRecord, HORIZON_MONTHS};
use crate::{McfError, Result, N_ARMS};

const TREATMENT_COL: &str = "treatment";
const SPELL_COL: &str = "spell_days";
const START_COL: &str = "Daction";
const PSEUDO_COL: &str = "pseudo_start";
const PRIOR_COL: &str = "prior_almp";

fn header(spec: &[FeatureSpec]) -> Vec<String> {
    let mut h = vec!["id".to_string()];
    h.extend(spec.iter().map(|f| f.name.clone()));
    h.push(TREATMENT_COL.into());
    h.extend((1..=HORIZON_MONTHS).map(|m| format!("m{m}")));
    h.push(SPELL_COL.into());
    h.push(START_COL.into());
    h.push(PSEUDO_COL.into());
    h.push(PRIOR_COL.into());
    h
}

pub fn write_feature_spec(spec: &[FeatureSpec], path: &Path) -> Result<()> {
    let f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(f, spec)?;
    Ok(())
}

pub fn load_feature_spec(path: &Path) -> Result<Vec<FeatureSpec>> {
    let spec: Vec<FeatureSpec> = serde_json::from_reader(File::open(path)?)?;
    super::validate_spec(&spec)?;
    Ok(spec)
}

/// Writes units as CSV; categorical values are written as their labels.
pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header(&ds.spec))?;
    for u in &ds.units {
        let mut rec = Vec::with_capacity(ds.spec.len() + HORIZON_MONTHS + 6);
        rec.push(u.id.clone());
        for (f, &v) in ds.spec.iter().zip(&u.features) {
            match f.category_label(v as usize) {
                Some(label) => rec.push(label.to_string()),
                None => rec.push(format!("{v}")),
            }
        }
        rec.push(u.treatment.to_string());
        rec.extend(u.outcomes.iter().take(HORIZON_MONTHS).map(|s| s.code().to_string()));
        rec.push(u.spell_length_days.to_string());
        rec.push(u.start_day.map(|d| d.to_string()).unwrap_or_default());
        rec.push(u8::from(u.is_pseudo_start).to_string());
        rec.push(u8::from(u.prior_spell_almp).to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn parse_err(row: usize, column: &str, message: impl Into<String>) -> McfError {
    McfError::Parse {
        row,
        column: column.to_string(),
        message: message.into(),
    }
}

fn parse_flag(raw: &str, row: usize, column: &str) -> Result<bool> {
    match raw.trim() {
        "0" | "false" => Ok(false),
        "1" | "true" => Ok(true),
        other => Err(parse_err(row, column, format!("expected 0/1, found `{other}`"))),
    }
}

fn parse_row(rec: &csv::StringRecord, row: usize, cols: &[String], spec: &[FeatureSpec]) -> Result<UnitRecord> {
    let get = |k: usize| rec.get(k).unwrap_or("").trim();
    let id = get(0).to_string();
    if id.is_empty() {
        return Err(parse_err(row, "id", "empty id"));
    }
    let mut features = Vec::with_capacity(spec.len());
    for (j, f) in spec.iter().enumerate() {
        let raw = get(1 + j);
        if raw.is_empty() {
            return Err(parse_err(row, &f.name, "missing value"));
        }
        let v = match &f.kind {
            FeatureKind::Ordered => raw
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| parse_err(row, &f.name, format!("cannot parse `{raw}` as a number")))?,
            FeatureKind::Categorical { .. } => f
                .category_code(raw)
                .ok_or_else(|| parse_err(row, &f.name, format!("unknown category label `{raw}`")))?
                as f64,
        };
        features.push(v);
    }
    let mut k = 1 + spec.len();
    let raw = get(k);
    let treatment = raw
        .parse::<i64>()
        .map_err(|_| parse_err(row, TREATMENT_COL, format!("cannot parse `{raw}` as an arm index")))?;
    if !(0..N_ARMS as i64).contains(&treatment) {
        return Err(parse_err(
            row,
            TREATMENT_COL,
            format!("arm index out of {{0..3}}: found {treatment}"),
        ));
    }
    k += 1;
    let mut outcomes = Vec::with_capacity(HORIZON_MONTHS);
    for m in 0..HORIZON_MONTHS {
        let raw = get(k + m);
        outcomes.push(
            LabourState::from_code(raw)
                .ok_or_else(|| parse_err(row, &cols[k + m], format!("expected E, U or O, found `{raw}`")))?,
        );
    }
    k += HORIZON_MONTHS;
    let raw = get(k);
    let spell_length_days = raw
        .parse::<u32>()
        .map_err(|_| parse_err(row, SPELL_COL, format!("cannot parse `{raw}` as days")))?;
    let raw = get(k + 1);
    let start_day = if raw.is_empty() {
        None
    } else {
        Some(
            raw.parse::<u32>()
                .map_err(|_| parse_err(row, START_COL, format!("cannot parse `{raw}` as days")))?,
        )
    };
    Ok(UnitRecord {
        id,
        features,
        treatment: treatment as usize,
        outcomes,
        spell_length_days,
        start_day,
        is_pseudo_start: parse_flag(get(k + 2), row, PSEUDO_COL)?,
        prior_spell_almp: parse_flag(get(k + 3), row, PRIOR_COL)?,
    })
}

/// Reads a CSV written in the layout of [`write_dataset`].
///
/// Rows are numbered from 1 (the header is row 0). Every malformed row is
/// logged; the error returned names the first one.
pub fn load_dataset(path: &Path, spec: &[FeatureSpec]) -> Result<Dataset> {
    super::validate_spec(spec)?;
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_path(path)?;
    let cols: Vec<String> = rdr.headers()?.iter().map(|s| s.trim().to_string()).collect();
    let expected = header(spec);
    for name in &expected {
        if !cols.contains(name) {
            return Err(McfError::data(format!("missing column `{name}`")));
        }
    }
    if cols != expected {
        return Err(McfError::data(format!(
            "columns must appear in the order: {}",
            expected.join(",")
        )));
    }
    let mut units = Vec::new();
    let mut bad: Vec<McfError> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec?;
        if rec.len() != cols.len() {
            bad.push(parse_err(row, "*", format!("{} fields, expected {}", rec.len(), cols.len())));
            continue;
        }
        match parse_row(&rec, row, &cols, spec) {
            Ok(u) => units.push(u),
            Err(e) => bad.push(e),
        }
    }
    if !bad.is_empty() {
        for e in &bad {
            log::warn!("malformed row: {e}");
        }
        log::warn!("{} malformed rows in {}", bad.len(), path.display());
        return Err(bad.swap_remove(0));
    }
    if units.is_empty() {
        return Err(McfError::data(format!("{} contains no rows", path.display())));
    }
    log::info!("read {} rows from {}", units.len(), path.display());
    Dataset::new(spec.to_vec(), units, None)
}

/// Writes the conditional-mean potential outcomes, one row per unit and outcome.
pub fn write_truth(ds: &Dataset, truth: &SyntheticTruth, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "id,outcome,expected_0,expected_1,expected_2,expected_3,realised_0,realised_1,realised_2,realised_3")?;
    for (i, u) in ds.units.iter().enumerate() {
        for (k, o) in truth.outcomes.iter().enumerate() {
            let e = truth.expected[i][k];
            let p = truth.potential[i][k];
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{}",
                u.id,
                o.id(),
                e[0],
                e[1],
                e[2],
                e[3],
                p[0],
                p[1],
                p[2],
                p[3]
            )?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, SynthConfig};

    fn small() -> Dataset {
        let cfg = SynthConfig {
            n: 40,
            shares: [0.2, 0.2, 0.2],
            ..SynthConfig::default()
        };
        generate_synthetic(&cfg, 3).unwrap()
    }

    #[test]
    fn round_trip_preserves_units() {
        let ds = small();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        write_dataset(&ds, &p).unwrap();
        let back = load_dataset(&p, &ds.spec).unwrap();
        assert_eq!(back.units, ds.units);
    }

    #[test]
    fn unknown_label_and_bad_arm_are_reported() {
        let ds = small();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        write_dataset(&ds, &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        let country = ds.feature_index("country").unwrap();

        let mut fields: Vec<String> = lines[3].split(',').map(String::from).collect();
        fields[1 + country] = "Atlantis".into();
        let mut edited = lines.clone();
        let joined = fields.join(",");
        edited[3] = &joined;
        std::fs::write(&p, edited.join("\n")).unwrap();
        match load_dataset(&p, &ds.spec).unwrap_err() {
            McfError::Parse { row, column, .. } => {
                assert_eq!(row, 3);
                assert_eq!(column, "country");
            }
            e => panic!("unexpected {e}"),
        }

        let mut fields: Vec<String> = lines[2].split(',').map(String::from).collect();
        fields[1 + ds.spec.len()] = "4".into();
        let mut edited = lines.clone();
        let joined = fields.join(",");
        edited[2] = &joined;
        std::fs::write(&p, edited.join("\n")).unwrap();
        let err = load_dataset(&p, &ds.spec).unwrap_err().to_string();
        assert!(err.contains("arm index out of {0..3}"), "{err}");
    }

    #[test]
    fn empty_file_and_missing_column() {
        let ds = small();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        std::fs::write(&p, header(&ds.spec).join(",") + "\n").unwrap();
        assert!(load_dataset(&p, &ds.spec).unwrap_err().to_string().contains("no rows"));
        let mut h = header(&ds.spec);
        h.retain(|c| c != "Daction");
        std::fs::write(&p, h.join(",") + "\n").unwrap();
        assert!(load_dataset(&p, &ds.spec)
            .unwrap_err()
            .to_string()
            .contains("missing column `Daction`"));
    }
}
