use std::fs::File;
use std::io::Read;
use std::path::Path;

use chrono::{DateTime, NaiveDateTime};

use super::{RawSeries, DEFAULT_CHANNELS};
use crate::error::DataError;

/// Column names used when reading a CSV file.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvColumns {
    pub timestamp: String,
    pub area: String,
    pub channels: Vec<String>,
}

impl Default for CsvColumns {
    fn default() -> Self {
        Self {
            timestamp: "HourUTC".into(),
            area: "PriceArea".into(),
            channels: DEFAULT_CHANNELS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

const TIMESTAMP_FORMATS: [&str; 4] = [
    "%Y-%m-%dT%H:%M:%S",
    "%Y-%m-%d %H:%M:%S",
    "%Y-%m-%dT%H:%M",
    "%Y-%m-%d %H:%M",
];

/// Parses an ISO-8601 timestamp, with or without offset (offsets are
/// converted to UTC).
pub fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    let s = s.trim();
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Some(dt.naive_utc());
    }
    let s = s.strip_suffix('Z').unwrap_or(s);
    TIMESTAMP_FORMATS
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
}

pub fn format_timestamp(t: NaiveDateTime) -> String {
    t.format("%Y-%m-%dT%H:%M:%S").to_string()
}

fn is_missing(cell: &str) -> bool {
    matches!(cell.trim(), "" | "NA" | "NaN" | "nan" | "null")
}

/// Reads CSV data from any reader. Rows of other areas are skipped when
/// `area` is given; the result is sorted by timestamp (stable).
pub fn read_csv<R: Read>(reader: R, area: Option<&str>, columns: &CsvColumns) -> Result<RawSeries, DataError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| DataError::MissingColumn(name.to_string()))
    };
    let ts_col = find(&columns.timestamp)?;
    let area_col = area.map(|_| find(&columns.area)).transpose()?;
    let channel_cols = columns
        .channels
        .iter()
        .map(|c| find(c))
        .collect::<Result<Vec<_>, _>>()?;

    let mut rows: Vec<(NaiveDateTime, Vec<f64>)> = Vec::new();
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        if let (Some(want), Some(col)) = (area, area_col) {
            if record.get(col).map(str::trim) != Some(want) {
                continue;
            }
        }
        let raw_ts = record.get(ts_col).unwrap_or("");
        let t = parse_timestamp(raw_ts).ok_or_else(|| DataError::Parse {
            line,
            column: columns.timestamp.clone(),
            value: raw_ts.to_string(),
        })?;
        let mut vals = Vec::with_capacity(channel_cols.len());
        for (name, &col) in columns.channels.iter().zip(&channel_cols) {
            let cell = record.get(col).unwrap_or("");
            if is_missing(cell) {
                vals.push(f64::NAN);
                continue;
            }
            let v: f64 = cell.trim().parse().map_err(|_| DataError::Parse {
                line,
                column: name.clone(),
                value: cell.to_string(),
            })?;
            vals.push(v);
        }
        rows.push((t, vals));
    }
    if rows.is_empty() {
        let scope = area.map(|a| format!(" for area `{a}`")).unwrap_or_default();
        return Err(DataError::Empty(scope));
    }
    rows.sort_by_key(|r| r.0);
    let (timestamps, values) = rows.into_iter().unzip();
    Ok(RawSeries {
        timestamps,
        area: area.unwrap_or("").to_string(),
        channel_names: columns.channels.clone(),
        values,
    })
}

/// Loads `path`; see [`read_csv`].
pub fn load_csv(path: &Path, area: Option<&str>, columns: &CsvColumns) -> Result<RawSeries, DataError> {
    let file = File::open(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_csv(file, area, columns)
}

#[cfg(test)]
mod tests {
    use super::*;

    const FIXTURE: &str = "\
HourUTC,PriceArea,OffshoreWindPower,OnshoreWindPower,SolarPowerProd,GrossConsumptionMWh
2019-01-01T00:00:00,DK1,100.5,200.0,0.0,3000
2019-01-01T00:00:00,DK2,10.0,20.0,0.0,1500
2019-01-01T01:00:00,DK1,101.5,201.0,0.0,3010
2019-01-01T02:00:00,DK1,102.5,202.0,0.0,3020
2019-01-01T01:00:00,DK2,11.0,21.0,0.0,1510
2019-01-01T03:00:00,DK1,103.5,203.0,1.5,3030
2019-01-01T04:00:00,DK1,104.5,204.0,2.5,3040
2019-01-01T05:00:00,DK1,105.5,205.0,3.5,3050
2019-01-01T06:00:00,DK1,106.5,206.0,4.5,3060
2019-01-01T07:00:00,DK1,107.5,207.0,5.5,3070
2019-01-01T08:00:00,DK1,108.5,208.0,6.5,3080
2019-01-01T09:00:00,DK1,109.5,209.0,7.5,3090
";

    #[test]
    fn reads_one_area_with_exact_values() {
        let s = read_csv(FIXTURE.as_bytes(), Some("DK1"), &CsvColumns::default()).unwrap();
        assert_eq!(s.len(), 10);
        assert_eq!(s.channels(), 3);
        assert_eq!(s.area, "DK1");
        for (i, row) in s.values.iter().enumerate() {
            let expected_solar = if i < 3 { 0.0 } else { i as f64 - 1.5 };
            assert_eq!(row, &vec![100.5 + i as f64, 200.0 + i as f64, expected_solar]);
        }
        assert_eq!(format_timestamp(s.timestamps[9]), "2019-01-01T09:00:00");
    }

    #[test]
    fn missing_column_is_named() {
        let cols = CsvColumns {
            channels: vec!["WavePower".into()],
            ..CsvColumns::default()
        };
        match read_csv(FIXTURE.as_bytes(), Some("DK1"), &cols) {
            Err(DataError::MissingColumn(c)) => assert_eq!(c, "WavePower"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_cell_reports_line() {
        let text = "HourUTC,PriceArea,OffshoreWindPower,OnshoreWindPower,SolarPowerProd\n\
                    2019-01-01T00:00:00,DK1,1,2,3\n\
                    2019-01-01T01:00:00,DK1,1,oops,3\n";
        match read_csv(text.as_bytes(), Some("DK1"), &CsvColumns::default()) {
            Err(DataError::Parse { line, column, value }) => {
                assert_eq!((line, column.as_str(), value.as_str()), (3, "OnshoreWindPower", "oops"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_area_is_empty() {
        assert!(matches!(
            read_csv(FIXTURE.as_bytes(), Some("SE3"), &CsvColumns::default()),
            Err(DataError::Empty(_))
        ));
    }

    #[test]
    fn empty_cells_become_missing() {
        let text = "HourUTC,PriceArea,OffshoreWindPower,OnshoreWindPower,SolarPowerProd\n\
                    2019-01-01 00:00,DK1,1,,3\n";
        let s = read_csv(text.as_bytes(), Some("DK1"), &CsvColumns::default()).unwrap();
        assert!(s.values[0][1].is_nan());
    }

    #[test]
    fn timestamp_variants() {
        let a = parse_timestamp("2019-01-01T05:00:00").unwrap();
        assert_eq!(parse_timestamp("2019-01-01 05:00").unwrap(), a);
        assert_eq!(parse_timestamp("2019-01-01T05:00:00Z").unwrap(), a);
        assert_eq!(parse_timestamp("2019-01-01T06:00:00+01:00").unwrap(), a);
        assert!(parse_timestamp("yesterday").is_none());
    }
}
