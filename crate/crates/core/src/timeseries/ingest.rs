use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::path::Path;

use chrono::{DateTime, NaiveDateTime};
use serde::{Deserialize, Serialize};

use super::{Result, SensorSeries, TimeSeriesError};

/// Column names for the long-format reading file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub timestamp: String,
    pub sensor_id: String,
    pub value: String,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            timestamp: "timestamp".into(),
            sensor_id: "sensor_id".into(),
            value: "value".into(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct IngestReport {
    pub rows_read: usize,
    /// Rows with an unparseable or non-finite value or timestamp.
    pub rows_dropped: usize,
    /// Later rows repeating an earlier timestamp for the same sensor.
    pub duplicates_dropped: usize,
    pub sensors: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SensorMeta {
    pub latitude: f64,
    pub longitude: f64,
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|source| TimeSeriesError::Open { path: path.display().to_string(), source })
}

fn column(headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h.trim().trim_start_matches('\u{feff}') == name)
        .ok_or_else(|| TimeSeriesError::MissingColumn(name.to_string()))
}

/// Integer epoch seconds, RFC 3339, or a naive ISO-8601 date-time read as UTC.
pub(crate) fn parse_timestamp(raw: &str) -> Option<i64> {
    let raw = raw.trim();
    if let Ok(secs) = raw.parse::<i64>() {
        return Some(secs);
    }
    if let Ok(dt) = DateTime::parse_from_rfc3339(raw) {
        return Some(dt.timestamp());
    }
    ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M", "%Y-%m-%d %H:%M"]
        .iter()
        .find_map(|fmt| NaiveDateTime::parse_from_str(raw, fmt).ok())
        .map(|dt| dt.and_utc().timestamp())
}

/// Reads a long-format CSV (`timestamp,sensor_id,value`, any column order)
/// into one series per sensor, sorted by sensor id.
pub fn ingest_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<(Vec<SensorSeries>, IngestReport)> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_reader(open(path)?);
    let headers = reader.headers()?.clone();
    let (ti, si, vi) = (
        column(&headers, &schema.timestamp)?,
        column(&headers, &schema.sensor_id)?,
        column(&headers, &schema.value)?,
    );

    let mut report = IngestReport::default();
    let mut by_sensor: BTreeMap<String, Vec<(i64, f64)>> = BTreeMap::new();
    for record in reader.records() {
        let record = record?;
        report.rows_read += 1;
        let parsed = (|| {
            let ts = parse_timestamp(record.get(ti)?)?;
            let id = record.get(si)?.trim();
            let value: f64 = record.get(vi)?.trim().parse().ok()?;
            (!id.is_empty() && value.is_finite()).then(|| (ts, id.to_string(), value))
        })();
        match parsed {
            Some((ts, id, value)) => by_sensor.entry(id).or_default().push((ts, value)),
            None => report.rows_dropped += 1,
        }
    }
    if by_sensor.is_empty() {
        return Err(TimeSeriesError::NoValidRows(path.display().to_string()));
    }

    let series = by_sensor
        .into_iter()
        .map(|(id, mut samples)| {
            samples.sort_by_key(|s| s.0);
            let before = samples.len();
            samples.dedup_by_key(|s| s.0);
            report.duplicates_dropped += before - samples.len();
            SensorSeries::new(id, samples)
        })
        .collect::<Vec<_>>();
    report.sensors = series.len();
    Ok((series, report))
}

/// Reads `sensor_id,lat,lon`.
pub fn read_metadata(path: impl AsRef<Path>) -> Result<HashMap<String, SensorMeta>> {
    let path = path.as_ref();
    let mut reader = csv::Reader::from_reader(open(path)?);
    let headers = reader.headers()?.clone();
    let (si, la, lo) = (column(&headers, "sensor_id")?, column(&headers, "lat")?, column(&headers, "lon")?);
    let mut out = HashMap::new();
    for record in reader.records() {
        let record = record?;
        let parse = |i: usize| record.get(i).and_then(|v| v.trim().parse::<f64>().ok());
        if let (Some(id), Some(latitude), Some(longitude)) = (record.get(si), parse(la), parse(lo)) {
            out.insert(id.trim().to_string(), SensorMeta { latitude, longitude });
        }
    }
    Ok(out)
}

/// Copies coordinates onto matching series; returns ids that had none.
pub fn apply_metadata(series: &mut [SensorSeries], meta: &HashMap<String, SensorMeta>) -> Vec<String> {
    let mut missing = Vec::new();
    for s in series {
        match meta.get(&s.sensor_id) {
            Some(m) => {
                s.latitude = m.latitude;
                s.longitude = m.longitude;
            }
            None => missing.push(s.sensor_id.clone()),
        }
    }
    missing
}

#[cfg(test)]
mod tests {
    use std::io::Write;

    use super::*;

    fn write(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn two_sensors_three_rows() {
        let f = write(
            "timestamp,sensor_id,value\n0,a,1\n0,b,2\n300,a,1.5\n300,b,2.5\n600,a,1.7\n600,b,2.7\n",
        );
        let (series, report) = ingest_csv(f.path(), &CsvSchema::default()).unwrap();
        assert_eq!(series.len(), 2);
        assert!(series.iter().all(|s| s.len() == 3));
        assert_eq!(report.rows_dropped, 0);
    }

    #[test]
    fn nan_row_is_dropped_and_counted() {
        let f = write("timestamp,sensor_id,value\r\n0,a,1\r\n300,a,NaN\r\n600,a,2\r\n");
        let (series, report) = ingest_csv(f.path(), &CsvSchema::default()).unwrap();
        assert_eq!(series[0].len(), 2);
        assert_eq!(report.rows_dropped, 1);
    }

    #[test]
    fn iso_timestamps_and_reordered_columns() {
        let f = write("value,sensor_id,timestamp\n3,x,2024-01-01T00:05:00Z\n2,x,2024-01-01 00:00:00\n");
        let (series, _) = ingest_csv(f.path(), &CsvSchema::default()).unwrap();
        let s = &series[0].samples;
        assert_eq!(s[1].0 - s[0].0, 300);
        assert_eq!(s[0].1, 2.0);
    }

    #[test]
    fn missing_column_and_empty_file_are_errors() {
        let f = write("timestamp,sensor,value\n0,a,1\n");
        assert!(matches!(
            ingest_csv(f.path(), &CsvSchema::default()),
            Err(TimeSeriesError::MissingColumn(c)) if c == "sensor_id"
        ));
        let f = write("timestamp,sensor_id,value\n0,a,oops\n");
        assert!(matches!(ingest_csv(f.path(), &CsvSchema::default()), Err(TimeSeriesError::NoValidRows(_))));
        assert!(matches!(
            ingest_csv("/nonexistent/readings.csv", &CsvSchema::default()),
            Err(TimeSeriesError::Open { .. })
        ));
    }

    #[test]
    fn duplicate_timestamps_keep_first() {
        let f = write("timestamp,sensor_id,value\n0,a,1\n0,a,9\n300,a,2\n");
        let (series, report) = ingest_csv(f.path(), &CsvSchema::default()).unwrap();
        assert_eq!(series[0].samples, vec![(0, 1.0), (300, 2.0)]);
        assert_eq!(report.duplicates_dropped, 1);
    }

    #[test]
    fn metadata_applies_coordinates() {
        let f = write("sensor_id,lat,lon\na,32.1,-106.5\n");
        let meta = read_metadata(f.path()).unwrap();
        let mut series = vec![SensorSeries::new("a", vec![]), SensorSeries::new("b", vec![])];
        let missing = apply_metadata(&mut series, &meta);
        assert_eq!(series[0].latitude, 32.1);
        assert_eq!(missing, vec!["b".to_string()]);
    }
}
