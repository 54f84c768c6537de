//! Ingestion of quarter-hourly production records and hourly day-ahead
//! prices, and construction of the moving-average price forecast.
//!
//! Production CSV columns (any order): `timestamp, forecast_MW, actual_MW,
//! capacity_MW`. Price CSV columns: `timestamp, price_EUR_MWh`. Timestamps
//! are naive ISO-8601 local times; an explicit offset is accepted and
//! dropped.

use std::collections::BTreeMap;
use std::path::Path;

use chrono::{DateTime, NaiveDate, NaiveDateTime, Timelike};

use crate::error::{Error, Result};
use crate::market::{DerivativeRule, ForecastCurve};

/// Market cadence, h.
pub const QUARTER: f64 = 0.25;
/// Quarter-hours in a regular day.
pub const QUARTERS_PER_DAY: usize = 96;

pub fn parse_timestamp(s: &str) -> Result<NaiveDateTime> {
    let s = s.trim();
    for fmt in ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M", "%Y-%m-%d %H:%M"] {
        if let Ok(t) = NaiveDateTime::parse_from_str(s, fmt) {
            return Ok(t);
        }
    }
    DateTime::parse_from_rfc3339(s)
        .map(|t| t.naive_local())
        .map_err(|_| Error::Data(format!("unparsable timestamp `{s}`")))
}

/// Column positions by exact header name.
fn columns<const N: usize>(headers: &csv::StringRecord, names: [&str; N]) -> Result<[usize; N]> {
    let mut out = [0; N];
    for (slot, name) in out.iter_mut().zip(names) {
        *slot = headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Data(format!("missing column `{name}`")))?;
    }
    Ok(out)
}

fn number(rec: &csv::StringRecord, col: usize, name: &str, row: usize) -> Result<Option<f64>> {
    let raw = rec.get(col).unwrap_or("").trim();
    if raw.is_empty() {
        return Ok(None);
    }
    raw.parse::<f64>()
        .map(Some)
        .map_err(|_| Error::Data(format!("row {row}: `{name}` value `{raw}` is not a number")))
}

/// One complete day of production data, normalised by capacity.
#[derive(Debug, Clone, PartialEq)]
pub struct ProductionDay {
    pub date: NaiveDate,
    /// Installed capacity, MW (maximum over the day's rows).
    pub capacity: f64,
    /// Forecast fraction of capacity per quarter-hour, clamped to `[0, 1]`.
    pub forecast: Vec<f64>,
    /// Metered fraction of capacity per quarter-hour, clamped to `[0, 1]`.
    pub actual: Vec<f64>,
}

impl ProductionDay {
    /// Forecast curve on `[0, 24)` h, truncated to `[eps, 1 - eps]`.
    pub fn forecast_curve(&self, eps: f64, rule: DerivativeRule) -> Result<ForecastCurve> {
        Ok(ForecastCurve::uniform(0.0, QUARTER, self.forecast.clone(), rule)?.truncated(eps))
    }

    pub fn actual_curve(&self) -> Result<ForecastCurve> {
        ForecastCurve::uniform(0.0, QUARTER, self.actual.clone(), DerivativeRule::Interval)
    }
}

/// Outcome of a multi-day ingestion.
#[derive(Debug)]
pub struct Ingested<T> {
    pub days: Vec<T>,
    /// Rejected dates and the reason.
    pub rejected: Vec<(NaiveDate, Error)>,
}

struct ProdRow {
    row: usize,
    time: NaiveDateTime,
    forecast: Option<f64>,
    actual: Option<f64>,
    capacity: Option<f64>,
}

fn check_day(date: NaiveDate, rows: &[ProdRow]) -> Result<ProductionDay> {
    if rows.len() != QUARTERS_PER_DAY {
        return Err(Error::Incomplete { detail: format!("{date}: {} rows, expected {QUARTERS_PER_DAY}", rows.len()) });
    }
    let mut forecast = Vec::with_capacity(rows.len());
    let mut actual = Vec::with_capacity(rows.len());
    let mut capacity = 0.0f64;
    for (s, r) in rows.iter().enumerate() {
        let minutes = r.time.hour() as usize * 60 + r.time.minute() as usize;
        if minutes != 15 * s || r.time.second() != 0 {
            return Err(Error::Cadence { row: r.row, detail: format!("{} is not the quarter-hour {s} of {date}", r.time) });
        }
        let (Some(f), Some(a), Some(c)) = (r.forecast, r.actual, r.capacity) else {
            return Err(Error::Incomplete { detail: format!("{date}: row {} has an empty field", r.row) });
        };
        if !(c > 0.0) {
            return Err(Error::Data(format!("row {}: capacity must be positive", r.row)));
        }
        capacity = capacity.max(c);
        forecast.push((f / c).clamp(0.0, 1.0));
        actual.push((a / c).clamp(0.0, 1.0));
    }
    Ok(ProductionDay { date, capacity, forecast, actual })
}

/// Reads production records, grouping rows by calendar day.
///
/// Schema problems fail the whole file; gaps, duplicates and cadence breaks
/// reject only the affected day.
pub fn ingest_production_reader(reader: impl std::io::Read) -> Result<Ingested<ProductionDay>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let [ct, cf, ca, cc] = columns(rdr.headers()?, ["timestamp", "forecast_MW", "actual_MW", "capacity_MW"])?;
    let mut by_day: BTreeMap<NaiveDate, Vec<ProdRow>> = BTreeMap::new();
    for (idx, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = idx + 1;
        let time = parse_timestamp(rec.get(ct).unwrap_or(""))?;
        by_day.entry(time.date()).or_default().push(ProdRow {
            row,
            time,
            forecast: number(&rec, cf, "forecast_MW", row)?,
            actual: number(&rec, ca, "actual_MW", row)?,
            capacity: number(&rec, cc, "capacity_MW", row)?,
        });
    }
    let mut out = Ingested { days: Vec::new(), rejected: Vec::new() };
    for (date, mut rows) in by_day {
        rows.sort_by_key(|r| r.time);
        match check_day(date, &rows) {
            Ok(d) => out.days.push(d),
            Err(e) => out.rejected.push((date, e)),
        }
    }
    Ok(out)
}

pub fn ingest_production_csv(path: &Path) -> Result<Ingested<ProductionDay>> {
    ingest_production_reader(std::fs::File::open(path)?)
}

/// Hourly prices keyed by timestamp.
#[derive(Debug, Clone, PartialEq)]
pub struct HourlyPrices {
    pub points: BTreeMap<NaiveDateTime, f64>,
}

pub fn ingest_prices_reader(reader: impl std::io::Read) -> Result<HourlyPrices> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let [ct, cp] = columns(rdr.headers()?, ["timestamp", "price_EUR_MWh"])?;
    let mut points = BTreeMap::new();
    for (idx, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = idx + 1;
        let time = parse_timestamp(rec.get(ct).unwrap_or(""))?;
        if time.minute() != 0 || time.second() != 0 {
            return Err(Error::Cadence { row, detail: format!("{time} is not on the hour") });
        }
        let price = number(&rec, cp, "price_EUR_MWh", row)?
            .ok_or_else(|| Error::Incomplete { detail: format!("row {row} has no price") })?;
        points.insert(time, price);
    }
    Ok(HourlyPrices { points })
}

pub fn ingest_prices_csv(path: &Path) -> Result<HourlyPrices> {
    ingest_prices_reader(std::fs::File::open(path)?)
}

impl HourlyPrices {
    /// Consecutive hourly values from `lookback_hours` before midnight of
    /// `date` to the day's last hour.
    pub fn window(&self, date: NaiveDate, lookback_hours: usize) -> Result<Vec<f64>> {
        let midnight = date.and_hms_opt(0, 0, 0).unwrap();
        let start = midnight - chrono::Duration::hours(lookback_hours as i64);
        (0..lookback_hours + 24)
            .map(|h| {
                let t = start + chrono::Duration::hours(h as i64);
                self.points.get(&t).copied().ok_or_else(|| {
                    if t < midnight {
                        Error::Lookback { required: lookback_hours, available: h }
                    } else {
                        Error::Incomplete { detail: format!("{date}: no price for {t}") }
                    }
                })
            })
            .collect()
    }
}

/// Hourly series linearly interpolated to quarter-hours; past the last hour
/// the final value is held.
pub fn hourly_to_quarters(hourly: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(hourly.len() * 4);
    for (h, &v) in hourly.iter().enumerate() {
        let next = hourly.get(h + 1).copied().unwrap_or(v);
        for s in 0..4 {
            out.push(v + (next - v) * s as f64 / 4.0);
        }
    }
    out
}

/// Quarter-hourly realised prices and the backward moving-average forecast
/// `p_Y(t_s) = mean(Y_{s-1}, ..., Y_{s-n_w})` over the day.
///
/// `hourly` starts `lookback_hours` before midnight and runs to the day's
/// last hour.
pub fn build_price_forecast(hourly: &[f64], lookback_hours: usize, n_w: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if n_w == 0 {
        return Err(Error::invalid("n_w", "must be >= 1"));
    }
    let offset = lookback_hours * 4;
    if offset < n_w {
        return Err(Error::Lookback { required: n_w, available: offset });
    }
    if hourly.len() < lookback_hours + 24 {
        return Err(Error::Incomplete { detail: format!("{} hourly prices, need {}", hourly.len(), lookback_hours + 24) });
    }
    let quarters = hourly_to_quarters(hourly);
    let realized = quarters[offset..offset + QUARTERS_PER_DAY].to_vec();
    let forecast = (0..QUARTERS_PER_DAY)
        .map(|s| {
            let i = offset + s;
            quarters[i - n_w..i].iter().sum::<f64>() / n_w as f64
        })
        .collect();
    Ok((realized, forecast))
}

/// A complete trading day.
#[derive(Debug, Clone, PartialEq)]
pub struct TradingDay {
    pub production: ProductionDay,
    /// Realised quarter-hourly prices.
    pub price_realized: Vec<f64>,
    /// Quarter-hourly price forecast.
    pub price_forecast: Vec<f64>,
}

impl TradingDay {
    pub fn date(&self) -> NaiveDate {
        self.production.date
    }

    pub fn price_curve(&self, rule: DerivativeRule) -> Result<ForecastCurve> {
        ForecastCurve::uniform(0.0, QUARTER, self.price_forecast.clone(), rule)
    }

    pub fn realized_price_curve(&self) -> Result<ForecastCurve> {
        ForecastCurve::uniform(0.0, QUARTER, self.price_realized.clone(), DerivativeRule::Interval)
    }
}

/// Reads `production.csv` and `prices.csv` from `dir` and assembles every
/// day with complete production and enough price history.
pub fn load_dataset(dir: &Path, n_w: usize) -> Result<Ingested<TradingDay>> {
    let prod = ingest_production_csv(&dir.join("production.csv"))?;
    let prices = ingest_prices_csv(&dir.join("prices.csv"))?;
    let lookback = n_w.div_ceil(4) + 1;
    let mut out = Ingested { days: Vec::new(), rejected: prod.rejected };
    for day in prod.days {
        let built = prices.window(day.date, lookback).and_then(|h| build_price_forecast(&h, lookback, n_w));
        match built {
            Ok((price_realized, price_forecast)) => out.days.push(TradingDay { production: day, price_realized, price_forecast }),
            Err(e) => out.rejected.push((day.date, e)),
        }
    }
    Ok(out)
}
