//! ISO-8601 timestamps as UTC seconds since the Unix epoch.

use chrono::{DateTime, Datelike, NaiveDate, NaiveDateTime, Timelike, Utc};

/// Broken-down UTC calendar fields of a timestamp.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Civil {
    pub year: i64,
    /// 1..=12
    pub month: u32,
    /// 1..=31
    pub day: u32,
    /// 0 = Monday .. 6 = Sunday
    pub weekday: u32,
    pub hour: u32,
    pub minute: u32,
    pub second: u32,
}

/// Days since 1970-01-01, or `None` for an invalid date.
pub fn days_from_civil(year: i64, month: u32, day: u32) -> Option<i64> {
    let d = NaiveDate::from_ymd_opt(i32::try_from(year).ok()?, month, day)?;
    Some(d.signed_duration_since(NaiveDate::default()).num_days())
}

/// Timestamps outside the representable calendar map to the epoch.
pub fn civil(ts: i64) -> Civil {
    let t = DateTime::from_timestamp(ts, 0).unwrap_or(DateTime::UNIX_EPOCH);
    Civil {
        year: t.year() as i64,
        month: t.month(),
        day: t.day(),
        weekday: t.weekday().num_days_from_monday(),
        hour: t.hour(),
        minute: t.minute(),
        second: t.second(),
    }
}

const TIME_FORMATS: [&str; 2] = ["%Y-%m-%dT%H:%M", "%Y-%m-%dT%H:%M:%S%.f"];

/// Parses `YYYY-MM-DD[(T| )HH:MM[:SS[.fff]]][Z|±HH:MM]` into UTC epoch seconds.
///
/// Fractional seconds are truncated. Anything else, including out-of-range
/// calendar fields, yields `None`.
pub fn parse_iso8601(s: &str) -> Option<i64> {
    let s = s.trim();
    let b = s.as_bytes();
    if b.len() < 10 || b[4] != b'-' || !b[..4].iter().all(u8::is_ascii_digit) {
        return None;
    }
    if b.len() == 10 {
        return NaiveDate::parse_from_str(s, "%Y-%m-%d").ok().and_then(|d| d.and_hms_opt(0, 0, 0)).map(|t| t.and_utc().timestamp());
    }
    if b[10] != b'T' && b[10] != b' ' {
        return None;
    }
    let mut norm = alloc::string::String::from(s);
    norm.replace_range(10..11, "T");
    if let Some(naive) = norm.strip_suffix('Z') {
        return TIME_FORMATS.iter().find_map(|f| NaiveDateTime::parse_from_str(naive, f).ok()).map(|t| t.and_utc().timestamp());
    }
    TIME_FORMATS
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(&norm, f).ok().map(|t| t.and_utc().timestamp()))
        .or_else(|| {
            TIME_FORMATS.iter().flat_map(|f| [alloc::format!("{f}%:z"), alloc::format!("{f}%z")]).find_map(|f| DateTime::parse_from_str(&norm, &f).ok().map(|t| t.timestamp()))
        })
}

/// Formats epoch seconds as `YYYY-MM-DDTHH:MM:SSZ`; unrepresentable values as plain seconds.
pub fn format_iso8601(ts: i64) -> alloc::string::String {
    match DateTime::<Utc>::from_timestamp(ts, 0) {
        Some(t) => alloc::format!("{}", t.format("%Y-%m-%dT%H:%M:%SZ")),
        None => alloc::format!("{ts}"),
    }
}
