use chrono::{Days, Months, NaiveDate};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DATES_PER_STACK: usize = 5;
pub const MONTHS_BETWEEN_DATES: u32 = 3;
pub const DEFAULT_WINDOW_DAYS: i64 = 15;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DateSchedule {
    pub dates: Vec<NaiveDate>,
    pub window_days: i64,
}

impl DateSchedule {
    pub fn reference(&self) -> NaiveDate {
        self.dates[0]
    }
}

/// Latest admissible reference date: one calendar year plus a day before
/// `today`, so the final date of the schedule still lies strictly in the past.
pub fn latest_reference(today: NaiveDate) -> NaiveDate {
    today
        .checked_sub_months(Months::new(12))
        .and_then(|d| d.checked_sub_days(Days::new(1)))
        .expect("date in range")
}

/// Reference date drawn uniformly from `[latest - jitter_days, latest]`,
/// followed by four dates at 3-month increments.
pub fn build_date_schedule(rng: &mut impl Rng, today: NaiveDate, jitter_days: u32) -> Result<DateSchedule> {
    if jitter_days > 365 {
        return Err(Error::InvalidInput(format!("jitter_days must be <= 365, got {jitter_days}")));
    }
    let back = rng.gen_range(0..=jitter_days as u64);
    let reference = latest_reference(today)
        .checked_sub_days(Days::new(back))
        .expect("date in range");
    let dates = (0..DATES_PER_STACK as u32)
        .map(|k| {
            reference
                .checked_add_months(Months::new(k * MONTHS_BETWEEN_DATES))
                .expect("date in range")
        })
        .collect();
    Ok(DateSchedule {
        dates,
        window_days: DEFAULT_WINDOW_DAYS,
    })
}

/// Checks that every gap between consecutive acquisition dates is within
/// `window_days` of the corresponding 3-calendar-month gap of the schedule.
pub fn gaps_are_legal(schedule: &DateSchedule, acquired: &[NaiveDate]) -> bool {
    if acquired.len() != schedule.dates.len() {
        return false;
    }
    let within_window = schedule
        .dates
        .iter()
        .zip(acquired)
        .all(|(s, a)| (*a - *s).num_days().abs() <= schedule.window_days);
    let gaps_ok = schedule.dates.windows(2).zip(acquired.windows(2)).all(|(s, a)| {
        let nominal = (s[1] - s[0]).num_days();
        let actual = (a[1] - a[0]).num_days();
        actual > 0 && (actual - nominal).abs() <= schedule.window_days
    });
    within_window && gaps_ok
}
