//! Randomized hiding schedule: which of the N cover chunks carry secret
//! semantics, and the capacity/compression accounting that goes with it.
//!
//! Indices are 1-based ({1..N}) and strictly increasing; secret chunks fill
//! selected slots in ascending order. The schedule exists only on the sender
//! side and is never part of a transmission.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{t_prime, LatentSample};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HidingSchedule {
    pub n: usize,
    /// Sorted 1-based cover indices that receive a secret chunk.
    pub indices: Vec<usize>,
}

impl HidingSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.indices.len() > self.n {
            return Err(Error::Schedule(format!(
                "{} selected indices for {} chunks",
                self.indices.len(),
                self.n
            )));
        }
        for pair in self.indices.windows(2) {
            if pair[1] <= pair[0] {
                return Err(Error::Schedule(format!(
                    "indices not strictly increasing at {} .. {}",
                    pair[0], pair[1]
                )));
            }
        }
        if let Some(&first) = self.indices.first() {
            if first < 1 {
                return Err(Error::Schedule("indices are 1-based".into()));
            }
        }
        if let Some(&last) = self.indices.last() {
            if last > self.n {
                return Err(Error::Schedule(format!("index {last} exceeds N={}", self.n)));
            }
        }
        Ok(())
    }

    pub fn m(&self) -> usize {
        self.indices.len()
    }

    pub fn capacity_ratio(&self) -> f64 {
        self.m() as f64 / self.n as f64
    }

    pub fn contains(&self, cover_index: usize) -> bool {
        self.indices.binary_search(&cover_index).is_ok()
    }

    /// Cover index carrying the j-th secret chunk (both 1-based).
    pub fn assignment(&self, j: usize) -> Option<usize> {
        self.indices.get(j.checked_sub(1)?).copied()
    }

    /// Which secret chunk (1-based) a cover index carries, if any.
    pub fn secret_at(&self, cover_index: usize) -> Option<usize> {
        self.indices.binary_search(&cover_index).ok().map(|p| p + 1)
    }
}

/// M = round(r*N), rounding half up.
pub fn hidden_count(n: usize, r: f64) -> usize {
    (r * n as f64 + 0.5).floor() as usize
}

/// Draw a uniformly random M-subset of {1..N} with M = round(r*N).
pub fn draw_schedule(n: usize, r: f64, rng: &mut ChaCha8Rng) -> Result<HidingSchedule> {
    if n == 0 {
        return Err(Error::Schedule("cannot schedule over zero chunks".into()));
    }
    if !(0.0..=1.0).contains(&r) {
        return Err(Error::Schedule(format!("capacity ratio {r} outside [0,1]")));
    }
    let m = hidden_count(n, r);
    let mut pool: Vec<usize> = (1..=n).collect();
    // partial Fisher-Yates: the first m slots are a uniform m-subset
    for i in 0..m {
        let j = i + rand::Rng::random_range(rng, 0..n - i);
        pool.swap(i, j);
    }
    let mut indices: Vec<usize> = pool[..m].to_vec();
    indices.sort_unstable();
    let schedule = HidingSchedule { n, indices };
    schedule.validate()?;
    Ok(schedule)
}

/// CR = CR0 / (1 + r): one transmission carries each cover chunk plus, on
/// average, r secret chunks folded into it.
pub fn compression_ratio(t: usize, h: usize, w: usize, r: f64) -> f64 {
    let latent = 16.0 * t_prime(t) as f64 * (h as f64 / 8.0) * (w as f64 / 8.0);
    let pixels = 3.0 * t as f64 * h as f64 * w as f64;
    (latent / pixels) / (1.0 + r)
}

/// Fold secrets into the selected cover latents. Unselected positions pass
/// through bit-identical. `hide` is the trained fusion model (or any stand-in
/// for tests).
pub fn apply_schedule(
    cover: &[LatentSample],
    secret: &[LatentSample],
    schedule: &HidingSchedule,
    mut hide: impl FnMut(&LatentSample, &LatentSample) -> LatentSample,
) -> Result<Vec<LatentSample>> {
    schedule.validate()?;
    if cover.len() != schedule.n {
        return Err(Error::Schedule(format!(
            "schedule over {} chunks applied to {} cover latents",
            schedule.n,
            cover.len()
        )));
    }
    if secret.len() < schedule.m() {
        return Err(Error::Schedule(format!(
            "schedule needs {} secret chunks, only {} available",
            schedule.m(),
            secret.len()
        )));
    }
    let mut out = Vec::with_capacity(cover.len());
    for (pos, cov) in cover.iter().enumerate() {
        let cover_index = pos + 1;
        match schedule.secret_at(cover_index) {
            Some(j) => out.push(hide(cov, &secret[j - 1])),
            None => out.push(cov.clone()),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};
    use ndarray::{ArrayD, IxDyn};

    #[test]
    fn zero_ratio_is_empty_schedule() {
        let s = draw_schedule(7, 0.0, &mut stream(0, 0, Stream::Schedule)).unwrap();
        assert_eq!(s.m(), 0);
        assert!(s.indices.is_empty());
    }

    #[test]
    fn full_ratio_selects_everything() {
        let s = draw_schedule(4, 1.0, &mut stream(0, 0, Stream::Schedule)).unwrap();
        assert_eq!(s.indices, vec![1, 2, 3, 4]);
    }

    #[test]
    fn rounding_is_half_up() {
        assert_eq!(hidden_count(5, 0.5), 3);
        assert_eq!(hidden_count(5, 0.3), 2);
        assert_eq!(hidden_count(10, 0.45), 5);
        assert_eq!(hidden_count(10, 0.44), 4);
        assert_eq!(hidden_count(4, 0.0), 0);
    }

    #[test]
    fn draws_are_deterministic_per_rng_state() {
        let a = draw_schedule(20, 0.35, &mut stream(5, 1, Stream::Schedule)).unwrap();
        let b = draw_schedule(20, 0.35, &mut stream(5, 1, Stream::Schedule)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn selection_frequency_is_uniform() {
        let n = 10;
        let r = 0.4;
        let draws = 20_000;
        let mut counts = vec![0usize; n + 1];
        let mut rng = stream(2, 0, Stream::Schedule);
        for _ in 0..draws {
            for ix in draw_schedule(n, r, &mut rng).unwrap().indices {
                counts[ix] += 1;
            }
        }
        for ix in 1..=n {
            let freq = counts[ix] as f64 / draws as f64;
            assert!((freq - r).abs() < 0.02, "index {ix} frequency {freq}");
        }
    }

    #[test]
    fn compression_ratio_matches_published_table() {
        let rows = [
            (0.0, 0.033),
            (0.2, 0.028),
            (0.4, 0.024),
            (0.6, 0.021),
            (0.8, 0.019),
            (1.0, 0.016),
        ];
        for (r, want) in rows {
            let cr = compression_ratio(5, 64, 64, r);
            assert!(
                (cr - want).abs() <= 1.05e-3,
                "r={r}: CR {cr:.4} vs table {want}"
            );
        }
        // independent of spatial size
        assert!((compression_ratio(5, 32, 64, 0.4) - compression_ratio(5, 64, 64, 0.4)).abs() < 1e-15);
    }

    fn latents(n: usize, fill: f64) -> Vec<LatentSample> {
        (0..n)
            .map(|i| LatentSample {
                values: ArrayD::from_elem(IxDyn(&[2, 2]), fill + i as f64),
            })
            .collect()
    }

    #[test]
    fn apply_schedule_identity_when_empty() {
        let cover = latents(4, 0.0);
        let schedule = HidingSchedule { n: 4, indices: vec![] };
        let out = apply_schedule(&cover, &[], &schedule, |_, _| unreachable!()).unwrap();
        for (a, b) in out.iter().zip(cover.iter()) {
            assert_eq!(a.values, b.values);
        }
    }

    #[test]
    fn apply_schedule_touches_exactly_selected() {
        let cover = latents(4, 0.0);
        let secret = latents(2, 100.0);
        let schedule = HidingSchedule { n: 4, indices: vec![2, 4] };
        let out = apply_schedule(&cover, &secret, &schedule, |c, s| LatentSample {
            values: &c.values + &s.values,
        })
        .unwrap();
        assert_eq!(out[0].values, cover[0].values);
        assert_eq!(out[2].values, cover[2].values);
        // slot 2 gets secret 1, slot 4 gets secret 2 (ascending assignment)
        assert_eq!(out[1].values, &cover[1].values + &secret[0].values);
        assert_eq!(out[3].values, &cover[3].values + &secret[1].values);
    }

    #[test]
    fn apply_schedule_rejects_short_secret_stream() {
        let cover = latents(4, 0.0);
        let secret = latents(1, 1.0);
        let schedule = HidingSchedule { n: 4, indices: vec![1, 3] };
        let err = apply_schedule(&cover, &secret, &schedule, |c, _| c.clone()).unwrap_err();
        assert!(matches!(err, Error::Schedule(_)));
    }

    #[test]
    fn schedule_serializes_to_json() {
        let s = HidingSchedule { n: 6, indices: vec![2, 3, 5] };
        let json = serde_json::to_string(&s).unwrap();
        let back: HidingSchedule = serde_json::from_str(&json).unwrap();
        assert_eq!(s, back);
    }

    #[test]
    fn validate_catches_malformed_schedules() {
        assert!(HidingSchedule { n: 3, indices: vec![1, 1] }.validate().is_err());
        assert!(HidingSchedule { n: 3, indices: vec![0] }.validate().is_err());
        assert!(HidingSchedule { n: 3, indices: vec![4] }.validate().is_err());
        assert!(HidingSchedule { n: 3, indices: vec![3, 2] }.validate().is_err());
        assert!(HidingSchedule { n: 3, indices: vec![1, 3] }.validate().is_ok());
    }
}
