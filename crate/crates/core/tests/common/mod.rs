//! Synthetic datasets shared by the integration tests.
#![allow(dead_code)]

use issr::data::{chronological_split, InteractionLog};
use issr::SplitDataset;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const RATIOS: (f64, f64, f64) = (0.7, 0.1, 0.2);

/// Two clusters of `items / 2` arranged on rings. Each user stays in one
/// cluster and steps 1 or 2 positions forward along its ring, with an
/// occasional jump to a random item of either cluster.
pub fn two_cluster_log(seed: u64, users: usize, items: usize, len: std::ops::Range<usize>) -> InteractionLog {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = items / 2;
    let mut events = Vec::new();
    for u in 0..users {
        let cluster = u % 2;
        let n = rng.gen_range(len.clone());
        let mut pos = rng.gen_range(0..half);
        for t in 0..n {
            let item = if rng.gen_bool(0.1) {
                rng.gen_range(0..items)
            } else {
                pos = (pos + rng.gen_range(1..=2)) % half;
                cluster * half + pos
            };
            events.push((format!("u{u}"), format!("i{item}"), t as i64));
        }
    }
    InteractionLog::from_events(events)
}

pub fn two_cluster_split(seed: u64) -> SplitDataset {
    chronological_split(&two_cluster_log(seed, 200, 50, 14..24), RATIOS).unwrap()
}

/// Ratings-like log. Item `i` belongs to genre `i % genres` and has
/// popularity ∝ 1/(i / genres + 1) within it. Users rate in sessions of 5 to
/// 15 items from one genre, picking the session genre among their three
/// favourites. History lengths follow `20 + 600 u³` for uniform `u`
/// (mean 170, median 95).
pub fn movielens_like_log(seed: u64, users: usize, items: usize, genres: usize) -> InteractionLog {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per_genre = items / genres;
    let mut acc = 0.0;
    let cum: Vec<f64> = (0..per_genre)
        .map(|r| {
            acc += 1.0 / (r + 1) as f64;
            acc
        })
        .collect();
    let mut events = Vec::new();
    for u in 0..users {
        let favourites: Vec<usize> = (0..3).map(|_| rng.gen_range(0..genres)).collect();
        let n = (20 + (rng.gen::<f64>().powi(3) * 600.0) as usize).min(items / 2);
        let mut seen = std::collections::HashSet::new();
        let mut t = 0i64;
        let mut attempts = 0;
        while seen.len() < n && attempts < 100 * n {
            let genre = favourites[rng.gen_range(0..3)];
            for _ in 0..rng.gen_range(5..=15) {
                attempts += 1;
                let r = cum.partition_point(|&v| v < rng.gen::<f64>() * acc).min(per_genre - 1);
                let item = r * genres + genre;
                if seen.insert(item) {
                    events.push((format!("{}", u + 1), format!("{}", item + 1), t));
                    t += 1;
                }
            }
        }
    }
    InteractionLog::from_events(events)
}

/// Two clusters of `items / 2`; the first `cold` items of each cluster
/// never appear in a training window. Even users are regular (30
/// interactions): warm items of their cluster in the train segment, then they
/// move to the other cluster, first through its cold items (validation
/// segment) and then its warm items (test segment). Odd users are sparse (7
/// interactions, too short for a training window) and draw from their whole
/// cluster, so cold items are tied to their cluster only through other users'
/// histories, which reach the model through the graphs alone.
pub fn cluster_switch_log(seed: u64, users: usize, items: usize, cold: usize, noise: f64) -> InteractionLog {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = items / 2;
    let mut events = Vec::new();
    for u in 0..users {
        let cluster = (u / 2) % 2;
        let regular = u % 2 == 0;
        let n = if regular { 30 } else { 7 };
        for t in 0..n {
            let item = if rng.gen_bool(noise) {
                rng.gen_range(0..items)
            } else if !regular {
                cluster * half + rng.gen_range(0..half)
            } else if t < 21 {
                cluster * half + rng.gen_range(cold..half)
            } else if t < 24 {
                (1 - cluster) * half + rng.gen_range(0..cold)
            } else {
                (1 - cluster) * half + rng.gen_range(cold..half)
            };
            events.push((format!("u{u}"), format!("i{item}"), t as i64));
        }
    }
    InteractionLog::from_events(events)
}

/// Walks of 12 to 16 steps over a user-specific window of `items / 2 + 1`
/// consecutive items (mod `items`), so every user has items left to sample
/// as negatives. Windows start 3 apart; with `3 * users >= items` every
/// item is used.
pub fn toy_split(seed: u64, users: usize, items: usize) -> SplitDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let width = items / 2 + 1;
    let mut events = Vec::new();
    for u in 0..users {
        let n = rng.gen_range(12..17);
        let mut j = rng.gen_range(0..width);
        for t in 0..n {
            // the first pass visits the whole window once
            j = if t < width { t } else { (j + rng.gen_range(1..=2)) % width };
            events.push((format!("u{u}"), format!("i{}", (3 * u + j) % items), t as i64));
        }
    }
    let log = InteractionLog::from_events(events);
    assert_eq!(log.num_items(), items);
    chronological_split(&log, RATIOS).unwrap()
}
