//! Synthetic traffic grids.
//!
//! Each city gets a land mask (the ocean is a contiguous region behind a wavy
//! coastline) and a road skeleton of connected line segments on land. Traffic
//! occupies skeleton cells only. The number of occupied cells per frame follows
//! a mild diurnal cycle and sums to exactly `round(rate * T * H * W)` per day,
//! and most occupied cells persist from one frame to the next.

use std::f64::consts::PI;

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};

use super::dayfile::{DayHeader, StaticMap};
use crate::error::{Error, Result};
use crate::models::CHANNELS;

/// Per-batch non-zero rates of the eight benchmark cities.
pub const CITY_RATES: [(&str, f64); 8] = [
    ("ANT", 0.0079),
    ("BAN", 0.0072),
    ("BAR", 0.0023),
    ("BER", 0.0303),
    ("CHI", 0.0085),
    ("IST", 0.0481),
    ("MEL", 0.0039),
    ("MOS", 0.0758),
];

pub const MELBOURNE_OCEAN_FRACTION: f64 = 0.5347;

/// Relative amplitude of the diurnal cycle in the occupied-cell count.
const DIURNAL_AMPLITUDE: f64 = 0.15;
/// Peak fraction of the skeleton that carries traffic at once.
const PEAK_ROAD_LOAD: f64 = 0.35;
/// Fraction of occupied cells kept from one frame to the next.
const PERSISTENCE: f64 = 0.9;
/// Probability that a newly occupied cell is drawn next to existing traffic.
const SPREAD: f64 = 0.7;

#[derive(Clone, Debug, PartialEq)]
pub struct CityProfile {
    pub name: String,
    pub city_id: u16,
    pub rate: f64,
    pub ocean_fraction: f64,
    pub skeleton_seed: u64,
}

impl CityProfile {
    pub fn new(name: &str, city_id: u16, rate: f64, ocean_fraction: f64) -> Self {
        Self {
            name: name.to_owned(),
            city_id,
            rate,
            ocean_fraction,
            skeleton_seed: 0x5EED_0000 + city_id as u64,
        }
    }
}

/// The eight benchmark cities in table order; only Melbourne has an ocean.
pub fn table_profiles() -> Vec<CityProfile> {
    CITY_RATES
        .iter()
        .enumerate()
        .map(|(i, &(name, rate))| {
            let ocean = if name == "MEL" { MELBOURNE_OCEAN_FRACTION } else { 0.0 };
            CityProfile::new(name, i as u16, rate, ocean)
        })
        .collect()
}

pub fn table_profile(name: &str) -> Option<CityProfile> {
    table_profiles().into_iter().find(|p| p.name.eq_ignore_ascii_case(name))
}

/// Parses `name<TAB>rate[<TAB>ocean_fraction]` lines; `#` starts a comment.
pub fn parse_profile_table(text: &str) -> Result<Vec<CityProfile>> {
    let mut out = Vec::new();
    let mut offset = 0u64;
    for line in text.lines() {
        let content = line.split('#').next().unwrap_or("").trim();
        if !content.is_empty() {
            let err = |msg: String| Error::Parse {
                what: "profile table",
                offset,
                msg,
            };
            let fields: Vec<&str> = content.split('\t').map(str::trim).collect();
            if !(2..=3).contains(&fields.len()) {
                return Err(err(format!(
                    "expected 2 or 3 tab-separated fields, got {}",
                    fields.len()
                )));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| err(format!("{s:?}: {e}")));
            let rate = num(fields[1])?;
            let ocean = fields.get(2).map(|s| num(s)).transpose()?.unwrap_or(0.0);
            out.push(CityProfile::new(fields[0], out.len() as u16, rate, ocean));
        }
        offset += line.len() as u64 + 1;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    pub cities: Vec<CityProfile>,
    pub timesteps: u16,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

impl GeneratorConfig {
    fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.timesteps == 0 {
            return Err(Error::InvalidConfig("grid and day length must be non-empty".into()));
        }
        if self.height > u16::MAX as usize || self.width > u16::MAX as usize {
            return Err(Error::InvalidConfig("grid side exceeds 65535".into()));
        }
        for c in &self.cities {
            if !(0.0..=1.0).contains(&c.rate) || !(0.0..=1.0).contains(&c.ocean_fraction) {
                return Err(Error::InvalidConfig(format!(
                    "{}: rate {} and ocean fraction {} must lie in [0, 1]",
                    c.name, c.rate, c.ocean_fraction
                )));
            }
            if c.rate > 1.0 - c.ocean_fraction {
                return Err(Error::InvalidConfig(format!(
                    "{}: rate {} exceeds the land fraction {}",
                    c.name,
                    c.rate,
                    1.0 - c.ocean_fraction
                )));
            }
        }
        Ok(())
    }
}

/// Year and weekday assigned to the `day`-th generated file of a city.
pub fn day_calendar(day: usize) -> (u16, u8) {
    (2019 + (day % 2) as u16, (day % 7) as u8)
}

fn mix(a: u64, b: u64, c: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ c.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Static geometry of one synthetic city.
#[derive(Clone, Debug)]
pub struct CityLayout {
    pub height: usize,
    pub width: usize,
    pub land: Vec<bool>,
    /// Skeleton cells in drawing order.
    pub skeleton: Vec<usize>,
    pub map: StaticMap,
    /// Bit `k` set: heading `k` carries traffic on this cell.
    headings: Vec<u8>,
    on_road: Vec<bool>,
}

const DIRS: [(isize, isize); 8] = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)];

fn heading_mask(dy: isize, dx: isize) -> u8 {
    match (dy != 0, dx != 0) {
        (true, false) => 0b0101,
        (false, true) => 0b1010,
        _ => 0b1111,
    }
}

struct Roads {
    on_road: Vec<bool>,
    density: Vec<u8>,
    headings: Vec<u8>,
    skeleton: Vec<usize>,
}

impl Roads {
    fn add(&mut self, c: usize, density: u8, headings: u8) {
        if !self.on_road[c] {
            self.on_road[c] = true;
            self.skeleton.push(c);
        }
        self.density[c] = self.density[c].max(density);
        self.headings[c] |= headings;
    }
}

fn skeleton_size(profile: &CityProfile, cells: usize, land: usize) -> usize {
    let peak = (profile.rate * cells as f64 * (1.0 + DIURNAL_AMPLITUDE)).ceil() + 1.0;
    ((peak / PEAK_ROAD_LOAD).ceil() as usize)
        .clamp(1, land.max(1))
        .min(land)
}

pub fn build_layout(profile: &CityProfile, height: usize, width: usize) -> CityLayout {
    let cells = height * width;
    let mut rng = StdRng::seed_from_u64(profile.skeleton_seed);

    // Ocean: the cells furthest along a random direction, behind a wavy coast.
    let n_ocean = ((profile.ocean_fraction * cells as f64).round() as usize).min(cells);
    let theta = rng.gen_range(0.0..2.0 * PI);
    let (amp, freq, phase) = (
        0.1 * height.max(width) as f64,
        rng.gen_range(1.0..3.0) * 2.0 * PI / height.max(width) as f64,
        rng.gen_range(0.0..2.0 * PI),
    );
    let score = |c: usize| {
        let (y, x) = ((c / width) as f64, (c % width) as f64);
        let along = x * theta.cos() + y * theta.sin();
        let across = -x * theta.sin() + y * theta.cos();
        along + amp * (freq * across + phase).sin()
    };
    let mut order: Vec<usize> = (0..cells).collect();
    order.sort_by(|&a, &b| score(b).total_cmp(&score(a)).then(a.cmp(&b)));
    let mut land = vec![true; cells];
    for &c in &order[..n_ocean] {
        land[c] = false;
    }
    let land_cells: Vec<usize> = (0..cells).filter(|&c| land[c]).collect();

    let target = skeleton_size(profile, cells, land_cells.len());
    let mut roads = Roads {
        on_road: vec![false; cells],
        density: vec![0u8; cells],
        headings: vec![0u8; cells],
        skeleton: Vec::with_capacity(target),
    };

    if target > 0 && !land_cells.is_empty() {
        let start = *land_cells.choose(&mut rng).unwrap();
        roads.add(start, 128, 0b1111);
        let max_len = ((height + width) / 4).max(4);
        let mut attempts = 0;
        while roads.skeleton.len() < target && attempts < 100 * target {
            attempts += 1;
            let anchor = roads.skeleton[rng.gen_range(0..roads.skeleton.len())];
            let (dy, dx) = DIRS[rng.gen_range(0..DIRS.len())];
            let len = rng.gen_range(3..=max_len);
            let importance = rng.gen_range(64..=255u8);
            let (mut y, mut x) = ((anchor / width) as isize, (anchor % width) as isize);
            for _ in 0..len {
                y += dy;
                x += dx;
                if y < 0 || x < 0 || y >= height as isize || x >= width as isize {
                    break;
                }
                let c = y as usize * width + x as usize;
                if !land[c] {
                    break;
                }
                roads.add(c, importance, heading_mask(dy, dx));
                if roads.skeleton.len() >= target {
                    break;
                }
            }
        }
        // Segments could not reach far enough (tiny or fragmented land): take
        // the remaining land cells in random order.
        if roads.skeleton.len() < target {
            let mut rest: Vec<usize> = land_cells.iter().copied().filter(|&c| !roads.on_road[c]).collect();
            rest.shuffle(&mut rng);
            for c in rest.into_iter().take(target - roads.skeleton.len()) {
                roads.add(c, 64, 0b1111);
            }
        }
    }
    let Roads {
        on_road,
        density,
        headings,
        skeleton,
    } = roads;

    CityLayout {
        height,
        width,
        land,
        skeleton,
        map: StaticMap {
            city_id: profile.city_id,
            height,
            width,
            density,
        },
        headings,
        on_road,
    }
}

/// Occupied-cell count of every frame: a diurnal cycle peaking in the late
/// afternoon, summing to `round(rate * T * cells)`, never above `cap`.
pub fn frame_counts(rate: f64, timesteps: usize, cells: usize, cap: usize) -> Vec<usize> {
    let total = ((rate * timesteps as f64 * cells as f64).round() as usize).min(timesteps * cap);
    let mean = rate * cells as f64;
    let amp = if mean > 0.0 {
        DIURNAL_AMPLITUDE.min((cap as f64 / mean - 1.0).max(0.0))
    } else {
        0.0
    };
    let weights: Vec<f64> = (0..timesteps)
        .map(|t| 1.0 + amp * (2.0 * PI * (t as f64 / timesteps as f64 - 17.0 / 24.0)).cos())
        .collect();
    let wsum: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| total as f64 * w / wsum).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| (e.floor() as usize).min(cap)).collect();
    // Largest remainder, skipping frames already at the cap.
    let mut order: Vec<usize> = (0..timesteps).collect();
    order.sort_by(|&a, &b| {
        (exact[b] - exact[b].floor())
            .total_cmp(&(exact[a] - exact[a].floor()))
            .then(a.cmp(&b))
    });
    let mut missing = total - counts.iter().sum::<usize>();
    while missing > 0 {
        let before = missing;
        for &t in &order {
            if missing == 0 {
                break;
            }
            if counts[t] < cap {
                counts[t] += 1;
                missing -= 1;
            }
        }
        if missing == before {
            break;
        }
    }
    counts
}

/// One day of frames for a city. `day` selects the calendar slot and seeds the traffic.
pub fn generate_day(
    config: &GeneratorConfig,
    city: usize,
    layout: &CityLayout,
    day: usize,
) -> Result<(DayHeader, Vec<u8>)> {
    config.validate()?;
    let profile = config
        .cities
        .get(city)
        .ok_or_else(|| Error::InvalidConfig(format!("no city with index {city}")))?;
    let (h, w, t) = (config.height, config.width, config.timesteps as usize);
    if layout.height != h || layout.width != w {
        return Err(Error::InvalidConfig(
            "layout grid differs from the generator grid".into(),
        ));
    }
    let (year, weekday) = day_calendar(day);
    let header = DayHeader::new(profile.city_id, year, weekday, config.timesteps, h as u16, w as u16);
    let cells = h * w;
    let mut rng = StdRng::seed_from_u64(mix(config.seed, profile.city_id as u64, day as u64));
    let counts = frame_counts(profile.rate, t, cells, layout.skeleton.len());
    let peak = counts.iter().copied().max().unwrap_or(0).max(1) as f64;

    let mut payload = vec![0u8; header.payload_len()];
    let mut active: Vec<usize> = Vec::new();
    let mut is_active = vec![false; cells];
    let mut candidates = Vec::new();
    for (ti, &n) in counts.iter().enumerate() {
        // Keep most of the previous frame's traffic.
        active.shuffle(&mut rng);
        let keep = n.min((PERSISTENCE * active.len() as f64).ceil() as usize);
        for &c in &active[keep..] {
            is_active[c] = false;
        }
        active.truncate(keep);
        while active.len() < n {
            let c = if rng.gen_bool(SPREAD) && !active.is_empty() {
                candidates.clear();
                for &a in &active {
                    let (y, x) = ((a / w) as isize, (a % w) as isize);
                    for (dy, dx) in DIRS {
                        let (ny, nx) = (y + dy, x + dx);
                        if ny >= 0 && nx >= 0 && (ny as usize) < h && (nx as usize) < w {
                            let nc = ny as usize * w + nx as usize;
                            if layout.on_road[nc] && !is_active[nc] {
                                candidates.push(nc);
                            }
                        }
                    }
                }
                candidates.choose(&mut rng).copied()
            } else {
                None
            };
            let c = match c {
                Some(c) => c,
                None => loop {
                    let c = layout.skeleton[rng.gen_range(0..layout.skeleton.len())];
                    if !is_active[c] {
                        break c;
                    }
                },
            };
            is_active[c] = true;
            active.push(c);
        }

        let load = n as f64 / peak;
        let frame = &mut payload[ti * cells * CHANNELS..][..cells * CHANNELS];
        for &c in &active {
            let d = layout.map.density[c].max(32) as f64;
            let px = &mut frame[c * CHANNELS..][..CHANNELS];
            let mask = layout.headings[c];
            for k in 0..4 {
                if mask & (1 << k) == 0 {
                    continue;
                }
                let volume = d * (0.3 + 0.4 * load) * rng.gen_range(0.85..1.15);
                let speed = (60.0 + d / 2.0) * (1.2 - 0.4 * load) + rng.gen_range(-4.0..4.0);
                px[2 * k] = volume.round().clamp(1.0, 255.0) as u8;
                px[2 * k + 1] = speed.round().clamp(1.0, 255.0) as u8;
            }
        }
    }
    Ok((header, payload))
}

/// Header and payload of each generated day.
pub type GeneratedDays = Vec<(DayHeader, Vec<u8>)>;

/// Static map and `days` day files of one city.
pub fn generate_city(config: &GeneratorConfig, city: usize, days: usize) -> Result<(StaticMap, GeneratedDays)> {
    config.validate()?;
    let profile = config
        .cities
        .get(city)
        .ok_or_else(|| Error::InvalidConfig(format!("no city with index {city}")))?;
    let layout = build_layout(profile, config.height, config.width);
    let files = (0..days)
        .map(|d| generate_day(config, city, &layout, d))
        .collect::<Result<Vec<_>>>()?;
    Ok((layout.map, files))
}

/// Fraction of `(t, h, w)` sites with any non-zero channel.
pub fn nnz_rate(header: &DayHeader, payload: &[u8]) -> f64 {
    let c = header.channels as usize;
    let sites = payload.len() / c.max(1);
    if sites == 0 {
        return 0.0;
    }
    let occupied = payload.chunks_exact(c).filter(|px| px.iter().any(|&v| v != 0)).count();
    occupied as f64 / sites as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(city: CityProfile, hw: usize) -> GeneratorConfig {
        GeneratorConfig {
            cities: vec![city],
            timesteps: 48,
            height: hw,
            width: hw,
            seed: 3,
        }
    }

    #[test]
    fn frame_counts_sum_exactly_and_respect_cap() {
        for (rate, cap) in [(0.0039, 100), (0.0758, 1000), (0.3, 40), (0.0, 5)] {
            let c = frame_counts(rate, 288, 4096, cap);
            let total = ((rate * 288.0 * 4096.0).round() as usize).min(288 * cap);
            assert_eq!(c.iter().sum::<usize>(), total);
            assert!(c.iter().all(|&n| n <= cap));
        }
    }

    #[test]
    fn ocean_fraction_is_exact_and_roads_stay_on_land() {
        let p = table_profile("MEL").unwrap();
        let l = build_layout(&p, 64, 64);
        let ocean = l.land.iter().filter(|&&x| !x).count();
        assert_eq!(ocean, (0.5347f64 * 4096.0).round() as usize);
        assert!(l.skeleton.iter().all(|&c| l.land[c]));
        for c in 0..4096 {
            assert_eq!(l.map.density[c] > 0, l.on_road[c]);
        }
    }

    #[test]
    fn skeleton_is_connected_when_drawn_from_segments() {
        let p = table_profile("BER").unwrap();
        let l = build_layout(&p, 32, 32);
        let w = 32usize;
        let mut seen = vec![false; 1024];
        let mut stack = vec![l.skeleton[0]];
        seen[l.skeleton[0]] = true;
        while let Some(c) = stack.pop() {
            let (y, x) = ((c / w) as isize, (c % w) as isize);
            for (dy, dx) in DIRS {
                let (ny, nx) = (y + dy, x + dx);
                if (0..32).contains(&ny) && (0..32).contains(&nx) {
                    let n = (ny * 32 + nx) as usize;
                    if l.on_road[n] && !seen[n] {
                        seen[n] = true;
                        stack.push(n);
                    }
                }
            }
        }
        assert!(l.skeleton.iter().all(|&c| seen[c]));
    }

    #[test]
    fn traffic_only_on_skeleton_and_rate_exact() {
        let cfg = config(CityProfile::new("X", 0, 0.05, 0.2), 16);
        let (map, files) = generate_city(&cfg, 0, 2).unwrap();
        for (h, p) in &files {
            let occupied = p.chunks_exact(8).filter(|px| px.iter().any(|&v| v != 0)).count();
            assert_eq!(occupied, (0.05f64 * 48.0 * 256.0).round() as usize);
            for (i, px) in p.chunks_exact(8).enumerate() {
                if px.iter().any(|&v| v != 0) {
                    assert!(map.density[i % 256] > 0);
                }
            }
            assert_eq!(h.channels, 8);
        }
        assert_eq!((files[0].0.year, files[0].0.day_of_week), (2019, 0));
        assert_eq!((files[1].0.year, files[1].0.day_of_week), (2020, 1));
    }

    #[test]
    fn zero_rate_gives_zero_frames_and_infeasible_rate_errors() {
        let (_, files) = generate_city(&config(CityProfile::new("Z", 0, 0.0, 0.5), 8), 0, 1).unwrap();
        assert!(files[0].1.iter().all(|&v| v == 0));
        assert!(generate_city(&config(CityProfile::new("Z", 0, 0.6, 0.5), 8), 0, 1).is_err());
        assert!(generate_city(&config(CityProfile::new("Z", 0, -0.1, 0.0), 8), 0, 1).is_err());
    }

    #[test]
    fn deterministic_under_seed() {
        let cfg = config(table_profile("IST").unwrap(), 16);
        assert_eq!(
            generate_city(&cfg, 0, 1).unwrap().1,
            generate_city(&cfg, 0, 1).unwrap().1
        );
        let other = GeneratorConfig { seed: 4, ..cfg.clone() };
        assert_ne!(
            generate_city(&cfg, 0, 1).unwrap().1,
            generate_city(&other, 0, 1).unwrap().1
        );
    }

    #[test]
    fn profile_table_parsing() {
        let p = parse_profile_table("# name rate ocean\nAAA\t0.01\nBBB\t0.02\t0.3\n").unwrap();
        assert_eq!(p.len(), 2);
        assert_eq!(
            (p[1].name.as_str(), p[1].city_id, p[1].rate, p[1].ocean_fraction),
            ("BBB", 1, 0.02, 0.3)
        );
        assert!(matches!(
            parse_profile_table("A\t0.1\nB\tx\n"),
            Err(Error::Parse { offset: 6, .. })
        ));
    }
}
