use anyhow::{Context, Result};
use sparsecast::data::{parse_profile_table, table_profiles, write_corpus, CityProfile, GeneratorConfig};

use crate::args::{CitySpec, GenDataArgs};
use crate::report::create_dir;
use crate::usage;

/// City ids at or above this value never collide with table cities.
const CUSTOM_ID_BASE: u16 = 100;

/// Table profiles, extended or overridden by `table`, then selected by `cities`.
pub fn resolve_cities(cities: &[CitySpec], table: Option<Vec<CityProfile>>) -> Result<Vec<CityProfile>> {
    let mut pool = table_profiles();
    let from_table = table.is_some();
    let table = table.unwrap_or_default();
    for (i, mut p) in table.iter().cloned().enumerate() {
        match pool.iter_mut().find(|q| q.name.eq_ignore_ascii_case(&p.name)) {
            Some(q) => {
                q.rate = p.rate;
                q.ocean_fraction = p.ocean_fraction;
            }
            None => {
                p = CityProfile::new(&p.name, CUSTOM_ID_BASE + i as u16, p.rate, p.ocean_fraction);
                pool.push(p);
            }
        }
    }
    if cities.is_empty() {
        if from_table {
            return Ok(table
                .iter()
                .map(|t| {
                    pool.iter()
                        .find(|p| p.name.eq_ignore_ascii_case(&t.name))
                        .unwrap()
                        .clone()
                })
                .collect());
        }
        return Ok(pool);
    }
    let mut out: Vec<CityProfile> = Vec::with_capacity(cities.len());
    for (i, c) in cities.iter().enumerate() {
        let profile = match c {
            CitySpec::Named(name) => pool
                .iter()
                .find(|p| p.name.eq_ignore_ascii_case(name))
                .cloned()
                .ok_or_else(|| usage(format!("unknown city {name:?}; give NAME:RATE for a custom city")))?,
            CitySpec::Custom { name, rate } => CityProfile::new(name, CUSTOM_ID_BASE + 50 + i as u16, *rate, 0.0),
        };
        if out.iter().any(|p| p.name == profile.name) {
            return Err(usage(format!("city {} listed twice", profile.name)));
        }
        out.push(profile);
    }
    Ok(out)
}

pub fn run(a: &GenDataArgs) -> Result<()> {
    let table = match &a.profile_table {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            Some(parse_profile_table(&text).map_err(|e| usage(e.to_string()))?)
        }
        None => None,
    };
    let cities = resolve_cities(&a.cities, table)?;
    for c in &cities {
        if c.rate > 1.0 - c.ocean_fraction {
            return Err(usage(format!(
                "{}: rate {} exceeds the land fraction {}",
                c.name,
                c.rate,
                1.0 - c.ocean_fraction
            )));
        }
    }
    create_dir(&a.out)?;
    let config = GeneratorConfig {
        cities,
        timesteps: a.timesteps,
        height: a.size.height,
        width: a.size.width,
        seed: a.seed,
    };
    let manifest = write_corpus(&config, a.days, &a.out)?;
    println!(
        "wrote {} day files for {} cities ({}x{}, {} steps) under {}",
        manifest.len(),
        config.cities.len(),
        a.size.height,
        a.size.width,
        a.timesteps,
        a.out.display()
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_to_the_eight_table_cities() {
        let c = resolve_cities(&[], None).unwrap();
        assert_eq!(c.len(), 8);
        assert_eq!(c[6].name, "MEL");
        assert!(c[6].ocean_fraction > 0.5);
    }

    #[test]
    fn custom_and_named_mix() {
        let c = resolve_cities(
            &[
                CitySpec::Named("mos".into()),
                CitySpec::Custom {
                    name: "TOY".into(),
                    rate: 0.2,
                },
            ],
            None,
        )
        .unwrap();
        assert_eq!(c[0].name, "MOS");
        assert_eq!((c[1].name.as_str(), c[1].rate), ("TOY", 0.2));
        assert_ne!(c[0].skeleton_seed, c[1].skeleton_seed);
    }

    #[test]
    fn unknown_city_is_a_usage_error() {
        let e = resolve_cities(&[CitySpec::Named("XYZ".into())], None).unwrap_err();
        assert!(e.is::<crate::UsageError>());
    }

    #[test]
    fn table_overrides_and_extends() {
        let table = parse_profile_table("MEL\t0.01\nNEW\t0.05\t0.1\n").unwrap();
        let c = resolve_cities(&[], Some(table)).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!((c[0].name.as_str(), c[0].rate, c[0].ocean_fraction), ("MEL", 0.01, 0.0));
        assert_eq!((c[1].name.as_str(), c[1].ocean_fraction), ("NEW", 0.1));
    }
}
