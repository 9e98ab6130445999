//! Day-file container, synthetic corpus generator, two-stage epoch sampler and
//! prefetching batch loader.

mod dayfile;
mod generator;
mod loader;
mod manifest;
mod sampler;

pub use dayfile::{
    decode_day_file, encode_day_file, evict_path, read_day_file, write_day_file, DayFileReader, DayHeader, StaticMap,
    DAY_MAGIC, DEFAULT_TIMESTEPS, FORMAT_VERSION, HEADER_LEN, STATIC_MAGIC,
};
pub use generator::{
    build_layout, day_calendar, frame_counts, generate_city, generate_day, nnz_rate, parse_profile_table,
    table_profile, table_profiles, CityLayout, CityProfile, GeneratorConfig, CITY_RATES, MELBOURNE_OCEAN_FRACTION,
};
pub use loader::{global_shuffle_baseline, iterate_batches, Batch, BatchStream, LoaderConfig, SampleRef};
pub use manifest::{write_corpus, CorpusEntry, CorpusManifest, MANIFEST_NAME};
pub use sampler::{plan_epoch, valid_indices, EpochPlan, PlanConfig, PlannedFile, DEFAULT_INDICES_PER_FILE, WINDOW};
