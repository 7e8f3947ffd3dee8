//! Deterministic synthetic activity generator. Produces per-user-per-day
//! count vectors under per-user Poisson rates with planted anomalies, and can
//! also emit the equivalent raw CSV logs so the full ingest + featurize path
//! reproduces the same vectors exactly. The generator uses the small
//! history-free feature taxonomy ([`FeatureSchema::synth_default`]) so
//! classification does not depend on per-user history.

use std::fmt;
use std::io::Write;
use std::path::Path;

use chrono::{Duration, NaiveDate, NaiveDateTime};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::eval::LabelSet;
use crate::features::{FeatureSchema, UserDayVector};
use crate::ingest::{Source, N_CATEGORIES};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_users: usize,
    pub n_days: usize,
    pub seed: u64,
    /// planted anomalous user-days
    pub n_injections: usize,
    /// spike size in units of the feature's cross-user standard deviation
    pub injection_magnitude: f64,
    /// count features perturbed per injection
    pub injection_features: usize,
    /// injections are only planted at or after this day
    pub burn_in_days: usize,
    pub cardinalities: [usize; N_CATEGORIES],
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_users: 200,
            n_days: 120,
            seed: 7,
            n_injections: 12,
            injection_magnitude: 8.0,
            injection_features: 3,
            burn_in_days: 50,
            cardinalities: [5, 8, 3, 4, 6, 7],
        }
    }
}

pub struct SynthOutput {
    pub schema: FeatureSchema,
    pub days: Vec<(i64, Vec<UserDayVector>)>,
    pub labels: LabelSet,
    /// per-user overall activity scale (for inspection/tests)
    pub user_scales: Vec<f64>,
}

/// First calendar day of every generated stream (a Monday).
pub const START_DATE: (i32, u32, u32) = (2010, 1, 4);

// mean events per descriptor per day for a scale-1.0 user, in the order of
// the history-free taxonomy
const BASE_RATES: [f64; 23] = [
    1.5, 1.4, // logon, logoff
    0.4, 0.4, // device connect/disconnect
    3.0, 0.15, 0.15, // file open: local, to removable, from removable
    1.5, 0.15, 0.15, // file write
    0.8, 0.1, 0.1, // file copy
    0.3, 0.05, 0.05, // file delete
    8.0, 1.0, 0.3, // www visit/download/upload
    0.5, 1.0, 1.5, 4.0, // email sent+attach, viewed+attach, sent, viewed
];

// activity share per six-hour window (night, morning, afternoon, evening)
const WINDOW_FACTORS: [f64; 4] = [0.05, 1.0, 0.8, 0.1];

// mild weekly rhythm over consecutive calendar days
const WEEK_FACTORS: [f64; 7] = [1.0, 1.05, 0.95, 1.0, 0.9, 0.35, 0.3];

// high-rate descriptors subject to benign bursts: local file opens, www
// visits, email viewed
const BURSTY_DESCRIPTORS: [usize; 3] = [4, 16, 22];
const BURST_PROB: f64 = 0.05;

pub fn start_date() -> NaiveDate {
    NaiveDate::from_ymd_opt(START_DATE.0, START_DATE.1, START_DATE.2).unwrap()
}

fn rate(scale: f64, window: usize, desc: usize, day: i64) -> f64 {
    scale * BASE_RATES[desc] * WINDOW_FACTORS[window] * WEEK_FACTORS[(day % 7) as usize]
}

// moments of the log-uniform [0.3, 3.0] user scale; the population variance of
// a cell's count is E[s]*r + Var(s)*r^2 (Poisson noise plus scale spread)
const SCALE_MEAN: f64 = 1.1726;
const SCALE_VAR: f64 = 0.5602;

/// Standard deviation of a cell's count across the user population for a
/// scale-1.0 base rate `r`. Injections are sized in units of this, since it is
/// the spread any cross-user detector has to discriminate against.
fn population_sigma(window: usize, desc: usize, day: i64) -> f64 {
    let r = BASE_RATES[desc] * WINDOW_FACTORS[window] * WEEK_FACTORS[(day % 7) as usize];
    (SCALE_MEAN * r + SCALE_VAR * r * r).sqrt().max(0.25)
}

/// Fixed categorical ids for user `i`: round-robin per category, so every id
/// in 0..cardinality occurs as long as there are at least `cardinality` users.
fn user_categoricals(i: usize, cards: &[usize; N_CATEGORIES]) -> [u32; N_CATEGORIES] {
    let mut out = [0u32; N_CATEGORIES];
    for (c, card) in cards.iter().enumerate() {
        out[c] = ((i + c) % card) as u32;
    }
    out
}

fn user_name(i: usize) -> String {
    format!("SYN{i:04}")
}

pub fn generate(config: &SynthConfig) -> SynthOutput {
    assert!(config.n_users >= *config.cardinalities.iter().max().unwrap(), "need n_users >= every cardinality for full categorical coverage");
    let schema = FeatureSchema::synth_default(&config.cardinalities);
    let n_desc = BASE_RATES.len();
    debug_assert_eq!(schema.descriptors.len(), n_desc);
    let dim = schema.count_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    // log-uniform per-user activity scale in [0.3, 3.0]
    let user_scales: Vec<f64> =
        (0..config.n_users).map(|_| (rng.gen_range(0.3f64.ln()..3.0f64.ln())).exp()).collect();

    // plant injections on distinct users after burn-in (one compromised day
    // per insider); a separate RNG keeps the baseline counts identical across
    // injection settings for the same seed
    let mut plan_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xa5a5_5a5a_0f0f_f0f0);
    let mut labels = LabelSet::new();
    let mut planned: Vec<(usize, i64, Vec<usize>)> = Vec::new();
    assert!(config.burn_in_days < config.n_days, "burn-in must leave room for injections");
    assert!(config.n_injections <= config.n_users, "one injection per user at most");
    let mut used_users = std::collections::HashSet::new();
    let mut guard = 0;
    while planned.len() < config.n_injections {
        guard += 1;
        assert!(guard < 100_000, "cannot place injections");
        let u = plan_rng.gen_range(0..config.n_users);
        let day = plan_rng.gen_range(config.burn_in_days..config.n_days) as i64;
        // insiders act on workdays, when the spike can hide in plain sight
        if WEEK_FACTORS[(day % 7) as usize] < 0.5 || !used_users.insert(u) {
            continue;
        }
        // spikes land in the working-hours windows, on the low-rate
        // descriptors an insider actually abuses (removable media, deletes,
        // uploads) rather than on bulk browsing noise
        let active_windows = [1usize, 2];
        let quiet: Vec<usize> = (0..n_desc).filter(|&d| BASE_RATES[d] <= 0.5).collect();
        let mut feats = Vec::new();
        while feats.len() < config.injection_features.min(dim) {
            let w = active_windows[plan_rng.gen_range(0..active_windows.len())];
            let f = schema.index_of(w, quiet[plan_rng.gen_range(0..quiet.len())]);
            if !feats.contains(&f) {
                feats.push(f);
            }
        }
        labels.insert(&user_name(u), day);
        planned.push((u, day, feats));
    }

    let mut days = Vec::with_capacity(config.n_days);
    for day in 0..config.n_days as i64 {
        let mut vectors = Vec::with_capacity(config.n_users);
        for u in 0..config.n_users {
            let mut counts = vec![0u32; dim];
            for w in 0..4 {
                for d in 0..n_desc {
                    let lambda = rate(user_scales[u], w, d, day);
                    if lambda > 0.0 {
                        let c = Poisson::new(lambda).unwrap().sample(&mut rng);
                        counts[schema.index_of(w, d)] = c as u32;
                    }
                }
            }
            // everyone logs on at least once so every user appears every day
            let logon_idx = schema.index_of(1, 0);
            counts[logon_idx] = counts[logon_idx].max(1);
            // occasional benign activity bursts on the chattiest descriptors
            // (crunch-day browsing, mail storms); draws are unconditional so
            // the stream is bit-identical across injection settings
            let burst_roll: f64 = rng.gen();
            let burst_w = [1usize, 2][rng.gen_range(0..2)];
            let burst_d = BURSTY_DESCRIPTORS[rng.gen_range(0..BURSTY_DESCRIPTORS.len())];
            let burst_factor = rng.gen_range(3.0..6.0);
            if burst_roll < BURST_PROB {
                let idx = schema.index_of(burst_w, burst_d);
                counts[idx] = ((counts[idx].max(1)) as f64 * burst_factor).round() as u32;
            }
            for (pu, pday, feats) in &planned {
                if *pu == u && *pday == day {
                    for &f in feats {
                        let (w, d) = schema.decode_index(f).unwrap();
                        let sigma = population_sigma(w, d, day);
                        let spike = (config.injection_magnitude * sigma).ceil().max(1.0);
                        counts[f] += spike as u32;
                    }
                }
            }
            vectors.push(UserDayVector {
                user_id: user_name(u),
                day_index: day,
                counts,
                categoricals: user_categoricals(u, &config.cardinalities),
            });
        }
        days.push((day, vectors));
    }

    SynthOutput { schema, days, labels, user_scales }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct SynthSummary {
    pub n_users: usize,
    pub n_days: usize,
    pub events_per_source: [u64; 5],
    pub total_events: u64,
}

impl fmt::Display for SynthSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "users: {}  days: {}", self.n_users, self.n_days)?;
        for (source, n) in Source::ALL.iter().zip(self.events_per_source) {
            writeln!(f, "{:>8}: {}", source.name(), n)?;
        }
        write!(f, "   total: {}", self.total_events)
    }
}

fn descriptor_source(desc: usize) -> Source {
    match desc {
        0 | 1 => Source::Logon,
        2 | 3 => Source::Device,
        4..=15 => Source::File,
        16..=18 => Source::Http,
        _ => Source::Email,
    }
}

fn activity_of(desc: usize) -> &'static str {
    match desc {
        0 => "Logon",
        1 => "Logoff",
        2 => "Connect",
        3 => "Disconnect",
        4..=6 => "File Open",
        7..=9 => "File Write",
        10..=12 => "File Copy",
        13..=15 => "File Delete",
        16 => "WWW Visit",
        17 => "WWW Download",
        18 => "WWW Upload",
        19 | 21 => "Send",
        _ => "View",
    }
}

/// Write the generated stream back out as raw CERT-style CSV logs plus an
/// attribute directory. Re-ingesting these with the same history-free schema
/// reproduces the generated vectors exactly.
pub fn emit_raw_logs(out: &SynthOutput, config: &SynthConfig, dir: &Path) -> std::io::Result<SynthSummary> {
    std::fs::create_dir_all(dir)?;
    let mut logon = std::fs::File::create(dir.join("logon.csv"))?;
    let mut device = std::fs::File::create(dir.join("device.csv"))?;
    let mut file = std::fs::File::create(dir.join("file.csv"))?;
    let mut http = std::fs::File::create(dir.join("http.csv"))?;
    let mut email = std::fs::File::create(dir.join("email.csv"))?;
    writeln!(logon, "id,date,user,pc,activity")?;
    writeln!(device, "id,date,user,pc,file_tree,activity")?;
    writeln!(file, "id,date,user,pc,activity,filename,to_removable_media,from_removable_media,content")?;
    writeln!(http, "id,date,user,pc,activity,url,content")?;
    writeln!(email, "id,date,user,pc,activity,to,cc,bcc,attachments,content")?;

    let date_format = crate::ingest::DATE_FORMAT;
    let start = start_date();
    let n_desc = out.schema.descriptors.len();
    let mut summary = SynthSummary {
        n_users: config.n_users,
        n_days: config.n_days,
        ..Default::default()
    };
    let mut event_id: u64 = 0;

    for (day, vectors) in &out.days {
        let date = start + Duration::days(*day);
        for w in 0..out.schema.time_windows.len() {
            let window_start: NaiveDateTime =
                date.and_hms_opt(0, 0, 0).unwrap() + Duration::minutes(out.schema.time_windows[w].start_minute as i64);
            let window_len_secs = (out.schema.time_windows[w].end_minute - out.schema.time_windows[w].start_minute) as u64 * 60;
            let mut offsets = [0u64; 5]; // per-source second counter inside this window
            for v in vectors {
                let u: usize = v.user_id[3..].parse().unwrap();
                let pc = format!("PC{u:04}");
                for d in 0..n_desc {
                    let count = v.counts[out.schema.index_of(w, d)];
                    let source = descriptor_source(d);
                    let activity = activity_of(d);
                    for _ in 0..count {
                        let si = source as usize;
                        assert!(offsets[si] < window_len_secs, "window overflow: too many {} events", source.name());
                        let ts = (window_start + Duration::seconds(offsets[si] as i64)).format(date_format);
                        offsets[si] += 1;
                        event_id += 1;
                        summary.events_per_source[si] += 1;
                        match source {
                            Source::Logon => {
                                writeln!(logon, "E{event_id},{ts},{user},{pc},{activity}", user = v.user_id)?
                            }
                            Source::Device => writeln!(
                                device,
                                "E{event_id},{ts},{user},{pc},R:\\;R:\\docs,{activity}",
                                user = v.user_id
                            )?,
                            Source::File => {
                                let r = (d - 4) % 3;
                                writeln!(
                                    file,
                                    "E{event_id},{ts},{user},{pc},{activity},doc{u}.pdf,{to},{from},",
                                    user = v.user_id,
                                    to = r == 1,
                                    from = r == 2,
                                )?
                            }
                            Source::Http => writeln!(
                                http,
                                "E{event_id},{ts},{user},{pc},{activity},http://site{s}.example.com/page,",
                                user = v.user_id,
                                s = u % 10,
                            )?,
                            Source::Email => {
                                let attachments = if d <= 20 { 1 } else { 0 };
                                writeln!(
                                    email,
                                    "E{event_id},{ts},{user},{pc},{activity},peer@example.com,,,{attachments},",
                                    user = v.user_id,
                                )?
                            }
                        }
                    }
                }
            }
        }
    }
    summary.total_events = summary.events_per_source.iter().sum();

    // attribute directory: value names are zero-padded so sorted order equals
    // id order and re-ingest assigns the exact generated ids
    let mut ldap = std::fs::File::create(dir.join("LDAP.csv"))?;
    writeln!(ldap, "employee_name,user_id,email,role,projects,functional_unit,department,team,supervisor")?;
    for u in 0..config.n_users {
        let name = user_name(u);
        let ids = user_categoricals(u, &config.cardinalities);
        writeln!(
            ldap,
            "{name},{name},{lower}@example.com,role_{:03},project_{:03},fu_{:03},dept_{:03},team_{:03},sup_{:03}",
            ids[0], ids[1], ids[2], ids[3], ids[4], ids[5],
            lower = name.to_ascii_lowercase(),
        )?;
    }
    Ok(summary)
}
