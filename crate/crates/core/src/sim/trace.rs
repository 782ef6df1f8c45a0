//! Client availability traces: JSONL records and a seeded generator.

use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::domain::{AttributeMap, ClientId, ClientInfo, Seconds};
use crate::error::SimError;

/// One availability interval of one client. A client may have several.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub client_id: ClientId,
    pub avail_start: Seconds,
    pub avail_end: Seconds,
    pub public_attrs: AttributeMap,
    pub private_attrs: AttributeMap,
    pub speed: f64,
    pub bandwidth: f64,
    /// Home-leaf label of the data-plane tree.
    pub region: u32,
}

impl TraceRecord {
    pub fn client_info(&self) -> ClientInfo {
        ClientInfo {
            client_id: self.client_id,
            public_attrs: self.public_attrs.clone(),
            private_attrs: self.private_attrs.clone(),
            avail_start: self.avail_start,
            avail_end: self.avail_end,
            speed: self.speed,
            bandwidth: self.bandwidth,
        }
    }
}

pub fn read_trace<R: BufRead>(input: R) -> Result<Vec<TraceRecord>, SimError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TraceRecord = serde_json::from_str(&line).map_err(|source| SimError::TraceParse { line: i + 1, source })?;
        rec.client_info()
            .validate()
            .map_err(|source| SimError::TraceRecord { line: i + 1, source })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_trace<W: Write>(records: &[TraceRecord], mut out: W) -> Result<(), SimError> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TraceGenConfig {
    pub seed: u64,
    pub clients: usize,
    pub horizon: Seconds,
    pub mean_online: Seconds,
    pub mean_offline: Seconds,
    pub regions: u32,
}

impl Default for TraceGenConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            clients: 1800,
            horizon: 12.0 * 3600.0,
            mean_online: 1800.0,
            mean_offline: 1800.0,
            regions: 4,
        }
    }
}

fn log_uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    (rng.random_range(lo.ln()..hi.ln())).exp()
}

/// Rounds to a multiple of `step`; dividing by `1 / step` keeps values
/// like 1.9 exact instead of 19 x 0.1.
fn round_to(x: f64, step: f64) -> f64 {
    (x / step).round() / (1.0 / step)
}

fn pick<T: Copy>(rng: &mut ChaCha8Rng, items: &[(T, u32)]) -> T {
    let total: u32 = items.iter().map(|(_, w)| w).sum();
    let mut x = rng.random_range(0..total);
    for (v, w) in items {
        if x < *w {
            return *v;
        }
        x -= w;
    }
    items[items.len() - 1].0
}

/// Device profile plus alternating online/offline sessions drawn from
/// exponential distributions, starting from the stationary on/off mix.
/// Records are sorted by start time, then client id.
pub fn generate(cfg: &TraceGenConfig) -> Vec<TraceRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let on = Exp::new(1.0 / cfg.mean_online).expect("positive mean");
    let off = Exp::new(1.0 / cfg.mean_offline).expect("positive mean");
    let p_online = cfg.mean_online / (cfg.mean_online + cfg.mean_offline);
    let mut out = Vec::new();
    for id in 0..cfg.clients as u64 {
        let cpu_f = round_to(rng.random_range(1.0..3.0), 0.1);
        let ram = pick(&mut rng, &[(2.0, 10), (3.0, 15), (4.0, 25), (6.0, 25), (8.0, 15), (12.0, 10)]);
        let fp16_mem = pick(&mut rng, &[(0.0, 30), (2.0, 30), (4.0, 25), (8.0, 15)]);
        let android_os = f64::from(rng.random_range(8u32..=14));
        let public_attrs = AttributeMap::from_pairs([
            ("cpu_f", cpu_f),
            ("ram", ram),
            ("fp16_mem", fp16_mem),
            ("android_os", android_os),
        ])
        .expect("finite attributes");
        let dataset_size = log_uniform(&mut rng, 20.0, 2000.0).round();
        let sample_quality = round_to(rng.random::<f64>(), 0.01);
        let private_attrs = AttributeMap::from_pairs([("dataset_size", dataset_size), ("sample_quality", sample_quality)])
            .expect("finite attributes");
        let speed = round_to(cpu_f * rng.random_range(0.7..1.3), 0.001);
        let bandwidth = round_to(log_uniform(&mut rng, 1.0, 20.0), 0.01);
        let region = rng.random_range(0..cfg.regions.max(1));

        let mut t = if rng.random::<f64>() < p_online {
            0.0
        } else {
            off.sample(&mut rng)
        };
        while t < cfg.horizon {
            let len = on.sample(&mut rng).max(1.0);
            let end = (t + len).min(cfg.horizon);
            let start = round_to(t, 0.001);
            let end = round_to(end, 0.001);
            if end > start {
                out.push(TraceRecord {
                    client_id: ClientId(id),
                    avail_start: start,
                    avail_end: end,
                    public_attrs: public_attrs.clone(),
                    private_attrs: private_attrs.clone(),
                    speed,
                    bandwidth,
                    region,
                });
            }
            t = end + off.sample(&mut rng).max(1.0);
        }
    }
    out.sort_by(|a, b| a.avail_start.total_cmp(&b.avail_start).then(a.client_id.cmp(&b.client_id)));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generator_is_seeded_and_valid() {
        let cfg = TraceGenConfig {
            seed: 3,
            clients: 50,
            ..TraceGenConfig::default()
        };
        let a = generate(&cfg);
        assert_eq!(a, generate(&cfg));
        assert_ne!(a, generate(&TraceGenConfig { seed: 4, ..cfg }));
        for r in &a {
            r.client_info().validate().unwrap();
            assert!(r.avail_end <= cfg.horizon);
        }
    }

    #[test]
    fn sessions_of_a_client_do_not_overlap() {
        let recs = generate(&TraceGenConfig {
            clients: 20,
            ..TraceGenConfig::default()
        });
        for id in 0..20 {
            let mine: Vec<_> = recs.iter().filter(|r| r.client_id == ClientId(id)).collect();
            assert!(mine.windows(2).all(|w| w[0].avail_end < w[1].avail_start));
        }
    }

    #[test]
    fn trace_round_trips_and_reports_bad_lines() {
        let recs = generate(&TraceGenConfig {
            clients: 3,
            horizon: 3600.0,
            ..TraceGenConfig::default()
        });
        let mut buf = Vec::new();
        write_trace(&recs, &mut buf).unwrap();
        assert_eq!(read_trace(&buf[..]).unwrap(), recs);

        let bad = "{\"client_id\":1}\n";
        assert!(matches!(read_trace(bad.as_bytes()), Err(SimError::TraceParse { line: 1, .. })));
    }
}
