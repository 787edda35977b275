//! End-to-end acceptance suite shared by the `reproduce` command and the
//! acceptance test target.

pub mod checks;
pub mod desk;
pub mod oracles;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::cli::report::{write_file, write_json, Manifest};
use crate::error::{Error, Result};
pub use desk::{Desk, DeskConfig, Role};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub id: u8,
    pub name: String,
    pub measured: String,
    pub threshold: String,
    /// Value conditions only; the runtime budget is checked separately.
    pub passed: bool,
    #[serde(skip)]
    pub seconds: f64,
    #[serde(skip)]
    pub time_limit: f64,
}

impl Outcome {
    pub fn new(id: u8, name: &str, measured: String, threshold: String, passed: bool, t0: Instant, limit: f64) -> Self {
        Self::with_elapsed(id, name, measured, threshold, passed, t0.elapsed(), limit)
    }

    pub fn with_elapsed(
        id: u8,
        name: &str,
        measured: String,
        threshold: String,
        passed: bool,
        elapsed: Duration,
        limit: f64,
    ) -> Self {
        Outcome {
            id,
            name: name.to_string(),
            measured,
            threshold,
            passed,
            seconds: elapsed.as_secs_f64(),
            time_limit: limit,
        }
    }

    pub fn within_time(&self) -> bool {
        self.seconds <= self.time_limit
    }

    pub fn ok(&self) -> bool {
        self.passed && self.within_time()
    }

    pub fn line(&self) -> String {
        let limit = if self.time_limit.is_finite() {
            format!(" / limit {:.0} s", self.time_limit)
        } else {
            String::new()
        };
        format!(
            "[{}] criterion {:>2} {}: {} | threshold: {} | {:.1} s{limit}",
            if self.ok() { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.measured,
            self.threshold,
            self.seconds
        )
    }
}

/// Criteria `1..=11` to run.
pub const ALL: [u8; 11] = [1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11];

/// Run `criteria` with desk configuration `cfg`, writing artifacts under
/// `out` and reporting each outcome as soon as it is known.
pub fn run(cfg: &DeskConfig, criteria: &[u8], out: &Path, mut report: impl FnMut(&Outcome)) -> Result<Vec<Outcome>> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut outcomes = Vec::new();
    let mut emit = |o: Outcome, all: &mut Vec<Outcome>| {
        report(&o);
        all.push(o);
    };
    let seed = cfg.seed;
    for id in [1u8, 2, 3, 4, 5] {
        if criteria.contains(&id) {
            let o = match id {
                1 => checks::criterion_1(seed),
                2 => checks::criterion_2(seed),
                3 => checks::criterion_3(seed),
                4 => checks::criterion_4(seed),
                _ => checks::criterion_5(seed),
            };
            emit(o, &mut outcomes);
        }
    }
    if criteria.iter().any(|c| (6..=10).contains(c)) {
        let mut desk = Desk::load(cfg)?;
        for id in [6u8, 7, 8, 9, 10] {
            if criteria.contains(&id) {
                let o = match id {
                    6 => desk::criterion_6(&mut desk),
                    7 => desk::criterion_7(&mut desk),
                    8 => desk::criterion_8(&mut desk),
                    9 => desk::criterion_9(&mut desk),
                    _ => desk::criterion_10(&mut desk),
                };
                emit(o, &mut outcomes);
            }
        }
        let files = desk.write_artifacts(out)?;
        let mut manifest = Manifest::new(
            "reproduce",
            config_digest(cfg),
            vec![("seed".into(), seed)],
        );
        manifest.record(out, &files)?;
        manifest.write(out)?;
    }
    if criteria.contains(&11) {
        emit(criterion_11(cfg, &out.join("determinism")), &mut outcomes);
    }
    write_json(&out.join("acceptance.json"), &outcomes)?;
    let timing: String = std::iter::once("criterion,seconds,limit\n".to_string())
        .chain(outcomes.iter().map(|o| format!("{},{:.3},{}\n", o.id, o.seconds, o.time_limit)))
        .collect();
    write_file(&out.join("timings.csv"), timing.as_bytes())?;
    let text: String = outcomes.iter().map(|o| o.line() + "\n").collect();
    write_file(&out.join("acceptance.txt"), text.as_bytes())?;
    Ok(outcomes)
}

pub fn config_digest(cfg: &DeskConfig) -> String {
    use sha2::{Digest, Sha256};
    let json = serde_json::to_vec(cfg).expect("serializable");
    Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
}

/// Every file under `dir` with its bytes, sorted by relative path.
fn snapshot(dir: &Path) -> Result<Vec<(PathBuf, Vec<u8>)>> {
    let mut out = Vec::new();
    for entry in walkdir::WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.map_err(|e| Error::io(dir, e.into()))?;
        if entry.file_type().is_file() {
            let p = entry.path();
            let bytes = fs::read(p).map_err(|e| Error::io(p, e))?;
            out.push((p.strip_prefix(dir).expect("under dir").to_path_buf(), bytes));
        }
    }
    Ok(out)
}

/// Files whose content depends on wall-clock time.
fn is_timing(rel: &Path) -> bool {
    matches!(rel.to_str(), Some("timings.csv" | "acceptance.txt"))
}

/// Two reproduce runs of the reduced configuration with one seed; every
/// checkpoint and report must match byte for byte.
pub fn criterion_11(cfg: &DeskConfig, scratch: &Path) -> Outcome {
    let t0 = Instant::now();
    let quick = cfg.quick();
    let criteria = [1u8, 2, 3, 4, 5, 6, 7, 8, 9, 10];
    let r = (|| -> Result<(usize, Vec<String>)> {
        let (a, b) = (scratch.join("run-a"), scratch.join("run-b"));
        for d in [&a, &b] {
            if d.exists() {
                fs::remove_dir_all(d).map_err(|e| Error::io(d, e))?;
            }
            run(&quick, &criteria, d, |_| {})?;
        }
        let (sa, sb) = (snapshot(&a)?, snapshot(&b)?);
        let mut diffs = Vec::new();
        let names_a: Vec<&PathBuf> = sa.iter().map(|f| &f.0).collect();
        let names_b: Vec<&PathBuf> = sb.iter().map(|f| &f.0).collect();
        if names_a != names_b {
            diffs.push("file sets differ".to_string());
        }
        let mut compared = 0;
        for ((pa, ba), (_, bb)) in sa.iter().zip(&sb) {
            if is_timing(pa) {
                continue;
            }
            compared += 1;
            if ba != bb {
                diffs.push(pa.display().to_string());
            }
        }
        Ok((compared, diffs))
    })();
    match r {
        Ok((n, diffs)) => {
            let ckpts = n;
            Outcome::new(
                11,
                "Determinism",
                format!(
                    "two reduced reproduce runs (seed {}): {ckpts} artifacts compared, {} differ{}",
                    cfg.seed,
                    diffs.len(),
                    diffs.first().map(|d| format!(" (first: {d})")).unwrap_or_default()
                ),
                "all checkpoints and reports bit-identical".into(),
                diffs.is_empty() && n > 0,
                t0,
                f64::INFINITY,
            )
        }
        Err(e) => Outcome::new(11, "Determinism", format!("error: {e}"), "no error".into(), false, t0, f64::INFINITY),
    }
}
