//! Result files: provenance header, CSV tables and atomic writes.

use std::io::Write;
use std::path::Path;

use crate::CliError;

/// Cell table columns shared by every command that trains.
pub const CELL_HEADER: [&str; 6] = [
    "dataset", "backbone", "method", "subject", "repeat", "accuracy",
];

/// Comment lines opening every CSV: config hash and base seed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Provenance {
    pub config_sha256: String,
    pub seed: u64,
}

impl Provenance {
    pub fn lines(&self) -> String {
        format!(
            "# config_sha256={}\n# seed={}\n",
            self.config_sha256, self.seed
        )
    }

    /// Reads the comment lines back; missing keys yield `None`.
    pub fn parse(text: &str) -> Option<Self> {
        let mut hash = None;
        let mut seed = None;
        for line in text.lines().take_while(|l| l.starts_with('#')) {
            let body = line.trim_start_matches('#').trim();
            if let Some(v) = body.strip_prefix("config_sha256=") {
                hash = Some(v.to_string());
            } else if let Some(v) = body.strip_prefix("seed=") {
                seed = v.parse().ok();
            }
        }
        Some(Self {
            config_sha256: hash?,
            seed: seed?,
        })
    }
}

/// Writes `bytes` to a temporary file beside `path` and renames it into
/// place, so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let io = |e: std::io::Error| CliError::Io(format!("{}: {e}", path.display()));
    std::fs::create_dir_all(dir).map_err(io)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
    tmp.write_all(bytes).map_err(io)?;
    tmp.as_file().sync_all().map_err(io)?;
    tmp.persist(path).map_err(|e| io(e.error))?;
    Ok(())
}

/// An in-memory CSV table rendered with the provenance header.
#[derive(Debug, Clone)]
pub struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: AsRef<str>>(header: &[S]) -> Self {
        Self {
            header: header.iter().map(|s| s.as_ref().to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        assert_eq!(
            row.len(),
            self.header.len(),
            "row width must match the header"
        );
        self.rows.push(row);
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn render(&self, provenance: &Provenance) -> Vec<u8> {
        let mut out = provenance.lines().into_bytes();
        let mut w = csv::Writer::from_writer(&mut out);
        w.write_record(&self.header).expect("writing to memory");
        for row in &self.rows {
            w.write_record(row).expect("writing to memory");
        }
        w.flush().expect("writing to memory");
        drop(w);
        out
    }

    pub fn write(&self, path: &Path, provenance: &Provenance) -> Result<(), CliError> {
        write_atomic(path, &self.render(provenance))
    }
}

/// Shortest representation that parses back to the same `f64`.
pub fn num(x: f64) -> String {
    format!("{x}")
}

/// `x` rounded half-to-even at two decimals, formatted with two decimals.
/// Rounds the shortest decimal form of `x` (the text [`num`] writes), so
/// a CSV value of `87.125` renders as `87.12` and `87.135` as `87.14`.
pub fn round2(x: f64) -> String {
    if !x.is_finite() {
        return num(x);
    }
    let text = num(x.abs());
    let (int, frac) = text.split_once('.').unwrap_or((&text, ""));
    let digits: Vec<u8> = frac.bytes().map(|b| b - b'0').collect();
    let kept = |i: usize| u64::from(digits.get(i).copied().unwrap_or(0));
    let mut cents = int.parse::<u64>().expect("integer part") * 100 + kept(0) * 10 + kept(1);
    let rest = digits.get(2..).unwrap_or(&[]);
    let round_up = match rest.first() {
        Some(&d) if d > 5 => true,
        Some(&5) => rest[1..].iter().any(|&d| d > 0) || cents % 2 == 1,
        _ => false,
    };
    if round_up {
        cents += 1;
    }
    let sign = if x < 0.0 && cents > 0 { "-" } else { "" };
    format!("{sign}{}.{:02}", cents / 100, cents % 100)
}
