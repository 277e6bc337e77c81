//! Markdown report over every cell CSV in a results directory.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use mvcnet::trainer::aggregate;

use crate::output::{round2, Provenance, CELL_HEADER};
use crate::CliError;

#[derive(Debug, Clone)]
struct Source {
    file: String,
    provenance: Option<Provenance>,
    cells: usize,
}

/// (dataset, backbone, method) → `(repeat, accuracy)` cells.
#[derive(Debug, Default)]
struct Cells {
    datasets: Vec<String>,
    backbones: Vec<String>,
    /// Methods per backbone in order of first appearance.
    methods: HashMap<String, Vec<String>>,
    values: HashMap<(String, String, String), Vec<(usize, f64)>>,
}

fn push_unique(list: &mut Vec<String>, v: &str) {
    if !list.iter().any(|x| x == v) {
        list.push(v.to_string());
    }
}

fn parse_cells(
    path: &Path,
    text: &str,
    cells: &mut Cells,
    seen: &mut BTreeSet<String>,
) -> Result<Option<usize>, CliError> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let bad = |e: &dyn std::fmt::Display| CliError::Usage(format!("{}: {e}", path.display()));
    let header = reader.headers().map_err(|e| bad(&e))?;
    if header.iter().ne(CELL_HEADER) {
        return Ok(None);
    }
    let mut n = 0;
    for record in reader.records() {
        let r = record.map_err(|e| bad(&e))?;
        let (dataset, backbone, method) = (&r[0], &r[1], &r[2]);
        let repeat: usize = r[4]
            .parse()
            .map_err(|e| bad(&format!("repeat {:?}: {e}", &r[4])))?;
        let accuracy: f64 = r[5]
            .parse()
            .map_err(|e| bad(&format!("accuracy {:?}: {e}", &r[5])))?;
        let key = format!(
            "{dataset}\u{1f}{backbone}\u{1f}{method}\u{1f}{}\u{1f}{repeat}",
            &r[3]
        );
        if !seen.insert(key) {
            return Err(bad(&format!(
                "duplicate cell {dataset}/{backbone}/{method} subject {} repeat {repeat}",
                &r[3]
            )));
        }
        push_unique(&mut cells.datasets, dataset);
        push_unique(&mut cells.backbones, backbone);
        push_unique(
            cells.methods.entry(backbone.to_string()).or_default(),
            method,
        );
        cells
            .values
            .entry((
                dataset.to_string(),
                backbone.to_string(),
                method.to_string(),
            ))
            .or_default()
            .push((repeat, accuracy));
        n += 1;
    }
    Ok(Some(n))
}

/// Marks the best (bold) and second-best (underlined) entries; ties go to
/// the earlier index. Values are compared as displayed.
fn ranks(values: &[Option<String>]) -> Vec<u8> {
    let key = |s: &String| -> f64 { s.parse().unwrap_or(f64::NEG_INFINITY) };
    let mut order: Vec<usize> = (0..values.len()).filter(|&i| values[i].is_some()).collect();
    // Stable sort keeps earlier methods first among equal values.
    order.sort_by(|&a, &b| {
        let (x, y) = (
            key(values[a].as_ref().unwrap()),
            key(values[b].as_ref().unwrap()),
        );
        y.partial_cmp(&x).unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut out = vec![0; values.len()];
    for (rank, &i) in order.iter().take(2).enumerate() {
        out[i] = rank as u8 + 1;
    }
    out
}

fn decorate(text: String, rank: u8) -> String {
    match rank {
        1 => format!("**{text}**"),
        2 => format!("<u>{text}</u>"),
        _ => text,
    }
}

/// Renders the report; fails when the directory holds no cell CSV.
pub fn render_report(results_dir: &Path) -> Result<String, CliError> {
    let io = |e: std::io::Error| CliError::Io(format!("{}: {e}", results_dir.display()));
    let mut files: Vec<_> = std::fs::read_dir(results_dir)
        .map_err(io)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv") && p.is_file())
        .collect();
    files.sort();
    let mut cells = Cells::default();
    let mut seen = BTreeSet::new();
    let mut sources = Vec::new();
    for path in &files {
        let text = std::fs::read_to_string(path).map_err(io)?;
        if let Some(n) = parse_cells(path, &text, &mut cells, &mut seen)? {
            sources.push(Source {
                file: path
                    .file_name()
                    .expect("file")
                    .to_string_lossy()
                    .into_owned(),
                provenance: Provenance::parse(&text),
                cells: n,
            });
        }
    }
    if cells.values.is_empty() {
        return Err(CliError::Usage(format!(
            "no result cells found in {}",
            results_dir.display()
        )));
    }

    let with_average = cells.datasets.len() > 1;
    let mut columns: Vec<String> = cells.datasets.clone();
    if with_average {
        columns.push("Average".into());
    }
    let mut md = String::from("# Cross-subject classification accuracy (%)\n\n");
    md.push_str(&format!(
        "| Backbone | Method | {} |\n",
        columns.join(" | ")
    ));
    md.push_str(&format!("|---|---|{}\n", "---|".repeat(columns.len())));
    for backbone in &cells.backbones {
        let methods = &cells.methods[backbone];
        // table[method][column] = (displayed mean, displayed cell)
        let table: Vec<Vec<Option<(String, String)>>> = methods
            .iter()
            .map(|method| {
                let mut means = Vec::new();
                let mut row: Vec<Option<(String, String)>> = cells
                    .datasets
                    .iter()
                    .map(|dataset| {
                        let v = cells.values.get(&(
                            dataset.clone(),
                            backbone.clone(),
                            method.clone(),
                        ))?;
                        let agg = aggregate(v.iter().copied());
                        let (mean, std) = (agg.mean * 100.0, agg.std * 100.0);
                        means.push(mean);
                        Some((round2(mean), format!("{}±{}", round2(mean), round2(std))))
                    })
                    .collect();
                if with_average {
                    row.push((means.len() == cells.datasets.len()).then(|| {
                        let avg = round2(means.iter().sum::<f64>() / means.len() as f64);
                        (avg.clone(), avg)
                    }));
                }
                row
            })
            .collect();
        let mut marks = vec![vec![0u8; columns.len()]; methods.len()];
        for col in 0..columns.len() {
            let shown: Vec<Option<String>> = table
                .iter()
                .map(|r| r[col].as_ref().map(|c| c.0.clone()))
                .collect();
            for (m, rank) in ranks(&shown).into_iter().enumerate() {
                marks[m][col] = rank;
            }
        }
        for (m, method) in methods.iter().enumerate() {
            let rendered: Vec<String> = table[m]
                .iter()
                .zip(&marks[m])
                .map(|(c, &rank)| match c {
                    Some((_, text)) => decorate(text.clone(), rank),
                    None => "n/a".into(),
                })
                .collect();
            md.push_str(&format!(
                "| {backbone} | {method} | {} |\n",
                rendered.join(" | ")
            ));
        }
    }

    md.push_str("\n## Runs\n\n| File | Cells | Seed | Config SHA-256 |\n|---|---|---|---|\n");
    for s in &sources {
        let (seed, hash) = match &s.provenance {
            Some(p) => (p.seed.to_string(), p.config_sha256.clone()),
            None => ("unknown".into(), "unknown".into()),
        };
        md.push_str(&format!(
            "| {} | {} | {seed} | `{hash}` |\n",
            s.file, s.cells
        ));
    }
    md.push_str(&format!(
        "\nEach entry is mean±std in percent: accuracies are averaged over held-out subjects \
         within a repeat, then mean and population std are taken over repeats, and both are \
         rounded half-to-even to two decimals. Per backbone and column the best mean is bold \
         and the second best underlined; ties go to the method listed first.{}\n",
        if with_average {
            " Average is the mean over datasets of the unrounded dataset means."
        } else {
            ""
        }
    ));
    Ok(md)
}
