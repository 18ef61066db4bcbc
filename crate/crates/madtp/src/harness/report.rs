//! Run reports: a versioned structured-text format with stable key order
//! and 17-significant-digit numbers (so text round-trips reproduce every
//! f64 bit-exactly), a JSON view of the same data, mask renderings as
//! portable pixmaps, and the per-layer token-density table.

use crate::budget::FLOPS_CONVENTION;
use crate::error::{MadtpError, Result};
use crate::vlt::{LayerReport, VltConfig};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

pub const REPORT_VERSION: u32 = 1;

/// Choices this build makes where the pruning scheme is under-specified;
/// echoed into every report so results are self-describing.
pub fn decision_strings(config: &VltConfig) -> Vec<String> {
    vec![
        "scores: per-token max is read column-wise (max attention received)".to_string(),
        "prune rule: strict inequality; an emptied content set force-keeps the \
         argmax-score token (lowest index on ties)"
            .to_string(),
        "batch policies re-select top-n per instance by fused score; mean-keep \
         rounds half up, floored at specials+1"
            .to_string(),
        "merged token: score-weighted convex combination of finally-pruned \
         tokens, appended non-special, prunable later; records max constituent score"
            .to_string(),
        "controller: T <- clamp(T * (measured/target)^0.5) in [1e-3, 1e3]".to_string(),
        "special tokens participate in score normalization, exempt from pruning".to_string(),
        format!("modality scope: {:?}", config.modality_scope),
    ]
}

/// Run-level metadata echoed into the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub mode: String,
    pub dataset_size: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub temperature: f64,
    pub sorted_inference: bool,
}

/// Per-pair record: label, difficulty, cost and the full per-layer trail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub index: usize,
    pub matched: bool,
    pub difficulty: u32,
    pub gflops: f64,
    pub vision_layers: Vec<LayerReport>,
    pub language_layers: Vec<LayerReport>,
}

/// The complete output of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub version: u32,
    pub convention: String,
    pub decisions: Vec<String>,
    pub config: VltConfig,
    pub run: RunMeta,
    pub baseline_gflops: f64,
    pub dataset_average_gflops: f64,
    pub achieved_reduce_ratio: f64,
    pub pairs: Vec<PairRecord>,
}

impl PruneReport {
    pub fn new(config: &VltConfig, run: RunMeta) -> Self {
        PruneReport {
            version: REPORT_VERSION,
            convention: FLOPS_CONVENTION.to_string(),
            decisions: decision_strings(config),
            config: config.clone(),
            run,
            baseline_gflops: 0.0,
            dataset_average_gflops: 0.0,
            achieved_reduce_ratio: 0.0,
            pairs: Vec::new(),
        }
    }
}

fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn fmt_indices(idx: &[usize]) -> String {
    if idx.is_empty() {
        "-".to_string()
    } else {
        idx.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(",")
    }
}

fn layer_line(tag: &str, l: &LayerReport) -> String {
    format!(
        "{tag}: in={} out={} theta={} tis_min={} tis_max={} merged={} forced={} kept={}",
        l.alive_in,
        l.alive_out,
        fmt_f64(l.theta),
        fmt_f64(l.tis_min),
        fmt_f64(l.tis_max),
        l.merged as u8,
        l.forced as u8,
        fmt_indices(&l.kept_original),
    )
}

/// Structured-text serialization; key order is fixed and numbers carry 17
/// significant digits, so equal reports serialize to equal bytes.
pub fn to_text(report: &PruneReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "madtp-report {}", report.version);
    let _ = writeln!(s, "convention: {}", report.convention);
    for d in &report.decisions {
        let _ = writeln!(s, "decision: {d}");
    }
    let config = serde_json::to_string(&report.config).expect("config serializes");
    let _ = writeln!(s, "config: {config}");
    let _ = writeln!(s, "mode: {}", report.run.mode);
    let _ = writeln!(s, "dataset_size: {}", report.run.dataset_size);
    let _ = writeln!(s, "batch_size: {}", report.run.batch_size);
    let _ = writeln!(s, "seed: {}", report.run.seed);
    let _ = writeln!(s, "temperature: {}", fmt_f64(report.run.temperature));
    let _ = writeln!(s, "sorted_inference: {}", report.run.sorted_inference as u8);
    let _ = writeln!(s, "baseline_gflops: {}", fmt_f64(report.baseline_gflops));
    let _ = writeln!(s, "dataset_average_gflops: {}", fmt_f64(report.dataset_average_gflops));
    let _ = writeln!(s, "achieved_reduce_ratio: {}", fmt_f64(report.achieved_reduce_ratio));
    let _ = writeln!(s, "pairs: {}", report.pairs.len());
    for pair in &report.pairs {
        let _ = writeln!(
            s,
            "pair: index={} matched={} difficulty={} gflops={}",
            pair.index,
            pair.matched as u8,
            pair.difficulty,
            fmt_f64(pair.gflops)
        );
        for l in &pair.vision_layers {
            let _ = writeln!(s, "{}", layer_line("vlayer", l));
        }
        for l in &pair.language_layers {
            let _ = writeln!(s, "{}", layer_line("llayer", l));
        }
    }
    s
}

struct LineReader<'a> {
    lines: std::iter::Peekable<std::str::Lines<'a>>,
    line_no: usize,
}

impl<'a> LineReader<'a> {
    fn new(text: &'a str) -> Self {
        LineReader { lines: text.lines().peekable(), line_no: 0 }
    }

    fn next(&mut self) -> Result<&'a str> {
        self.line_no += 1;
        self.lines
            .next()
            .ok_or_else(|| MadtpError::Corrupt(format!("report truncated at line {}", self.line_no)))
    }

    fn peek(&mut self) -> Option<&&'a str> {
        self.lines.peek()
    }

    fn expect_key(&mut self, key: &str) -> Result<&'a str> {
        let line = self.next()?;
        let prefix = format!("{key}: ");
        line.strip_prefix(&prefix).ok_or_else(|| {
            MadtpError::Corrupt(format!("line {}: expected key '{key}', got '{line}'", self.line_no))
        })
    }
}

fn parse_f64(s: &str) -> Result<f64> {
    s.parse().map_err(|_| MadtpError::Corrupt(format!("bad number '{s}'")))
}

fn parse_usize(s: &str) -> Result<usize> {
    s.parse().map_err(|_| MadtpError::Corrupt(format!("bad count '{s}'")))
}

fn parse_flag(s: &str) -> Result<bool> {
    match s {
        "0" => Ok(false),
        "1" => Ok(true),
        other => Err(MadtpError::Corrupt(format!("bad flag '{other}'"))),
    }
}

fn parse_kv<'a>(field: &'a str, key: &str) -> Result<&'a str> {
    let prefix = format!("{key}=");
    field
        .strip_prefix(&prefix)
        .ok_or_else(|| MadtpError::Corrupt(format!("expected '{key}=', got '{field}'")))
}

fn parse_layer_line(line: &str, tag: &str) -> Result<LayerReport> {
    let body = line
        .strip_prefix(&format!("{tag}: "))
        .ok_or_else(|| MadtpError::Corrupt(format!("expected '{tag}:', got '{line}'")))?;
    let fields: Vec<&str> = body.split(' ').collect();
    if fields.len() != 8 {
        return Err(MadtpError::Corrupt(format!("layer line has {} fields", fields.len())));
    }
    let kept_str = parse_kv(fields[7], "kept")?;
    let kept_original = if kept_str == "-" {
        Vec::new()
    } else {
        kept_str.split(',').map(parse_usize).collect::<Result<Vec<_>>>()?
    };
    Ok(LayerReport {
        alive_in: parse_usize(parse_kv(fields[0], "in")?)?,
        alive_out: parse_usize(parse_kv(fields[1], "out")?)?,
        theta: parse_f64(parse_kv(fields[2], "theta")?)?,
        tis_min: parse_f64(parse_kv(fields[3], "tis_min")?)?,
        tis_max: parse_f64(parse_kv(fields[4], "tis_max")?)?,
        merged: parse_flag(parse_kv(fields[5], "merged")?)?,
        forced: parse_flag(parse_kv(fields[6], "forced")?)?,
        kept_original,
    })
}

/// Parses the structured-text format back into a report.
pub fn from_text(text: &str) -> Result<PruneReport> {
    let mut r = LineReader::new(text);
    let header = r.next()?;
    let version = header
        .strip_prefix("madtp-report ")
        .ok_or_else(|| MadtpError::Format(format!("not a report: '{header}'")))?;
    let version: u32 =
        version.parse().map_err(|_| MadtpError::Format(format!("bad version '{version}'")))?;
    if version != REPORT_VERSION {
        return Err(MadtpError::Format(format!("unsupported report version {version}")));
    }
    let convention = r.expect_key("convention")?.to_string();
    let mut decisions = Vec::new();
    while let Some(line) = r.peek() {
        if let Some(d) = line.strip_prefix("decision: ") {
            decisions.push(d.to_string());
            r.next()?;
        } else {
            break;
        }
    }
    let config: VltConfig = serde_json::from_str(r.expect_key("config")?)
        .map_err(|e| MadtpError::Corrupt(format!("bad config json: {e}")))?;
    let mode = r.expect_key("mode")?.to_string();
    let dataset_size = parse_usize(r.expect_key("dataset_size")?)?;
    let batch_size = parse_usize(r.expect_key("batch_size")?)?;
    let seed: u64 = r
        .expect_key("seed")?
        .parse()
        .map_err(|_| MadtpError::Corrupt("bad seed".to_string()))?;
    let temperature = parse_f64(r.expect_key("temperature")?)?;
    let sorted_inference = parse_flag(r.expect_key("sorted_inference")?)?;
    let baseline_gflops = parse_f64(r.expect_key("baseline_gflops")?)?;
    let dataset_average_gflops = parse_f64(r.expect_key("dataset_average_gflops")?)?;
    let achieved_reduce_ratio = parse_f64(r.expect_key("achieved_reduce_ratio")?)?;
    let pair_count = parse_usize(r.expect_key("pairs")?)?;

    let layers = config.layers;
    let mut pairs = Vec::with_capacity(pair_count);
    for _ in 0..pair_count {
        let line = r.next()?;
        let body = line
            .strip_prefix("pair: ")
            .ok_or_else(|| MadtpError::Corrupt(format!("expected 'pair:', got '{line}'")))?;
        let fields: Vec<&str> = body.split(' ').collect();
        if fields.len() != 4 {
            return Err(MadtpError::Corrupt("pair line malformed".to_string()));
        }
        let index = parse_usize(parse_kv(fields[0], "index")?)?;
        let matched = parse_flag(parse_kv(fields[1], "matched")?)?;
        let difficulty = parse_usize(parse_kv(fields[2], "difficulty")?)? as u32;
        let gflops = parse_f64(parse_kv(fields[3], "gflops")?)?;
        let mut vision_layers = Vec::with_capacity(layers);
        for _ in 0..layers {
            vision_layers.push(parse_layer_line(r.next()?, "vlayer")?);
        }
        let mut language_layers = Vec::with_capacity(layers);
        for _ in 0..layers {
            language_layers.push(parse_layer_line(r.next()?, "llayer")?);
        }
        pairs.push(PairRecord { index, matched, difficulty, gflops, vision_layers, language_layers });
    }

    Ok(PruneReport {
        version,
        convention,
        decisions,
        config,
        run: RunMeta { mode, dataset_size, batch_size, seed, temperature, sorted_inference },
        baseline_gflops,
        dataset_average_gflops,
        achieved_reduce_ratio,
        pairs,
    })
}

pub fn to_json(report: &PruneReport) -> String {
    serde_json::to_string_pretty(report).expect("report serializes")
}

pub fn write_text(report: &PruneReport, path: &Path) -> Result<()> {
    fs::write(path, to_text(report)).map_err(|e| MadtpError::io(path.display().to_string(), e))
}

pub fn read_text(path: &Path) -> Result<PruneReport> {
    let text =
        fs::read_to_string(path).map_err(|e| MadtpError::io(path.display().to_string(), e))?;
    from_text(&text)
}

/// Binary portable pixmap (P6). White cells are pruned positions.
fn write_ppm(path: &Path, width: usize, height: usize, pixels: &[(u8, u8, u8)]) -> Result<()> {
    let mut bytes = format!("P6\n{width} {height}\n255\n").into_bytes();
    for &(r, g, b) in pixels {
        bytes.push(r);
        bytes.push(g);
        bytes.push(b);
    }
    fs::write(path, bytes).map_err(|e| MadtpError::io(path.display().to_string(), e))
}

const CELL: usize = 12;
const KEPT_SHADE: (u8, u8, u8) = (72, 72, 72);
const PRUNED_SHADE: (u8, u8, u8) = (255, 255, 255);

fn grid_image(
    path: &Path,
    token_count: usize,
    grid_cols: usize,
    kept_original: &[usize],
) -> Result<()> {
    let grid_rows = token_count.div_ceil(grid_cols);
    let (w, h) = (grid_cols * CELL, grid_rows * CELL);
    let mut pixels = vec![(0u8, 0u8, 0u8); w * h];
    for t in 0..token_count {
        // position t in the original sequence maps to cell t; position 0 is
        // the special token and is not part of the content grid, so content
        // token i sits at original position i + 1.
        let original = t + 1;
        let shade = if kept_original.contains(&original) { KEPT_SHADE } else { PRUNED_SHADE };
        let (cr, cc) = (t / grid_cols, t % grid_cols);
        for dy in 0..CELL {
            for dx in 0..CELL {
                let y = cr * CELL + dy;
                let x = cc * CELL + dx;
                let border = dy == 0 || dx == 0;
                pixels[y * w + x] = if border { (16, 16, 16) } else { shade };
            }
        }
    }
    write_ppm(path, w, h, &pixels)
}

/// Writes per-layer mask renderings for the first `limit` pairs: a patch
/// grid per vision layer, a word strip per language layer, and a strike-out
/// word list per pair.
pub fn write_renderings(report: &PruneReport, out_dir: &Path, limit: usize) -> Result<()> {
    let masks_dir = out_dir.join("masks");
    fs::create_dir_all(&masks_dir)
        .map_err(|e| MadtpError::io(masks_dir.display().to_string(), e))?;
    let n = report.config.patch_count;
    let m = report.config.word_count;
    let grid_cols = (n as f64).sqrt().ceil() as usize;
    for pair in report.pairs.iter().take(limit) {
        for (layer, l) in pair.vision_layers.iter().enumerate() {
            let path = masks_dir.join(format!("pair{:04}_vision_layer{layer}.ppm", pair.index));
            grid_image(&path, n, grid_cols, &l.kept_original)?;
        }
        for (layer, l) in pair.language_layers.iter().enumerate() {
            let path = masks_dir.join(format!("pair{:04}_language_layer{layer}.ppm", pair.index));
            grid_image(&path, m, m, &l.kept_original)?;
        }
        let mut words = String::new();
        for (layer, l) in pair.language_layers.iter().enumerate() {
            let rendered: Vec<String> = (0..m)
                .map(|w| {
                    let original = w + 1;
                    if l.kept_original.contains(&original) {
                        format!("w{w:02}")
                    } else {
                        format!("~~w{w:02}~~")
                    }
                })
                .collect();
            let _ = writeln!(words, "layer {layer}: {}", rendered.join(" "));
        }
        let path = masks_dir.join(format!("pair{:04}_words.txt", pair.index));
        fs::write(&path, words).map_err(|e| MadtpError::io(path.display().to_string(), e))?;
    }
    Ok(())
}

/// Mean fraction of original tokens still alive after each layer, per
/// branch, across all pairs.
pub fn density_table(report: &PruneReport) -> String {
    let mut s = String::from("layer\tvision_density\tlanguage_density\n");
    let layers = report.config.layers;
    let nv = (report.config.patch_count + 1) as f64;
    let nl = (report.config.word_count + 1) as f64;
    for layer in 0..layers {
        let (mut v_acc, mut l_acc) = (0.0, 0.0);
        for pair in &report.pairs {
            v_acc += pair.vision_layers[layer].alive_out as f64 / nv;
            l_acc += pair.language_layers[layer].alive_out as f64 / nl;
        }
        let count = report.pairs.len().max(1) as f64;
        let _ = writeln!(s, "{layer}\t{:.6}\t{:.6}", v_acc / count, l_acc / count);
    }
    s
}
