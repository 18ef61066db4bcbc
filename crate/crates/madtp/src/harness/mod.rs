//! Run orchestration: versioned run configuration, the simulate / calibrate
//! / static-baseline / ingest / train runners, and report export.

pub mod dump;
pub mod report;
pub mod synth;
pub mod train;

use crate::budget::{dataset_average_flops, BudgetState, FlopsModel};
use crate::error::{MadtpError, Result};
use crate::numerics::Matrix;
use crate::vlt::{
    init_weights, model_forward_captured, EngineMode, InstanceTrace, MagModule, ModelWeights,
    VltConfig,
};
use report::{PruneReport, RunMeta};
use serde::{Deserialize, Serialize};
use std::path::Path;
use synth::{gen_synthetic, PairSample, SynthConfig};

pub const CONFIG_VERSION: u32 = 1;

/// Dataset-generation knobs carried by the run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthOptions {
    pub concept_bank: usize,
    pub max_concepts: usize,
    pub concept_strength: f64,
    pub token_norm: f64,
    pub background_themes: usize,
    pub theme_jitter: f64,
    pub filler_fraction: f64,
    pub filler_scale: f64,
    pub matched_fraction: f64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        SynthOptions {
            concept_bank: 16,
            max_concepts: 3,
            concept_strength: 7.0,
            token_norm: 4.0,
            background_themes: 8,
            theme_jitter: 0.4,
            filler_fraction: 0.22,
            filler_scale: 0.05,
            matched_fraction: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrateOptions {
    pub max_iterations: usize,
    pub tolerance: f64,
}

impl Default for CalibrateOptions {
    fn default() -> Self {
        CalibrateOptions { max_iterations: 50, tolerance: 0.05 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainOptions {
    pub steps: usize,
    pub learning_rate: f64,
    pub pairs: usize,
    pub batch_size: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions { steps: 200, learning_rate: 0.1, pairs: 16, batch_size: 4 }
    }
}

/// Complete run configuration: the model plus harness-level settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub version: u32,
    pub model: VltConfig,
    pub dataset_size: usize,
    pub batch_size: usize,
    pub synth: SynthOptions,
    pub sorted_inference: bool,
    pub render_limit: usize,
    pub include_guidance_overhead: bool,
    pub stp_k: usize,
    pub calibrate: CalibrateOptions,
    pub train: TrainOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            version: CONFIG_VERSION,
            model: VltConfig::default(),
            dataset_size: 256,
            batch_size: 32,
            synth: SynthOptions::default(),
            sorted_inference: false,
            render_limit: 8,
            include_guidance_overhead: false,
            stp_k: 4,
            calibrate: CalibrateOptions::default(),
            train: TrainOptions::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(MadtpError::Format(format!(
                "config version {} unsupported, expected {CONFIG_VERSION}",
                self.version
            )));
        }
        if self.batch_size == 0 {
            return Err(MadtpError::invalid("config: batch size must be >= 1"));
        }
        self.model.validate()?;
        self.synth_config(self.dataset_size).validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)
            .map_err(|e| MadtpError::Format(format!("config parse error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| MadtpError::io(path.display().to_string(), e))?;
        Self::from_json(&text)
    }

    pub fn synth_config(&self, pairs: usize) -> SynthConfig {
        SynthConfig {
            pairs,
            patch_count: self.model.patch_count,
            patch_width: self.model.d_vision,
            word_count: self.model.word_count,
            word_width: self.model.d_language,
            concept_bank: self.synth.concept_bank,
            max_concepts: self.synth.max_concepts,
            concept_strength: self.synth.concept_strength,
            token_norm: self.synth.token_norm,
            background_themes: self.synth.background_themes,
            theme_jitter: self.synth.theme_jitter,
            filler_fraction: self.synth.filler_fraction,
            filler_scale: self.synth.filler_scale,
            matched_fraction: self.synth.matched_fraction,
        }
    }

    /// Dataset stream is decorrelated from the weight stream so reseeding
    /// one does not silently shift the other.
    pub fn data_seed(&self) -> u64 {
        self.model.seed ^ 0xDA7A_5EED
    }

    pub fn flops_model(&self) -> FlopsModel {
        let mut model = FlopsModel::from_config(&self.model);
        model.include_guidance_overhead = self.include_guidance_overhead;
        model
    }
}

/// Traces and per-pair costs for one sweep over a dataset, pair order
/// matching the input dataset order.
pub struct SweepResult {
    pub traces: Vec<InstanceTrace>,
    pub gflops: Vec<f64>,
    pub mean_gflops: f64,
    pub logits: Vec<[f64; 2]>,
}

/// Runs the model over the dataset in batches. `order` indexes into
/// `dataset`; outputs are re-aligned to dataset order.
pub fn sweep(
    config: &RunConfig,
    weights: &ModelWeights,
    mag: &MagModule,
    dataset: &[PairSample],
    order: &[usize],
    mode: &EngineMode,
    temperature: f64,
) -> Result<SweepResult> {
    let flops = config.flops_model();
    let mut traces: Vec<Option<InstanceTrace>> = vec![None; dataset.len()];
    let mut logits: Vec<[f64; 2]> = vec![[0.0; 2]; dataset.len()];
    for chunk in order.chunks(config.batch_size) {
        let images: Vec<Matrix> = chunk.iter().map(|&i| dataset[i].image.clone()).collect();
        let texts: Vec<Matrix> = chunk.iter().map(|&i| dataset[i].text.clone()).collect();
        let out = model_forward_captured(
            &images,
            &texts,
            &config.model,
            weights,
            mag,
            mode,
            temperature,
            false,
        )?;
        for (slot, (&idx, trace)) in chunk.iter().zip(out.traces).enumerate() {
            traces[idx] = Some(trace);
            logits[idx] = out.logits[slot];
            let _ = slot;
        }
    }
    let traces: Vec<InstanceTrace> = traces.into_iter().map(|t| t.expect("covered")).collect();
    let gflops: Vec<f64> =
        traces.iter().map(|t| flops.model_flops(t)).collect::<Result<Vec<_>>>()?;
    let mean_gflops = dataset_average_flops(&gflops)?;
    Ok(SweepResult { traces, gflops, mean_gflops, logits })
}

/// Processing order: dataset order, or grouped by planted difficulty when
/// sorted inference is on.
pub fn processing_order(dataset: &[PairSample], sorted: bool) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    if sorted {
        order.sort_by_key(|&i| (dataset[i].difficulty, i));
    }
    order
}

fn engine_mode(config: &RunConfig) -> EngineMode {
    if config.model.pruning_enabled {
        EngineMode::Dynamic
    } else {
        EngineMode::Disabled
    }
}

fn build_report(
    config: &RunConfig,
    mode_label: &str,
    temperature: f64,
    dataset: &[PairSample],
    result: &SweepResult,
) -> Result<PruneReport> {
    let flops = config.flops_model();
    let baseline = flops.baseline_gflops(config.model.patch_count, config.model.word_count);
    let run = RunMeta {
        mode: mode_label.to_string(),
        dataset_size: dataset.len(),
        batch_size: config.batch_size,
        seed: config.model.seed,
        temperature,
        sorted_inference: config.sorted_inference,
    };
    let mut report = PruneReport::new(&config.model, run);
    report.baseline_gflops = baseline;
    if !dataset.is_empty() {
        report.dataset_average_gflops = result.mean_gflops;
        report.achieved_reduce_ratio = 1.0 - result.mean_gflops / baseline;
    }
    for (i, sample) in dataset.iter().enumerate() {
        report.pairs.push(report::PairRecord {
            index: i,
            matched: sample.matched,
            difficulty: sample.difficulty,
            gflops: result.gflops[i],
            vision_layers: result.traces[i].vision_layers.clone(),
            language_layers: result.traces[i].language_layers.clone(),
        });
    }
    Ok(report)
}

/// Output of a simulate run: the report plus the dataset and model handles
/// for downstream comparisons.
pub struct SimulateOutcome {
    pub report: PruneReport,
    pub dataset: Vec<PairSample>,
    pub weights: ModelWeights,
    pub mag: MagModule,
    pub sweep: SweepResult,
}

/// Forwards the synthetic dataset and assembles the full report.
pub fn run_simulate(config: &RunConfig) -> Result<SimulateOutcome> {
    config.validate()?;
    let (weights, mag) = init_weights(&config.model)?;
    let dataset = gen_synthetic(&config.synth_config(config.dataset_size), config.data_seed())?;
    let order = processing_order(&dataset, config.sorted_inference);
    let mode = engine_mode(config);
    let result = sweep(
        config,
        &weights,
        &mag,
        &dataset,
        &order,
        &mode,
        config.model.temperature,
    )?;
    let report = build_report(
        config,
        "simulate",
        config.model.temperature,
        &dataset,
        &result,
    )?;
    Ok(SimulateOutcome { report, dataset, weights, mag, sweep: result })
}

/// Writes the standard artifact set for a finished run.
pub fn export_run(report: &PruneReport, out_dir: &Path, render_limit: usize) -> Result<()> {
    std::fs::create_dir_all(out_dir)
        .map_err(|e| MadtpError::io(out_dir.display().to_string(), e))?;
    report::write_text(report, &out_dir.join("report.txt"))?;
    std::fs::write(out_dir.join("report.json"), report::to_json(report))
        .map_err(|e| MadtpError::io(out_dir.display().to_string(), e))?;
    std::fs::write(out_dir.join("density.tsv"), report::density_table(report))
        .map_err(|e| MadtpError::io(out_dir.display().to_string(), e))?;
    report::write_renderings(report, out_dir, render_limit)?;
    Ok(())
}

/// Captures the first pair's attention maps and writes them as a dump.
pub fn export_first_pair_dump(
    config: &RunConfig,
    weights: &ModelWeights,
    mag: &MagModule,
    dataset: &[PairSample],
    path: &Path,
) -> Result<()> {
    let first = dataset
        .first()
        .ok_or_else(|| MadtpError::invalid("dump export: empty dataset"))?;
    let out = model_forward_captured(
        &[first.image.clone()],
        &[first.text.clone()],
        &config.model,
        weights,
        mag,
        &engine_mode(config),
        config.model.temperature,
        true,
    )?;
    let maps = &out.captured[0];
    let mut entries = Vec::new();
    for m in &maps.vision_self {
        entries.push(dump::DumpEntry { branch: dump::DumpBranch::VisionSelf, map: m.clone() });
    }
    for m in &maps.vision_token {
        entries.push(dump::DumpEntry { branch: dump::DumpBranch::VisionToken, map: m.clone() });
    }
    for m in &maps.language_self {
        entries.push(dump::DumpEntry { branch: dump::DumpBranch::LanguageSelf, map: m.clone() });
    }
    for m in &maps.language_token {
        entries
            .push(dump::DumpEntry { branch: dump::DumpBranch::LanguageToken, map: m.clone() });
    }
    dump::write_dump(path, &dump::AttentionDump { entries })
}

/// One calibrate run: iterates simulate and temperature adjustment until the
/// measured cost lands inside the tolerance band or the cap is hit.
#[derive(Debug, Clone)]
pub struct CalibrationOutcome {
    pub converged: bool,
    pub iterations: usize,
    pub final_temperature: f64,
    pub measured_gflops: f64,
    pub state: BudgetState,
}

impl CalibrationOutcome {
    /// Human-readable convergence trace.
    pub fn trace_text(&self) -> String {
        let mut s = format!(
            "calibration target={:.6} GFLOPs (reduce ratio {:.3})\n",
            self.state.target_gflops, self.state.target_reduce_ratio
        );
        for (i, measured, t) in &self.state.history {
            s.push_str(&format!("iter {i}: measured={measured:.6} T_next={t:.6}\n"));
        }
        s.push_str(&format!(
            "{}: T={:.6} measured={:.6} after {} iterations\n",
            if self.converged { "converged" } else { "did not converge" },
            self.final_temperature,
            self.measured_gflops,
            self.iterations
        ));
        s
    }
}

/// Calibrates the temperature for `target_ratio` on the configured workload.
pub fn run_calibrate(config: &RunConfig, target_ratio: f64) -> Result<CalibrationOutcome> {
    config.validate()?;
    if !(0.0..1.0).contains(&target_ratio) {
        return Err(MadtpError::invalid("calibrate: target ratio must be in [0, 1)"));
    }
    let (weights, mag) = init_weights(&config.model)?;
    let dataset = gen_synthetic(&config.synth_config(config.dataset_size), config.data_seed())?;
    let order = processing_order(&dataset, config.sorted_inference);
    let flops = config.flops_model();
    let baseline = flops.baseline_gflops(config.model.patch_count, config.model.word_count);
    let mut state = BudgetState::new(target_ratio, baseline, config.model.temperature)?;
    let mode = engine_mode(config);

    // A disabled-pruning run measures the baseline; a zero target is then
    // already converged at iteration zero.
    let mut measured = baseline;
    let mut converged = false;
    let mut iterations = 0;
    for i in 0..config.calibrate.max_iterations {
        let result = sweep(config, &weights, &mag, &dataset, &order, &mode, state.temperature)?;
        measured = result.mean_gflops;
        iterations = i;
        if state.relative_error(measured) <= config.calibrate.tolerance {
            converged = true;
            break;
        }
        state.adjust_temperature(measured)?;
    }
    Ok(CalibrationOutcome {
        converged,
        iterations,
        final_temperature: state.temperature,
        measured_gflops: measured,
        state,
    })
}

/// Static baseline: drop exactly `k` lowest-score non-special tokens per
/// layer, no threshold, no merge, no batch policy.
pub fn run_stp_baseline(config: &RunConfig, k: usize) -> Result<SimulateOutcome> {
    config.validate()?;
    let scope = config.model.modality_scope;
    let layers = config.model.layers;
    let prunes_vision = !matches!(scope, crate::vlt::ModalityScope::LanguageOnly);
    let prunes_language = !matches!(scope, crate::vlt::ModalityScope::VisionOnly);
    let mut vision_counts = Vec::with_capacity(layers);
    let mut language_counts = Vec::with_capacity(layers);
    let mut nv = config.model.patch_count + 1;
    let mut nl = config.model.word_count + 1;
    for _ in 0..layers {
        if prunes_vision {
            if nv <= k + 1 {
                return Err(MadtpError::invalid(format!(
                    "stp: k={k} exhausts the vision branch ({} non-special tokens left)",
                    nv - 1
                )));
            }
            nv -= k;
        }
        if prunes_language {
            if nl <= k + 1 {
                return Err(MadtpError::invalid(format!(
                    "stp: k={k} exhausts the language branch ({} non-special tokens left)",
                    nl - 1
                )));
            }
            nl -= k;
        }
        vision_counts.push(nv);
        language_counts.push(nl);
    }

    let (weights, mag) = init_weights(&config.model)?;
    let dataset = gen_synthetic(&config.synth_config(config.dataset_size), config.data_seed())?;
    let order = processing_order(&dataset, config.sorted_inference);

    // Forced counts are per layer per instance; instances within a batch all
    // share the deterministic schedule.
    let result = {
        let flops = config.flops_model();
        let mut traces: Vec<Option<InstanceTrace>> = vec![None; dataset.len()];
        let mut logits: Vec<[f64; 2]> = vec![[0.0; 2]; dataset.len()];
        for chunk in order.chunks(config.batch_size) {
            let images: Vec<Matrix> = chunk.iter().map(|&i| dataset[i].image.clone()).collect();
            let texts: Vec<Matrix> = chunk.iter().map(|&i| dataset[i].text.clone()).collect();
            let mode = EngineMode::ForcedCounts {
                vision: vision_counts.iter().map(|&n| vec![n; chunk.len()]).collect(),
                language: language_counts.iter().map(|&n| vec![n; chunk.len()]).collect(),
                merge: false,
            };
            let out = model_forward_captured(
                &images,
                &texts,
                &config.model,
                &weights,
                &mag,
                &mode,
                config.model.temperature,
                false,
            )?;
            for (slot, (&idx, trace)) in chunk.iter().zip(out.traces).enumerate() {
                traces[idx] = Some(trace);
                logits[idx] = out.logits[slot];
            }
        }
        let traces: Vec<InstanceTrace> =
            traces.into_iter().map(|t| t.expect("covered")).collect();
        let gflops: Vec<f64> =
            traces.iter().map(|t| flops.model_flops(t)).collect::<Result<Vec<_>>>()?;
        let mean_gflops = dataset_average_flops(&gflops)?;
        SweepResult { traces, gflops, mean_gflops, logits }
    };
    let report = build_report(config, "stp", config.model.temperature, &dataset, &result)?;
    Ok(SimulateOutcome { report, dataset, weights, mag, sweep: result })
}

/// Extracts per-layer pre-merge keep counts from a sweep, for matched-budget
/// replays: forced-keep-count mode plus merge reproduces `alive_out` exactly.
pub fn kept_counts_from_traces(
    traces: &[InstanceTrace],
) -> (Vec<Vec<usize>>, Vec<Vec<usize>>) {
    let layers = traces.first().map(|t| t.vision_layers.len()).unwrap_or(0);
    let mut vision = vec![Vec::with_capacity(traces.len()); layers];
    let mut language = vec![Vec::with_capacity(traces.len()); layers];
    for trace in traces {
        for (l, layer) in trace.vision_layers.iter().enumerate() {
            vision[l].push(layer.alive_out - layer.merged as usize);
        }
        for (l, layer) in trace.language_layers.iter().enumerate() {
            language[l].push(layer.alive_out - layer.merged as usize);
        }
    }
    (vision, language)
}

/// Result bundle for the train-toy mode.
pub struct TrainOutcome {
    pub result: train::TrainResult,
    pub dataset: Vec<PairSample>,
}

pub fn run_train_toy(config: &RunConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let (weights, mag) = init_weights(&config.model)?;
    let dataset = gen_synthetic(&config.synth_config(config.train.pairs), config.data_seed())?;
    let result = train::train_toy(
        &config.model,
        &weights,
        &mag,
        &dataset,
        config.train.steps,
        config.train.learning_rate,
        config.train.batch_size,
    )?;
    Ok(TrainOutcome { result, dataset })
}
