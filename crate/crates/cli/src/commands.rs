use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::Instant;

use intervene::evalbench::{
    cv_forecast_eval, inference_eval, CarryForward, GlobalMean, TransferForecaster,
};
use intervene::io::{fmt_f64, read_dir, write_atomic, write_dir};
use intervene::mirrors::{select_taxa, toggle_scenarios};
use intervene::simgen::nonnull_sets;
use intervene::transfer::{forecast_at, write_long_csv, Anchor};
use intervene::{
    BoostConfig, CvConfig, Error, FitRecipe, Forecaster, InterventionScenario, InterventionSeriesSet,
    NormalizationMode, ScaleTag, SelectConfig, SimConfig, TransferModel,
};
use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::manifest::{beside, RunManifest, MANIFEST_FILE};
use crate::{BenchmarkArgs, DataArgs, Failure, FitArgs, PredictArgs, SelectArgs, SimulateArgs};

pub struct Context {
    pub argv: Vec<String>,
    pub start: Instant,
}

impl Context {
    /// Use `seed`, or draw one and record it in the argv.
    fn resolve_seed(&mut self, seed: Option<u64>) -> u64 {
        seed.unwrap_or_else(|| {
            let s = rand::random::<u64>();
            self.argv.push("--seed".into());
            self.argv.push(s.to_string());
            s
        })
    }

    fn finish(
        &self,
        subcommand: &str,
        config: impl Serialize,
        seed: Option<u64>,
        inputs: Vec<PathBuf>,
        outputs: Vec<PathBuf>,
        at: &Path,
    ) -> Result<(), Failure> {
        let manifest = RunManifest {
            subcommand: subcommand.into(),
            argv: self.argv.clone(),
            config: serde_json::to_value(config).map_err(Error::from)?,
            seed,
            inputs,
            outputs,
            version: env!("CARGO_PKG_VERSION").into(),
            threads: rayon::current_num_threads(),
            seconds: self.start.elapsed().as_secs_f64(),
        };
        manifest.write(at)?;
        Ok(())
    }
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(dir).map_err(|e| {
        Failure::from(Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })
    })
}

fn read_text(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| {
        Failure::from(Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    })
}

fn load(args: &DataArgs) -> Result<InterventionSeriesSet, Failure> {
    let mut set = read_dir(&args.data)?;
    set.scale = args.scale.into();
    set.validate()?;
    Ok(set)
}

fn require_counts(set: &InterventionSeriesSet, mode: NormalizationMode) -> Result<(), Failure> {
    if mode != NormalizationMode::None && set.scale != ScaleTag::Counts {
        return Err(Error::Scale(format!(
            "--normalize {} needs counts, data is {}",
            mode.as_str(),
            set.scale.as_str()
        ))
        .into());
    }
    Ok(())
}

pub fn simulate(ctx: &mut Context, args: SimulateArgs) -> Result<(), Failure> {
    let (mut config, config_seed) = match &args.config {
        Some(path) => {
            let text = read_text(path)?;
            let raw: serde_json::Value = serde_json::from_str(&text).map_err(Error::from)?;
            let explicit = raw.get("seed").is_some();
            let config = SimConfig::from_json(&text)?;
            let seed = explicit.then_some(config.seed);
            (config, seed)
        }
        None => (SimConfig::default(), None),
    };
    config.seed = ctx.resolve_seed(args.seed.or(config_seed));
    config.validate()?;
    let (set, truth) = intervene::simgen::simulate(&config)?;

    create_dir(&args.out)?;
    write_dir(&set, &args.out)?;
    let truth_path = args.out.join("truth.json");
    truth.write_json(&truth_path)?;
    let config_path = args.out.join("config.json");
    write_atomic(&config_path, serde_json::to_string_pretty(&config).map_err(Error::from)?.as_bytes())?;

    let mut outputs: Vec<PathBuf> = ["reads.csv", "samples.csv", "interventions.csv", "subjects.csv"]
        .iter()
        .map(|f| args.out.join(f))
        .collect();
    outputs.extend([truth_path, config_path]);
    let inputs = args.config.iter().cloned().collect();
    ctx.finish("simulate", &config, Some(config.seed), inputs, outputs, &args.out.join(MANIFEST_FILE))
}

pub fn fit(ctx: &mut Context, args: FitArgs) -> Result<(), Failure> {
    let seed = ctx.resolve_seed(args.seed);
    let set = load(&args.data)?;
    require_counts(&set, args.normalize)?;
    let recipe = FitRecipe {
        p: args.p,
        q: args.q,
        normalization: args.normalize,
        boost: args.boost.config(seed),
    };
    let model = recipe.fit(&set)?;
    model.save(&args.out)?;
    ctx.finish(
        "fit",
        recipe,
        Some(seed),
        vec![args.data.data.clone()],
        vec![args.out.clone()],
        &beside(&args.out),
    )
}

#[derive(Debug, Clone, Copy, Serialize)]
#[serde(rename_all = "snake_case")]
enum PredictAnchor {
    Onset,
    End,
    Index(usize),
}

impl PredictAnchor {
    fn parse(s: &str) -> Result<Self, Failure> {
        match s {
            "onset" => Ok(PredictAnchor::Onset),
            "end" => Ok(PredictAnchor::End),
            n => n
                .parse()
                .map(PredictAnchor::Index)
                .map_err(|_| Failure::validation(format!("--anchor must be onset, end or an index, got `{n}`"))),
        }
    }
}

/// Interventions for `horizon` columns from `anchor`, padded past the record.
fn future_interventions(
    interventions: &Array2<f64>,
    anchor: usize,
    horizon: usize,
    pad: f64,
) -> Array2<f64> {
    Array2::from_shape_fn((interventions.nrows(), horizon), |(d, h)| {
        interventions.get((d, anchor + h)).copied().unwrap_or(pad)
    })
}

pub fn predict(ctx: &mut Context, args: PredictArgs) -> Result<(), Failure> {
    if args.horizon == 0 {
        return Err(Failure::validation("--horizon must be at least 1"));
    }
    let anchor = PredictAnchor::parse(&args.anchor)?;
    let model = TransferModel::load(&args.model)?;
    let raw = load(&args.data)?;
    require_counts(&raw, model.normalizer.mode)?;
    let set = model.normalizer.apply(&raw)?;
    if set.scale != model.scale {
        return Err(Error::Scale(format!(
            "model was trained on {} data, got {}",
            model.scale.as_str(),
            set.scale.as_str()
        ))
        .into());
    }
    model.check_compatible(&set)?;

    let forecasts = set
        .subjects
        .par_iter()
        .map(|s| {
            let t = match anchor {
                PredictAnchor::Onset => Anchor::FirstIntervention.resolve(s)?,
                PredictAnchor::End => s.n_observed(),
                PredictAnchor::Index(i) => Anchor::Index(i).resolve(s)?,
            };
            let w = future_interventions(&s.interventions, t, args.horizon, args.pad);
            let scenario = InterventionScenario::new(w, "observed")?;
            forecast_at(&model, s, t, &scenario, args.horizon)
        })
        .collect::<intervene::Result<Vec<_>>>()?;
    write_long_csv(
        &args.out,
        &model.taxa_names,
        "value",
        "observed",
        set.subjects.iter().map(|s| s.id.as_str()).zip(&forecasts),
    )?;

    #[derive(Serialize)]
    struct Resolved {
        horizon: usize,
        anchor: PredictAnchor,
        pad: f64,
        scale: ScaleTag,
    }
    let config = Resolved {
        horizon: args.horizon,
        anchor,
        pad: args.pad,
        scale: set.scale,
    };
    ctx.finish(
        "predict",
        config,
        None,
        vec![args.model.clone(), args.data.data.clone()],
        vec![args.out.clone()],
        &beside(&args.out),
    )
}

/// Library settings and scenarios for a `select` invocation.
pub fn select_config(
    args: &SelectArgs,
    set: &InterventionSeriesSet,
    seed: u64,
) -> Result<(SelectConfig, InterventionScenario, InterventionScenario), Failure> {
    let channel = match &args.channel {
        None => None,
        Some(name) => Some(
            set.intervention_names
                .iter()
                .position(|c| c == name)
                .ok_or_else(|| Failure::validation(format!("unknown intervention channel `{name}`")))?,
        ),
    };
    let config = SelectConfig {
        recipe: FitRecipe {
            p: args.p,
            q: args.q,
            normalization: args.normalize,
            boost: args.boost.config(seed),
        },
        fdr: args.q_fdr,
        n_splits: args.splits,
        lags: args.lags.clone(),
        seed,
    };
    config.validate()?;
    let horizon = config.lags.iter().max().map_or(1, |&h| h + 1);
    let (on, off) = toggle_scenarios(set.n_channels(), channel, horizon)?;
    Ok((config, on, off))
}

pub fn select(ctx: &mut Context, args: SelectArgs) -> Result<(), Failure> {
    let seed = ctx.resolve_seed(args.seed);
    let set = load(&args.data)?;
    require_counts(&set, args.normalize)?;
    let (config, on, off) = select_config(&args, &set, seed)?;
    let report = select_taxa(&set, &on, &off, &config)?;

    create_dir(&args.out)?;
    let selection = args.out.join("selection.csv");
    let mirrors = args.out.join("mirrors.csv");
    let run = args.out.join("run.json");
    report.write_selection_csv(&selection)?;
    report.write_mirrors_csv(&mirrors)?;
    report.write_metadata(&run)?;
    ctx.finish(
        "select",
        &config,
        Some(seed),
        vec![args.data.data.clone()],
        vec![selection, mirrors, run],
        &args.out.join(MANIFEST_FILE),
    )
}

/// Benchmark grid: every combination of `n_taxa`, `pi0` and `b` (empty
/// lists take the base value) is simulated once per seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkGrid {
    pub base: SimConfig,
    pub n_taxa: Vec<usize>,
    pub pi0: Vec<f64>,
    pub b: Vec<f64>,
    pub seeds: Vec<u64>,
    pub p: usize,
    pub q: usize,
    pub boost: BoostConfig,
    /// Scales on which forecasts are scored.
    pub normalizations: Vec<NormalizationMode>,
    pub folds: usize,
    pub horizon: usize,
    /// Selection settings; no inference rows are produced when absent.
    pub select: Option<GridSelect>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSelect {
    pub normalization: NormalizationMode,
    pub fdr: f64,
    pub n_splits: usize,
    pub lags: Vec<usize>,
}

impl Default for GridSelect {
    fn default() -> Self {
        GridSelect {
            normalization: NormalizationMode::SizeFactorAsinh,
            fdr: 0.2,
            n_splits: 25,
            lags: vec![0],
        }
    }
}

impl Default for BenchmarkGrid {
    fn default() -> Self {
        BenchmarkGrid {
            base: SimConfig::default(),
            n_taxa: Vec::new(),
            pi0: Vec::new(),
            b: Vec::new(),
            seeds: vec![0],
            p: 2,
            q: 2,
            boost: BoostConfig::default(),
            normalizations: vec![NormalizationMode::None, NormalizationMode::SizeFactorAsinh],
            folds: 4,
            horizon: 5,
            select: Some(GridSelect::default()),
        }
    }
}

impl BenchmarkGrid {
    /// Simulator configurations in grid order, each with a label.
    pub fn cells(&self) -> Vec<(String, SimConfig)> {
        let or_base = |v: &[f64], base: f64| if v.is_empty() { vec![base] } else { v.to_vec() };
        let taxa = if self.n_taxa.is_empty() {
            vec![self.base.n_taxa]
        } else {
            self.n_taxa.clone()
        };
        let mut cells = Vec::new();
        for &j in &taxa {
            for &pi0 in &or_base(&self.pi0, self.base.pi0) {
                for &b in &or_base(&self.b, self.base.b) {
                    for &seed in &self.seeds {
                        let config = SimConfig {
                            n_taxa: j,
                            pi0,
                            b,
                            seed,
                            ..self.base.clone()
                        };
                        cells.push((format!("J{j}-pi{pi0}-b{b}"), config));
                    }
                }
            }
        }
        cells
    }

    fn validate(&self) -> Result<(), Failure> {
        if self.seeds.is_empty() || self.normalizations.is_empty() {
            return Err(Failure::validation("grid needs at least one seed and one normalization"));
        }
        for (_, c) in self.cells() {
            c.validate()?;
        }
        self.boost.validate()?;
        Ok(())
    }
}

struct CellResult {
    label: String,
    seed: u64,
    folds: Vec<intervene::evalbench::FoldResult>,
    inference: Vec<(usize, f64, f64, usize)>,
}

fn run_cell(grid: &BenchmarkGrid, label: String, sim: &SimConfig) -> Result<CellResult, Failure> {
    let (set, truth) = intervene::simgen::simulate(sim)?;
    let boost = BoostConfig {
        seed: sim.seed,
        ..grid.boost
    };
    let transfer = TransferForecaster {
        p: grid.p,
        q: grid.q,
        boost,
    };
    let methods: [&dyn Forecaster; 3] = [&CarryForward, &GlobalMean, &transfer];
    let mut folds = Vec::new();
    for &normalization in &grid.normalizations {
        let cv = CvConfig {
            folds: grid.folds,
            horizon: grid.horizon,
            normalization,
            seed: sim.seed,
        };
        folds.extend(cv_forecast_eval(&set, &methods, &cv)?.folds);
    }

    let mut inference = Vec::new();
    if let Some(sel) = &grid.select {
        let config = SelectConfig {
            recipe: FitRecipe {
                p: grid.p,
                q: grid.q,
                normalization: sel.normalization,
                boost,
            },
            fdr: sel.fdr,
            n_splits: sel.n_splits,
            lags: sel.lags.clone(),
            seed: sim.seed,
        };
        let horizon = sel.lags.iter().max().map_or(1, |&h| h + 1);
        let (on, off) = toggle_scenarios(set.n_channels(), None, horizon)?;
        let report = select_taxa(&set, &on, &off, &config)?;
        let nonnull: Vec<BTreeSet<usize>> = nonnull_sets(&truth.params, horizon - 1);
        for &lag in &sel.lags {
            let chosen = report.selected_at_lag(lag);
            let score = inference_eval(&chosen, &nonnull[lag]);
            inference.push((lag, score.fdp, score.power, chosen.len()));
        }
    }
    Ok(CellResult {
        label,
        seed: sim.seed,
        folds,
        inference,
    })
}

pub fn benchmark(ctx: &mut Context, args: BenchmarkArgs) -> Result<(), Failure> {
    let grid: BenchmarkGrid = serde_json::from_str(&read_text(&args.grid)?).map_err(Error::from)?;
    grid.validate()?;
    let results = grid
        .cells()
        .into_iter()
        .map(|(label, sim)| run_cell(&grid, label, &sim))
        .collect::<Result<Vec<_>, _>>()?;

    create_dir(&args.out)?;
    let eval_path = args.out.join("eval.csv");
    let mut eval = csv::Writer::from_writer(Vec::new());
    let mut row = |fields: &[String]| eval.write_record(fields).map_err(Error::from);
    row(&["config", "seed", "fold", "method", "normalization", "mae"].map(String::from))?;
    for r in &results {
        for f in &r.folds {
            row(&[
                r.label.clone(),
                r.seed.to_string(),
                (f.fold + 1).to_string(),
                f.method.clone(),
                f.normalization.as_str().into(),
                fmt_f64(f.mae),
            ])?;
        }
    }
    write_atomic(&eval_path, &into_bytes(eval)?)?;

    let inference_path = args.out.join("inference_eval.csv");
    let mut inf = csv::Writer::from_writer(Vec::new());
    let fdr = grid.select.as_ref().map_or(f64::NAN, |s| s.fdr);
    let mut row = |fields: &[String]| inf.write_record(fields).map_err(Error::from);
    row(&["config", "seed", "lag", "fdp", "power", "q", "n_selected"].map(String::from))?;
    for r in &results {
        for &(lag, fdp, power, n) in &r.inference {
            row(&[
                r.label.clone(),
                r.seed.to_string(),
                lag.to_string(),
                fmt_f64(fdp),
                fmt_f64(power),
                fmt_f64(fdr),
                n.to_string(),
            ])?;
        }
    }
    write_atomic(&inference_path, &into_bytes(inf)?)?;

    ctx.finish(
        "benchmark",
        &grid,
        None,
        vec![args.grid.clone()],
        vec![eval_path, inference_path],
        &args.out.join(MANIFEST_FILE),
    )
}

fn into_bytes(w: csv::Writer<Vec<u8>>) -> Result<Vec<u8>, Failure> {
    w.into_inner()
        .map_err(|e| Failure::from(Error::Data(format!("csv buffer: {e}"))))
}
