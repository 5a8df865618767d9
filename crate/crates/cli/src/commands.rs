use std::path::Path;

use anyhow::{Context, Result};
use interopt::dataset::{self, generate_synthetic, Dataset, FeatureSchema};
use interopt::emulator::{self, r_squared, EmulatorModel};
use interopt::interopt::{
    attribute_records, optimize_campaign, reduction_histogram, AttributionMode, CampaignOptions,
    CampaignReport,
};
use interopt::shapley::{self, global_shapley, GlobalSummary, EXACT_CAP};
use interopt::{InterOptConfig, Outcome, SyntheticGroundTruth, TrainConfig};
use serde::Serialize;

use crate::manifest::Run;
use crate::{svg, Cli, Command, Common, DataArgs, ExplainArgs, OptimizeArgs, ReportArgs, SynthArgs, UsageError};

pub fn run(cli: Cli) -> Result<()> {
    let c = &cli.common;
    match &cli.command {
        Command::Synth(a) => synth(c, a),
        Command::Train(a) => train(c, a),
        Command::Cv(a) => cv(c, a),
        Command::Explain(a) => explain(c, a),
        Command::Optimize(a) => optimize(c, a),
        Command::Report(a) => report(c, a),
    }
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn no_config(c: &Common, command: &str) -> Result<()> {
    match &c.config {
        Some(_) => Err(usage(format!("`{command}` does not take a --config file"))),
        None => Ok(()),
    }
}

fn say(c: &Common, msg: impl AsRef<str>) {
    if !c.quiet {
        println!("{}", msg.as_ref());
    }
}

fn load_schema(run: &mut Run, path: Option<&Path>) -> Result<FeatureSchema> {
    match path {
        Some(p) => {
            let text = run.read_string(p)?;
            FeatureSchema::from_json(&text).with_context(|| format!("schema {}", p.display()))
        }
        None => Ok(FeatureSchema::shale_gas()),
    }
}

fn load_data(run: &mut Run, path: &Path, schema: &FeatureSchema, scored: bool) -> Result<Dataset> {
    let bytes = run.read(path)?;
    dataset::read_csv(&bytes[..], schema, scored).with_context(|| format!("dataset {}", path.display()))
}

fn load_model(run: &mut Run, path: &Path, schema: &FeatureSchema) -> Result<EmulatorModel> {
    let text = run.read_string(path)?;
    EmulatorModel::from_json(&text, schema).with_context(|| format!("model {}", path.display()))
}

fn load_config<T: serde::de::DeserializeOwned + Default>(run: &mut Run, c: &Common) -> Result<T> {
    match &c.config {
        Some(p) => {
            let text = run.read_string(p)?;
            serde_json::from_str(&text).with_context(|| format!("config {}", p.display()))
        }
        None => Ok(T::default()),
    }
}

fn pretty<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    Ok(text.into_bytes())
}

fn synth(c: &Common, a: &SynthArgs) -> Result<()> {
    no_config(c, "synth")?;
    if a.count == 0 {
        return Err(usage("--count must be at least 1"));
    }
    if !(a.noise_std.is_finite() && a.noise_std >= 0.0) {
        return Err(usage("--noise-std must be finite and non-negative"));
    }
    let mut run = Run::start("synth", &c.out)?;
    let schema = load_schema(&mut run, a.schema.as_deref())?;
    let seed = c.seed.unwrap_or(0);
    run.set_seed(seed);
    run.set_config(&serde_json::json!({ "count": a.count, "noise_std": a.noise_std }))?;
    let truth = SyntheticGroundTruth::for_schema(&schema, a.noise_std, seed)?;
    let data = generate_synthetic(a.count, &schema, &truth)?;
    run.write("data.csv", data.to_csv_string().as_bytes())?;
    run.write("truth.json", truth.to_json().as_bytes())?;
    run.write("schema.json", schema.to_json().as_bytes())?;
    run.finish()?;
    say(c, format!("wrote {} wells to {}", data.len(), c.out.join("data.csv").display()));
    Ok(())
}

#[derive(Serialize)]
struct FitReport {
    records: usize,
    /// `null` when the targets are constant.
    fit_r2: Option<f64>,
    final_loss: f64,
}

fn training_setup(run: &mut Run, c: &Common, a: &DataArgs) -> Result<(Dataset, TrainConfig)> {
    let schema = load_schema(run, a.schema.as_deref())?;
    let data = load_data(run, &a.data, &schema, true)?;
    let mut cfg: TrainConfig = load_config(run, c)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    run.set_seed(cfg.seed);
    run.set_config(&cfg)?;
    Ok((data, cfg))
}

fn train(c: &Common, a: &DataArgs) -> Result<()> {
    let mut run = Run::start("train", &c.out)?;
    let (data, cfg) = training_setup(&mut run, c, a)?;
    let outcome = emulator::train_with_history(&data, &cfg)?;
    let model = outcome.model;
    let preds = data
        .records
        .iter()
        .map(|r| model.predict(&r.inputs))
        .collect::<Result<Vec<f64>, _>>()?;
    let r2 = r_squared(&preds, &data.targets()?)?;
    let fit = FitReport {
        records: data.len(),
        fit_r2: r2.is_finite().then_some(r2),
        final_loss: outcome.loss_history.last().copied().unwrap_or(f64::NAN),
    };
    run.write("model.json", model.to_json().as_bytes())?;
    run.write("fit.json", &pretty(&fit)?)?;
    run.finish()?;
    say(c, format!("fit R² = {r2:.6} over {} records", data.len()));
    Ok(())
}

fn cv(c: &Common, a: &DataArgs) -> Result<()> {
    let mut run = Run::start("cv", &c.out)?;
    let (data, cfg) = training_setup(&mut run, c, a)?;
    let report = emulator::loo_cv(&data, &cfg)?;
    let mut csv = String::from("id,observed,cv_prediction,fit_prediction\n");
    for i in 0..report.ids.len() {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            report.ids[i], report.observed[i], report.cv_predictions[i], report.fit_predictions[i]
        ));
    }
    let summary = serde_json::json!({
        "folds": report.folds,
        "cv_r2": report.cv_r2.is_finite().then_some(report.cv_r2),
        "fit_r2": report.fit_r2.is_finite().then_some(report.fit_r2),
    });
    run.write("cv.csv", csv.as_bytes())?;
    run.write("cv.json", &pretty(&summary)?)?;
    run.finish()?;
    say(
        c,
        format!("{} folds: CV R² = {:.6}, fit R² = {:.6}", report.folds, report.cv_r2, report.fit_r2),
    );
    Ok(())
}

fn attribution_mode(n: usize, exact: bool, sampled: Option<usize>) -> Result<Option<AttributionMode>> {
    match (exact, sampled) {
        (_, Some(0)) => Err(usage("--sampled needs at least 1 permutation")),
        (_, Some(p)) => Ok(Some(AttributionMode::Sampled { permutations: p })),
        (true, None) if n > EXACT_CAP => Err(usage(
            shapley::ShapleyError::ExactCapExceeded { n, cap: EXACT_CAP }.to_string(),
        )),
        (true, None) => Ok(Some(AttributionMode::Exact)),
        (false, None) => Ok(None),
    }
}

fn explain(c: &Common, a: &ExplainArgs) -> Result<()> {
    no_config(c, "explain")?;
    let mut run = Run::start("explain", &c.out)?;
    let schema = load_schema(&mut run, a.schema.as_deref())?;
    let mode = attribution_mode(schema.n_inputs(), a.exact, a.sampled)?
        .unwrap_or_else(|| AttributionMode::auto(schema.n_inputs()));
    if a.background == 0 {
        return Err(usage("--background must be at least 1"));
    }
    let model = load_model(&mut run, &a.model, &schema)?;
    let data = load_data(&mut run, &a.data, &schema, false)?;
    let seed = c.seed.unwrap_or(0);
    run.set_seed(seed);
    run.set_config(&serde_json::json!({
        "mode": mode,
        "background": a.background,
        "physical": a.physical,
    }))?;

    let mut attrs = attribute_records(&model, &data, mode, a.background, seed)?;
    if a.physical {
        attrs = attrs.iter().map(|x| x.to_physical(&model.norm)).collect();
    }
    let names = schema.input_names();
    let global = global_shapley(&attrs)?;
    let method = match mode {
        AttributionMode::Exact => "exact".to_string(),
        AttributionMode::Sampled { permutations } => format!("sampled ({permutations} permutations)"),
    };
    let units = if a.physical { "target" } else { "normalized" };
    let summary = GlobalSummary::new(&names, &global, &method, units);
    let labels: Vec<String> = summary.importances.iter().map(|f| f.feature.clone()).collect();
    let values: Vec<f64> = summary.importances.iter().map(|f| f.mean_abs_phi).collect();
    let chart = svg::bar_chart(&format!("Mean |Shapley value| ({units} units)"), &labels, &values);

    run.write("attributions.csv", shapley::attributions_csv(&names, &attrs).as_bytes())?;
    run.write("global.json", &pretty(&summary)?)?;
    run.write("global.svg", chart.as_bytes())?;
    run.finish()?;
    say(c, format!("explained {} records with {method}; most important: {}", attrs.len(), labels[0]));
    Ok(())
}

fn optimize(c: &Common, a: &OptimizeArgs) -> Result<()> {
    let mut run = Run::start("optimize", &c.out)?;
    let schema = load_schema(&mut run, a.schema.as_deref())?;
    let attribution = attribution_mode(schema.n_inputs(), a.exact, a.sampled)?;
    if a.background == 0 {
        return Err(usage("--background must be at least 1"));
    }
    let model = load_model(&mut run, &a.model, &schema)?;
    let mut data = load_data(&mut run, &a.data, &schema, false)?;
    let mut cfg: InterOptConfig = load_config(&mut run, c)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    run.set_seed(cfg.seed);
    run.set_config(&cfg)?;
    if let Some(id) = &a.well {
        let rec = data
            .find(id)
            .cloned()
            .ok_or_else(|| usage(format!("no well with id `{id}` in {}", a.data.display())))?;
        data = Dataset::new(schema.clone(), vec![rec])?;
    }
    if data.is_empty() {
        return Err(usage("the dataset has no wells"));
    }
    let opts = CampaignOptions {
        attribution,
        background_cap: a.background,
        ablation: a.ablation,
    };
    let report = optimize_campaign(&model, &data, &cfg, &opts)?;

    run.write("campaign.json", report.to_json().as_bytes())?;
    run.write("summary.csv", report.summary_csv().as_bytes())?;
    run.write("distribution.csv", report.distribution_csv().as_bytes())?;
    if let Some(t) = report.ablation_csv() {
        run.write("ablation.csv", t.as_bytes())?;
    }
    run.finish()?;
    say(
        c,
        format!(
            "{} wells: {} improved, {} no improvement, {} not converged; mean reduction {:.3}%",
            report.wells.len(),
            report.count(Outcome::Improved),
            report.count(Outcome::NoImprovement),
            report.count(Outcome::NotConverged),
            report.mean_reduction * 100.0
        ),
    );
    Ok(())
}

fn report(c: &Common, a: &ReportArgs) -> Result<()> {
    no_config(c, "report")?;
    let mut run = Run::start("report", &c.out)?;
    let text = run.read_string(&a.campaign)?;
    let campaign = CampaignReport::from_json(&text)
        .with_context(|| format!("campaign report {}", a.campaign.display()))?;
    if campaign.wells.is_empty() {
        return Err(usage("the campaign report has no wells"));
    }
    let rates: Vec<f64> = campaign.wells.iter().map(|w| w.reduction_rate() * 100.0).collect();
    let histogram = reduction_histogram(&rates);
    let labels: Vec<String> = histogram.iter().map(|b| b.label.clone()).collect();
    let counts: Vec<usize> = histogram.iter().map(|b| b.count).collect();
    let hist_svg = svg::histogram("Distribution of reduction rate", &labels, &counts);

    let series: Vec<(String, Vec<(f64, f64)>)> = campaign
        .wells
        .iter()
        .filter_map(|w| {
            let t = w.trace.as_ref()?;
            let mut pts = vec![(0.0, t.initial_objective)];
            pts.extend(
                t.iterations
                    .iter()
                    .filter_map(|it| it.objective.map(|o| (it.iteration as f64, o))),
            );
            Some((w.id.clone(), pts))
        })
        .collect();
    let curves = svg::line_chart("Objective per iteration", "iteration", "mean objective", &series);

    run.write("distribution.csv", interopt::interopt::distribution_csv(&histogram).as_bytes())?;
    run.write("summary.csv", campaign.summary_csv().as_bytes())?;
    run.write("histogram.svg", hist_svg.as_bytes())?;
    run.write("objective_curves.svg", curves.as_bytes())?;
    run.finish()?;
    say(
        c,
        format!(
            "{} wells, mean reduction {:.3}%",
            campaign.wells.len(),
            campaign.mean_reduction * 100.0
        ),
    );
    Ok(())
}
