use std::fs;
use std::path::{Path, PathBuf};

use emv_core::chart::{self, Chart, Panel, Series};
use emv_core::forecast::{forecast, ForecastSource, ForecastSpec};
use emv_core::frailty::{simulate_vintage_hazard, FrailtyScenario};
use emv_core::identify::decompositions_to_json;
use emv_core::semiparametric::{fit_semiparametric, MacroFitReport, MacroPanel};
use emv_core::synth::{generate, ExogenousSource, GeneratorSpec};
use emv_core::vintage_effects::{fit_random_effects, predict_new_vintages, ExogenousHandling, ProcessKind};
use emv_core::{
    apply_constraint, constraint_sweep, fit_glm, fit_linear, intrinsic, ConstraintSpec, EmvDesign, EmvError, Family, FitResult,
    PanelGrid, ResponseTransform, TransformKind,
};

use crate::*;

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Domain(String),
}

impl From<EmvError> for Failure {
    fn from(e: EmvError) -> Self {
        Failure::Domain(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Domain(e.to_string())
    }
}

type Outcome<T = ()> = std::result::Result<T, Failure>;

fn existing(path: &Path) -> Outcome<&Path> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(Failure::Usage(format!("file not found: {}", path.display())))
    }
}

/// Writes artifacts of the selected formats into the output directory.
struct Sink<'a> {
    dir: &'a Path,
    formats: &'a [Format],
}

impl<'a> Sink<'a> {
    fn new(output: &'a Output) -> Outcome<Self> {
        fs::create_dir_all(&output.out)?;
        Ok(Sink {
            dir: &output.out,
            formats: &output.format,
        })
    }

    fn put(&self, name: &str, format: Format, contents: &str) -> Outcome {
        if !self.formats.contains(&format) {
            return Ok(());
        }
        let path: PathBuf = self.dir.join(name);
        fs::write(&path, contents)?;
        println!("wrote {}", path.display());
        Ok(())
    }

    /// The SVG and its CSV twin `<stem>_chart.csv`.
    fn chart(&self, stem: &str, chart: &Chart) -> Outcome {
        self.put(&format!("{stem}.svg"), Format::Svg, &chart.to_svg())?;
        self.put(&format!("{stem}_chart.csv"), Format::Csv, &chart.to_csv())
    }
}

fn transform_of(input: &PanelInput) -> Outcome<ResponseTransform> {
    let kind: TransformKind = input.transform.parse().map_err(|e: EmvError| Failure::Usage(e.to_string()))?;
    let mut g = ResponseTransform::new(kind);
    if let Some(eps) = input.epsilon {
        g = g.with_epsilon(eps);
    }
    Ok(g)
}

fn load_panel(input: &PanelInput) -> Outcome<(PanelGrid, ResponseTransform)> {
    let g = transform_of(input)?;
    let grid = PanelGrid::from_csv_path(existing(&input.panel)?)?;
    Ok((grid, g))
}

fn load_macro(path: &Path) -> Outcome<MacroPanel> {
    Ok(MacroPanel::from_csv_path(existing(path)?)?)
}

fn constraint_of(c: &ConstraintArgs) -> Outcome<ConstraintSpec> {
    ConstraintSpec::from_parts(&c.kind, c.k, c.a_star, c.window, c.target_slope).map_err(|e| Failure::Usage(e.to_string()))
}

fn process_of(s: &str) -> Outcome<ProcessKind> {
    s.parse().map_err(|e: EmvError| Failure::Usage(e.to_string()))
}

fn fit_panel(grid: &PanelGrid, g: &ResponseTransform) -> Outcome<(EmvDesign, FitResult)> {
    let design = EmvDesign::build(grid)?;
    let fit = fit_linear(&design, grid, g)?;
    Ok((design, fit))
}

pub fn run(command: Command) -> Outcome {
    match command {
        Command::Fit(a) => fit(a),
        Command::Identify(a) => identify(a),
        Command::Sweep(a) => sweep(a),
        Command::FitMacro(a) => fit_macro(a),
        Command::FitRe(a) => fit_re(a),
        Command::Forecast(a) => run_forecast(a),
        Command::SimulateFrailty(a) => frailty(a),
        Command::Generate(a) => run_generate(a),
        Command::Serve(a) => serve(a),
    }
}

fn write_decomposition(sink: &Sink, d: &emv_core::Decomposition) -> Outcome {
    sink.put("decomposition.json", Format::Json, &d.to_json()?)?;
    sink.put("decomposition.csv", Format::Csv, &d.to_csv_string())?;
    let label = d.constraint.as_ref().map(|c| c.to_string()).unwrap_or_else(|| "unconstrained".into());
    sink.chart("decomposition", &chart::decomposition_chart("Decomposition", &[(label, d)]))
}

fn fit(a: FitArgs) -> Outcome {
    let spec = constraint_of(&a.constraint)?;
    let (grid, g) = load_panel(&a.input)?;
    let design = EmvDesign::build(&grid)?;
    let family = match a.family {
        FamilyArg::Gaussian => None,
        FamilyArg::Poisson => Some(Family::PoissonLog),
        FamilyArg::Binomial => Some(Family::BinomialLogit),
    };
    let fit = match family {
        None => fit_linear(&design, &grid, &g)?,
        Some(_) if g.kind != TransformKind::Identity => {
            return Err(Failure::Usage("--family poisson/binomial fits raw values; drop --transform".into()))
        }
        Some(f) => fit_glm(&design, &grid, f, None)?,
    };
    let min_norm = intrinsic(&fit, &design)?;
    let constrained = apply_constraint(&fit, &design, &spec)?;

    let sink = Sink::new(&a.output)?;
    sink.put("fit.json", Format::Json, &fit.to_json()?)?;
    sink.put("min_norm.json", Format::Json, &min_norm.to_json()?)?;
    write_decomposition(&sink, &constrained)?;
    println!(
        "cells={} rank={} r_squared={} constraint={} gamma={}",
        fit.cells.len(),
        fit.rank,
        fit.r_squared,
        spec,
        constrained.gamma_applied
    );
    Ok(())
}

fn identify(a: IdentifyArgs) -> Outcome {
    let spec = constraint_of(&a.constraint)?;
    let text = fs::read_to_string(existing(&a.fit)?)?;
    let fit = FitResult::from_json(&text)?;
    let design = fit.design()?;
    let d = apply_constraint(&fit, &design, &spec)?;
    let sink = Sink::new(&a.output)?;
    write_decomposition(&sink, &d)?;
    println!("constraint={} gamma={} residual={:e}", spec, d.gamma_applied, d.constraint_residual(&spec)?);
    Ok(())
}

fn sweep(a: SweepArgs) -> Outcome {
    let (grid, g) = load_panel(&a.input)?;
    let (design, fit) = fit_panel(&grid, &g)?;
    let decomps = constraint_sweep(&fit, &design, a.a_star, &a.k)?;
    let sink = Sink::new(&a.output)?;
    sink.put("sweep.json", Format::Json, &decompositions_to_json(&decomps)?)?;
    let mut csv = String::from("k,block,level,value,se\n");
    for (k, d) in a.k.iter().zip(&decomps) {
        for line in d.to_csv_string().lines().skip(1) {
            csv.push_str(&format!("{k},{line}\n"));
        }
    }
    sink.put("sweep.csv", Format::Csv, &csv)?;
    let labelled: Vec<(String, &emv_core::Decomposition)> = a.k.iter().map(|k| format!("k={k}")).zip(&decomps).collect();
    sink.chart("sweep", &chart::decomposition_chart(&format!("Maturity slope beyond age {}", a.a_star), &labelled))
}

fn fit_macro(a: FitMacroArgs) -> Outcome {
    let (grid, g) = load_panel(&a.input)?;
    let macros = load_macro(&a.macro_path)?;
    let (design, fit) = fit_panel(&grid, &g)?;
    let semi = fit_semiparametric(&grid, &macros, &g)?;
    if semi.collinearity_warning {
        log::warn!("covariates nearly span a linear time trend (R^2 = {})", semi.collinearity_diagnostic);
    }
    let report = MacroFitReport::new(&fit, &design, semi)?;
    let sink = Sink::new(&a.output)?;
    sink.put("macro_fit.json", Format::Json, &report.to_json()?)?;

    let s = &report.fit;
    let d = &report.comparable_nonparametric;
    let chart = Chart::new(
        "Macro model and comparable nonparametric fit",
        vec![
            Panel::new(
                "exogenous",
                "time",
                vec![
                    Series::new("macro", s.implied_time_effects.iter().map(|e| (e.time as f64, e.value)).collect()),
                    Series::new("nonparametric", d.exogenous.iter().map(|e| (e.time as f64, e.value)).collect()),
                ],
            ),
            Panel::new(
                "maturity",
                "age",
                vec![
                    Series::new("macro", s.maturity.iter().map(|e| (e.age as f64, e.value)).collect()),
                    Series::new("nonparametric", d.maturity.iter().map(|e| (e.age as f64, e.value)).collect()),
                ],
            ),
            Panel::new(
                "vintage",
                "vintage",
                vec![
                    Series::new("macro", s.vintage.iter().map(|e| (e.vintage as f64, e.value)).collect()),
                    Series::new("nonparametric", d.vintage.iter().map(|e| (e.vintage as f64, e.value)).collect()),
                ],
            ),
        ],
    );
    sink.chart("macro_fit", &chart)?;
    for c in &s.macro_coefficients {
        println!("{}", serde_json::to_string(c).map_err(|e| Failure::Domain(e.to_string()))?);
    }
    println!("r_squared={} comparable_gamma={}", s.r_squared, report.comparable_gamma);
    Ok(())
}

fn fit_re(a: FitReArgs) -> Outcome {
    let kind = process_of(&a.process)?;
    let handling = match &a.macro_path {
        Some(p) => ExogenousHandling::Macro(load_macro(p)?),
        None => ExogenousHandling::Nonparametric(constraint_of(&a.constraint)?),
    };
    let (grid, g) = load_panel(&a.input)?;
    let fit = fit_random_effects(&grid, &g, kind, &handling)?;
    let sink = Sink::new(&a.output)?;
    sink.put("re.json", Format::Json, &fit.to_json()?)?;
    sink.put("re.csv", Format::Csv, &fit.decomposition.to_csv_string())?;
    sink.chart("re", &chart::random_effects_chart(&fit))?;
    if a.predict > 0 {
        let last = fit.blup.last().map(|e| e.vintage).unwrap_or(0);
        let mut csv = String::from("vintage,mean,se\n");
        for (h, (m, se)) in predict_new_vintages(&fit, a.predict)?.into_iter().enumerate() {
            csv.push_str(&format!("{},{m},{se}\n", last + h as i64 + 1));
        }
        sink.put("re_predictions.csv", Format::Csv, &csv)?;
    }
    println!(
        "sigma2_V={} rho={} sigma2={} complete_shrinkage={} r_squared={}",
        fit.process.sigma2_v, fit.process.rho, fit.sigma2, fit.complete_shrinkage, fit.r_squared
    );
    Ok(())
}

fn run_forecast(a: ForecastArgs) -> Outcome {
    let mut spec = ForecastSpec::from_parts(
        a.horizon,
        &a.tail,
        a.tail_a_star,
        &a.vintage,
        a.cv_window,
        a.values.clone(),
    )
    .map_err(|e| Failure::Usage(e.to_string()))?;
    spec.max_age = a.max_age;
    spec.original_scale = a.original_scale;
    let macros = a.macro_path.as_deref().map(load_macro).transpose()?;
    let (grid, g) = load_panel(&a.input)?;

    let result = match a.source {
        SourceArg::Decomposition => {
            let constraint = constraint_of(&a.constraint)?;
            let (design, fit) = fit_panel(&grid, &g)?;
            let d = apply_constraint(&fit, &design, &constraint)?;
            let src = ForecastSource::Decomposition {
                decomposition: &d,
                transform: g,
                cells: &fit.cells,
            };
            forecast(src, &spec)?
        }
        SourceArg::Macro => {
            let macros = macros.ok_or_else(|| Failure::Usage("--source macro needs --macro".into()))?;
            let semi = fit_semiparametric(&grid, &macros, &g)?;
            spec.macro_future = Some(macros);
            forecast(ForecastSource::Semiparametric(&semi), &spec)?
        }
        SourceArg::Re => {
            let kind = process_of(&a.process)?;
            let handling = match macros.clone() {
                Some(m) => ExogenousHandling::Macro(m),
                None => ExogenousHandling::Nonparametric(constraint_of(&a.constraint)?),
            };
            let fit = fit_random_effects(&grid, &g, kind, &handling)?;
            spec.macro_future = macros;
            forecast(ForecastSource::RandomEffects(&fit), &spec)?
        }
    };
    let sink = Sink::new(&a.output)?;
    sink.put("forecast.csv", Format::Csv, &result.to_csv_string())?;
    sink.put("forecast.json", Format::Json, &result.to_json()?)?;
    let doubly = result.cells.iter().filter(|c| c.doubly_extrapolated()).count();
    println!("cells={} doubly_extrapolated={}", result.cells.len(), doubly);
    Ok(())
}

fn frailty(a: FrailtyArgs) -> Outcome {
    let mut s = FrailtyScenario::default();
    if let Some(v) = a.h0 {
        s.h0 = v;
    }
    if let Some(v) = a.tau {
        s.tau = v;
    }
    if let Some(v) = a.omega {
        s.omega = v;
    }
    if let Some(v) = a.quantiles {
        s.quantiles = v;
    }
    if let Some(v) = a.horizon {
        s.horizon = v;
    }
    let curves = simulate_vintage_hazard(&s)?;
    let sink = Sink::new(&a.output)?;
    sink.put("frailty.csv", Format::Csv, &curves.to_csv_string())?;
    sink.put("frailty.json", Format::Json, &curves.to_json()?)?;
    sink.chart("frailty", &chart::frailty_chart(&curves))?;
    println!("vintage hazard peaks at age {}", curves.peak_age());
    Ok(())
}

fn run_generate(a: GenerateArgs) -> Outcome {
    let mut spec: GeneratorSpec = match &a.spec {
        Some(p) => serde_json::from_str(&fs::read_to_string(existing(p)?)?).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?,
        None => GeneratorSpec::default(),
    };
    if let Some(v) = a.seed {
        spec.seed = v;
    }
    if let Some(v) = a.max_age {
        spec.max_age = v;
    }
    if let Some(v) = a.max_time {
        spec.max_time = v;
    }
    if let Some(v) = a.noise_sd {
        spec.noise_sd = v;
    }
    if let Some(coefficients) = a.macro_coefficients {
        spec.exogenous = ExogenousSource::Macro { coefficients };
    }
    let generated = generate(&spec)?;
    let sink = Sink::new(&a.output)?;
    sink.put("panel.csv", Format::Csv, &generated.grid.to_csv_string())?;
    let truth = serde_json::json!({
        "spec": spec,
        "truth": generated.truth,
        "effects": generated.effects,
    });
    let truth = serde_json::to_string_pretty(&truth).map_err(|e| Failure::Domain(e.to_string()))?;
    sink.put("truth.json", Format::Json, &truth)?;
    if let Some(m) = &generated.macros {
        sink.put("macro.csv", Format::Csv, &m.to_csv_string())?;
    }
    println!("cells={} vintages={}", generated.grid.n_observed(), generated.grid.vintages().len());
    Ok(())
}

fn serve(a: ServeArgs) -> Outcome {
    let config = emv_service::ServiceConfig {
        persist_dir: a.persist_dir,
        async_threshold: a.async_threshold,
        allowed_origin: a.allowed_origin,
    };
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(emv_service::serve(a.addr, config))?;
    Ok(())
}
