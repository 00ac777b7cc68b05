use std::fmt::Write as _;
use std::fs;
use std::io::{self, BufReader, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::thread;

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use logitshield_core::bench::{self, EvalReport, Role, Sample, SweepPlan};
use logitshield_core::decode::{generate, InterventionConfig, Method, RepeBaselineConfig};
use logitshield_core::lens::{self, JsdTrajectory, TrajectoryMode};
use logitshield_core::model::protocol::serve as serve_stream;
use logitshield_core::model::{LayeredModel, ModelSource, TokenVectorSource};
use logitshield_core::synthetic::{make_toy as build_toy, ToyConfig};
use logitshield_core::{Error, Result};

use crate::svg::{line_chart, Series};
use crate::{
    DecodeArgs, EvalArgs, InterventionArgs, LensArgs, MakeToyArgs, ModelArgs, ServeArgs, SweepArgs,
};

fn open_model(args: &ModelArgs) -> Result<Box<dyn LayeredModel>> {
    let source = ModelSource::parse(&args.model)?;
    info!("opening model {source}");
    source.open()
}

fn write_or_print(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text)?,
        None => io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn load_nonempty(path: &Path) -> Result<Vec<Sample>> {
    let samples = bench::load_dataset(path)?;
    if samples.is_empty() {
        return Err(Error::config(format!(
            "{} holds no samples",
            path.display()
        )));
    }
    Ok(samples)
}

fn select(samples: Vec<Sample>, id: Option<&str>) -> Result<Vec<Sample>> {
    match id {
        None => Ok(samples),
        Some(id) => {
            let found: Vec<Sample> = samples.into_iter().filter(|s| s.id == id).collect();
            if found.is_empty() {
                return Err(Error::config(format!("no sample with id `{id}`")));
            }
            Ok(found)
        }
    }
}

fn seeds_of(seed: u64, seeds: &[u64]) -> Vec<u64> {
    if seeds.is_empty() {
        vec![seed]
    } else {
        seeds.to_vec()
    }
}

fn token_vectors(name: &str) -> Result<TokenVectorSource> {
    match name {
        "unembedding" => Ok(TokenVectorSource::Unembedding),
        "input-embedding" => Ok(TokenVectorSource::InputEmbedding),
        other => Err(Error::config(format!(
            "unknown token-vector source `{other}` (unembedding, input-embedding)"
        ))),
    }
}

/// Intervention config from flags. The steering vector is only built when
/// `needs_steering` holds.
fn intervention<M: LayeredModel + ?Sized>(
    model: &M,
    args: &InterventionArgs,
    data: &Path,
    seed: u64,
    needs_steering: bool,
) -> Result<InterventionConfig> {
    let method: Method = args.method.parse()?;
    let repe = if needs_steering || method == Method::RepeBaseline {
        let calibration = load_nonempty(args.calibration.as_deref().unwrap_or(data))?;
        let vector = bench::repe_steering_from_samples(model, &calibration, args.steer_layer)?;
        Some(RepeBaselineConfig {
            steer_layer: args.steer_layer,
            multiplier: args.gamma,
            steering_vector: vector,
        })
    } else {
        None
    };
    let config = InterventionConfig {
        method,
        gamma: args.gamma,
        top_k: args.top_k,
        layer_start: args.layer_start,
        greedy: args.greedy,
        seed,
        max_new_tokens: args.max_new_tokens,
        stop_tokens: args.stop_tokens.clone(),
        token_vectors: token_vectors(&args.token_vectors)?,
        repe,
    };
    config.validate()?;
    Ok(config)
}

fn trajectory_for(
    model: &dyn LayeredModel,
    sample: &Sample,
    mode: TrajectoryMode,
) -> Result<JsdTrajectory> {
    let prompts = bench::build_prompts(sample, true);
    let biased = model.forward(&prompts.biased, true)?;
    match mode {
        TrajectoryMode::BiasedVsPure => {
            let pure = model.forward(&prompts.pure, true)?;
            lens::jsd_trajectory_contrast(&biased, &pure)
        }
        TrajectoryMode::ChoicePair => {
            let pair = (
                sample.option_token(Role::Stereotype),
                sample.option_token(Role::AntiStereotype),
            );
            lens::jsd_trajectory_choice(&biased, pair)
        }
    }
}

pub fn lens(args: LensArgs) -> Result<()> {
    let mode: TrajectoryMode = args.mode.parse()?;
    let model = open_model(&args.model)?;
    let n_layers = model.meta()?.n_layers;
    if args.layer_start >= n_layers {
        return Err(Error::config(format!(
            "--layer-start {} is not below the model's {n_layers} layers",
            args.layer_start
        )));
    }
    let samples = select(load_nonempty(&args.data)?, args.sample.as_deref())?;
    if let Some(out) = &args.out {
        if samples.len() > 1 && !out.to_string_lossy().contains("{id}") {
            return Err(Error::config(
                "--out must contain `{id}` when several samples are analyzed",
            ));
        }
    }

    let mut summary = String::from("sample,critical_layer,peak_jsd_nats\n");
    let mut series = Vec::with_capacity(samples.len());
    for sample in &samples {
        let traj = trajectory_for(model.as_ref(), sample, mode)?;
        let critical = lens::locate_critical_layer(&traj, args.layer_start)?;
        let peak = traj
            .per_layer
            .iter()
            .find(|(l, _)| *l == critical)
            .map_or(0.0, |(_, v)| *v);
        let _ = writeln!(summary, "{},{critical},{peak:.12}", sample.id);
        if let Some(out) = &args.out {
            let path = PathBuf::from(out.to_string_lossy().replace("{id}", &sample.id));
            fs::write(&path, traj.to_csv())?;
        }
        series.push(Series {
            label: sample.id.clone(),
            points: traj
                .per_layer
                .iter()
                .map(|(l, v)| (*l as f64, *v))
                .collect(),
        });
    }
    if let Some(svg) = &args.svg {
        let title = format!("JSD per layer ({mode})");
        fs::write(svg, line_chart(&title, "layer", "JSD (nats)", &series))?;
    }
    write_or_print(None, &summary)
}

pub fn decode(args: DecodeArgs) -> Result<()> {
    let model = open_model(&args.model)?;
    let samples = select(load_nonempty(&args.data)?, args.sample.as_deref())?;
    let config = intervention(
        model.as_ref(),
        &args.intervention,
        &args.data,
        args.seed,
        false,
    )?;
    let meta = model.meta()?;
    let mut log = String::new();
    let mut out = String::new();
    for sample in &samples {
        let mut rng = ChaCha8Rng::seed_from_u64(bench::sample_seed(config.seed, &sample.id));
        let g = generate(
            model.as_ref(),
            &sample.prompt(!args.no_context),
            &config,
            &mut rng,
        )?;
        let names: Vec<&str> = g.tokens.iter().map(|t| meta.token_name(*t)).collect();
        let ids: Vec<String> = g.tokens.iter().map(|t| t.to_string()).collect();
        let _ = writeln!(out, "{}\t{}\t{}", sample.id, ids.join(" "), names.join(" "));
        for step in &g.steps {
            let mut value =
                serde_json::to_value(step).map_err(|e| Error::Protocol(e.to_string()))?;
            value["sample"] = serde_json::Value::String(sample.id.clone());
            log.push_str(&value.to_string());
            log.push('\n');
        }
    }
    if let Some(path) = &args.log {
        fs::write(path, log)?;
    }
    write_or_print(None, &out)
}

fn summary_table(reports: &[EvalReport]) -> String {
    let mut out = format!(
        "{:<14} {:>6} {:>8} {:>8} {:>8} {:>8}\n",
        "method", "gamma", "stereo", "anti", "unrel", "invalid"
    );
    for r in reports {
        let s = &r.shares;
        let _ = writeln!(
            out,
            "{:<14} {:>6} {:>8.2} {:>8.2} {:>8.2} {:>8.2}",
            r.method, r.gamma, s.stereotype, s.anti, s.unrelated, s.invalid
        );
    }
    out
}

pub fn eval(args: EvalArgs) -> Result<()> {
    let model = open_model(&args.model)?;
    let dataset = load_nonempty(&args.data)?;
    let seeds = seeds_of(args.seed, &args.seeds);
    let config = intervention(
        model.as_ref(),
        &args.intervention,
        &args.data,
        seeds[0],
        false,
    )?;
    let report = bench::evaluate(
        model.as_ref(),
        &dataset,
        &config,
        &seeds,
        !args.no_context,
        args.jobs,
    )?;
    let reports = [report];
    if let Some(path) = &args.categories {
        fs::write(path, bench::category_csv(&reports))?;
    }
    let csv = bench::reports_csv(&reports);
    match &args.out {
        Some(path) => {
            fs::write(path, csv)?;
            print!("{}", summary_table(&reports));
        }
        None => print!("{csv}"),
    }
    Ok(())
}

pub fn sweep(args: SweepArgs) -> Result<()> {
    let model = open_model(&args.model)?;
    let dataset = load_nonempty(&args.data)?;
    let seeds = seeds_of(args.seed, &args.seeds);
    let methods = args
        .methods
        .iter()
        .map(|m| m.parse())
        .collect::<Result<Vec<Method>>>()?;
    let needs_steering = methods.contains(&Method::RepeBaseline);
    let base = intervention(
        model.as_ref(),
        &args.intervention,
        &args.data,
        seeds[0],
        needs_steering,
    )?;
    let plan = SweepPlan {
        methods,
        gammas: args.gammas.clone(),
        seeds: seeds.clone(),
    };
    let mut reports = Vec::new();
    if args.baselines {
        let none = InterventionConfig {
            method: Method::None,
            gamma: 0.0,
            ..base.clone()
        };
        for with_context in [true, false] {
            reports.push(bench::evaluate(
                model.as_ref(),
                &dataset,
                &none,
                &seeds,
                with_context,
                args.jobs,
            )?);
        }
    }
    reports.extend(bench::sweep(
        model.as_ref(),
        &dataset,
        &plan,
        &base,
        args.jobs,
    )?);

    if let Some(path) = &args.report {
        fs::write(path, bench::reports_csv(&reports))?;
    }
    if let Some(path) = &args.svg {
        let mut series: Vec<Series> = Vec::new();
        for r in &reports {
            match series.iter_mut().find(|s| s.label == r.method) {
                Some(s) => s.points.push((r.gamma, r.shares.stereotype)),
                None => series.push(Series {
                    label: r.method.clone(),
                    points: vec![(r.gamma, r.shares.stereotype)],
                }),
            }
        }
        series.retain(|s| s.points.len() > 1);
        fs::write(
            path,
            line_chart("Stereotype rate vs γ", "γ", "stereotype %", &series),
        )?;
    }
    let csv = bench::dose_response_csv(&reports);
    match &args.out {
        Some(path) => {
            fs::write(path, csv)?;
            print!("{}", summary_table(&reports));
        }
        None => print!("{csv}"),
    }
    Ok(())
}

pub fn make_toy(args: MakeToyArgs) -> Result<()> {
    let config = ToyConfig {
        vocab_size: args.vocab_size,
        n_layers: args.layers,
        hidden_dim: args.hidden_dim,
        inject_layer: args.inject_layer,
        bias_strength: args.bias_strength,
        effect_scale: args.effect_scale,
        margin: args.margin,
        n_samples: args.samples,
        seed: args.seed,
    };
    let bundle = build_toy(&config)?;
    fs::create_dir_all(&args.out_dir)?;
    let model_path = args.out_dir.join("toy_model.json");
    let data_path = args.out_dir.join("dataset.jsonl");
    let truth_path = args.out_dir.join("ground_truth.json");
    bundle.model.save(&model_path)?;
    bench::save_dataset(&data_path, &bundle.dataset)?;
    let truth =
        serde_json::to_string_pretty(&bundle.truth).map_err(|e| Error::Protocol(e.to_string()))?;
    fs::write(&truth_path, truth + "\n")?;
    println!(
        "toy model V={} L={} D={} inject_layer={} bias_strength={}",
        config.vocab_size,
        config.n_layers,
        config.hidden_dim,
        config.inject_layer,
        config.bias_strength
    );
    println!("wrote {}", model_path.display());
    println!(
        "wrote {} ({} samples)",
        data_path.display(),
        bundle.dataset.len()
    );
    println!("wrote {}", truth_path.display());
    Ok(())
}

pub fn serve(args: ServeArgs) -> Result<()> {
    let model: Arc<dyn LayeredModel> = Arc::from(open_model(&args.model)?);
    match &args.listen {
        None => {
            let stdin = io::stdin();
            serve_stream(model.as_ref(), stdin.lock(), io::stdout().lock())
        }
        Some(addr) => {
            let listener = TcpListener::bind(addr)
                .map_err(|e| Error::Transport(format!("cannot listen on {addr}: {e}")))?;
            let local = listener.local_addr()?;
            println!("listening on {local}");
            io::stdout().flush()?;
            for stream in listener.incoming() {
                let stream = stream?;
                let model = Arc::clone(&model);
                thread::spawn(move || {
                    let reader = match stream.try_clone() {
                        Ok(s) => BufReader::new(s),
                        Err(_) => return,
                    };
                    if let Err(e) = serve_stream(model.as_ref(), reader, stream) {
                        info!("connection closed: {e}");
                    }
                });
            }
            Ok(())
        }
    }
}
