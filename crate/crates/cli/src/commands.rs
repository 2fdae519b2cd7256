//! Subcommand bodies.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::Deserialize;
use serde_json::{json, Map, Value};

use atomotion::align::{
    self, motion_features, summarize_rows, text_features, AlignmentModel, FeatureBatch, FitConfig,
    TEXT_FEATURE_DIM,
};
use atomotion::decompose::{
    calibrate_thresholds, decompose as decompose_motion, default_descriptors, ConversionThresholds,
    FineGrainedDescription,
};
use atomotion::exec::Execution;
use atomotion::generative::{
    generate_tokens, train_stack, AtomicFeatureGrid, DecodeConfig, GenerativeStack, GeneratorWeights, StackConfig,
    TrainConfig, TrainingExample,
};
use atomotion::llm::{
    atomize as atomize_text, build_inference_prompt, build_training_prompt, prompt_hash, summarize, AtomicTextMatrix,
    Example, FixtureStore, LlmTransport, RecordingTransport, ReplayTransport,
};
use atomotion::matrix_io::{read_matrix, write_matrix};
use atomotion::metrics::{diversity, fid, r_precision, FeatureSet};
use atomotion::motion::{motion_to_bytes, BodyPart, MotionDataset, MotionSequence, Skeleton, Vec3};
use atomotion::rvq::{featurize, featurize_batch, train_codebooks, RvqModel, RvqTrainConfig, TokenSequence};

use crate::dataset::{self, load_atomic_file, load_motion_file};
use crate::error::{CliError, Result, EXIT_IO, EXIT_MOTION};
use crate::live::HttpTransport;
use crate::run::Run;
use crate::{
    AlignEvalArgs, AlignTrainArgs, AtomizeArgs, CalibrateArgs, DecomposeArgs, DetokenizeArgs, GenerateArgs,
    MetricsArgs, TokenizeArgs, TokenizeTrainArgs, TransportMode,
};

const DEFAULT_PERIODS: usize = 4;
const DEFAULT_FPS: f64 = 20.0;
const DEFAULT_DOWNSAMPLE: usize = 4;

fn pretty(value: &impl serde::Serialize) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(value).expect("json");
    s.push('\n');
    s.into_bytes()
}

fn json_input<T: for<'de> Deserialize<'de>>(run: &mut Run, path: &Path) -> Result<T> {
    let text = run.read_string(path)?;
    serde_json::from_str(&text).map_err(|e| CliError::new(EXIT_IO, format!("{}: {e}", path.display())))
}

fn read_rvq(run: &mut Run, path: &Path) -> Result<RvqModel> {
    let bytes = run.read(path)?;
    RvqModel::read(&bytes[..]).map_err(|e| CliError::from(e).at(path))
}

fn read_align(run: &mut Run, path: &Path) -> Result<AlignmentModel> {
    let bytes = run.read(path)?;
    AlignmentModel::read(&bytes[..]).map_err(|e| CliError::from(e).at(path))
}

fn read_features(run: &mut Run, path: &Path) -> Result<FeatureSet> {
    let bytes = run.read(path)?;
    let m = read_matrix(&bytes[..]).map_err(|e| CliError::from(e).at(path))?;
    FeatureSet::new(m).map_err(|e| CliError::from(e).at(path))
}

fn write_mat(run: &mut Run, path: &Path, m: &DMatrix<f64>) -> Result<()> {
    let mut buf = Vec::new();
    write_matrix(&mut buf, m).map_err(|e| CliError::io(path, e))?;
    run.write(path, &buf)
}

fn load_motions(run: &mut Run, paths: &[PathBuf]) -> Result<Vec<MotionSequence>> {
    if paths.is_empty() {
        return Err(CliError::usage("--inputs needs at least one motion"));
    }
    paths.iter().map(|p| load_motion_file(run, p)).collect()
}

/// Root-relative feature rows back to a motion on the reference skeleton.
pub fn rows_to_motion(rows: &[Vec<f64>], fps: f64) -> Result<MotionSequence> {
    let skeleton = Arc::new(Skeleton::humanml3d());
    let j = skeleton.joint_count();
    if let Some(row) = rows.iter().find(|r| r.len() != 3 * j) {
        return Err(CliError::new(
            EXIT_MOTION,
            format!("feature rows have {} values, the reference skeleton needs {}", row.len(), 3 * j),
        ));
    }
    let frames: Vec<Vec<Vec3>> = rows
        .iter()
        .map(|r| r.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
        .collect();
    Ok(MotionSequence::new(fps, skeleton, frames)?)
}

pub fn decompose(a: DecomposeArgs, config: Option<&Path>) -> Result<()> {
    let mut run = Run::new("decompose", config)?;
    let input: PathBuf = run.required(a.input, "input")?;
    let periods = run.param(a.periods, "periods", DEFAULT_PERIODS)?;
    let thresholds_path: Option<PathBuf> = run.opt(a.thresholds, "thresholds")?;
    let output: PathBuf = run.required(a.output, "output")?;

    let motion = load_motion_file(&mut run, &input)?;
    let thresholds = match &thresholds_path {
        Some(p) => json_input::<ConversionThresholds>(&mut run, p)?,
        None => ConversionThresholds::default(),
    };
    let defs = default_descriptors(motion.skeleton())?;
    let desc = decompose_motion(&motion, &defs, &thresholds, periods)?;
    let entries: usize = desc.periods.iter().map(Vec::len).sum();
    run.note("entries", entries);
    let mut text = desc.to_json_pretty();
    text.push('\n');
    run.write(&output, text.as_bytes())?;
    run.finish(&output)
}

pub fn calibrate(a: CalibrateArgs, config: Option<&Path>, exec: Execution) -> Result<()> {
    let mut run = Run::new("calibrate", config)?;
    let inputs: Vec<PathBuf> = run.required(a.inputs, "inputs")?;
    let output: PathBuf = run.required(a.output, "output")?;
    let motions = load_motions(&mut run, &inputs)?;
    let dataset = MotionDataset::from_motions(motions)?;
    let defs = default_descriptors(dataset.skeleton())?;
    let thresholds = calibrate_thresholds(&dataset, &defs, exec)?;
    run.write(&output, &pretty(&thresholds))?;
    run.finish(&output)
}

pub fn tokenize_train(a: TokenizeTrainArgs, config: Option<&Path>, exec: Execution) -> Result<()> {
    let mut run = Run::new("tokenize-train", config)?;
    let inputs: Vec<PathBuf> = run.required(a.inputs, "inputs")?;
    let codebook_size = run.param(a.codebook_size, "codebook_size", 512)?;
    let residual_layers = run.param(a.residual_layers, "residual_layers", 5)?;
    let downsample = run.param(a.downsample, "downsample", DEFAULT_DOWNSAMPLE)?;
    let iterations = run.param(a.iterations, "iterations", 25)?;
    let seed = run.seed(a.seed, "seed")?;
    let output: PathBuf = run.required(a.output, "output")?;

    let motions = load_motions(&mut run, &inputs)?;
    let features = featurize_batch(&motions, downsample, exec)?;
    let cfg = RvqTrainConfig {
        codebook_size,
        residual_layers,
        iterations,
        seed,
        downsample_ratio: downsample,
    };
    let model = train_codebooks(&features, &cfg, exec)?;
    let errors = model.reconstruction_error(&features)?;
    run.note("training_rows", features.len());
    run.note("reconstruction_error_per_layer", errors);
    let mut buf = Vec::new();
    model.write(&mut buf).map_err(|e| CliError::io(&output, e))?;
    run.write(&output, &buf)?;
    run.finish(&output)
}

pub fn tokenize(a: TokenizeArgs, config: Option<&Path>, exec: Execution) -> Result<()> {
    let mut run = Run::new("tokenize", config)?;
    let model_path: PathBuf = run.required(a.model, "model")?;
    let input: PathBuf = run.required(a.input, "input")?;
    let output: PathBuf = run.required(a.output, "output")?;
    let model = read_rvq(&mut run, &model_path)?;
    let motion = load_motion_file(&mut run, &input)?;
    let features = featurize(&motion, model.downsample_ratio())?;
    let tokens = model.encode_with(&features, exec)?;
    run.note("slots", tokens.slots());
    run.write(&output, tokens.to_csv_string().as_bytes())?;
    run.finish(&output)
}

pub fn detokenize(a: DetokenizeArgs, config: Option<&Path>) -> Result<()> {
    let mut run = Run::new("detokenize", config)?;
    let model_path: PathBuf = run.required(a.model, "model")?;
    let input: PathBuf = run.required(a.input, "input")?;
    let fps = run.param(a.fps, "fps", DEFAULT_FPS)?;
    let output: PathBuf = run.required(a.output, "output")?;
    let model = read_rvq(&mut run, &model_path)?;
    let bytes = run.read(&input)?;
    let tokens = TokenSequence::read_csv(&bytes[..]).map_err(|e| CliError::from(e).at(&input))?;
    let rows = model.decode(&tokens)?;
    let motion = rows_to_motion(&rows, fps / model.downsample_ratio() as f64)?;
    run.write(&output, &motion_to_bytes(&motion))?;
    run.finish(&output)
}

fn text_matrix(texts: &[&str]) -> DMatrix<f64> {
    let rows: Vec<Vec<f64>> = texts.iter().map(|t| text_features(t, TEXT_FEATURE_DIM)).collect();
    DMatrix::from_row_iterator(rows.len(), TEXT_FEATURE_DIM, rows.into_iter().flatten())
}

fn motion_matrix(motions: &[&MotionSequence], ratio: usize, exec: Execution) -> Result<DMatrix<f64>> {
    let rows = exec.try_map(motions, |m| motion_features(m, ratio))?;
    let dim = rows[0].len();
    Ok(DMatrix::from_row_iterator(rows.len(), dim, rows.into_iter().flatten()))
}

pub fn align_train(a: AlignTrainArgs, config: Option<&Path>, exec: Execution) -> Result<()> {
    let mut run = Run::new("align-train", config)?;
    let dataset_path: PathBuf = run.required(a.dataset, "dataset")?;
    let embed_dim = run.param(a.embed_dim, "embed_dim", align::DEFAULT_EMBED_DIM)?;
    let temperature = run.param(a.temperature, "temperature", align::DEFAULT_TEMPERATURE)?;
    let steps = run.param(a.steps, "steps", 500)?;
    let learning_rate = run.param(a.learning_rate, "learning_rate", 1.0)?;
    let downsample = run.param(a.downsample, "downsample", DEFAULT_DOWNSAMPLE)?;
    let seed = run.seed(a.seed, "seed")?;
    let output: PathBuf = run.required(a.output, "output")?;

    let items = dataset::load(&mut run, &dataset_path)?;
    let texts: Vec<&str> = items.iter().map(|i| i.text.as_str()).collect();
    let motions: Vec<&MotionSequence> = items.iter().map(|i| &i.motion).collect();
    let batch = FeatureBatch::new(text_matrix(&texts), motion_matrix(&motions, downsample, exec)?)?;
    let init = AlignmentModel::random(TEXT_FEATURE_DIM, batch.motion.ncols(), embed_dim, temperature, seed)?;
    let report = align::fit(&init, &[batch], &FitConfig { steps, learning_rate })?;
    run.note("initial_loss", report.losses[0]);
    run.note("final_loss", *report.losses.last().expect("at least one loss"));
    let mut buf = Vec::new();
    report.model.write(&mut buf).map_err(|e| CliError::io(&output, e))?;
    run.write(&output, &buf)?;
    run.finish(&output)
}

pub fn align_eval(a: AlignEvalArgs, config: Option<&Path>, exec: Execution) -> Result<()> {
    let mut run = Run::new("align-eval", config)?;
    let model_path: PathBuf = run.required(a.model, "model")?;
    let dataset_path: PathBuf = run.required(a.dataset, "dataset")?;
    let downsample = run.param(a.downsample, "downsample", DEFAULT_DOWNSAMPLE)?;
    let motion_out: Option<PathBuf> = run.opt(a.motion_features, "motion_features")?;
    let text_out: Option<PathBuf> = run.opt(a.text_features, "text_features")?;
    let output: PathBuf = run.required(a.output, "output")?;

    let model = read_align(&mut run, &model_path)?;
    let items = dataset::load(&mut run, &dataset_path)?;
    let texts: Vec<&str> = items.iter().map(|i| i.text.as_str()).collect();
    let motions: Vec<&MotionSequence> = items.iter().map(|i| &i.motion).collect();
    let em = model.embed_motion_rows(&motion_matrix(&motions, downsample, exec)?)?;
    let et = model.embed_text_rows(&text_matrix(&texts))?;
    let sim = &em * et.transpose();
    let n = items.len();

    let mut report = Map::new();
    report.insert("items".into(), json!(n));
    report.insert("recall_at_1".into(), json!(align::recall_at_1(&align::rank_rows(&sim))));
    let mut rp = Map::new();
    for k in 1..n.min(4) {
        rp.insert(k.to_string(), json!(r_precision(&sim, k)?));
    }
    report.insert("r_precision".into(), Value::Object(rp));
    if n >= 2 {
        let fm = FeatureSet::new(em.clone())?;
        let ft = FeatureSet::new(et.clone())?;
        report.insert("fid_text_motion".into(), json!(fid(&ft, &fm)?));
    }
    if let Some(p) = &motion_out {
        write_mat(&mut run, p, &em)?;
    }
    if let Some(p) = &text_out {
        write_mat(&mut run, p, &et)?;
    }
    run.write(&output, &pretty(&report))?;
    run.finish(&output)
}

pub fn atomize(a: AtomizeArgs, config: Option<&Path>) -> Result<()> {
    let mut run = Run::new("atomize", config)?;
    let mode = run.param(a.mode, "mode", TransportMode::Replay)?;
    let examples_path: Option<PathBuf> = run.opt(a.examples, "examples")?;
    let fixtures: Option<PathBuf> = run.opt(a.fixtures, "fixtures")?;
    let text: String = run.required(a.text, "text")?;
    let periods: Option<usize> = run.opt(a.periods, "periods")?;
    let description_path: Option<PathBuf> = run.opt(a.description, "description")?;
    let output: PathBuf = run.required(a.output, "output")?;

    let description = match &description_path {
        Some(p) => {
            let s = run.read_string(p)?;
            Some(
                FineGrainedDescription::from_json(&s)
                    .map_err(|e| CliError::new(EXIT_IO, format!("{}: {e}", p.display())))?,
            )
        }
        None => None,
    };
    let examples: Vec<Example> = match (&examples_path, &description) {
        (Some(p), _) => json_input(&mut run, p)?,
        (None, Some(_)) => Vec::new(),
        (None, None) => return Err(CliError::usage("--examples is required without --description")),
    };
    let bundle = match &description {
        Some(d) => build_training_prompt(&text, d)?,
        None => build_inference_prompt(&text, &examples, periods)?,
    };
    run.note("prompt_hash", prompt_hash(&bundle.system, &bundle.user_message()));

    let store = fixtures.as_ref().map(FixtureStore::new);
    let store_ref = || store.as_ref().ok_or_else(|| CliError::usage("--fixtures is required in replay and record modes"));
    let call = |t: &dyn LlmTransport| -> Result<AtomicTextMatrix> {
        Ok(match &description {
            Some(d) => summarize(t, &text, d)?,
            None => atomize_text(t, &text, &examples, periods)?,
        })
    };
    let matrix = match mode {
        TransportMode::Replay => call(&ReplayTransport::new(store_ref()?))?,
        TransportMode::Record => call(&RecordingTransport::new(HttpTransport::from_env(1)?, store_ref()?))?,
        TransportMode::Live => call(&HttpTransport::from_env(1)?)?,
    };
    run.note("periods", matrix.period_count());
    let mut out = matrix.to_json_pretty();
    out.push('\n');
    run.write(&output, out.as_bytes())?;
    run.finish(&output)
}

#[derive(Deserialize)]
struct PromptFile {
    prompts: Vec<PromptEntry>,
}

#[derive(Deserialize)]
struct PromptEntry {
    text: String,
    atomic: PathBuf,
}

fn embed_text(model: &AlignmentModel, text: &str) -> Result<Vec<f64>> {
    Ok(model.embed_text(&text_features(text, model.text_dim()))?.as_slice().to_vec())
}

/// One `P x D` matrix of phrase embeddings per body part.
fn atomic_grid(model: &AlignmentModel, atomic: &AtomicTextMatrix) -> Result<AtomicFeatureGrid> {
    let p = atomic.period_count();
    let d = model.embed_dim();
    let parts = BodyPart::ALL
        .iter()
        .map(|&part| {
            let rows = atomic
                .column(part)
                .map(|phrase| embed_text(model, phrase))
                .collect::<Result<Vec<_>>>()?;
            Ok(DMatrix::from_row_iterator(p, d, rows.into_iter().flatten()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AtomicFeatureGrid::new(parts)?)
}

pub fn generate(a: GenerateArgs, config: Option<&Path>, exec: Execution) -> Result<()> {
    let mut run = Run::new("generate", config)?;
    let align_path: PathBuf = run.required(a.align_model, "align_model")?;
    let rvq_path: PathBuf = run.required(a.rvq_model, "rvq_model")?;
    let weights_path: Option<PathBuf> = run.opt(a.weights, "weights")?;
    let train_data: Option<PathBuf> = run.opt(a.train_data, "train_data")?;
    let steps = run.param(a.steps, "steps", 10)?;
    let temperature = run.param(a.temperature, "temperature", 1.0)?;
    let slots = run.param(a.slots, "slots", 10)?;
    let seed = run.seed(a.seed, "seed")?;
    let fps = run.param(a.fps, "fps", DEFAULT_FPS)?;
    let text: Option<String> = run.opt(a.text, "text")?;
    let atomic: Option<PathBuf> = run.opt(a.atomic, "atomic")?;
    let prompts_path: Option<PathBuf> = run.opt(a.prompts, "prompts")?;
    let output: PathBuf = run.required(a.output, "output")?;

    let align_model = read_align(&mut run, &align_path)?;
    let rvq = read_rvq(&mut run, &rvq_path)?;
    let de = align_model.embed_dim();

    let weights = match (&weights_path, &train_data) {
        (Some(p), None) => {
            let bytes = run.read(p)?;
            GeneratorWeights::read(&bytes[..]).map_err(|e| CliError::from(e).at(p))?
        }
        (None, Some(p)) => {
            let blocks = run.param(a.blocks, "blocks", atomotion::generative::DEFAULT_BLOCKS)?;
            let model_dim = run.param(a.model_dim, "model_dim", atomotion::generative::DEFAULT_MODEL_DIM)?;
            let train_steps = run.param(a.train_steps, "train_steps", 200)?;
            let learning_rate = run.param(a.learning_rate, "learning_rate", 0.05)?;
            let save: Option<PathBuf> = run.opt(a.save_weights, "save_weights")?;
            let items = dataset::load(&mut run, p)?;
            let mut examples = Vec::with_capacity(items.len());
            for item in &items {
                let atomic = item
                    .atomic
                    .as_ref()
                    .ok_or_else(|| CliError::usage("every --train-data item needs an `atomic` file"))?;
                let features = featurize(&item.motion, rvq.downsample_ratio())?;
                examples.push(TrainingExample {
                    text: embed_text(&align_model, &item.text)?,
                    grid: atomic_grid(&align_model, atomic)?,
                    tokens: rvq.encode_with(&features, exec)?,
                });
            }
            let c = rvq.codebook_size();
            let r = rvq.residual_layers();
            let mut base = GenerativeStack::random(StackConfig::base(c, blocks, model_dim, de, de), seed)?;
            let train = |stack: &mut GenerativeStack, s: u64| {
                train_stack(stack, &examples, &TrainConfig { steps: train_steps, learning_rate, seed: s }, exec)
            };
            let base_losses = train(&mut base, seed)?;
            run.note("base_final_loss", base_losses.last().copied());
            let residual = if r > 0 {
                let cfg = StackConfig::residual(c, r, blocks, model_dim, de, de);
                let mut stack = GenerativeStack::random(cfg, seed.wrapping_add(1))?;
                let losses = train(&mut stack, seed.wrapping_add(1))?;
                run.note("residual_final_loss", losses.last().copied());
                Some(stack)
            } else {
                None
            };
            let weights = GeneratorWeights { base, residual };
            if let Some(sp) = &save {
                let mut buf = Vec::new();
                weights.write(&mut buf).map_err(|e| CliError::io(sp, e))?;
                run.write(sp, &buf)?;
            }
            weights
        }
        _ => return Err(CliError::usage("exactly one of --weights and --train-data is required")),
    };

    let prompts: Vec<(String, AtomicTextMatrix)> = match (&prompts_path, &text, &atomic) {
        (Some(p), None, None) => {
            let file: PromptFile = json_input(&mut run, p)?;
            let base = p.parent().unwrap_or(Path::new(""));
            file.prompts
                .into_iter()
                .map(|e| Ok((e.text, load_atomic_file(&mut run, &base.join(&e.atomic))?)))
                .collect::<Result<_>>()?
        }
        (None, Some(t), Some(ap)) => vec![(t.clone(), load_atomic_file(&mut run, ap)?)],
        _ => return Err(CliError::usage("give either --prompts or both --text and --atomic")),
    };
    if prompts.is_empty() {
        return Err(CliError::usage("no prompts to generate"));
    }

    let mut motion_rows = Vec::with_capacity(prompts.len());
    let mut text_rows = Vec::with_capacity(prompts.len());
    for (i, (raw, atomic)) in prompts.iter().enumerate() {
        let text_vec = embed_text(&align_model, raw)?;
        let grid = atomic_grid(&align_model, atomic)?;
        let cfg = DecodeConfig {
            slots,
            steps,
            temperature,
            seed: seed.wrapping_add(i as u64),
        };
        let tokens = generate_tokens(&weights.base, weights.residual.as_ref(), &text_vec, &grid, &cfg)?;
        let rows = rvq.decode(&tokens)?;
        let motion = rows_to_motion(&rows, fps / rvq.downsample_ratio() as f64)?;
        run.write(&output.join(format!("{i:03}.tokens.csv")), tokens.to_csv_string().as_bytes())?;
        run.write(&output.join(format!("{i:03}.motion")), &motion_to_bytes(&motion))?;
        motion_rows.push(align_model.embed_motion(&summarize_rows(&rows))?);
        text_rows.push(text_vec);
    }
    let n = prompts.len();
    let gen = DMatrix::from_row_iterator(n, de, motion_rows.iter().flat_map(|v| v.iter().copied()));
    let txt = DMatrix::from_row_iterator(n, de, text_rows.into_iter().flatten());
    write_mat(&mut run, &output.join("motion_features.mat"), &gen)?;
    write_mat(&mut run, &output.join("text_features.mat"), &txt)?;
    run.note("generated", n);
    run.finish(&output)
}

pub fn metrics(a: MetricsArgs, config: Option<&Path>) -> Result<()> {
    let mut run = Run::new("metrics", config)?;
    let real_path: PathBuf = run.required(a.real, "real")?;
    let gen_path: PathBuf = run.required(a.gen, "gen")?;
    let text_path: Option<PathBuf> = run.opt(a.text, "text")?;
    let ks = run.param(a.rprecision_k, "rprecision_k", vec![1, 2, 3])?;
    let pairs = run.param(a.diversity_pairs, "diversity_pairs", 300)?;
    let seed = run.seed(a.seed, "seed")?;
    let output: PathBuf = run.required(a.output, "output")?;

    let real = read_features(&mut run, &real_path)?;
    let gen = read_features(&mut run, &gen_path)?;
    let mut report = Map::new();
    report.insert("fid".into(), json!(fid(&real, &gen)?));
    report.insert("diversity".into(), json!(diversity(&gen, pairs, seed)));
    report.insert("diversity_real".into(), json!(diversity(&real, pairs, seed)));
    if let Some(tp) = &text_path {
        let text = read_features(&mut run, tp)?;
        let sim = gen.rows() * text.rows().transpose();
        let mut rp = Map::new();
        for &k in &ks {
            rp.insert(k.to_string(), json!(r_precision(&sim, k)?));
        }
        report.insert("r_precision".into(), Value::Object(rp));
    }
    run.write(&output, &pretty(&report))?;
    run.finish(&output)
}
