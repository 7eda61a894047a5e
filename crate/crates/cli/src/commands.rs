//! Subcommand implementations.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use motionflow::bvhio::{parse_bvh, standardize, write_bvh, BvhReadOptions, BvhWriteOptions, JointMapping};
use motionflow::eval::RetargetReport;
use motionflow::features::{FeatureCodec, NormStats};
use motionflow::flow::{self, FlowModel, SampleOptions, StepRecord, TrainExample};
use motionflow::flowedit::{self, family_cases, evaluate_retarget, NoiseMode, StartSelection};
use motionflow::kinematics::{MotionClip, Positions, Skeleton, Vec3};
use motionflow::model::ModelConfig;
use motionflow::numerics::{GradCheckOptions, Tensor};
use motionflow::synthdata::{build_dataset, rebuild_dataset, Dataset, DatasetManifest, PromptTokens, SkeletonPreset};
use motionflow::Error;

use crate::config::RunConfig;
use crate::rundir::RunDir;
use crate::{BranchWeights, Command, GlobalArgs, InputArgs};

struct Loaded {
    cfg: RunConfig,
    source: Option<(PathBuf, String)>,
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn require_paths<'a>(paths: impl IntoIterator<Item = Option<&'a Path>>) -> Result<()> {
    for p in paths.into_iter().flatten() {
        if !p.exists() {
            bail!("{}: no such file", p.display());
        }
    }
    Ok(())
}

/// Resolves the run config. Without `--config`, a `config.toml` next to the
/// checkpoint (or one directory up) is used, so a trained run's settings
/// follow its weights.
fn load_config(g: &GlobalArgs, checkpoint: Option<&Path>) -> Result<Loaded> {
    let fallback = || {
        let dir = checkpoint?.parent()?;
        [dir.join("config.toml"), dir.parent()?.join("config.toml")]
            .into_iter()
            .find(|p| p.is_file())
    };
    let path = g.config.clone().or_else(fallback);
    let source = match path {
        Some(p) => {
            let text = read(&p)?;
            Some((p, text))
        }
        None => None,
    };
    let cfg = RunConfig::resolve(g.preset, source.as_ref().map(|(_, t)| t.as_str()))?;
    Ok(Loaded { cfg, source })
}

fn open_run(g: &GlobalArgs, loaded: &Loaded, command: &str, seed: u64, args: &[String]) -> Result<RunDir> {
    loaded.cfg.validate()?;
    let dir = RunDir::create(g.out_dir.as_deref(), &g.run_root, command, seed)?;
    let source = loaded.source.as_ref().map(|(p, t)| (p.as_path(), t.as_str()));
    dir.snapshot(&loaded.cfg, g.preset, source, command, seed, args)?;
    Ok(dir)
}

fn codec(cfg: &RunConfig) -> Result<FeatureCodec> {
    Ok(cfg.data.preset.codec(cfg.data.fps)?)
}

fn load_dataset(data: Option<&Path>, cfg: &RunConfig) -> Result<Dataset> {
    match data {
        Some(p) => {
            let manifest = DatasetManifest::from_toml(&read(p)?).with_context(|| p.display().to_string())?;
            if manifest.config.preset != cfg.data.preset {
                bail!(
                    "{}: dataset uses {:?} but config key `data.preset` is {:?}",
                    p.display(),
                    manifest.config.preset,
                    cfg.data.preset
                );
            }
            Ok(rebuild_dataset(&manifest)?)
        }
        None => Ok(build_dataset(&cfg.data)?),
    }
}

fn load_model(path: &Path, cfg: &RunConfig) -> Result<FlowModel> {
    FlowModel::load(path, cfg.model.clone()).with_context(|| format!("loading {}", path.display()))
}

fn parse_prompt(text: &str, cfg: &RunConfig, flag: &str) -> Result<PromptTokens> {
    PromptTokens::from_text(text, cfg.model.prompt_len).with_context(|| format!("{flag} \"{text}\""))
}

/// Parses a BVH recorded on the configured humanoid preset.
fn read_preset_bvh(path: &Path, cfg: &RunConfig) -> Result<(Skeleton, MotionClip)> {
    let doc = parse_bvh(&read(path)?, &BvhReadOptions::default()).with_context(|| path.display().to_string())?;
    if SkeletonPreset::detect(&doc.skeleton) != Some(cfg.data.preset) {
        bail!(
            "{}: joint tree is not the {:?} topology named by config key `data.preset`",
            path.display(),
            cfg.data.preset
        );
    }
    Ok((doc.skeleton, doc.clip))
}

struct InputClip {
    skeleton: Skeleton,
    features: Tensor,
    prompt: Option<PromptTokens>,
    /// Planar root position of the first frame. Features only carry root
    /// velocities, so decoded outputs are shifted back here.
    origin: Vec3,
}

fn planar_origin(clip: &MotionClip) -> Vec3 {
    let p = clip.root_pos()[0];
    Vec3::new(p.x, 0.0, p.z)
}

fn shifted(pos: Positions, by: Vec3) -> Positions {
    pos.into_iter().map(|f| f.into_iter().map(|p| p + by).collect()).collect()
}

fn load_input(input: &InputArgs, cfg: &RunConfig, codec: &FeatureCodec) -> Result<InputClip> {
    if let Some(path) = &input.input {
        let (skeleton, clip) = read_preset_bvh(path, cfg)?;
        if (clip.fps() - cfg.data.fps).abs() > 1e-6 * cfg.data.fps {
            bail!(
                "{}: frame rate {} fps differs from config key `data.fps` = {}",
                path.display(),
                clip.fps(),
                cfg.data.fps
            );
        }
        let features = codec.encode(&clip, &skeleton)?;
        return Ok(InputClip {
            skeleton,
            features,
            prompt: None,
            origin: planar_origin(&clip),
        });
    }
    let index = input.index.ok_or_else(|| anyhow!("give either --input <bvh> or --index <n>"))?;
    let ds = load_dataset(input.data.as_deref(), cfg)?;
    let s = ds
        .samples
        .get(index)
        .ok_or_else(|| anyhow!("--index {index} out of range for {} clips", ds.samples.len()))?;
    Ok(InputClip {
        skeleton: s.skeleton.clone(),
        features: s.features.clone(),
        prompt: Some(s.prompt.clone()),
        origin: planar_origin(&s.clip),
    })
}

fn bvh(skel: &Skeleton, clip: &MotionClip) -> Result<String> {
    Ok(write_bvh(skel, clip, &BvhWriteOptions::default())?)
}

fn features_csv(feat: &Tensor) -> String {
    let d = feat.shape()[1];
    let mut s = String::from("frame");
    for c in 0..d {
        let _ = write!(s, ",c{c}");
    }
    s.push('\n');
    for (t, row) in feat.data().chunks(d).enumerate() {
        let _ = write!(s, "{t}");
        for v in row {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    s
}

fn positions_csv(pos: &Positions, skel: &Skeleton) -> String {
    let mut s = String::from("frame,joint,name,x,y,z\n");
    for (t, frame) in pos.iter().enumerate() {
        for (j, p) in frame.iter().enumerate() {
            let _ = writeln!(s, "{t},{j},{},{},{},{}", skel.topology().name(j), p.x, p.y, p.z);
        }
    }
    s
}

fn apply_weights(w: &BranchWeights, cfg: &mut RunConfig) {
    let set = |dst: &mut f64, v: Option<f64>| {
        if let Some(v) = v {
            *dst = v;
        }
    };
    set(&mut cfg.edit.w_src.text, w.src_w_text);
    set(&mut cfg.edit.w_src.skel, w.src_w_skel);
    set(&mut cfg.edit.w_src.both, w.src_w_both);
    set(&mut cfg.edit.w_tgt.text, w.tgt_w_text);
    set(&mut cfg.edit.w_tgt.skel, w.tgt_w_skel);
    set(&mut cfg.edit.w_tgt.both, w.tgt_w_both);
}

pub fn run(g: &GlobalArgs, cmd: Command, args: &[String]) -> Result<()> {
    match cmd {
        Command::SynthData {
            n_clips,
            window,
            write_bvh,
        } => {
            let mut l = load_config(g, None)?;
            let c = &mut l.cfg;
            c.data.seed = g.seed.unwrap_or(c.data.seed);
            c.data.n_clips = n_clips.unwrap_or(c.data.n_clips);
            c.data.window = window.unwrap_or(c.data.window);
            let dir = open_run(g, &l, "synth-data", l.cfg.data.seed, args)?;
            synth_data(&dir, &l.cfg, write_bvh)
        }
        Command::Train { data, steps } => {
            require_paths([data.as_deref()])?;
            let mut l = load_config(g, None)?;
            l.cfg.train.seed = g.seed.unwrap_or(l.cfg.train.seed);
            if steps.is_some() {
                l.cfg.train.max_steps = steps;
            }
            let dir = open_run(g, &l, "train", l.cfg.train.seed, args)?;
            train(&dir, &l.cfg, data.as_deref())
        }
        Command::Sample {
            checkpoint,
            prompt,
            skeleton,
            frames,
            steps,
            w_text,
            w_skel,
            w_both,
        } => {
            require_paths([Some(checkpoint.as_path()), skeleton.as_deref()])?;
            let mut l = load_config(g, Some(&checkpoint))?;
            let s = &mut l.cfg.sample;
            s.seed = g.seed.unwrap_or(s.seed);
            s.frames = frames.unwrap_or(s.frames);
            s.steps = steps.unwrap_or(s.steps);
            s.weights.text = w_text.unwrap_or(s.weights.text);
            s.weights.skel = w_skel.unwrap_or(s.weights.skel);
            s.weights.both = w_both.unwrap_or(s.weights.both);
            if let Some(p) = prompt {
                s.prompt = p;
            }
            let dir = open_run(g, &l, "sample", l.cfg.sample.seed, args)?;
            sample(&dir, &l.cfg, &checkpoint, skeleton.as_deref())
        }
        Command::Edit {
            checkpoint,
            input,
            src_prompt,
            tgt_prompt,
            tau_min,
            steps,
            weights,
            frozen_noise,
        } => {
            require_paths([Some(checkpoint.as_path()), input.input.as_deref(), input.data.as_deref()])?;
            let mut l = load_config(g, Some(&checkpoint))?;
            let e = &mut l.cfg.edit;
            e.seed = g.seed.unwrap_or(e.seed);
            e.tau_min = tau_min.unwrap_or(e.tau_min);
            e.steps = steps.unwrap_or(e.steps);
            if frozen_noise {
                e.noise = NoiseMode::Frozen;
            }
            apply_weights(&weights, &mut l.cfg);
            let dir = open_run(g, &l, "edit", l.cfg.edit.seed, args)?;
            edit(&dir, &l.cfg, &checkpoint, &input, src_prompt.as_deref(), &tgt_prompt)
        }
        Command::Retarget {
            checkpoint,
            input,
            target_skel,
            steps,
            tau_min,
            start_steps,
            frozen_noise,
        } => {
            require_paths([
                Some(checkpoint.as_path()),
                Some(target_skel.as_path()),
                input.input.as_deref(),
                input.data.as_deref(),
            ])?;
            let mut l = load_config(g, Some(&checkpoint))?;
            let r = &mut l.cfg.retarget;
            r.seed = g.seed.unwrap_or(r.seed);
            r.steps = steps.unwrap_or(r.steps);
            if let Some(k) = start_steps {
                r.start_steps = k;
            }
            if let Some(t) = tau_min {
                if !(0.0..1.0).contains(&t) {
                    bail!("--tau-min {t} must lie in [0, 1)");
                }
                r.start_steps = vec![(t * r.steps as f64).round() as usize];
            }
            if frozen_noise {
                r.noise = NoiseMode::Frozen;
            }
            let dir = open_run(g, &l, "retarget", l.cfg.retarget.seed, args)?;
            retarget(&dir, &l.cfg, &checkpoint, &input, &target_skel)
        }
        Command::Eval {
            checkpoint,
            data,
            pairs,
            bone_length_selection,
        } => {
            require_paths([Some(checkpoint.as_path()), data.as_deref()])?;
            let mut l = load_config(g, Some(&checkpoint))?;
            l.cfg.retarget.seed = g.seed.unwrap_or(l.cfg.retarget.seed);
            l.cfg.eval.pairs = pairs.unwrap_or(l.cfg.eval.pairs);
            if bone_length_selection {
                l.cfg.eval.use_truth = false;
            }
            let dir = open_run(g, &l, "eval", l.cfg.retarget.seed, args)?;
            eval(&dir, &l.cfg, &checkpoint, data.as_deref())
        }
        Command::Convert {
            input,
            mapping,
            unit_scale,
        } => {
            require_paths([Some(input.as_path()), mapping.as_deref()])?;
            let l = load_config(g, None)?;
            let dir = open_run(g, &l, "convert", g.seed.unwrap_or(0), args)?;
            convert(&dir, &input, mapping.as_deref(), unit_scale)
        }
        Command::Gradcheck {
            frames,
            eps,
            max_elements,
            tolerance,
        } => {
            let l = load_config(g, None)?;
            let seed = g.seed.unwrap_or(0);
            let dir = open_run(g, &l, "gradcheck", seed, args)?;
            gradcheck(&dir, frames, seed, eps, max_elements, tolerance)
        }
    }
}

fn synth_data(dir: &RunDir, cfg: &RunConfig, with_bvh: bool) -> Result<()> {
    let ds = build_dataset(&cfg.data)?;
    dir.write("manifest.toml", ds.manifest().to_toml()?)?;
    let mut csv = String::from("index,split,family,prompt,arms,legs,spine,neck,window_start\n");
    for s in &ds.samples {
        let split = if ds.train.contains(&s.index) { "train" } else { "test" };
        let p = &s.skeleton_params;
        let _ = writeln!(
            csv,
            "{},{split},{},{},{},{},{},{},{}",
            s.index,
            s.motion.family.word(),
            s.prompt.text(),
            p.arms,
            p.legs,
            p.spine,
            p.neck,
            s.window_start
        );
        if with_bvh {
            dir.write(&format!("bvh/clip_{:04}.bvh", s.index), bvh(&s.skeleton, &s.clip)?)?;
        }
    }
    dir.write("samples.csv", csv)?;
    println!(
        "{} clips ({} train, {} test) in {}",
        ds.samples.len(),
        ds.train.len(),
        ds.test.len(),
        dir.path().display()
    );
    Ok(())
}

fn train(dir: &RunDir, cfg: &RunConfig, data: Option<&Path>) -> Result<()> {
    let ds = load_dataset(data, cfg)?;
    let examples: Vec<TrainExample> = ds.train_samples().map(TrainExample::from).collect();
    let layout = ds.codec.layout().clone();
    let loss_path = dir.file("loss.csv");
    let file = fs::File::create(&loss_path).with_context(|| format!("creating {}", loss_path.display()))?;
    let mut loss = BufWriter::new(file);
    writeln!(loss, "step,loss_gen,loss_ret")?;
    fs::create_dir_all(dir.file("checkpoints"))?;
    let every = cfg.train.checkpoint_every;
    let started = Instant::now();
    let result = {
        let mut observe = |rec: &StepRecord, m: &FlowModel| -> motionflow::Result<()> {
            writeln!(loss, "{},{},{}", rec.step, rec.loss_gen, rec.loss_ret).map_err(|source| Error::Io {
                path: loss_path.clone(),
                source,
            })?;
            let done = rec.step + 1;
            if every.is_some_and(|k| done % k == 0) {
                m.save(&dir.file(&format!("checkpoints/step_{done:06}.ckpt")))?;
            }
            if done % 100 == 0 {
                eprintln!(
                    "step {done}: loss {:.4} (gen {:.4}, ret {:.4}) {:.0}s",
                    rec.loss,
                    rec.loss_gen,
                    rec.loss_ret,
                    started.elapsed().as_secs_f64()
                );
            }
            Ok(())
        };
        flow::train(&examples, &layout, &cfg.model, &cfg.train, &mut observe)
    };
    loss.flush()?;
    match result {
        Ok(out) => {
            out.model.save(&dir.file("model.ckpt"))?;
            let last = out.curve.last().map_or(f64::NAN, |r| r.loss);
            println!(
                "trained {} steps, final loss {last:.4}; model at {}",
                out.curve.len(),
                dir.file("model.ckpt").display()
            );
            Ok(())
        }
        Err(Error::Diverged { step, last_good }) => {
            let seqs: Vec<Tensor> = examples.iter().map(|e| e.features.clone()).collect();
            let model = FlowModel {
                config: cfg.model.clone(),
                params: *last_good,
                norm: NormStats::fit(&seqs, &layout)?,
            };
            let path = dir.file("checkpoints/last_good.ckpt");
            model.save(&path)?;
            bail!(
                "training diverged at step {step} (try lowering config key `train.lr`); last good parameters saved to {}",
                path.display()
            )
        }
        Err(e) => Err(e.into()),
    }
}

fn sample(dir: &RunDir, cfg: &RunConfig, checkpoint: &Path, skeleton: Option<&Path>) -> Result<()> {
    let model = load_model(checkpoint, cfg)?;
    let codec = codec(cfg)?;
    let skel = match skeleton {
        Some(p) => read_preset_bvh(p, cfg)?.0,
        None => cfg.data.preset.canonical(),
    };
    let prompt = parse_prompt(&cfg.sample.prompt, cfg, "prompt")?;
    let opts = SampleOptions {
        frames: cfg.sample.frames,
        steps: cfg.sample.steps,
        weights: cfg.sample.weights,
        seed: cfg.sample.seed,
        tau_clamp: cfg.train.tau_clamp,
    };
    let (feat, clip) = flow::sample(&model, &codec, Some(prompt), &skel, &opts)?;
    dir.write("sample.bvh", bvh(&skel, &clip)?)?;
    dir.write("features.csv", features_csv(&feat))?;
    println!("{} frames written to {}", clip.frames(), dir.file("sample.bvh").display());
    Ok(())
}

fn edit(
    dir: &RunDir,
    cfg: &RunConfig,
    checkpoint: &Path,
    input: &InputArgs,
    src_prompt: Option<&str>,
    tgt_prompt: &str,
) -> Result<()> {
    let model = load_model(checkpoint, cfg)?;
    let codec = codec(cfg)?;
    let inp = load_input(input, cfg, &codec)?;
    let src = match (src_prompt, inp.prompt) {
        (Some(t), _) => parse_prompt(t, cfg, "--src-prompt")?,
        (None, Some(p)) => p,
        (None, None) => bail!("--src-prompt is required when editing a BVH file"),
    };
    let tgt = parse_prompt(tgt_prompt, cfg, "--tgt-prompt")?;
    let out = flowedit::edit_text(&model, &codec, &inp.features, &src, &tgt, &inp.skeleton, &cfg.edit_config())?;
    let direct = shifted(codec.decode_direct(&out.features)?, inp.origin);
    dir.write("edit_fk.bvh", bvh(&inp.skeleton, &out.clip.translated(inp.origin))?)?;
    dir.write("edit_direct.csv", positions_csv(&direct, &inp.skeleton))?;
    dir.write("features.csv", features_csv(&out.features))?;
    dir.write("trace.csv", out.trace.to_csv())?;
    println!(
        "edited \"{}\" -> \"{}\" over {} steps; outputs in {}",
        src.text(),
        tgt.text(),
        out.trace.steps.len(),
        dir.path().display()
    );
    Ok(())
}

fn retarget(dir: &RunDir, cfg: &RunConfig, checkpoint: &Path, input: &InputArgs, target: &Path) -> Result<()> {
    let model = load_model(checkpoint, cfg)?;
    let codec = codec(cfg)?;
    let inp = load_input(input, cfg, &codec)?;
    let (tgt, _) = read_preset_bvh(target, cfg)?;
    let out = flowedit::retarget(
        &model,
        &codec,
        &inp.features,
        &inp.skeleton,
        &tgt,
        &cfg.retarget_config(),
        StartSelection::BoneLength,
    )?;
    let mut sweep = String::from("start_step,bone_len_err_direct\n");
    for p in &out.sweep {
        let _ = writeln!(sweep, "{},{}", p.start_step, p.score);
    }
    dir.write("retarget_fk.bvh", bvh(&tgt, &out.clip_fk.translated(inp.origin))?)?;
    let direct = shifted(out.positions_direct, inp.origin);
    dir.write("retarget_direct.csv", positions_csv(&direct, &tgt))?;
    dir.write("features.csv", features_csv(&out.features))?;
    dir.write("sweep.csv", sweep)?;
    dir.write("trace.csv", out.trace.to_csv())?;
    let best = out.sweep.iter().find(|p| p.start_step == out.start_step).map_or(f64::NAN, |p| p.score);
    println!(
        "start step {} (bone-length error {:.4}); outputs in {}",
        out.start_step,
        best,
        dir.path().display()
    );
    Ok(())
}

fn eval(dir: &RunDir, cfg: &RunConfig, checkpoint: &Path, data: Option<&Path>) -> Result<()> {
    let model = load_model(checkpoint, cfg)?;
    let ds = load_dataset(data, cfg)?;
    let cases = family_cases(&ds, cfg.eval.pairs, &cfg.eval.limb_scales)?;
    let rcfg = cfg.retarget_config();
    let mut pairs = Vec::with_capacity(cases.len());
    for (i, case) in cases.iter().enumerate() {
        let (report, _) = evaluate_retarget(&model, &ds.codec, case, &rcfg, cfg.eval.use_truth)?;
        eprintln!(
            "pair {}/{} {}: fk {:.3} copy {:.3}",
            i + 1,
            cases.len(),
            report.id,
            report.mse_fk,
            report.mse_copy
        );
        pairs.push(report);
    }
    let report = RetargetReport::from_pairs(pairs)?;
    dir.write("report.csv", report.to_csv())?;
    dir.write("summary.txt", format!("{}\n", report.summary()))?;
    println!("{}", report.summary());
    Ok(())
}

fn convert(dir: &RunDir, input: &Path, mapping: Option<&Path>, unit_scale: Option<f64>) -> Result<()> {
    let opts = BvhReadOptions {
        unit_scale,
    };
    let doc = parse_bvh(&read(input)?, &opts).with_context(|| input.display().to_string())?;
    let map = match mapping {
        Some(p) => JointMapping::from_toml(&read(p)?).with_context(|| p.display().to_string())?,
        None => JointMapping::identity(doc.skeleton.topology()),
    };
    let (skel, clip) = standardize(&doc, &map)?;
    let stem = input.file_stem().map_or("converted".into(), |s| s.to_string_lossy().into_owned());
    let out = dir.write(&format!("{stem}.bvh"), bvh(&skel, &clip)?)?;
    let preset = SkeletonPreset::detect(&skel).map_or("none".to_string(), |p| format!("{p:?}"));
    println!(
        "{} joints, {} frames, preset {preset}; written to {}",
        skel.joints(),
        clip.frames(),
        out.display()
    );
    Ok(())
}

fn gradcheck(dir: &RunDir, frames: usize, seed: u64, eps: f64, max_elements: usize, tol: f64) -> Result<()> {
    let opts = GradCheckOptions {
        max_elements_per_param: (max_elements > 0).then_some(max_elements),
    };
    let started = Instant::now();
    let report = flow::gradient_check(&ModelConfig::gradcheck(), frames, seed, eps, &opts)?;
    let secs = started.elapsed().as_secs_f64();
    let mut csv = String::from("parameter,max_rel_error\n");
    for (name, e) in &report.per_parameter_errors {
        let _ = writeln!(csv, "{name},{e}");
    }
    dir.write("gradcheck.csv", csv)?;
    println!(
        "max relative error {:.3e} at {} over {} elements in {secs:.1}s",
        report.max_rel_error, report.worst_parameter, report.checked_elements
    );
    if !(report.max_rel_error < tol) {
        bail!("max relative error {:.3e} is not below {tol:e}", report.max_rel_error);
    }
    Ok(())
}
