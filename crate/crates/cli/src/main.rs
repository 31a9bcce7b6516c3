//! `testa`: generate planted clips, encode videos with token aggregation,
//! and produce FLOP, ablation, mask and similarity tables.

mod output;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use testa::ablation;
use testa::aggregation::{MergeWeighting, Strategy};
use testa::config::{EncoderConfig, ReductionMethod, SpatialPlanMode};
use testa::costmodel::{flop_table_csv, flops_divided, flops_joint, FlopReport};
use testa::encoder::{encode, EncodedVideo, ModelWeights};
use testa::io::{load_video, write_video, TensorFile};
use testa::synthdata::{generate, score_purity, PlantedSpec};
use testa::tokenization::RawVideo;
use testa::trajectory::{
    probe_csv, recover_groups, render_masks, similarity_probe, write_masks, GroupMap, Trajectory,
};

use output::Outputs;

#[derive(Parser)]
#[command(
    name = "testa",
    version,
    about = "Token aggregation for divided space-time video transformers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a clip with planted segments and regions, plus its truth file.
    Synth(SynthArgs),
    /// Encode a video; writes features.tstw, trajectory.json and summary.txt.
    Encode(EncodeArgs),
    /// Compare reduction dimensions, strategies, and merging against pruning.
    Ablate(AblateArgs),
    /// Print analytic FLOP tables.
    Flops(FlopsArgs),
    /// Render per-frame merge masks.
    Visualize(VisualizeArgs),
    /// Tabulate key similarity of merged and unmerged candidate pairs.
    Probe(ProbeArgs),
    /// Validate a config file and print its normalized form.
    Check(CheckArgs),
}

/// Config file plus per-field overrides.
#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    strategy: Option<Strategy>,
    /// Frames removed per block.
    #[arg(long)]
    rt: Option<usize>,
    /// Patches removed per block.
    #[arg(long)]
    rs: Option<usize>,
    /// Number of frames; videos with more frames are uniformly sampled.
    #[arg(long)]
    frames: Option<usize>,
    /// Disable aggregation (rt = rs = 0).
    #[arg(long)]
    no_agg: bool,
    /// Clamp reductions a block cannot honour instead of rejecting them.
    #[arg(long)]
    clamp: bool,
    #[arg(long)]
    weighting: Option<MergeWeighting>,
    #[arg(long)]
    spatial_plan: Option<SpatialPlanMode>,
    /// Drop tokens instead of merging them.
    #[arg(long)]
    prune: bool,
}

impl ConfigArgs {
    fn resolve(&self, fallback: impl FnOnce() -> EncoderConfig) -> Result<EncoderConfig> {
        let mut cfg = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                EncoderConfig::parse_fields(&text)
                    .with_context(|| format!("in config {}", p.display()))?
            }
            None => fallback(),
        };
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.strategy {
            cfg.strategy = v;
        }
        if let Some(v) = self.rt {
            cfg.rt = v;
        }
        if let Some(v) = self.rs {
            cfg.rs = v;
        }
        if let Some(v) = self.frames {
            cfg.frames = v;
        }
        if let Some(v) = self.weighting {
            cfg.weighting = v;
        }
        if let Some(v) = self.spatial_plan {
            cfg.spatial_plan = v;
        }
        if self.no_agg {
            cfg = cfg.without_aggregation();
        }
        if self.clamp {
            cfg.clamp = true;
        }
        if self.prune {
            cfg.reduction = ReductionMethod::Prune;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// A small config that encodes in well under a second.
fn demo_config() -> EncoderConfig {
    EncoderConfig {
        height: 64,
        width: 64,
        patch: 8,
        dim: 32,
        heads: 4,
        blocks: 4,
        rt: 1,
        rs: 6,
        ..EncoderConfig::default_for(8)
    }
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    out: PathBuf,
    /// Number of contiguous frame segments.
    #[arg(long, default_value_t = 2)]
    segments: usize,
    /// Region grid over the patch tiles, `ROWSxCOLS`.
    #[arg(long, default_value = "2x2", value_parser = parse_grid)]
    regions: (usize, usize),
    /// Uniform noise amplitude.
    #[arg(long, default_value_t = 0.02)]
    sigma: f32,
}

fn parse_grid(s: &str) -> std::result::Result<(usize, usize), String> {
    let (a, b) = s
        .split_once('x')
        .ok_or_else(|| format!("expected ROWSxCOLS, got '{s}'"))?;
    let n = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("'{v}': {e}"));
    Ok((n(a)?, n(b)?))
}

#[derive(Args)]
struct EncodeArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Video in the TSTV binary format.
    #[arg(long)]
    video: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Weights in the TSTW tensor format; seeded random weights otherwise.
    #[arg(long)]
    weights: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Video to encode; a planted clip is generated when omitted.
    #[arg(long)]
    video: Option<PathBuf>,
    /// Truth file, for purity scores.
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Temporal only (rt=7), spatial only (rs=14), both (rt=4, rs=8).
    #[arg(long)]
    dimension: bool,
    /// Importance against geometry matching.
    #[arg(long)]
    strategies: bool,
    /// Merging against pruning.
    #[arg(long)]
    reductions: bool,
}

#[derive(Args)]
struct FlopsArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Extra `rt:rs` points, comma separated.
    #[arg(long, value_delimiter = ',', value_parser = parse_point)]
    sweep: Vec<(usize, usize)>,
    /// Also report joint space-time attention.
    #[arg(long)]
    joint: bool,
    /// Directory for flops.csv.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_point(s: &str) -> std::result::Result<(usize, usize), String> {
    let (a, b) = s
        .split_once(':')
        .ok_or_else(|| format!("expected RT:RS, got '{s}'"))?;
    let n = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("'{v}': {e}"));
    Ok((n(a)?, n(b)?))
}

#[derive(Args)]
struct VisualizeArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Video to encode; not needed with --trajectory.
    #[arg(long)]
    video: Option<PathBuf>,
    /// Reuse the trajectory of an earlier encode.
    #[arg(long)]
    trajectory: Option<PathBuf>,
    /// Truth file, for a purity score.
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ProbeArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    video: Option<PathBuf>,
    #[arg(long)]
    trajectory: Option<PathBuf>,
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CheckArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Encode(a) => encode_cmd(a),
        Command::Ablate(a) => ablate(a),
        Command::Flops(a) => flops(a),
        Command::Visualize(a) => visualize(a),
        Command::Probe(a) => probe(a),
        Command::Check(a) => check(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn synth(a: SynthArgs) -> Result<()> {
    let cfg = a.cfg.resolve(demo_config)?;
    let spec = PlantedSpec::grid(
        cfg.frames, cfg.height, cfg.width, cfg.patch, a.segments, a.regions, a.sigma, cfg.seed,
    )?;
    let video = generate(&spec, cfg.seed.wrapping_add(1))?;
    let mut out = Outputs::create(&a.out)?;
    let mut bytes = Vec::new();
    write_video(&mut bytes, &video)?;
    let vpath = out.write("video.tstv", &bytes)?;
    let tpath = out.write("truth.txt", spec.to_text())?;
    if load_video(&vpath)? != video
        || PlantedSpec::from_text(&std::fs::read_to_string(&tpath)?)? != spec
    {
        bail!("synthesized files did not read back identically");
    }
    println!("video = {}", vpath.display());
    println!("truth = {}", tpath.display());
    out.commit();
    Ok(())
}

/// Load a video and fit it to the config's frame count.
fn load_for(path: &Path, cfg: &EncoderConfig, frames_flag: Option<usize>) -> Result<RawVideo> {
    let video = load_video(path).with_context(|| format!("reading video {}", path.display()))?;
    if frames_flag.is_some() && video.frames != cfg.frames {
        return Ok(video.sample_frames(cfg.frames)?);
    }
    Ok(video)
}

fn load_weights(path: Option<&Path>, cfg: &EncoderConfig) -> Result<ModelWeights> {
    match path {
        Some(p) => {
            let f =
                TensorFile::load(p).with_context(|| format!("reading weights {}", p.display()))?;
            Ok(ModelWeights::from_tensor_file(&f, cfg)?)
        }
        None => Ok(ModelWeights::init(cfg)?),
    }
}

fn run_encode(
    cfg: &EncoderConfig,
    video: &RawVideo,
    weights: Option<&Path>,
) -> Result<(EncodedVideo, f64)> {
    let w = load_weights(weights, cfg)?;
    let start = Instant::now();
    let enc = encode(video, cfg, &w)?;
    Ok((enc, start.elapsed().as_secs_f64()))
}

/// Groups behind every final token; for merge runs each group must hold
/// exactly `token_size × frame_size` cells.
fn checked_groups(enc: &EncodedVideo, cfg: &EncoderConfig) -> Result<GroupMap> {
    let groups = recover_groups(&enc.trajectory, cfg.frames, cfg.patches())?;
    groups.check_partition(cfg.frames, cfg.patches())?;
    if cfg.reduction == ReductionMethod::Merge {
        let g = &enc.grid;
        for t in 0..g.num_frames {
            for l in 0..g.patches {
                if groups.group(t, l).len() as f64 != g.constituents(t, l) {
                    bail!(
                        "token ({t},{l}) has {} cells but size {}",
                        groups.group(t, l).len(),
                        g.constituents(t, l)
                    );
                }
            }
        }
    }
    Ok(groups)
}

fn summary_text(cfg: &EncoderConfig, enc: &EncodedVideo, wall: f64) -> String {
    let mut s = String::new();
    let (t0, l0) = enc.shapes[0];
    let _ = writeln!(s, "input_frames = {t0}");
    let _ = writeln!(s, "input_patches = {l0}");
    let _ = writeln!(s, "input_tokens = {}", t0 * l0);
    for (i, (t, l)) in enc.shapes.iter().enumerate().skip(1) {
        let _ = writeln!(s, "block_{i}_frames = {t}");
        let _ = writeln!(s, "block_{i}_patches = {l}");
        let _ = writeln!(s, "block_{i}_tokens = {}", t * l);
    }
    let (t, l) = (enc.grid.num_frames, enc.grid.patches);
    let _ = writeln!(s, "final_frames = {t}");
    let _ = writeln!(s, "final_patches = {l}");
    let _ = writeln!(s, "final_tokens = {}", t * l);
    let _ = writeln!(
        s,
        "token_reduction = {:.4}",
        1.0 - (t * l) as f64 / (t0 * l0) as f64
    );
    let _ = writeln!(s, "constituents = {}", enc.grid.total_constituents());
    let _ = writeln!(s, "gflops = {:.3}", flops_divided(cfg).gflops());
    let _ = writeln!(s, "wall_time_s = {wall:.3}");
    s
}

fn encode_cmd(a: EncodeArgs) -> Result<()> {
    let cfg = a.cfg.resolve(|| EncoderConfig::default_for(8))?;
    if a.cfg.config.is_none() {
        bail!("encode needs --config");
    }
    let video = load_for(&a.video, &cfg, a.cfg.frames)?;
    let (enc, wall) = run_encode(&cfg, &video, a.weights.as_deref())?;
    checked_groups(&enc, &cfg)?;

    let mut out = Outputs::create(&a.out)?;
    let tensors = enc.to_tensor_file();
    let mut bytes = Vec::new();
    tensors.write(&mut bytes)?;
    let fpath = out.write("features.tstw", &bytes)?;
    let tpath = out.write("trajectory.json", enc.trajectory.to_json()?)?;
    out.write("config.txt", cfg.to_text())?;
    let summary = summary_text(&cfg, &enc, wall);
    out.write("summary.txt", &summary)?;

    if TensorFile::load(&fpath)? != tensors {
        bail!("features.tstw did not read back identically");
    }
    let traj = Trajectory::from_json(&std::fs::read_to_string(&tpath)?)?;
    recover_groups(&traj, cfg.frames, cfg.patches())?.check_partition(cfg.frames, cfg.patches())?;
    print!("{summary}");
    out.commit();
    Ok(())
}

fn ablate(a: AblateArgs) -> Result<()> {
    let cfg = a.cfg.resolve(demo_config)?;
    let (video, truth) = match &a.video {
        Some(p) => {
            let truth = match &a.truth {
                Some(t) => Some(PlantedSpec::from_text(&std::fs::read_to_string(t)?)?),
                None => None,
            };
            (load_for(p, &cfg, a.cfg.frames)?, truth)
        }
        None => {
            if a.truth.is_some() {
                bail!("--truth needs --video");
            }
            let spec = PlantedSpec::grid(
                cfg.frames,
                cfg.height,
                cfg.width,
                cfg.patch,
                2,
                (2, 2),
                0.02,
                cfg.seed,
            )?;
            (generate(&spec, cfg.seed.wrapping_add(1))?, Some(spec))
        }
    };
    let all = !(a.dimension || a.strategies || a.reductions);
    let mut cases = Vec::new();
    if all || a.dimension {
        cases.extend(ablation::dimension_cases(&cfg));
    }
    if all || a.strategies {
        cases.extend(ablation::strategy_cases(&cfg));
    }
    if all || a.reductions {
        cases.extend(ablation::reduction_cases(&cfg));
    }
    let rows = ablation::run(&cases, &video, truth.as_ref())?;
    if let Some(r) = rows
        .iter().find(|r| r.reduction == "merge" && !r.conserved())
    {
        bail!(
            "{} lost constituents ({} of {})",
            r.label,
            r.mass_out,
            r.mass_in
        );
    }
    let mut out = Outputs::create(&a.out)?;
    out.write("ablation.csv", ablation::to_csv(&rows)?)?;

    println!(
        "{:<10} {:<32} {:>6} {:>9} {:>7} {:>10} {:>7}",
        "suite", "case", "tokens", "gflops", "ratio", "mass", "purity"
    );
    for r in &rows {
        println!(
            "{:<10} {:<32} {:>6} {:>9.3} {:>7.4} {:>10} {:>7}",
            r.suite.to_string(),
            r.label,
            r.final_frames * r.final_patches,
            r.gflops,
            r.flop_ratio,
            format!("{}/{}", r.mass_out, r.mass_in),
            r.purity.map_or("-".to_string(), |p| format!("{p:.4}")),
        );
    }
    out.commit();
    Ok(())
}

fn flops(a: FlopsArgs) -> Result<()> {
    let cfg = a.cfg.resolve(EncoderConfig::long_video)?;
    let base = cfg.without_aggregation();
    let mut rows: Vec<(String, EncoderConfig, FlopReport)> = vec![
        (
            format!("divided rt={} rs={}", cfg.rt, cfg.rs),
            cfg.clone(),
            flops_divided(&cfg),
        ),
        (
            "divided no aggregation".into(),
            base.clone(),
            flops_divided(&base),
        ),
    ];
    if a.joint {
        rows.push((
            format!("joint rt={} rs={}", cfg.rt, cfg.rs),
            cfg.clone(),
            flops_joint(&cfg),
        ));
        rows.push((
            "joint no aggregation".into(),
            base.clone(),
            flops_joint(&base),
        ));
    }
    for &(rt, rs) in &a.sweep {
        let c = EncoderConfig {
            rt,
            rs,
            clamp: true,
            ..cfg.clone()
        };
        rows.push((
            format!("divided rt={rt} rs={rs}"),
            c.clone(),
            flops_divided(&c),
        ));
    }

    println!(
        "{:<28} {:>12} {:>12} {:>12} {:>8}",
        "run", "gflops", "attention", "linear", "tokens"
    );
    for (label, _, r) in &rows {
        let linear = r.totals.temporal_qkv + r.totals.spatial_qkv + r.totals.ffn;
        println!(
            "{label:<28} {:>12.2} {:>12.2} {:>12.2} {:>8}",
            r.gflops(),
            r.totals.attention() as f64 / 1e9,
            linear as f64 / 1e9,
            r.final_shape.0 * r.final_shape.1
        );
    }
    println!(
        "ratio = {:.4}",
        rows[0].2.total as f64 / rows[1].2.total as f64
    );

    if let Some(dir) = &a.out {
        let mut out = Outputs::create(dir)?;
        out.write(
            "flops.csv",
            flop_table_csv(rows.iter().map(|(_, c, r)| (c, r)))?,
        )?;
        out.commit();
    }
    Ok(())
}

/// Trajectory from a file, or from encoding `--video`.
fn trajectory_for(
    cfg: &EncoderConfig,
    args: &ConfigArgs,
    video: Option<&Path>,
    trajectory: Option<&Path>,
    weights: Option<&Path>,
) -> Result<(Trajectory, Option<EncodedVideo>)> {
    match (trajectory, video) {
        (Some(p), _) => {
            let text =
                std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Ok((Trajectory::from_json(&text)?, None))
        }
        (None, Some(v)) => {
            let video = load_for(v, cfg, args.frames)?;
            let (enc, _) = run_encode(cfg, &video, weights)?;
            checked_groups(&enc, cfg)?;
            Ok((enc.trajectory.clone(), Some(enc)))
        }
        (None, None) => bail!("need --video or --trajectory"),
    }
}

fn visualize(a: VisualizeArgs) -> Result<()> {
    let cfg = a.cfg.resolve(demo_config)?;
    let (traj, _) = trajectory_for(
        &cfg,
        &a.cfg,
        a.video.as_deref(),
        a.trajectory.as_deref(),
        a.weights.as_deref(),
    )?;
    let groups = recover_groups(&traj, cfg.frames, cfg.patches())?;
    groups.check_partition(cfg.frames, cfg.patches())?;
    let images = render_masks(&groups, cfg.height, cfg.width, cfg.patch, cfg.seed);

    let mut out = Outputs::create(&a.out)?;
    let written = write_masks(out.dir(), &groups, &images);
    match written {
        Ok(paths) => out.track(paths),
        Err(e) => {
            // best effort: clear whatever frames made it to disk
            let mut partial: Vec<PathBuf> = (0..images.len())
                .map(|i| out.path(&format!("frame_{i:03}.ppm")))
                .collect();
            partial.extend(["groups.txt", "frames.txt"].map(|n| out.path(n)));
            out.track(partial);
            return Err(e.into());
        }
    }
    println!("masks = {}", images.len());
    println!("final_tokens = {}", groups.token_groups.len());
    if let Some(t) = &a.truth {
        let spec = PlantedSpec::from_text(&std::fs::read_to_string(t)?)?;
        println!("purity = {:.6}", score_purity(&groups, &spec)?);
    }
    out.commit();
    Ok(())
}

fn probe(a: ProbeArgs) -> Result<()> {
    let cfg = a.cfg.resolve(demo_config)?;
    let (traj, _) = trajectory_for(
        &cfg,
        &a.cfg,
        a.video.as_deref(),
        a.trajectory.as_deref(),
        a.weights.as_deref(),
    )?;
    let rows = similarity_probe(&traj);
    let csv = probe_csv(&rows)?;
    let mut out = Outputs::create(&a.out)?;
    out.write("probe.csv", &csv)?;
    println!(
        "{:>5} {:<8} {:>7} {:>10} {:>9} {:>10}",
        "block", "tokens", "merged", "merged_sim", "unmerged", "other_sim"
    );
    let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
    for r in &rows {
        println!(
            "{:>5} {:<8} {:>7} {:>10} {:>9} {:>10}",
            r.block,
            r.dimension.to_string(),
            r.merged_pairs,
            fmt(r.merged_mean),
            r.unmerged_pairs,
            fmt(r.unmerged_mean)
        );
    }
    out.commit();
    Ok(())
}

fn check(a: CheckArgs) -> Result<()> {
    if a.cfg.config.is_none() {
        bail!("check needs --config");
    }
    let cfg = a.cfg.resolve(demo_config)?;
    print!("{}", cfg.to_text());
    Ok(())
}
