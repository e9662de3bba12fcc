use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use gsforge_core::align::{AttributeLossConfig, InfoNceConfig, NegativePool, DEFAULT_TEMPERATURE};
use gsforge_core::io::gtns::{load_tensor, save_tensor};
use gsforge_core::io::pfm::load_depth_pfm;
use gsforge_core::io::ply::load_scene_ply;
use gsforge_core::metrics::PriorAlignment;
use gsforge_core::pipeline::{self, PipelineConfig, StageOutcome};
use gsforge_core::selfcheck::run_selfcheck;
use gsforge_core::synthetic::{SceneKind, SyntheticParams};
use gsforge_core::DepthMode;

#[derive(Parser, Debug)]
#[command(name = "gsforge", version, about = "Gaussian-splat depth rendering, view synthesis and correspondence labelling")]
struct Cli {
    /// Global RNG seed (overrides the config file).
    #[arg(long, global = true, env = "GSFORGE_SEED")]
    seed: Option<u64>,
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    depth_mode: Option<DepthMode>,
    /// Dominant-primitive opacity threshold.
    #[arg(long, global = true)]
    tau: Option<f64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Bundle {
    /// Scene PLY.
    #[arg(long)]
    scene: PathBuf,
    /// Camera manifest (JSON).
    #[arg(long)]
    cameras: PathBuf,
    /// Output root.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render RGB, depth, Gaussian maps and plane buffers for every camera.
    Render {
        #[command(flatten)]
        bundle: Bundle,
        /// Depth modes to write (default: all).
        #[arg(long, value_delimiter = ',')]
        modes: Vec<DepthMode>,
    },
    /// Sample, render and filter perturbed novel views.
    SynthViews {
        #[command(flatten)]
        bundle: Bundle,
    },
    /// Score all view pairs and write overlap-binned correspondences.
    Label {
        #[command(flatten)]
        bundle: Bundle,
    },
    /// Evaluate label quality per depth source.
    EvalGt {
        #[arg(long, required_unless_present = "synthetic")]
        scene: Option<PathBuf>,
        #[arg(long, required_unless_present = "synthetic")]
        cameras: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Use the bundled synthetic scenes with analytic depth.
        #[arg(long, conflicts_with_all = ["scene", "cameras"])]
        synthetic: bool,
    },
    /// Evaluate a training loss on tensor files; prints JSON.
    LossEval {
        #[command(subcommand)]
        loss: Loss,
    },
    /// Run the built-in consistency checks.
    Selfcheck,
    /// Write a synthetic scene and camera manifest.
    MakeScene {
        #[arg(long, value_enum)]
        kind: Kind,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 900)]
        count: usize,
        #[arg(long, default_value_t = 4)]
        views: usize,
        #[arg(long, default_value_t = 0.0)]
        tilt: f64,
    },
}

#[derive(Subcommand, Debug)]
enum Loss {
    /// Mean −log S_ij over matches. Scores: (M, N); matches: (K, 2) i32.
    Nll {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        matches: PathBuf,
    },
    /// Voxel and patch InfoNCE over (N, D) embeddings.
    Infonce {
        #[arg(long)]
        v: PathBuf,
        #[arg(long)]
        q_a: PathBuf,
        #[arg(long)]
        q_b: PathBuf,
        /// Optional length-N i32 scene ids.
        #[arg(long)]
        scenes: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_TEMPERATURE)]
        temperature: f64,
        #[arg(long, default_value_t = 1.0)]
        lambda_v: f64,
        #[arg(long, default_value_t = 1.0)]
        lambda_q: f64,
        #[arg(long)]
        cross_scene: bool,
    },
    /// Attribute regression and consistency over (N, 59) features.
    Attribute {
        #[arg(long)]
        pred_a: PathBuf,
        #[arg(long)]
        pred_b: PathBuf,
        #[arg(long)]
        gt_a: PathBuf,
        #[arg(long)]
        gt_b: PathBuf,
        #[arg(long)]
        no_consistency: bool,
    },
    /// Quaternions (N, 4) to 6D rotations (N, 6).
    Rot6d {
        #[arg(long)]
        quats: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-scene log-scale standardisation.
    ScaleNorm {
        #[arg(long)]
        scene: PathBuf,
        /// Optional (N, 3) output of standardised log-scales.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Scale/shift-aligned ℓ1 against a monocular depth prior.
    DepthReg {
        #[arg(long)]
        rendered: PathBuf,
        #[arg(long)]
        prior: PathBuf,
        #[arg(long, value_enum, default_value_t = Alignment::LeastSquares)]
        alignment: Alignment,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Kind {
    Plane,
    TwoPlanes,
    SphereShell,
    RandomCloud,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Alignment {
    LeastSquares,
    MedianRatio,
}

fn config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(m) = cli.depth_mode {
        cfg.depth_mode = m;
    }
    if let Some(t) = cli.tau {
        cfg.tau = t;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn report(stage: &str, outcome: StageOutcome, out: &Path) {
    match outcome {
        StageOutcome::Ran => println!("{stage}: done, outputs in {}", out.display()),
        StageOutcome::Skipped => println!("{stage}: up to date, skipped"),
    }
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn run_loss(loss: &Loss) -> Result<()> {
    match loss {
        Loss::Nll { scores, matches } => {
            let v = pipeline::eval_nll(&load_tensor(scores)?, &load_tensor(matches)?)?;
            print_json(&serde_json::json!({ "nll": v }))
        }
        Loss::Infonce {
            v,
            q_a,
            q_b,
            scenes,
            temperature,
            lambda_v,
            lambda_q,
            cross_scene,
        } => {
            let cfg = InfoNceConfig {
                tau: *temperature,
                lambda_v: *lambda_v,
                lambda_q: *lambda_q,
                pool: if *cross_scene {
                    NegativePool::CrossScene
                } else {
                    NegativePool::IntraScene
                },
            };
            let scenes = scenes.as_deref().map(load_tensor).transpose()?;
            let l = pipeline::eval_infonce(
                &load_tensor(v)?,
                &load_tensor(q_a)?,
                &load_tensor(q_b)?,
                scenes.as_ref(),
                &cfg,
            )?;
            print_json(&serde_json::json!({
                "voxel": l.voxel, "patch": l.patch, "total": l.total, "pool": pipeline::pool_name(cfg.pool)
            }))
        }
        Loss::Attribute {
            pred_a,
            pred_b,
            gt_a,
            gt_b,
            no_consistency,
        } => {
            let cfg = AttributeLossConfig {
                consistency: !no_consistency,
                ..Default::default()
            };
            let l = pipeline::eval_attribute(
                &load_tensor(pred_a)?,
                &load_tensor(pred_b)?,
                &load_tensor(gt_a)?,
                &load_tensor(gt_b)?,
                &cfg,
            )?;
            print_json(&l)
        }
        Loss::Rot6d { quats, out } => {
            let t = pipeline::eval_rot6d(&load_tensor(quats)?)?;
            save_tensor(out, &t)?;
            println!("wrote {}", out.display());
            Ok(())
        }
        Loss::ScaleNorm { scene, out } => {
            let (r, t) = pipeline::eval_scale_norm(&load_scene_ply(scene)?)?;
            if let Some(out) = out {
                save_tensor(out, &t)?;
            }
            print_json(&r)
        }
        Loss::DepthReg {
            rendered,
            prior,
            alignment,
        } => {
            let a = match alignment {
                Alignment::LeastSquares => PriorAlignment::LeastSquares,
                Alignment::MedianRatio => PriorAlignment::MedianRatio,
            };
            let r = pipeline::eval_depth_reg(&load_depth_pfm(rendered)?, &load_depth_pfm(prior)?, a)?;
            print_json(&r)
        }
    }
}

fn run(cli: &Cli) -> Result<bool> {
    let cfg = config(cli)?;
    match &cli.command {
        Command::Render { bundle, modes } => {
            let modes = if modes.is_empty() {
                DepthMode::ALL.to_vec()
            } else {
                modes.clone()
            };
            let o = pipeline::run_render(&bundle.scene, &bundle.cameras, &bundle.out, &cfg, &modes)?;
            report("render", o, &bundle.out);
        }
        Command::SynthViews { bundle } => {
            let o = pipeline::run_synth_views(&bundle.scene, &bundle.cameras, &bundle.out, &cfg)?;
            report("synth-views", o, &bundle.out);
        }
        Command::Label { bundle } => {
            let o = pipeline::run_label(&bundle.scene, &bundle.cameras, &bundle.out, &cfg)?;
            report("label", o, &bundle.out);
        }
        Command::EvalGt {
            scene,
            cameras,
            out,
            synthetic,
        } => {
            if *synthetic {
                let (o, r) = pipeline::run_eval_gt_synthetic(out, &cfg)?;
                report("eval-gt", o, out);
                for s in &r.sources {
                    println!(
                        "  {:<9} pairs {:>4}  epi {:.3e} px  rel {:.3e}{}",
                        s.source.to_string(),
                        s.pairs.len(),
                        s.epi_px.mean,
                        s.rel.mean,
                        s.rel_gt.as_ref().map(|g| format!("  rel_gt {:.3e}", g.mean)).unwrap_or_default()
                    );
                }
            } else {
                let (Some(scene), Some(cameras)) = (scene, cameras) else {
                    bail!("--scene and --cameras are required without --synthetic");
                };
                let o = pipeline::run_eval_gt(scene, cameras, out, &cfg)?;
                report("eval-gt", o, out);
            }
        }
        Command::LossEval { loss } => run_loss(loss)?,
        Command::Selfcheck => {
            let r = run_selfcheck(cfg.seed);
            for c in &r.checks {
                println!("{} {:<28} {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            return Ok(r.all_passed());
        }
        Command::MakeScene {
            kind,
            out,
            count,
            views,
            tilt,
        } => {
            let kind = match kind {
                Kind::Plane => SceneKind::Plane,
                Kind::TwoPlanes => SceneKind::TwoPlanes,
                Kind::SphereShell => SceneKind::SphereShell,
                Kind::RandomCloud => SceneKind::RandomCloud,
            };
            let params = SyntheticParams {
                count: *count,
                tilt: *tilt,
                extent: 4.0,
                radius: 1.2,
                ..Default::default()
            };
            std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
            let (ply, cams) = pipeline::write_synthetic_bundle(kind, &params, cfg.seed, *views, out)?;
            println!("wrote {} and {}", ply.display(), cams.display());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(j) = cli.jobs {
        if j == 0 {
            eprintln!("error: --jobs must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(j).build_global() {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    }
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
