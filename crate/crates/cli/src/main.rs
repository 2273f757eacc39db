use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use coral_core::backbone::DEFAULT_TOY_SEED;
use coral_core::desk::PooledIdentityEmbedder;
use coral_core::inference::{edit_metrics, write_mask_png, write_png};
use coral_core::trainer::{train, RunOutputs};
use coral_core::{
    apply_edit, Components, CoralError, EditArtifact, EditorKind, LatentZ, ModulatedBackbone, Synthesis,
    TrainConfig, Variant,
};
use coral_service::{load_backbone, ServiceConfig};

#[derive(Parser)]
#[command(name = "coral", version, about = "Train, apply and serve region- and layer-selective latent edits")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train an edit and write its artifact, loss curve and checkpoints.
    Train {
        #[arg(long)]
        prompt: String,
        #[arg(long)]
        variant: Variant,
        #[arg(long)]
        editor: EditorKind,
        /// TOML file with any TrainConfig fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Backbone checkpoint directory; the toy backbone when omitted.
        #[arg(long)]
        backbone: Option<PathBuf>,
    },
    /// Apply a trained edit to the image of one seed.
    Apply {
        #[arg(long)]
        artifact: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
        alpha: f64,
        /// Mask threshold; the artifact's default when omitted.
        #[arg(long)]
        tau: Option<f64>,
        /// Comma-separated 1-based layers to switch off.
        #[arg(long, value_delimiter = ',')]
        toggle_layers: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        backbone: Option<PathBuf>,
    },
    /// Serve the HTTP API (CORAL_PORT, CORAL_ARTIFACT_DIR, CORAL_BACKBONE_DIR).
    Serve {
        #[arg(long)]
        port: Option<u16>,
        #[arg(long)]
        artifacts: Option<PathBuf>,
        #[arg(long)]
        backbone: Option<PathBuf>,
    },
    /// Write a toy backbone checkpoint.
    InitBackbone {
        #[arg(long, default_value_t = DEFAULT_TOY_SEED)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let result = match Cli::parse().command {
        Command::Train {
            prompt,
            variant,
            editor,
            config,
            out,
            backbone,
        } => run_train(prompt, variant, editor, config.as_deref(), &out, backbone.as_deref()),
        Command::Apply {
            artifact,
            seed,
            alpha,
            tau,
            toggle_layers,
            out,
            backbone,
        } => run_apply(&artifact, seed, alpha, tau, &toggle_layers, &out, backbone.as_deref()),
        Command::Serve {
            port,
            artifacts,
            backbone,
        } => run_serve(port, artifacts, backbone),
        Command::InitBackbone { seed, out } => ModulatedBackbone::toy(seed).save(&out).map_err(|e| e.to_string()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

/// Reads the config file (if any) and lets the command-line prompt, variant
/// and editor take precedence. An edit cutoff beyond the backbone depth is
/// clamped only when the file does not set one.
fn load_config(
    prompt: String,
    variant: Variant,
    editor: EditorKind,
    file: Option<&Path>,
    layers: usize,
) -> Result<TrainConfig, String> {
    let mut table = match file {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
            text.parse::<toml::Table>().map_err(|e| format!("{}: {e}", p.display()))?
        }
        None => toml::Table::new(),
    };
    let cutoff_given = table.contains_key("edit_cutoff");
    table.insert("prompt".into(), prompt.into());
    table.insert("variant".into(), variant.to_string().into());
    table.insert("editor".into(), editor.to_string().into());
    let text = toml::to_string(&table).map_err(|e| e.to_string())?;
    let mut config = TrainConfig::from_toml(&text).map_err(|e| e.to_string())?;
    if !cutoff_given && config.edit_cutoff > layers {
        config.edit_cutoff = layers;
    }
    Ok(config)
}

fn run_train(
    prompt: String,
    variant: Variant,
    editor: EditorKind,
    config: Option<&Path>,
    out: &Path,
    backbone: Option<&Path>,
) -> Result<(), String> {
    let bb = load_backbone(backbone).map_err(|e| e.to_string())?;
    let config = load_config(prompt, variant, editor, config, bb.config().layer_count)?;
    config.validate(bb.config()).map_err(|e| e.to_string())?;
    fs::create_dir_all(out).map_err(|e| format!("{}: {e}", out.display()))?;
    let scorer = config.scorer.build();
    let segmenter = config.segmenter.build();
    let embedder = PooledIdentityEmbedder::default();
    let components = Components {
        backbone: &bb,
        scorer: scorer.as_ref(),
        embedder: &embedder,
        segmenter: segmenter.as_ref(),
    };
    let outputs = RunOutputs {
        loss_csv: Some(out.join("loss.csv")),
        checkpoint_dir: (config.checkpoint_every > 0).then(|| out.join("checkpoints")),
    };
    let outcome = train(&components, &config, &outputs).map_err(|e| e.to_string())?;
    outcome.artifact.save(out).map_err(|e| e.to_string())?;
    log::info!(
        "wrote artifact to {} after {} iterations{}",
        out.display(),
        outcome.state.iteration,
        if outcome.stopped_early { " (plateau)" } else { "" }
    );
    Ok(())
}

fn run_apply(
    artifact: &Path,
    seed: u64,
    alpha: f64,
    tau: Option<f64>,
    off: &[usize],
    out: &Path,
    backbone: Option<&Path>,
) -> Result<(), String> {
    let bb = load_backbone(backbone).map_err(|e| e.to_string())?;
    let art = EditArtifact::load(artifact).map_err(|e| e.to_string())?;
    let layers = bb.config().layer_count;
    if let Some(&bad) = off.iter().find(|&&l| l == 0 || l > layers) {
        return Err(format!("layer {bad} outside 1..={layers}"));
    }
    let toggles: Vec<bool> = (1..=layers).map(|l| !off.contains(&l)).collect();
    let z = LatentZ::from_seed(seed, bb.config().latent_dim);
    let tau = tau.unwrap_or(art.info.default_tau);
    let result = apply_edit(&bb, &z, &art, alpha, tau, Some(&toggles)).map_err(|e| e.to_string())?;
    let metrics = edit_metrics(&result, &PooledIdentityEmbedder::default()).map_err(|e| e.to_string())?;

    fs::create_dir_all(out).map_err(|e| format!("{}: {e}", out.display()))?;
    let io = |e: CoralError| e.to_string();
    write_png(&out.join("original.png"), &result.original).map_err(io)?;
    write_png(&out.join("edited.png"), &result.edited).map_err(io)?;
    let cutoff = art.info.edit_cutoff;
    for (index, mask) in result.masks.layers()[..cutoff].iter().enumerate() {
        write_mask_png(&out.join(format!("mask_layer_{}.png", index + 1)), mask).map_err(io)?;
    }

    let path = out.join("metrics.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut header = vec!["l2".to_string(), "id_similarity".into(), "mean_abs_change".into()];
    header.extend((1..=cutoff).map(|l| format!("area_layer_{l}")));
    let mut row = vec![
        metrics.l2.to_string(),
        metrics.id_similarity.to_string(),
        metrics.mean_abs_change.to_string(),
    ];
    row.extend(metrics.area_fractions[..cutoff].iter().map(f64::to_string));
    w.write_record(&header)
        .and_then(|_| w.write_record(&row))
        .and_then(|_| w.flush().map_err(Into::into))
        .map_err(|e| format!("{}: {e}", path.display()))?;
    Ok(())
}

fn run_serve(port: Option<u16>, artifacts: Option<PathBuf>, backbone: Option<PathBuf>) -> Result<(), String> {
    let mut config = ServiceConfig::from_env()?;
    if let Some(p) = port {
        config.port = p;
    }
    if let Some(a) = artifacts {
        config.artifact_dir = a;
    }
    if backbone.is_some() {
        config.backbone_dir = backbone;
    }
    let runtime = tokio::runtime::Runtime::new().map_err(|e| e.to_string())?;
    runtime.block_on(coral_service::serve(config)).map_err(|e| e.to_string())
}
