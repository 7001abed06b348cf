mod bench;

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;
use std::sync::mpsc;
use std::sync::Arc;
use std::time::Instant;

use clap::{Parser, Subcommand};

use volseg_core::backend::ReferenceBackend;
use volseg_core::cache::EmbeddingCache;
use volseg_core::session::{Box3D, Session, SessionError};
use volseg_core::volume::{load_volume, save_label_volume, Axis};
use volseg_server::{Server, ServerConfig};

#[derive(Parser)]
#[command(name = "volseg", version, about = "Promptable volumetric segmentation server and tools")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the segmentation server until interrupted.
    Serve {
        /// TOML configuration file; defaults apply when omitted.
        config: Option<PathBuf>,
    },
    /// Segment every slice of a 3D box with the reference backend and write
    /// the labels as uint16 NIfTI.
    Segment {
        input: PathBuf,
        /// Inclusive voxel bounds i0,j0,k0,i1,j1,k1 (clamped to the volume).
        #[arg(long, allow_hyphen_values = true)]
        bbox: BoxArg,
        /// Axis the box is segmented along: 0 sagittal, 1 coronal, 2 axial.
        #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u8).range(0..=2))]
        axis: u8,
        #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u16).range(1..))]
        label: u16,
        #[arg(long)]
        output: PathBuf,
    },
    /// Measure embedding time and prompt cycle latency.
    Bench {
        input: PathBuf,
        #[arg(long, default_value = "reference")]
        model: String,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        /// Address of a running server; an in-process one is started otherwise.
        #[arg(long)]
        server: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print a volume's geometry and intensity range.
    Inspect { input: PathBuf },
}

#[derive(Clone, Copy, Debug)]
struct BoxArg {
    lo: [i64; 3],
    hi: [i64; 3],
}

impl FromStr for BoxArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let v: Vec<i64> = s
            .split(',')
            .map(|p| p.trim().parse::<i64>().map_err(|e| format!("{p:?}: {e}")))
            .collect::<Result<_, _>>()?;
        match v[..] {
            [i0, j0, k0, i1, j1, k1] => Ok(BoxArg { lo: [i0, j0, k0], hi: [i1, j1, k1] }),
            _ => Err(format!("expected 6 comma-separated integers, got {}", v.len())),
        }
    }
}

/// Failure with the exit code it maps to.
pub struct Failure {
    code: u8,
    msg: String,
}

impl Failure {
    pub fn config(msg: impl fmt::Display) -> Self {
        Failure { code: 2, msg: msg.to_string() }
    }

    pub fn empty(msg: impl fmt::Display) -> Self {
        Failure { code: 3, msg: msg.to_string() }
    }

    pub fn io(msg: impl fmt::Display) -> Self {
        Failure { code: 4, msg: msg.to_string() }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info")),
        )
        .with_writer(std::io::stderr)
        .init();
    let result = match cli.command {
        Command::Serve { config } => serve(config.as_deref()),
        Command::Segment { input, bbox, axis, label, output } => segment(&input, bbox, axis, label, &output),
        Command::Bench { input, model, trials, server, seed } => {
            bench::run(&input, &model, trials, server.as_deref(), seed)
        }
        Command::Inspect { input } => inspect(&input),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("volseg: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}

fn serve(config: Option<&Path>) -> Result<(), Failure> {
    let config = match config {
        Some(p) => ServerConfig::load(p).map_err(Failure::config)?,
        None => ServerConfig::default(),
    };
    let (tx, rx) = mpsc::channel();
    ctrlc::set_handler(move || {
        let _ = tx.send(());
    })
    .map_err(Failure::io)?;
    let server = Server::start(config).map_err(|e| match e {
        volseg_server::ServerError::Config(c) => Failure::config(c),
        other => Failure::io(other),
    })?;
    println!("listening on {}", server.local_addr());
    if let Some(gw) = server.gateway_addr() {
        println!("gateway on http://{gw}");
    }
    let _ = rx.recv();
    eprintln!("shutting down");
    server.shutdown();
    Ok(())
}

fn segment(input: &Path, bbox: BoxArg, axis: u8, label: u16, output: &Path) -> Result<(), Failure> {
    let start = Instant::now();
    let volume = Arc::new(load_volume(input).map_err(|e| Failure::io(format!("{}: {e}", input.display())))?);
    let axis = Axis::from_index(axis as usize).expect("axis range checked by the parser");
    let b = Box3D::clamped(bbox.lo, bbox.hi, axis, volume.dims()).map_err(|e| match e {
        SessionError::EmptyBox => Failure::empty(format!("{e} (dims {:?})", volume.dims())),
        other => Failure::io(other),
    })?;
    let cache = Arc::new(EmbeddingCache::new(1 << 30));
    let mut session = Session::new(volume.clone(), Arc::new(ReferenceBackend::new()), cache);
    session.set_active_label(label).map_err(Failure::config)?;
    let slices = session.apply_bbox3d(b).map_err(Failure::io)?;
    save_label_volume(session.labels(), &volume, output)
        .map_err(|e| Failure::io(format!("{}: {e}", output.display())))?;
    println!(
        "{slices} slices, {} voxels labelled {label}, {:.3} s",
        session.labels().count(label),
        start.elapsed().as_secs_f64()
    );
    Ok(())
}

fn inspect(input: &Path) -> Result<(), Failure> {
    let v = load_volume(input).map_err(|e| Failure::io(format!("{}: {e}", input.display())))?;
    let [nx, ny, nz] = v.dims();
    let [sx, sy, sz] = v.spacing();
    let (lo, hi) = v.intensity_range();
    let wl = v.default_window_level();
    println!("dims       {nx} x {ny} x {nz}");
    println!("spacing    {sx} x {sy} x {sz} mm");
    for (i, row) in v.affine().iter().take(3).enumerate() {
        let prefix = if i == 0 { "affine" } else { "" };
        println!("{prefix:<10} [{:>10.4} {:>10.4} {:>10.4} {:>10.4}]", row[0], row[1], row[2], row[3]);
    }
    println!("intensity  {lo} .. {hi}");
    println!("window     {} level {}", wl.window(), wl.level());
    Ok(())
}
