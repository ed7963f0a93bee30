//! Flag surface of the `densify` binary. Defaults follow the reference
//! pipeline configuration: 512 queries of 32 points in radius 1.2 m, beam and
//! azimuth strides of 8, 1 cm scan noise.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "densify",
    version,
    about = "Sparse-to-dense point cloud reconstruction pipeline",
    after_help = "Machine-readable results are JSON lines on stdout; human logs go to stderr.\n\
                  Set RUST_LOG (error, warn, info, debug, trace) to control verbosity."
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset of ground plus boxes and spheres
    Synth(SynthArgs),
    /// Reduce a dense frame to a sparse low-resolution scan
    Downsample(DownsampleArgs),
    /// Pick query points and extract normalized ground-truth groups
    Sample(SampleArgs),
    /// Train the reconstruction model on sampled scenes
    Train(TrainArgs),
    /// Densify one scene with a trained checkpoint
    Reconstruct(ReconstructArgs),
    /// Score a reconstruction against ground truth
    Eval(EvalArgs),
    /// Compare analytic gradients against central finite differences
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SampleMethod {
    /// Farthest point sampling
    Fps,
    /// Random point sampling
    Rps,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Dataset directory to create, KITTI-style layout
    #[arg(long)]
    pub out: PathBuf,
    /// Number of scenes
    #[arg(long, default_value_t = 1)]
    pub scenes: usize,
    /// Base seed; scene i uses seed + i
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Objects per scene
    #[arg(long, default_value_t = 6)]
    pub objects: usize,
    /// Camera image width in pixels
    #[arg(long, default_value_t = 128)]
    pub image_w: usize,
    /// Camera image height in pixels
    #[arg(long, default_value_t = 64)]
    pub image_h: usize,
    /// Camera focal length in pixels
    #[arg(long, default_value_t = 60.0)]
    pub focal: f64,
}

#[derive(Debug, Args)]
pub struct DownsampleArgs {
    /// Input cloud, .bin or .ply
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Output cloud, .bin or .ply
    #[arg(long)]
    pub out: PathBuf,
    /// Calibration file; providing it enables the camera frustum crop
    #[arg(long, requires = "img_w", requires = "img_h")]
    pub calib: Option<PathBuf>,
    /// Image width in pixels for the frustum crop
    #[arg(long, requires = "calib")]
    pub img_w: Option<usize>,
    /// Image height in pixels for the frustum crop
    #[arg(long, requires = "calib")]
    pub img_h: Option<usize>,
    /// Keep every beam-stride-th beam row
    #[arg(long, default_value_t = 8)]
    pub beam_stride: usize,
    /// Keep every azim-stride-th azimuth column
    #[arg(long, default_value_t = 8)]
    pub azim_stride: usize,
    /// Half-width of the uniform per-axis jitter, meters
    #[arg(long, default_value_t = 0.01)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    /// Sparse cloud the queries are drawn from
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Dense cloud the ground-truth groups are extracted from
    #[arg(long)]
    pub dense: PathBuf,
    /// Output group container
    #[arg(long)]
    pub out: PathBuf,
    /// Number of query points
    #[arg(long, default_value_t = 512)]
    pub n: usize,
    /// Points per ground-truth group
    #[arg(long, default_value_t = 32)]
    pub k: usize,
    /// Neighborhood radius in meters; group coordinates are scaled by its inverse
    #[arg(long, default_value_t = 1.2)]
    pub radius: f64,
    /// Query selection strategy
    #[arg(long, value_enum, default_value_t = SampleMethod::Fps)]
    pub method: SampleMethod,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training data directory: image_2/<id>.pgm plus groups/<id>.groups
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint path to write
    #[arg(long)]
    pub out: PathBuf,
    /// JSON config with optional "model" and "train" sections
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override the configured step count
    #[arg(long)]
    pub steps: Option<u64>,
    /// Override the configured seed
    #[arg(long)]
    pub seed: Option<u64>,
    /// Loss curve CSV path; defaults to the checkpoint path with a .loss.csv extension
    #[arg(long)]
    pub loss_csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReconstructArgs {
    /// Trained checkpoint
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Scene directory holding velodyne/<id>.bin and image_2/<id>.pgm
    #[arg(long)]
    pub scene: PathBuf,
    /// Output PLY cloud
    #[arg(long)]
    pub out: PathBuf,
    /// Scene id; defaults to the only scene present
    #[arg(long)]
    pub id: Option<String>,
    /// Number of query points to densify around
    #[arg(long, default_value_t = 512)]
    pub n: usize,
    /// Query selection strategy
    #[arg(long, value_enum, default_value_t = SampleMethod::Fps)]
    pub method: SampleMethod,
    /// Denormalization radius; must match the radius the training groups used
    #[arg(long, default_value_t = 1.2)]
    pub radius: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Predicted cloud, .ply or .bin
    #[arg(long)]
    pub pred: PathBuf,
    /// Ground-truth cloud, .ply or .bin
    #[arg(long)]
    pub gt: PathBuf,
    /// Detection results in KITTI label format with scores
    #[arg(long, requires = "labels")]
    pub dets: Option<PathBuf>,
    /// Ground-truth boxes in KITTI label format
    #[arg(long, requires = "dets")]
    pub labels: Option<PathBuf>,
    /// IoU threshold for a detection to count as a hit
    #[arg(long, default_value_t = 0.7)]
    pub iou: f64,
    /// Also write a run manifest here
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// JSON config whose "model" section overrides the reduced default architecture
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Query points in the probe batch
    #[arg(long, default_value_t = 3)]
    pub queries: usize,
    /// Central-difference step. Small enough that the probe stays on one
    /// side of nearby ReLU and nearest-neighbor kinks; rounding noise is
    /// still orders below the error threshold at f64.
    #[arg(long, default_value_t = 1e-6)]
    pub epsilon: f64,
    /// Maximum acceptable relative error
    #[arg(long, default_value_t = 1e-3)]
    pub threshold: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write a run manifest here
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}
