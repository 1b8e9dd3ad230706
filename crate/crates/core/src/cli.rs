//! Command-line interface: data generation, two-stage training, evaluation,
//! latent analysis, and field export.
//!
//! Exit codes: 0 success, 1 usage/configuration error, 2 runtime failure.
//! Output files are written via temp-file + rename; no partial outputs.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::RunConfig;
use crate::dataio::{
    gen_advecting_gaussian, gen_isentropic_vortex, gen_uniform_flow, read_fieldpack,
    write_fieldpack, FieldPack,
};
use crate::error::{Error, Result};
use crate::finetune::{self, FinetuneParams};
use crate::physics::{
    self, mse_metric, r_metric, render_report, residuals_euler, EulerFieldState, FdConfig,
    MseRReport, ResidualField,
};
use crate::rng::Rng;
use crate::train::{render_log, Trainer};

fn config_help() -> String {
    RunConfig::describe_keys()
}

#[derive(Parser)]
#[command(
    name = "fieldgen",
    version,
    about = "Spatiotemporal field generation on point clouds with physics-based fine-tuning",
    after_help = config_help()
)]
struct Cli {
    /// Worker threads for per-sample stages (1 = fully deterministic order).
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic sample directory from a closed-form flow.
    GenData(GenDataArgs),
    /// Stage-1 training on one or more sample directories.
    Train(TrainArgs),
    /// Stage-2 self-supervised physics fine-tuning on one sample.
    Finetune(FinetuneArgs),
    /// Evaluate a checkpoint: data error (when ground truth is present) and
    /// equation residuals.
    Eval(EvalArgs),
    /// Latent-space analysis: PCA, clustering, silhouette, segment ablation.
    Analyze(AnalyzeArgs),
    /// Export one channel at one step as CSV or a PPM heatmap.
    Export(ExportArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Case {
    Uniform,
    Gaussian,
    Vortex,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, value_enum)]
    case: Case,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 200)]
    n_bd: usize,
    #[arg(long, default_value_t = 100)]
    n_q: usize,
    #[arg(long, default_value_t = 5)]
    t_steps: usize,
    #[arg(long, default_value_t = 0.05)]
    dt: f64,
    /// Advection velocity, x component (gaussian case).
    #[arg(long, default_value_t = 0.3)]
    u0x: f64,
    /// Advection velocity, y component (gaussian case).
    #[arg(long, default_value_t = 0.1)]
    u0y: f64,
    /// Bump width (gaussian case).
    #[arg(long, default_value_t = 0.2)]
    sigma: f64,
    /// Vortex strength (vortex case).
    #[arg(long, default_value_t = 0.5)]
    strength: f64,
    /// Ratio of specific heats (vortex case).
    #[arg(long, default_value_t = 1.4)]
    gamma: f64,
}

#[derive(Args)]
struct TrainArgs {
    /// Sample directories (repeat or comma-separate).
    #[arg(long, required = true, value_delimiter = ',')]
    data: Vec<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint output path.
    #[arg(long)]
    out: PathBuf,
    /// Training log CSV (default: checkpoint path with .log.csv).
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct FinetuneArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Fine-tune parameter output path.
    #[arg(long)]
    out: PathBuf,
    /// History CSV (default: output path with .history.csv).
    #[arg(long)]
    history: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Fine-tuned parameters to apply on top of the checkpoint.
    #[arg(long)]
    ft: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Ignore stored ground truth: residual-only report.
    #[arg(long)]
    no_gt: bool,
    /// Write the report here as well as to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Sample directories (at least 2).
    #[arg(long, required = true, value_delimiter = ',')]
    data: Vec<PathBuf>,
    /// Directory for the CSV outputs.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    ft: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// Channel name, e.g. rho.
    #[arg(long)]
    channel: String,
    /// Time step, 1-based (decoded steps are 1..=T).
    #[arg(long)]
    step: usize,
    /// Output file; format chosen by extension (.csv or .ppm).
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
}

/// Entry point used by `main` and by tests.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Validation(_) => 1,
                _ => 2,
            }
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let threads = cli.threads.max(1);
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Finetune(a) => finetune_cmd(a),
        Command::Eval(a) => eval(a),
        Command::Analyze(a) => analyze(a, threads),
        Command::Export(a) => export(a),
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let tmp = path.with_extension("tmp-partial");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    if a.n_bd < 1 || a.n_q < 1 || a.t_steps < 1 {
        return Err(Error::Config("counts must be >= 1".into()));
    }
    if !(a.dt > 0.0) {
        return Err(Error::Config("dt must be > 0".into()));
    }
    let pack = match a.case {
        Case::Uniform => gen_uniform_flow(a.n_bd, a.n_q, a.t_steps, a.dt, a.seed),
        Case::Gaussian => {
            if !(a.sigma > 0.0) {
                return Err(Error::Config("sigma must be > 0".into()));
            }
            gen_advecting_gaussian(a.n_bd, a.n_q, a.t_steps, a.dt, [a.u0x, a.u0y], a.sigma, a.seed)
        }
        Case::Vortex => {
            if !(a.strength > 0.0) {
                return Err(Error::Config("strength must be > 0".into()));
            }
            if !(a.gamma > 1.0) {
                return Err(Error::Config("gamma must exceed 1".into()));
            }
            gen_isentropic_vortex(a.n_bd, a.n_q, a.t_steps, a.dt, a.strength, a.gamma, a.seed)
        }
    };
    write_fieldpack(&pack, &a.out)?;
    println!(
        "wrote {} (n_bd={}, n_q={}, t={}, dt={})",
        a.out.display(),
        pack.n_bd,
        pack.n_q,
        pack.t,
        pack.dt
    );
    Ok(())
}

fn load_packs(paths: &[PathBuf]) -> Result<Vec<FieldPack>> {
    let packs: Vec<FieldPack> = paths
        .iter()
        .map(|p| read_fieldpack(p))
        .collect::<Result<_>>()?;
    for p in &packs[1..] {
        if p.d != packs[0].d || p.n_phi != packs[0].n_phi {
            return Err(Error::Config(
                "all samples must share spatial dimension and channel count".into(),
            ));
        }
    }
    Ok(packs)
}

fn train(a: TrainArgs) -> Result<()> {
    let cfg = load_config(&a.config)?;
    let packs = load_packs(&a.data)?;
    let tcfg = cfg.train_config(packs[0].d, packs[0].n_phi);
    let (trainer, log) = crate::train::train_loop(&packs, tcfg)?;
    trainer.save(&a.out, &cfg.render())?;
    let log_path = a
        .log
        .unwrap_or_else(|| a.out.with_extension("log.csv"));
    write_atomic(&log_path, render_log(&log).as_bytes())?;
    let last = log.last().map(|e| e.loss).unwrap_or(f64::NAN);
    println!(
        "trained {} steps, final loss {last}; checkpoint {}",
        log.len(),
        a.out.display()
    );
    Ok(())
}

fn finetune_cmd(a: FinetuneArgs) -> Result<()> {
    let cfg = load_config(&a.config)?;
    let (trainer, _) = Trainer::load(&a.ckpt)?;
    let pack = read_fieldpack(&a.data)?;
    let fcfg = cfg.finetune_config();
    let mut rng = Rng::new(fcfg.seed);
    let mut ft = FinetuneParams::init(&mut rng, &trainer.cfg.model);
    let history = finetune::finetune_loop(
        &trainer.params,
        &trainer.cfg.model,
        &mut ft,
        &pack,
        &fcfg,
        true,
    )?;
    finetune::save_finetune(&a.out, &ft, &trainer.cfg.model, &fcfg, &cfg.render())?;
    let hist_path = a
        .history
        .unwrap_or_else(|| a.out.with_extension("history.csv"));
    write_atomic(&hist_path, finetune::render_history(&history, pack.d).as_bytes())?;
    let first = history.first().unwrap();
    let last = history.last().unwrap();
    let r_of = |e: &finetune::HistoryEntry| {
        (e.r_continuity + e.r_momentum.iter().sum::<f64>()) / (1.0 + e.r_momentum.len() as f64)
    };
    println!(
        "fine-tuned {} steps: residual metric {} -> {}; parameters {}",
        fcfg.steps,
        r_of(first),
        r_of(last),
        a.out.display()
    );
    Ok(())
}

fn evaluate_checkpoint(
    ckpt: &Path,
    ft: &Option<PathBuf>,
    pack: &FieldPack,
    cfg: &RunConfig,
    no_gt: bool,
) -> Result<(MseRReport, Vec<f64>, ResidualField)> {
    let (trainer, _) = Trainer::load(ckpt)?;
    let fd = FdConfig::relative(cfg.fd_dx_rel, pack);
    let (pred, residuals) = match ft {
        Some(ft_path) => {
            let (ftp, mcfg, _) = finetune::load_finetune(ft_path)?;
            if mcfg != trainer.cfg.model {
                return Err(Error::Config(
                    "fine-tune parameters were built for a different model configuration".into(),
                ));
            }
            finetune::predict_finetuned(&trainer.params, &trainer.cfg.model, &ftp, pack, &fd)?
        }
        None => {
            let stencil = physics::model_stencil(&trainer.params, &trainer.cfg.model, pack, &fd)?;
            let state = EulerFieldState::from_channels(&pack.channel_names, pack.d)?;
            let residuals = residuals_euler(&stencil, &state, &fd)?;
            (stencil.center_block().to_vec(), residuals)
        }
    };
    let mse = if no_gt {
        None
    } else {
        Some(mse_metric(&pred, &pack.phi, pack.t, pack.n_q, pack.n_phi)?)
    };
    let report = MseRReport {
        mse,
        channel_names: pack.channel_names.clone(),
        r: r_metric(&residuals),
        n_q: pack.n_q,
        t: pack.t,
        dx: fd.dx.clone(),
        dt: pack.dt,
    };
    Ok((report, pred, residuals))
}

fn eval(a: EvalArgs) -> Result<()> {
    let cfg = load_config(&a.config)?;
    let pack = read_fieldpack(&a.data)?;
    let (report, _, _) = evaluate_checkpoint(&a.ckpt, &a.ft, &pack, &cfg, a.no_gt)?;
    let text = render_report(&report);
    print!("{text}");
    if let Some(out) = a.out {
        write_atomic(&out, text.as_bytes())?;
    }
    Ok(())
}

fn analyze(a: AnalyzeArgs, threads: usize) -> Result<()> {
    let (trainer, _) = Trainer::load(&a.ckpt)?;
    if a.data.len() < 2 {
        return Err(Error::Config("analysis needs at least 2 samples".into()));
    }
    let packs = load_packs(&a.data)?;
    let n_g = trainer.cfg.model.n_g;

    // per-sample initial latent vectors, optionally in parallel, order fixed
    let z0s: Vec<Vec<f64>> = if threads <= 1 || packs.len() == 1 {
        packs
            .iter()
            .map(|p| crate::analysis::latent_z0(&trainer.params, &trainer.cfg.model, p))
            .collect::<Result<_>>()?
    } else {
        let chunk = packs.len().div_ceil(threads);
        let mut out: Vec<Option<Result<Vec<f64>>>> = (0..packs.len()).map(|_| None).collect();
        std::thread::scope(|scope| {
            for (slot, work) in out.chunks_mut(chunk).zip(packs.chunks(chunk)) {
                let params = &trainer.params;
                let mcfg = &trainer.cfg.model;
                scope.spawn(move || {
                    for (o, p) in slot.iter_mut().zip(work) {
                        *o = Some(crate::analysis::latent_z0(params, mcfg, p));
                    }
                });
            }
        });
        out.into_iter()
            .map(|o| o.expect("worker filled every slot"))
            .collect::<Result<_>>()?
    };

    let flat: Vec<f64> = z0s.concat();
    let pca = crate::analysis::pca(&flat, packs.len(), n_g)?;
    let m = 3.min(n_g);
    let scores = crate::analysis::project(&flat, &pca, m);

    let k_hi = 10.min(packs.len());
    let (best, by_k) = crate::analysis::select_k(&scores, packs.len(), m, 2..k_hi + 1, 0, 10)?;

    std::fs::create_dir_all(&a.out_dir).map_err(|e| Error::io(&a.out_dir, e))?;
    let mut evr_csv = String::from("component,evr\n");
    for (i, v) in pca.evr.iter().enumerate() {
        evr_csv.push_str(&format!("{},{v}\n", i + 1));
    }
    write_atomic(&a.out_dir.join("evr.csv"), evr_csv.as_bytes())?;

    let mut cl_csv = String::from("sample,p1,p2,p3,cluster\n");
    for (i, path) in a.data.iter().enumerate() {
        let mut row = format!("{}", path.display());
        for c in 0..3 {
            if c < m {
                row.push_str(&format!(",{}", scores[i * m + c]));
            } else {
                row.push_str(",0");
            }
        }
        row.push_str(&format!(",{}\n", best.assignments[i]));
        cl_csv.push_str(&row);
    }
    write_atomic(&a.out_dir.join("clusters.csv"), cl_csv.as_bytes())?;

    let mut sil_csv = String::from("k,silhouette\n");
    for (k, s) in &by_k {
        sil_csv.push_str(&format!("{k},{s}\n"));
    }
    write_atomic(&a.out_dir.join("silhouette.csv"), sil_csv.as_bytes())?;

    // segment ablation on the first sample: 16-wide latent segments
    let probe = &packs[0];
    let width = 16.min(n_g);
    let mut seg_start = 0;
    let mut seg_index = 0;
    while seg_start < n_g {
        let seg = seg_start..(seg_start + width).min(n_g);
        let fields =
            crate::analysis::segment_ablation(&trainer.params, &trainer.cfg.model, probe, seg)?;
        let csv = fields_csv(probe, &fields);
        write_atomic(
            &a.out_dir.join(format!("ablation_seg{seg_index}.csv")),
            csv.as_bytes(),
        )?;
        seg_start += width;
        seg_index += 1;
    }
    let full = crate::model::predict(&trainer.params, &trainer.cfg.model, probe, None, probe.t)?;
    write_atomic(
        &a.out_dir.join("ablation_full.csv"),
        fields_csv(probe, &full).as_bytes(),
    )?;

    println!(
        "analyzed {} samples: best k = {} (silhouette {}), outputs in {}",
        packs.len(),
        best.k,
        best.silhouette.unwrap_or(f64::NAN),
        a.out_dir.display()
    );
    Ok(())
}

fn fields_csv(pack: &FieldPack, fields: &[f64]) -> String {
    let mut out = String::from("step,x,y");
    for name in &pack.channel_names {
        out.push_str(&format!(",{name}"));
    }
    out.push('\n');
    for s in 0..pack.t {
        for q in 0..pack.n_q {
            out.push_str(&format!(
                "{},{},{}",
                s + 1,
                pack.x_q[q * pack.d],
                pack.x_q[q * pack.d + 1]
            ));
            for c in 0..pack.n_phi {
                out.push_str(&format!(
                    ",{}",
                    fields[(s * pack.n_q + q) * pack.n_phi + c]
                ));
            }
            out.push('\n');
        }
    }
    out
}

fn export(a: ExportArgs) -> Result<()> {
    let cfg = load_config(&a.config)?;
    let pack = read_fieldpack(&a.data)?;
    let channel = pack
        .channel_index(&a.channel)
        .ok_or_else(|| Error::Config(format!("unknown channel {}", a.channel)))?;
    if a.step < 1 || a.step > pack.t {
        return Err(Error::Config(format!(
            "step must be in 1..={}, got {}",
            pack.t, a.step
        )));
    }
    let (_, pred, _) = evaluate_checkpoint(&a.ckpt, &a.ft, &pack, &cfg, true)?;
    let values: Vec<f64> = (0..pack.n_q)
        .map(|q| pred[((a.step - 1) * pack.n_q + q) * pack.n_phi + channel])
        .collect();

    match a.out.extension().and_then(|e| e.to_str()) {
        Some("csv") => {
            let mut csv = String::from("x,y,value\n");
            for q in 0..pack.n_q {
                csv.push_str(&format!(
                    "{},{},{}\n",
                    pack.x_q[q * pack.d],
                    pack.x_q[q * pack.d + 1],
                    values[q]
                ));
            }
            write_atomic(&a.out, csv.as_bytes())?;
        }
        Some("ppm") => {
            let image = rasterize_ppm(&pack, &values);
            write_atomic(&a.out, &image)?;
        }
        _ => {
            return Err(Error::Config(
                "output extension must be .csv or .ppm".into(),
            ))
        }
    }
    println!("exported {} step {} to {}", a.channel, a.step, a.out.display());
    Ok(())
}

/// Piecewise-linear ramp through the standard viridis anchor colors.
const VIRIDIS_ANCHORS: [[f64; 3]; 11] = [
    [0.267, 0.005, 0.329],
    [0.283, 0.141, 0.458],
    [0.254, 0.265, 0.530],
    [0.207, 0.372, 0.553],
    [0.164, 0.471, 0.558],
    [0.128, 0.567, 0.551],
    [0.135, 0.659, 0.518],
    [0.267, 0.749, 0.441],
    [0.478, 0.821, 0.318],
    [0.741, 0.873, 0.150],
    [0.993, 0.906, 0.144],
];

fn color_table() -> [[u8; 3]; 256] {
    let mut table = [[0u8; 3]; 256];
    for (i, entry) in table.iter_mut().enumerate() {
        let t = i as f64 / 255.0 * (VIRIDIS_ANCHORS.len() - 1) as f64;
        let lo = (t as usize).min(VIRIDIS_ANCHORS.len() - 2);
        let frac = t - lo as f64;
        for c in 0..3 {
            let v = VIRIDIS_ANCHORS[lo][c] * (1.0 - frac) + VIRIDIS_ANCHORS[lo + 1][c] * frac;
            entry[c] = (v * 255.0).round().clamp(0.0, 255.0) as u8;
        }
    }
    table
}

pub const PPM_SIZE: usize = 256;

/// Nearest-neighbor rasterization of scattered values onto a square raster
/// over the query bounding box, binary P6 output.
fn rasterize_ppm(pack: &FieldPack, values: &[f64]) -> Vec<u8> {
    let table = color_table();
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for q in pack.x_q.chunks(pack.d) {
        for a in 0..2 {
            lo[a] = lo[a].min(q[a]);
            hi[a] = hi[a].max(q[a]);
        }
    }
    for a in 0..2 {
        if hi[a] <= lo[a] {
            hi[a] = lo[a] + 1.0;
        }
    }
    let (vmin, vmax) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(mn, mx), &v| {
            (mn.min(v), mx.max(v))
        });
    let span = if vmax > vmin { vmax - vmin } else { 1.0 };

    let mut out = format!("P6\n{PPM_SIZE} {PPM_SIZE}\n255\n").into_bytes();
    for row in 0..PPM_SIZE {
        // image rows run top to bottom; flip so y grows upward
        let y = lo[1] + (hi[1] - lo[1]) * ((PPM_SIZE - 1 - row) as f64 + 0.5) / PPM_SIZE as f64;
        for col in 0..PPM_SIZE {
            let x = lo[0] + (hi[0] - lo[0]) * (col as f64 + 0.5) / PPM_SIZE as f64;
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (q, p) in pack.x_q.chunks(pack.d).enumerate() {
                let d = (p[0] - x) * (p[0] - x) + (p[1] - y) * (p[1] - y);
                if d < best_d {
                    best_d = d;
                    best = q;
                }
            }
            let t = ((values[best] - vmin) / span * 255.0).round().clamp(0.0, 255.0) as usize;
            out.extend_from_slice(&table[t]);
        }
    }
    out
}
