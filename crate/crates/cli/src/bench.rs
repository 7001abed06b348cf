use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use volseg_core::backend::{BBox2D, Point, PromptSet};
use volseg_core::protocol::rle_decode;
use volseg_core::volume::{slice_shape, Axis, SliceRef};
use volseg_server::{Client, ClientError, Server, ServerConfig};

use crate::Failure;

const CYCLE_TARGET_S: f64 = 0.06;

struct Report {
    model_id: String,
    dims: [usize; 3],
    slices: usize,
    embedding_total_s: f64,
    inference_s: Vec<f64>,
    cycle_s: Vec<f64>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn p99(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s[((s.len() as f64 * 0.99).ceil() as usize).clamp(1, s.len()) - 1]
}

fn remote(e: ClientError) -> Failure {
    Failure::io(format!("server: {e}"))
}

/// A point inside the slice, sometimes with a box around it and a negative
/// point.
fn random_prompts(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> PromptSet {
    let p = Point::new(rng.random_range(0..rows as u32), rng.random_range(0..cols as u32));
    let mut prompts = PromptSet::points(vec![p], vec![]);
    if rng.random_bool(0.5) {
        let (h, w) = (rng.random_range(0..=rows as u32 / 4), rng.random_range(0..=cols as u32 / 4));
        prompts.bbox = Some(BBox2D::new(
            p.row.saturating_sub(h),
            p.col.saturating_sub(w),
            (p.row + h).min(rows as u32 - 1),
            (p.col + w).min(cols as u32 - 1),
        ));
    }
    if rng.random_bool(0.3) {
        prompts.negative.push(Point::new(rng.random_range(0..rows as u32), rng.random_range(0..cols as u32)));
    }
    prompts
}

pub fn run(input: &Path, model: &str, trials: usize, server: Option<&str>, seed: u64) -> Result<(), Failure> {
    let path = std::fs::canonicalize(input).unwrap_or_else(|_| input.to_owned());
    let local;
    let addr = match server {
        Some(a) => a.to_owned(),
        None => {
            let config = ServerConfig { gateway_port: 0, ..ServerConfig::default() };
            local = Server::start_ephemeral(config).map_err(Failure::io)?;
            local.local_addr().to_string()
        }
    };
    let mut c = Client::connect(addr.as_str()).map_err(|e| Failure::io(format!("{addr}: {e}")))?;
    if !c.list_models().map_err(remote)?.iter().any(|m| m.model_id == model) {
        return Err(Failure::io(format!("unknown model {model:?}")));
    }

    let start = Instant::now();
    let meta = c.load_volume(&path.to_string_lossy()).map_err(remote)?;
    let dims = meta.dims.map(|d| d as usize);
    let start = if model == "reference" {
        start
    } else {
        // the load planned the default model; time the selected one from here
        let t = Instant::now();
        c.select_model(model).map_err(remote)?;
        t
    };
    if !c.wait_precomputed(Duration::from_secs(24 * 3600)).map_err(remote)? {
        return Err(Failure::io("precompute did not finish"));
    }
    let embedding_total_s = start.elapsed().as_secs_f64();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut inference_s, mut cycle_s) = (Vec::with_capacity(trials), Vec::with_capacity(trials));
    for _ in 0..trials {
        let axis = Axis::ALL[rng.random_range(0..3)];
        let slice = SliceRef::new(axis, rng.random_range(0..dims[axis.index()]));
        let (rows, cols) = slice_shape(dims, axis);
        let prompts = random_prompts(&mut rng, rows, cols);
        let t = Instant::now();
        let m = c.set_prompts(slice, prompts).map_err(remote)?;
        rle_decode(&m.mask).map_err(Failure::io)?;
        let cycle = t.elapsed().as_secs_f64();
        cycle_s.push(cycle);
        inference_s.push(m.inference_us as f64 / 1e6);
    }
    let report =
        Report { model_id: model.to_owned(), dims, slices: dims.iter().sum(), embedding_total_s, inference_s, cycle_s };
    print_report(&report);
    Ok(())
}

fn print_report(r: &Report) {
    let [nx, ny, nz] = r.dims;
    let cpus = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    println!("model              {}", r.model_id);
    println!("volume             {nx} x {ny} x {nz} ({} slices)", r.slices);
    println!("host               {} {} ({cpus} cpus)", std::env::consts::OS, std::env::consts::ARCH);
    println!("embedding time     {:.3} s", r.embedding_total_s);
    println!("trials             {}", r.cycle_s.len());
    let timed = !r.cycle_s.is_empty();
    if timed {
        println!();
        println!("{:<18} {:>10} {:>10}", "", "mean (s)", "p99 (s)");
        println!("{:<18} {:>10.5} {:>10.5}", "inference", mean(&r.inference_s), p99(&r.inference_s));
        println!("{:<18} {:>10.5} {:>10.5}", "mask cycle", mean(&r.cycle_s), p99(&r.cycle_s));
        let pass = mean(&r.cycle_s) <= CYCLE_TARGET_S;
        println!("cycle target       {CYCLE_TARGET_S} s {}", if pass { "PASS" } else { "FAIL" });
    }
    println!();
    println!("model_id={}", r.model_id);
    println!("dims={nx}x{ny}x{nz}");
    println!("slices={}", r.slices);
    println!("host_os={}", std::env::consts::OS);
    println!("host_cpus={cpus}");
    println!("embedding_total_s={:.6}", r.embedding_total_s);
    println!("trials={}", r.cycle_s.len());
    if timed {
        println!("avg_inference_s={:.6}", mean(&r.inference_s));
        println!("p99_inference_s={:.6}", p99(&r.inference_s));
        println!("avg_mask_cycle_s={:.6}", mean(&r.cycle_s));
        println!("p99_mask_cycle_s={:.6}", p99(&r.cycle_s));
        println!("cycle_target_pass={}", mean(&r.cycle_s) <= CYCLE_TARGET_S);
    }
}
