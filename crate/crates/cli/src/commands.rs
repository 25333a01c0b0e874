//! One function per subcommand. Every command reads the resolved config and
//! the artifacts of earlier steps from the output directory.
//!
//! ```text
//! out/config.toml
//! out/teacher/{manifest.toml, weights.bin, metrics.csv}
//! out/prune-<method>/{trace.toml, trace.csv, samples.csv, samples/<i>/}
//! out/profile/{profile.csv, points.csv, profile.toml, meta.toml}
//! out/students/{students.csv, <i>/student.toml, <i>/at/, <i>/scratch/}
//! out/report.csv
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use staircase::data::{load_cifar10, load_raw, synthetic, Split};
use staircase::discovery::{discover, estimate_latency, StudentSpec};
use staircase::distill::{distill, write_metrics_csv};
use staircase::nn::{evaluate, train_from_scratch, Checkpoint};
use staircase::profiler::{
    bench_network, profile_network, write_points_csv, write_profiles_csv, FakeTimer, MonotonicTimer, NetworkProfile, Timer,
};
use staircase::saliency::{prune_loop, sample_indices, PruneConfig, PruneMethod};
use staircase::{Error, Network, NetworkSpec};

use crate::config::{DataKind, PipelineConfig};
use crate::error::{CliError, Result};
use crate::lock::{self, Lock};

pub const TEACHER: &str = "teacher";
pub const PROFILE: &str = "profile";
pub const STUDENTS: &str = "students";
pub const REPORT: &str = "report.csv";

const EVAL_BATCH: usize = 256;

pub fn prune_dir(out: &Path, method: PruneMethod) -> PathBuf {
    out.join(format!("prune-{method}"))
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::Format(format!("{}: {e}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(io(path))?;
    Ok(())
}

fn write_csv<R: Serialize>(path: &Path, rows: &[R]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    for r in rows {
        w.serialize(r).map_err(csv_err(path))?;
    }
    w.flush().map_err(io(path))?;
    Ok(())
}

fn read_csv<R: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<R>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let rows = r.deserialize().collect::<std::result::Result<Vec<R>, _>>().map_err(csv_err(path))?;
    Ok(rows)
}

fn require(path: &Path, hint: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Pipeline(format!("{} not found; run `staircase {hint}` first", path.display())))
    }
}

fn clear_dir(path: &Path) -> Result<()> {
    match fs::remove_dir_all(path) {
        Err(e) if e.kind() != std::io::ErrorKind::NotFound => Err(Error::io(path, e).into()),
        _ => Ok(()),
    }
}

/// Writes the fully resolved configuration next to the artifacts.
pub fn write_config(cfg: &PipelineConfig) -> Result<()> {
    fs::create_dir_all(&cfg.out).map_err(io(&cfg.out))?;
    write_text(&cfg.out.join("config.toml"), &cfg.to_toml())
}

pub fn load_data(cfg: &PipelineConfig) -> Result<Split> {
    let d = &cfg.data;
    let path = || d.path.as_deref().expect("validated");
    let split = match d.kind {
        DataKind::Synthetic => {
            let mut s = d.synthetic.clone();
            s.train = d.train_limit.map_or(s.train, |n| n.min(s.train));
            s.test = d.test_limit.map_or(s.test, |n| n.min(s.test));
            synthetic(&s)?
        }
        DataKind::Cifar10 => load_cifar10(path(), d.train_limit, d.test_limit)?,
        DataKind::Raw => {
            let s = load_raw(path(), cfg.network.classes)?;
            Split {
                train: s.train.take(d.train_limit.unwrap_or(usize::MAX).min(s.train.len()))?,
                test: s.test.take(d.test_limit.unwrap_or(usize::MAX).min(s.test.len()))?,
            }
        }
    };
    if split.train.is_empty() || split.test.is_empty() {
        return Err(Error::Format("dataset has an empty train or test split".into()).into());
    }
    Ok(split)
}

/// Input shape without loading the data when the format fixes it.
fn input_shape(cfg: &PipelineConfig) -> Result<[usize; 3]> {
    Ok(match cfg.data.kind {
        DataKind::Synthetic => cfg.data.synthetic.shape,
        DataKind::Cifar10 => [3, 32, 32],
        DataKind::Raw => load_data(cfg)?.train.example_shape(),
    })
}

pub fn load_teacher(out: &Path) -> Result<Network<f32>> {
    let dir = out.join(TEACHER);
    require(&dir, "train")?;
    Ok(Checkpoint::load(&dir)?.restore()?)
}

fn check_input(net: &Network<f32>, data: &Split) -> Result<()> {
    if net.spec().input != data.train.example_shape() {
        return Err(Error::Shape(format!(
            "teacher expects {:?} inputs; the dataset has {:?}",
            net.spec().input,
            data.train.example_shape()
        ))
        .into());
    }
    Ok(())
}

pub fn cmd_train(cfg: &PipelineConfig) -> Result<()> {
    let _lock = Lock::acquire(&cfg.out, lock::TRAIN, &[lock::PROFILE])?;
    write_config(cfg)?;
    let data = load_data(cfg)?;
    let spec = cfg.teacher_spec(data.train.example_shape())?;
    eprintln!(
        "training teacher: {} params, {} MACs, {} epochs",
        spec.param_count(),
        spec.mac_count(),
        cfg.train.epochs
    );
    let (net, metrics) = train_from_scratch::<f32>(&spec, &data, &cfg.train)?;
    let dir = cfg.out.join(TEACHER);
    Checkpoint::capture(&net, Some(&cfg.train), &metrics).save(&dir)?;
    write_metrics_csv(&dir.join("metrics.csv"), &metrics)?;
    if let Some(m) = metrics.last() {
        eprintln!("teacher test error {:.4}", m.test_err);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRow {
    pub sample: usize,
    /// Index into the pruning trace.
    pub event: usize,
    pub params: usize,
    pub macs: u64,
    pub test_err: f64,
}

pub fn cmd_prune(cfg: &PipelineConfig, method: PruneMethod) -> Result<()> {
    let _lock = Lock::acquire(&cfg.out, lock::TRAIN, &[lock::PROFILE])?;
    write_config(cfg)?;
    let data = load_data(cfg)?;
    let mut net = load_teacher(&cfg.out)?;
    check_input(&net, &data)?;
    let config = PruneConfig {
        method,
        ..cfg.prune.clone()
    };
    eprintln!("pruning with {method}: widths {:?}", net.live_widths());
    let outcome = prune_loop(&mut net, &data.train, &config)?;
    let trace = &outcome.trace;
    if trace.events.is_empty() {
        return Err(CliError::Pipeline("every prunable layer is already at the floor".into()));
    }
    let dir = prune_dir(&cfg.out, method);
    clear_dir(&dir)?;
    fs::create_dir_all(&dir).map_err(io(&dir))?;
    trace.save(&dir.join("trace.toml"))?;
    trace.write_csv(&dir.join("trace.csv"))?;

    let picks = sample_indices(trace, cfg.samples.min(trace.events.len()))?;
    let mut rows = Vec::with_capacity(picks.len());
    for (i, &event) in picks.iter().enumerate() {
        let net = outcome.snapshots[event].restore::<f32>()?.compact()?;
        let (_, test_err) = evaluate(&net, &data.test, EVAL_BATCH)?;
        let sdir = dir.join("samples").join(i.to_string());
        Checkpoint::capture(&net, None, &[]).save(&sdir)?;
        write_text(&sdir.join("spec.toml"), &toml::to_string(net.spec()).expect("spec serializes"))?;
        rows.push(SampleRow {
            sample: i,
            event,
            params: net.spec().param_count(),
            macs: net.spec().mac_count(),
            test_err,
        });
    }
    write_csv(&dir.join("samples.csv"), &rows)?;
    eprintln!("{} prune events, {} samples", trace.events.len(), rows.len());
    Ok(())
}

pub fn read_samples(dir: &Path) -> Result<Vec<(SampleRow, NetworkSpec)>> {
    let path = dir.join("samples.csv");
    let mut out = Vec::new();
    for row in read_csv::<SampleRow>(&path)? {
        let spath = dir.join("samples").join(row.sample.to_string()).join("spec.toml");
        let text = fs::read_to_string(&spath).map_err(io(&spath))?;
        let spec: NetworkSpec = toml::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", spath.display())))?;
        spec.validate()?;
        out.push((row, spec));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ProfileMeta {
    key: String,
    timer: String,
}

/// Description stored with a profile so later latency measurements use the same clock.
fn timer_description(fake: Option<&str>) -> String {
    fake.map_or_else(|| "monotonic".to_string(), |s| format!("fake:{s}"))
}

fn make_timer(description: &str) -> Result<Box<dyn Timer>> {
    match description.strip_prefix("fake:") {
        Some(s) => Ok(Box::new(s.parse::<FakeTimer>()?)),
        None if description == "monotonic" => Ok(Box::new(MonotonicTimer::new())),
        None => Err(Error::Format(format!("unknown timer {description:?}")).into()),
    }
}

/// Spec the profile describes: the trained teacher's if there is one.
fn profile_spec(cfg: &PipelineConfig) -> Result<NetworkSpec> {
    let dir = cfg.out.join(TEACHER);
    if dir.exists() {
        Ok(Checkpoint::load(&dir)?.manifest.spec)
    } else {
        Ok(cfg.teacher_spec(input_shape(cfg)?)?)
    }
}

/// Profiles every prunable layer. Returns `false` when a cached profile
/// for the same spec, harness and clock was reused.
pub fn cmd_profile(cfg: &PipelineConfig, fake: Option<&str>) -> Result<bool> {
    if let Some(s) = fake {
        s.parse::<FakeTimer>().map_err(|e| CliError::Usage(e.to_string()))?;
    }
    let _lock = Lock::acquire(&cfg.out, lock::PROFILE, &[lock::TRAIN])?;
    write_config(cfg)?;
    let spec = profile_spec(cfg)?;
    let timer = timer_description(fake);
    let mut h = Sha256::new();
    h.update(toml::to_string(&spec).expect("spec serializes"));
    h.update(toml::to_string(&cfg.harness).expect("harness serializes"));
    h.update(&timer);
    let key: String = h.finalize().iter().map(|b| format!("{b:02x}")).collect();

    let dir = cfg.out.join(PROFILE);
    let meta_path = dir.join("meta.toml");
    if let Ok(text) = fs::read_to_string(&meta_path) {
        if toml::from_str::<ProfileMeta>(&text).is_ok_and(|m| m.key == key) && dir.join("profile.toml").exists() {
            eprintln!("profile cache hit ({})", &key[..12]);
            return Ok(false);
        }
    }
    eprintln!("profiling {} layers with the {timer} clock", spec.block_count());
    let profile = profile_network(&spec, &cfg.harness, make_timer(&timer)?.as_mut())?;
    clear_dir(&dir)?;
    fs::create_dir_all(&dir).map_err(io(&dir))?;
    write_profiles_csv(&dir.join("profile.csv"), &profile.layers)?;
    write_points_csv(&dir.join("points.csv"), &profile.points)?;
    profile.save(&dir.join("profile.toml"))?;
    let meta = ProfileMeta { key, timer };
    write_text(&meta_path, &toml::to_string(&meta).expect("meta serializes"))?;
    for p in &profile.points {
        eprintln!("layer {}: optimal points {:?}", p.layer, p.points);
    }
    Ok(true)
}

fn load_profile(out: &Path) -> Result<(NetworkProfile, String)> {
    let dir = out.join(PROFILE);
    require(&dir.join("profile.toml"), "profile")?;
    let profile = NetworkProfile::load(&dir.join("profile.toml"))?;
    let meta_path = dir.join("meta.toml");
    let text = fs::read_to_string(&meta_path).map_err(io(&meta_path))?;
    let meta: ProfileMeta = toml::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", meta_path.display())))?;
    Ok((profile, meta.timer))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudentRow {
    pub sample: usize,
    pub pruned_params: usize,
    pub student_params: usize,
    pub pruned_macs: u64,
    pub student_macs: u64,
}

/// Snaps every sampled spec of the `method` pruning curve.
pub fn cmd_discover(cfg: &PipelineConfig, method: PruneMethod) -> Result<()> {
    write_config(cfg)?;
    let teacher_dir = cfg.out.join(TEACHER);
    require(&teacher_dir, "train")?;
    let teacher = Checkpoint::load(&teacher_dir)?.manifest.spec;
    let (profile, _) = load_profile(&cfg.out)?;
    let pdir = prune_dir(&cfg.out, method);
    require(&pdir.join("samples.csv"), &format!("prune --method {method}"))?;
    let dir = cfg.out.join(STUDENTS);
    clear_dir(&dir)?;
    let mut rows = Vec::new();
    for (row, spec) in read_samples(&pdir)? {
        let student = discover(&teacher, &spec, &profile.points)?;
        let sdir = dir.join(row.sample.to_string());
        fs::create_dir_all(&sdir).map_err(io(&sdir))?;
        student.save(&sdir.join("student.toml"))?;
        eprintln!("sample {}: {:?} -> {:?}", row.sample, spec.widths(), student.spec.widths());
        rows.push(StudentRow {
            sample: row.sample,
            pruned_params: spec.param_count(),
            student_params: student.spec.param_count(),
            pruned_macs: spec.mac_count(),
            student_macs: student.spec.mac_count(),
        });
    }
    write_csv(&dir.join("students.csv"), &rows)
}

fn student_ids(out: &Path) -> Result<Vec<usize>> {
    let path = out.join(STUDENTS).join("students.csv");
    require(&path, "discover")?;
    Ok(read_csv::<StudentRow>(&path)?.into_iter().map(|r| r.sample).collect())
}

/// Trains each student with attention transfer from the teacher and,
/// with `scratch`, also without it.
pub fn cmd_distill(cfg: &PipelineConfig, scratch: bool, only: Option<usize>) -> Result<()> {
    let _lock = Lock::acquire(&cfg.out, lock::TRAIN, &[lock::PROFILE])?;
    write_config(cfg)?;
    let mut ids = student_ids(&cfg.out)?;
    if let Some(s) = only {
        if !ids.contains(&s) {
            return Err(CliError::Usage(format!("no student {s}; have {ids:?}")));
        }
        ids = vec![s];
    }
    let data = load_data(cfg)?;
    let teacher = load_teacher(&cfg.out)?;
    check_input(&teacher, &data)?;
    for i in ids {
        let sdir = cfg.out.join(STUDENTS).join(i.to_string());
        let student = StudentSpec::load(&sdir.join("student.toml"))?;
        eprintln!("student {i}: attention transfer, widths {:?}", student.spec.widths());
        let (net, metrics) = distill(&teacher, &student.spec, &data, &cfg.distill)?;
        let at = sdir.join("at");
        Checkpoint::capture(&net, Some(&cfg.distill.train), &metrics).save(&at)?;
        write_metrics_csv(&at.join("metrics.csv"), &metrics)?;
        if scratch {
            eprintln!("student {i}: from scratch");
            let (net, metrics) = train_from_scratch::<f32>(&student.spec, &data, &cfg.distill.train)?;
            let dir = sdir.join("scratch");
            Checkpoint::capture(&net, Some(&cfg.distill.train), &metrics).save(&dir)?;
            write_metrics_csv(&dir.join("metrics.csv"), &metrics)?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub sample: usize,
    pub params: usize,
    pub macs: u64,
    pub test_err: f64,
    pub latency_ns: f64,
    /// From the layer profile; empty without one.
    pub est_latency_ns: Option<f64>,
    pub macs_per_s: f64,
}

/// Collects every finished run, measures its latency and writes
/// `report.csv` sorted by latency.
pub fn cmd_report(cfg: &PipelineConfig) -> Result<Vec<ReportRow>> {
    let mut runs: Vec<(String, usize, NetworkSpec, f64)> = Vec::new();
    for method in [PruneMethod::L1, PruneMethod::Fisher, PruneMethod::Random] {
        let dir = prune_dir(&cfg.out, method);
        if dir.join("samples.csv").exists() {
            for (row, spec) in read_samples(&dir)? {
                runs.push((method.to_string(), row.sample, spec, row.test_err));
            }
        }
    }
    let sdir = cfg.out.join(STUDENTS);
    if sdir.join("students.csv").exists() {
        for i in student_ids(&cfg.out)? {
            for (kind, label) in [("at", "snapped+at"), ("scratch", "snapped+scratch")] {
                let dir = sdir.join(i.to_string()).join(kind);
                if dir.exists() {
                    let ck = Checkpoint::load(&dir)?;
                    let err = ck.manifest.metrics.last().map_or(f64::NAN, |m| m.test_err);
                    runs.push((label.to_string(), i, ck.manifest.spec, err));
                }
            }
        }
    }
    if runs.is_empty() {
        return Err(CliError::Pipeline(format!("no completed runs under {}", cfg.out.display())));
    }
    write_config(cfg)?;
    let profile = cfg.out.join(PROFILE).join("profile.toml").exists().then(|| load_profile(&cfg.out)).transpose()?;
    let mut timer = make_timer(profile.as_ref().map_or("monotonic", |(_, t)| t.as_str()))?;

    let mut rows = Vec::with_capacity(runs.len());
    for (method, sample, spec, test_err) in runs {
        let latency_ns = bench_network(&spec, &cfg.harness, timer.as_mut())?.median_ns;
        let est_latency_ns = profile.as_ref().map(|(p, _)| estimate_latency(&spec, p)).transpose()?;
        let macs = spec.mac_count();
        rows.push(ReportRow {
            method,
            sample,
            params: spec.param_count(),
            macs,
            test_err,
            latency_ns,
            est_latency_ns,
            macs_per_s: macs as f64 / (latency_ns * 1e-9),
        });
    }
    rows.sort_by(|a, b| {
        a.latency_ns
            .total_cmp(&b.latency_ns)
            .then_with(|| a.method.cmp(&b.method))
            .then(a.sample.cmp(&b.sample))
    });
    write_csv(&cfg.out.join(REPORT), &rows)?;
    Ok(rows)
}
