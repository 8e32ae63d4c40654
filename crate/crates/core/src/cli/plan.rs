use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{load_cache, read_text, write_atomic, CliError};
use crate::cache::{split_train_eval, write_cache, DataFraction, HiddenStateCache, SCALING_FRACTIONS};
use crate::distill::{train_student, DistillError, DistillSpec, Method, RunRecord, Supervision};
use crate::metrics::{aggregate, GroupKey};
use crate::probes::{
    encode_probe, probe_digest, probe_soft_labels, train_probe, ProbeKind, ProbeModel,
    ProbeTrainConfig,
};
use crate::teachsim::{generate, generate_per_choice, TeacherSpec, DEFAULT_N};

pub const PLAN_VERSION: u32 = 1;
/// Overrides the default output directory (not one named in a plan).
pub const OUT_DIR_ENV: &str = "PROBEKD_OUT_DIR";
const DEFAULT_OUT_DIR: &str = "probekd-runs";

/// A teacher spec given inline or as a path to its JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TeacherRef {
    Path(PathBuf),
    Inline(TeacherSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentPlan {
    pub version: u32,
    pub teacher: TeacherRef,
    pub n_examples: usize,
    /// Probe kinds distilled by `probe_kd`; each adds its own runs.
    pub probe_kinds: Vec<ProbeKind>,
    pub methods: Vec<Method>,
    pub fractions: Vec<f64>,
    pub seeds: Vec<u64>,
    pub output_dir: Option<PathBuf>,
    pub eval_fraction: f64,
    pub split_seed: u64,
    pub probe: ProbeTrainConfig,
    /// Shared student settings; `method` and `seed` are set per run.
    pub distill: DistillSpec,
}

impl Default for ExperimentPlan {
    fn default() -> Self {
        Self {
            version: PLAN_VERSION,
            teacher: TeacherRef::Inline(TeacherSpec::default()),
            n_examples: DEFAULT_N,
            probe_kinds: vec![ProbeKind::Mlp],
            methods: Method::ALL.to_vec(),
            fractions: SCALING_FRACTIONS.to_vec(),
            seeds: (42..=46).collect(),
            output_dir: None,
            eval_fraction: 0.3,
            split_seed: 0,
            probe: ProbeTrainConfig::default(),
            distill: DistillSpec::default(),
        }
    }
}

/// Coordinates of one student run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlannedRun {
    pub method: Method,
    pub probe: Option<ProbeKind>,
    pub fraction: f64,
    pub seed: u64,
}

fn has_duplicates<T: PartialEq>(xs: &[T]) -> bool {
    xs.iter().enumerate().any(|(i, x)| xs[..i].contains(x))
}

impl ExperimentPlan {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let plan: ExperimentPlan =
            serde_json::from_str(text).map_err(|e| CliError::Usage(e.to_string()))?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: &str| Err(CliError::Usage(m.to_string()));
        if self.version != PLAN_VERSION {
            return Err(CliError::Usage(format!("unsupported plan version {}", self.version)));
        }
        if self.methods.is_empty() || self.fractions.is_empty() || self.seeds.is_empty() {
            return bad("plan needs at least one method, fraction and seed");
        }
        if self.methods.contains(&Method::ProbeKd) && self.probe_kinds.is_empty() {
            return bad("probe_kd needs at least one probe kind");
        }
        if has_duplicates(&self.methods)
            || has_duplicates(&self.fractions)
            || has_duplicates(&self.seeds)
            || has_duplicates(&self.probe_kinds)
        {
            return bad("plan lists contain duplicates");
        }
        if self.fractions.iter().any(|&f| !(f > 0.0 && f <= 1.0)) {
            return bad("fractions must lie in (0, 1]");
        }
        if !(self.eval_fraction > 0.0 && self.eval_fraction < 1.0) {
            return bad("eval_fraction must lie in (0, 1)");
        }
        self.probe.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        self.distill.validate()?;
        Ok(())
    }

    /// Every run of the plan, method-major, then probe kind, fraction, seed.
    pub fn runs(&self) -> Vec<PlannedRun> {
        let mut out = Vec::new();
        for &method in &self.methods {
            let probes: Vec<Option<ProbeKind>> = if method.uses_probe() {
                self.probe_kinds.iter().copied().map(Some).collect()
            } else {
                vec![None]
            };
            for probe in probes {
                for &fraction in &self.fractions {
                    for &seed in &self.seeds {
                        out.push(PlannedRun {
                            method,
                            probe,
                            fraction,
                            seed,
                        });
                    }
                }
            }
        }
        out
    }

    fn teacher_spec(&self, base: &Path) -> Result<TeacherSpec, CliError> {
        match &self.teacher {
            TeacherRef::Inline(s) => {
                s.validate()?;
                Ok(s.clone())
            }
            TeacherRef::Path(p) => {
                let p = base.join(p);
                TeacherSpec::from_json(&read_text(&p)?)
                    .map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))
            }
        }
    }

    /// Plan directory, else `$PROBEKD_OUT_DIR`, else `probekd-runs`.
    pub fn resolve_output_dir(&self, base: &Path) -> PathBuf {
        match &self.output_dir {
            Some(d) => base.join(d),
            None => std::env::var_os(OUT_DIR_ENV)
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR)),
        }
    }
}

/// Content hash naming a run's record file.
pub fn run_id(
    cache_digest: &str,
    probe_digest: Option<&str>,
    spec: &DistillSpec,
    fraction: f64,
    seed: u64,
) -> String {
    let spec_json = serde_json::to_string(spec).expect("spec serializes");
    let mut h = Sha256::new();
    for part in [
        cache_digest,
        probe_digest.unwrap_or("-"),
        &spec_json,
        &format!("{fraction:?}"),
        &seed.to_string(),
    ] {
        h.update(part.as_bytes());
        h.update([0u8]);
    }
    hex::encode(h.finalize())
}

/// Trains one student on a `fraction` subset of `train`. The subset is
/// drawn with the run seed, so subsets of one seed nest across fractions.
pub fn distill_one(
    cache: &HiddenStateCache,
    probe: Option<&ProbeModel>,
    train: &[usize],
    eval: &[usize],
    fraction: f64,
    spec: &DistillSpec,
) -> Result<RunRecord, DistillError> {
    let subset = DataFraction::new(fraction, spec.seed)?.sample(train);
    let soft;
    let supervision = match spec.method {
        Method::Supervised | Method::LabelSmooth => Supervision::Labels,
        Method::LogitKd => Supervision::TeacherLogits,
        Method::FeatureKd | Method::PatientKd => Supervision::TeacherFeatures,
        Method::ProbeKd => {
            let p = probe.ok_or_else(|| {
                DistillError::Config("probe_kd needs a probe file (--probe)".into())
            })?;
            p.check_compatible(cache)
                .map_err(|e| DistillError::Config(e.to_string()))?;
            soft = probe_soft_labels(p, cache, p.tau).map_err(|e| DistillError::Config(e.to_string()))?;
            Supervision::Probe {
                soft: &soft,
                kind: p.kind(),
            }
        }
    };
    let (_, mut record) = train_student(cache, supervision, &subset, eval, spec)?;
    record.fraction = fraction;
    Ok(record)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub total: usize,
    pub completed: usize,
    pub skipped: usize,
    pub failed: usize,
    pub output_dir: String,
    pub table: String,
    pub failure_manifest: Option<String>,
}

#[derive(Serialize)]
struct Failure {
    run: PlannedRun,
    id: String,
    error: String,
}

fn write_if_changed(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if fs::read(path).ok().as_deref() == Some(bytes) {
        return Ok(());
    }
    write_atomic(path, bytes)
}

fn existing_record(path: &Path) -> Option<RunRecord> {
    serde_json::from_str(&fs::read_to_string(path).ok()?).ok()
}

/// Builds the cache and probes, runs (or reuses) every planned student and
/// writes `table.csv` / `table.json` under the output directory.
pub fn run_sweep(plan: &ExperimentPlan, base: &Path, jobs: usize) -> Result<SweepSummary, CliError> {
    plan.validate()?;
    let out = plan.resolve_output_dir(base);
    let spec = plan.teacher_spec(base)?;
    let per_choice = plan.probe_kinds.contains(&ProbeKind::Ccs) && plan.methods.contains(&Method::ProbeKd);
    let cache = if per_choice {
        generate_per_choice(&spec, plan.n_examples)?
    } else {
        generate(&spec, plan.n_examples)?
    };
    let mut bytes = Vec::with_capacity(cache.encoded_len());
    write_cache(&cache, &mut bytes)?;
    let cache_path = out.join("cache.hsc");
    write_if_changed(&cache_path, &bytes)?;
    let cache = load_cache(&cache_path)?;
    let cache_digest = cache.digest()?;
    let (train, eval) = split_train_eval(&cache.labels, plan.eval_fraction, plan.split_seed)?;

    let mut probes: Vec<(ProbeKind, ProbeModel, String)> = Vec::new();
    if plan.methods.contains(&Method::ProbeKd) {
        for &kind in &plan.probe_kinds {
            let config = ProbeTrainConfig {
                tau: plan.distill.tau,
                ..plan.probe.clone()
            };
            let fit = train_probe(&cache, &train, &eval, kind, &config)?;
            write_if_changed(&out.join(format!("probe_{kind}.pkp")), &encode_probe(&fit.model)?)?;
            let digest = probe_digest(&fit.model)?;
            log::info!("{kind} probe: eval accuracy {:.4}", fit.eval_accuracy);
            probes.push((kind, fit.model, digest));
        }
    }

    let runs_dir = out.join("runs");
    let planned: Vec<(PlannedRun, DistillSpec, String)> = plan
        .runs()
        .into_iter()
        .map(|r| {
            let spec = DistillSpec {
                method: r.method,
                seed: r.seed,
                ..plan.distill.clone()
            };
            let pd = r.probe.and_then(|k| probes.iter().find(|p| p.0 == k)).map(|p| p.2.as_str());
            let id = run_id(&cache_digest, pd, &spec, r.fraction, r.seed);
            (r, spec, id)
        })
        .collect();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CliError::Run(format!("cannot start worker pool: {e}")))?;
    let results: Vec<(Result<RunRecord, String>, bool)> = pool.install(|| {
        planned
            .par_iter()
            .map(|(r, spec, id)| {
                let path = runs_dir.join(format!("{id}.json"));
                if let Some(rec) = existing_record(&path) {
                    return (Ok(rec), true);
                }
                let probe = r.probe.and_then(|k| probes.iter().find(|p| p.0 == k)).map(|p| &p.1);
                let res = distill_one(&cache, probe, &train, &eval, r.fraction, spec)
                    .map_err(|e| e.to_string())
                    .and_then(|rec| {
                        let text = serde_json::to_string(&rec).expect("records serialize");
                        write_atomic(&path, text.as_bytes()).map_err(|e| e.to_string())?;
                        Ok(rec)
                    });
                (res, false)
            })
            .collect()
    });

    let mut records = Vec::new();
    let mut failures = Vec::new();
    let (mut completed, mut skipped) = (0, 0);
    for ((r, _, id), (res, reused)) in planned.iter().zip(results) {
        match res {
            Ok(rec) => {
                if reused {
                    skipped += 1;
                } else {
                    completed += 1;
                }
                records.push(rec);
            }
            Err(error) => failures.push(Failure {
                run: *r,
                id: id.clone(),
                error,
            }),
        }
    }

    let manifest = out.join("failures.json");
    let failure_manifest = if failures.is_empty() {
        let _ = fs::remove_file(&manifest);
        None
    } else {
        let text = serde_json::to_string_pretty(&failures).expect("failures serialize");
        write_atomic(&manifest, text.as_bytes())?;
        Some(manifest.display().to_string())
    };

    let table = aggregate(&records, &[GroupKey::Method, GroupKey::Fraction])?;
    let table_path = out.join("table.csv");
    write_atomic(&table_path, table.to_csv_string()?.as_bytes())?;
    write_atomic(&out.join("table.json"), table.to_json()?.as_bytes())?;

    Ok(SweepSummary {
        total: planned.len(),
        completed,
        skipped,
        failed: failures.len(),
        output_dir: out.display().to_string(),
        table: table_path.display().to_string(),
        failure_manifest,
    })
}
