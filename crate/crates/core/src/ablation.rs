//! Experiment grid over tasks, integration modes and loss-term toggles.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::{fingerprint, Bag};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, Decoding, EvalReport};
use crate::exec::Exec;
use crate::losses::LossConfig;
use crate::model::{IntegrationMode, ModelConfig, ModelOptions};
use crate::taxonomy::Taxonomy;
use crate::trainer::{train, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    FlatCoarse,
    FlatFine,
    Hierarchical,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::FlatCoarse => "flat_coarse",
            Task::FlatFine => "flat_fine",
            Task::Hierarchical => "hierarchical",
        }
    }

    pub fn is_flat(self) -> bool {
        self != Task::Hierarchical
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossToggles {
    pub con: bool,
    pub int: bool,
    pub gce: bool,
}

impl LossToggles {
    pub const ALL_ON: Self = Self {
        con: true,
        int: true,
        gce: true,
    };

    pub fn any(self) -> bool {
        self.con || self.int || self.gce
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationRun {
    pub run_id: String,
    pub task: Task,
    pub integration: IntegrationMode,
    pub toggles: LossToggles,
    pub seed: u64,
}

impl AblationRun {
    /// Model options and loss config for this run, derived from shared bases.
    ///
    /// A flat run keeps both heads but the unused level's CE weight is 0, so
    /// that head never receives a gradient.
    pub fn configure(&self, model: &ModelOptions, loss: &LossConfig) -> (ModelOptions, LossConfig) {
        let mut model = *model;
        model.integration = self.integration;
        let mut loss = *loss;
        loss.enable_con = self.toggles.con;
        loss.enable_int = self.toggles.int;
        loss.enable_gce = self.toggles.gce;
        match self.task {
            Task::FlatCoarse => loss.weights.ce_fine = 0.0,
            Task::FlatFine => loss.weights.ce_coarse = 0.0,
            Task::Hierarchical => {}
        }
        (model, loss)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationPlan {
    /// Free-form label of the dataset every run shares.
    #[serde(default)]
    pub dataset: Option<String>,
    pub runs: Vec<AblationRun>,
}

impl AblationPlan {
    pub fn validate(&self) -> Result<()> {
        if self.runs.is_empty() {
            return Err(Error::Empty("ablation plan"));
        }
        let mut seen = HashSet::new();
        for run in &self.runs {
            if !seen.insert(run.run_id.as_str()) {
                return Err(Error::DuplicateName(run.run_id.clone()));
            }
            if run.task.is_flat() && (run.integration != IntegrationMode::None || run.toggles.any()) {
                return Err(Error::InvalidConfig(format!(
                    "run `{}`: flat tasks need integration `none` and every loss toggle off",
                    run.run_id
                )));
            }
        }
        Ok(())
    }

    pub fn from_json_str(s: &str) -> std::result::Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let plan: Self = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes") + "\n"
    }
}

fn toggle_tag(t: LossToggles) -> String {
    [t.con, t.int, t.gce].iter().map(|&on| if on { 'O' } else { 'X' }).collect()
}

/// Two flat baselines, three integration modes with every term on, and the
/// full toggle lattice under bidirectional integration.
pub fn build_default_plan(seed: u64) -> AblationPlan {
    let flat = |run_id: &str, task| AblationRun {
        run_id: run_id.into(),
        task,
        integration: IntegrationMode::None,
        toggles: LossToggles::default(),
        seed,
    };
    let hier = |integration: IntegrationMode, toggles: LossToggles| AblationRun {
        run_id: format!("{}_{}", integration.as_str(), toggle_tag(toggles)),
        task: Task::Hierarchical,
        integration,
        toggles,
        seed,
    };
    let t = |con, int, gce| LossToggles { con, int, gce };
    let mut runs = vec![flat("flat_coarse", Task::FlatCoarse), flat("flat_fine", Task::FlatFine)];
    for mode in [
        IntegrationMode::None,
        IntegrationMode::FineToCoarse,
        IntegrationMode::CoarseToFine,
    ] {
        runs.push(hier(mode, LossToggles::ALL_ON));
    }
    for toggles in [
        t(false, false, false),
        t(true, false, false),
        t(false, true, false),
        t(false, false, true),
        t(false, true, true),
        t(true, false, true),
        t(true, true, false),
        t(true, true, true),
    ] {
        runs.push(hier(IntegrationMode::Bidirectional, toggles));
    }
    AblationPlan { dataset: None, runs }
}

/// Data and base configuration shared by every run in a plan.
#[derive(Debug, Clone, Copy)]
pub struct AblationInputs<'a> {
    pub train: &'a [Bag],
    pub val: &'a [Bag],
    /// Split the reported metrics are computed on.
    pub test: &'a [Bag],
    pub taxonomy: &'a Taxonomy,
    pub model: &'a ModelOptions,
    pub loss: &'a LossConfig,
    pub train_config: &'a TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub run: AblationRun,
    /// SHA-256 of the training bags the run consumed.
    pub dataset_sha256: String,
    pub report: Option<EvalReport>,
    pub error: Option<String>,
}

fn execute(run: &AblationRun, inputs: &AblationInputs<'_>, inner: Exec) -> Result<EvalReport> {
    let (model_opts, loss) = run.configure(inputs.model, inputs.loss);
    let dim = inputs.train.first().ok_or(Error::Empty("training split"))?.dim();
    let model_cfg = ModelConfig::new(dim, inputs.taxonomy, &model_opts)?;
    let cfg = TrainConfig {
        seed: run.seed,
        ..*inputs.train_config
    };
    let outcome = train(inputs.train, inputs.val, inputs.taxonomy, &model_cfg, &loss, &cfg, inner)?;
    evaluate(&outcome.params, inputs.test, inputs.taxonomy, Decoding::Unrestricted, inner)
}

/// Trains and evaluates every run. A failing run is recorded in its row and
/// the others still execute; rows come back in plan order.
pub fn run_plan(plan: &AblationPlan, inputs: &AblationInputs<'_>, exec: Exec) -> Result<Vec<RunResult>> {
    plan.validate()?;
    if inputs.test.is_empty() {
        return Err(Error::Empty("evaluation split"));
    }
    // Parallelism goes across runs; each run is sequential inside.
    Ok(exec.map(&plan.runs, |run| {
        let dataset_sha256 = fingerprint(inputs.train);
        log::info!("ablation run `{}` started", run.run_id);
        match execute(run, inputs, Exec::Sequential) {
            Ok(report) => RunResult {
                run: run.clone(),
                dataset_sha256,
                report: Some(report),
                error: None,
            },
            Err(e) => {
                log::warn!("ablation run `{}` failed: {e}", run.run_id);
                RunResult {
                    run: run.clone(),
                    dataset_sha256,
                    report: None,
                    error: Some(e.to_string()),
                }
            }
        }
    }))
}

pub const RESULTS_HEADER: [&str; 11] = [
    "run_id",
    "task",
    "integration",
    "con",
    "int",
    "gce",
    "coarse_acc_pct",
    "coarse_f1_macro",
    "fine_acc_pct",
    "fine_f1_macro",
    "status",
];

/// Results table. Cells that do not apply to a run read `-`.
pub fn results_csv(results: &[RunResult]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(RESULTS_HEADER)?;
    for r in results {
        let run = &r.run;
        let flat = run.task.is_flat();
        let mark = |on: bool| if flat { "-" } else if on { "O" } else { "X" };
        let (show_coarse, show_fine) = match run.task {
            Task::FlatCoarse => (true, false),
            Task::FlatFine => (false, true),
            Task::Hierarchical => (true, true),
        };
        let metric = |show: bool, f: &dyn Fn(&EvalReport) -> String| match (&r.report, show) {
            (Some(rep), true) => f(rep),
            _ => "-".to_string(),
        };
        let status = match &r.error {
            None => "ok".to_string(),
            Some(e) => format!("error: {e}"),
        };
        w.write_record([
            run.run_id.clone(),
            run.task.as_str().to_string(),
            if flat { "-".into() } else { run.integration.as_str().to_string() },
            mark(run.toggles.con).into(),
            mark(run.toggles.int).into(),
            mark(run.toggles.gce).into(),
            metric(show_coarse, &|rep| format!("{:.2}", 100.0 * rep.acc_coarse)),
            metric(show_coarse, &|rep| format!("{:.4}", rep.f1_macro_coarse)),
            metric(show_fine, &|rep| format!("{:.2}", 100.0 * rep.acc_fine)),
            metric(show_fine, &|rep| format!("{:.4}", rep.f1_macro_fine)),
            status,
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Csv(e.into_error().into()))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}
