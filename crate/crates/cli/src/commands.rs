use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use contrastlab_core::data::{header_for, write_dataset, Dataset, TransformationFamily};
use contrastlab_core::eval::{
    domain_risk_report, estimate_sigma_delta, lemma1_report, linear_probe_sq, theorem1_diagnostics,
    theorem2_check, toy_counterexample, view_scaling_study, zero_one_error, AugmentedEstimate,
    BoundReport, Decision, SigmaDelta,
};
use contrastlab_core::seed::{derive_index, derive_seed};
use contrastlab_core::train::{
    history_csv, load_checkpoint, save_checkpoint, train, Model, Network,
};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::config::{ExperimentConfig, Method, ProbeFit};
use crate::error::{schema, CliError, EXIT_BOUND_VIOLATION, EXIT_OK};
use crate::output::{
    num, report_json, stamped_csv, write_manifest, Artifacts, Format, ManifestInfo, Stamp,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Diagnostic {
    Toy,
    Lemma1,
    Theorem1,
    Theorem2,
    SigmaDelta,
    ViewScaling,
}

impl Diagnostic {
    pub fn name(self) -> &'static str {
        match self {
            Diagnostic::Toy => "toy",
            Diagnostic::Lemma1 => "lemma1",
            Diagnostic::Theorem1 => "theorem1",
            Diagnostic::Theorem2 => "theorem2",
            Diagnostic::SigmaDelta => "sigma-delta",
            Diagnostic::ViewScaling => "view-scaling",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Command {
    Gen,
    Train,
    Probe,
    Diagnose(Diagnostic),
    Compare,
}

impl Command {
    pub fn name(&self) -> String {
        match self {
            Command::Gen => "gen".into(),
            Command::Train => "train".into(),
            Command::Probe => "probe".into(),
            Command::Diagnose(d) => format!("diagnose {}", d.name()),
            Command::Compare => "compare".into(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunOptions {
    pub out: PathBuf,
    pub format: Format,
    /// Checkpoint manifest; defaults to `<out>/checkpoint.json` when present.
    pub checkpoint: Option<PathBuf>,
}

/// Runs one command and writes its manifest. Returns the process exit code.
pub fn run(command: &Command, cfg: &ExperimentConfig, opts: &RunOptions) -> Result<i32, CliError> {
    let start = Instant::now();
    let stamp = Stamp {
        config_hash: cfg.hash(),
        seed: cfg.seed,
    };
    let mut artifacts = Artifacts::new(&opts.out)?;
    let mut ctx = Context {
        cfg,
        opts,
        stamp: &stamp,
        artifacts: &mut artifacts,
        stage_seeds: BTreeMap::new(),
    };
    let code = match command {
        Command::Gen => ctx.gen()?,
        Command::Train => ctx.train()?,
        Command::Probe => ctx.probe()?,
        Command::Diagnose(which) => ctx.diagnose(*which)?,
        Command::Compare => ctx.compare()?,
    };
    let stage_seeds = std::mem::take(&mut ctx.stage_seeds);
    write_manifest(
        &artifacts,
        &ManifestInfo {
            command: &command.name(),
            stamp: &stamp,
            stage_seeds,
            wall_clock_seconds: start.elapsed().as_secs_f64(),
        },
    )?;
    Ok(code)
}

struct Context<'a> {
    cfg: &'a ExperimentConfig,
    opts: &'a RunOptions,
    stamp: &'a Stamp,
    artifacts: &'a mut Artifacts,
    stage_seeds: BTreeMap<String, u64>,
}

fn build_model(cfg: &ExperimentConfig, dim: usize, init_seed: u64) -> Result<Model, CliError> {
    let spec = cfg.model()?;
    let enc = Network::init(
        "enc",
        spec.encoder.clone(),
        dim,
        derive_seed(init_seed, "encoder"),
    )?;
    let proj = match &spec.projector {
        Some(p) => Some(Network::init(
            "proj",
            p.clone(),
            enc.output_dim(),
            derive_seed(init_seed, "projector"),
        )?),
        None => None,
    };
    Ok(Model::new(enc, proj)?)
}

fn accuracy(
    enc: &Network,
    head: &contrastlab_core::eval::LinearHead,
    ds: &Dataset,
) -> Result<f64, CliError> {
    let feats = enc.forward(ds.samples())?;
    Ok(1.0 - zero_one_error(Decision::Head(head), &feats, ds.require_labels()?)?)
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn bound_rows(report: &BoundReport) -> Vec<Vec<String>> {
    let mut rows = vec![
        vec!["lhs".to_string(), num(report.lhs)],
        vec!["rhs".to_string(), num(report.rhs)],
        vec!["margin".to_string(), num(report.margin)],
    ];
    for (k, v) in &report.terms {
        rows.push(vec![format!("term.{k}"), num(*v)]);
    }
    for (k, v) in &report.fitted_constants {
        rows.push(vec![format!("fitted.{k}"), num(*v)]);
    }
    if let Some(pass) = report.pass {
        rows.push(vec!["pass".to_string(), u8::from(pass).to_string()]);
    }
    rows
}

#[derive(Serialize)]
struct SigmaSummary<'a> {
    delta: f64,
    sigma_hat: f64,
    transformations: &'a str,
    classes: Vec<serde_json::Value>,
}

fn sigma_summary(sd: &SigmaDelta) -> SigmaSummary<'_> {
    SigmaSummary {
        delta: sd.delta,
        sigma_hat: sd.sigma_hat,
        transformations: &sd.transformations,
        classes: sd
            .per_class
            .iter()
            .map(|c| json!({"class": c.class, "size": c.size, "sigma": c.sigma, "method": c.method, "members": c.members}))
            .collect(),
    }
}

impl Context<'_> {
    fn seed(&mut self, stage: &str) -> u64 {
        let s = self.cfg.stage_seed(stage);
        self.stage_seeds.insert(stage.to_string(), s);
        s
    }

    fn training_data(&mut self) -> Result<Dataset, CliError> {
        let s = self.seed("data");
        Ok(self.cfg.dataset()?.generate(s)?)
    }

    fn eval_data(&mut self) -> Result<Dataset, CliError> {
        let spec = self.cfg.dataset()?;
        let spec = spec.with_n(self.cfg.eval.n.unwrap_or(spec.n()));
        let s = self.seed("eval");
        Ok(spec.generate(s)?)
    }

    /// The encoder under evaluation and where it came from.
    fn encoder(&mut self, dim: usize) -> Result<(Network, String), CliError> {
        let path = self.opts.checkpoint.clone().or_else(|| {
            let p = self.opts.out.join("checkpoint.json");
            p.exists().then_some(p)
        });
        match path {
            Some(p) => {
                let ck = load_checkpoint(&p)?;
                if ck.model.encoder.input_dim() != dim {
                    return Err(schema(format!(
                        "checkpoint encoder takes {} inputs but the data has {dim}",
                        ck.model.encoder.input_dim()
                    )));
                }
                // Content hash rather than path, so reports do not depend on
                // where the run was written.
                let digest = hex::encode(Sha256::digest(std::fs::read(&p)?));
                let source = format!(
                    "checkpoint sha256:{} (config {})",
                    &digest[..16],
                    ck.config_hash.as_deref().unwrap_or("none")
                );
                Ok((ck.model.encoder, source))
            }
            None => {
                let s = self.seed("init");
                let model = build_model(self.cfg, dim, s)?;
                eprintln!("note: no checkpoint given, using the untrained encoder from the config");
                Ok((model.encoder, "untrained initialization".to_string()))
            }
        }
    }

    fn emit(
        &mut self,
        stem: &str,
        command: &str,
        report: &impl Serialize,
        csv: impl FnOnce() -> (Vec<&'static str>, Vec<Vec<String>>),
    ) -> Result<(), CliError> {
        match self.opts.format {
            Format::Json => {
                let text = report_json(self.stamp, command, report)?;
                self.artifacts.write(&format!("{stem}.json"), &text)?;
            }
            Format::Csv => {
                let (header, rows) = csv();
                let text = stamped_csv(self.stamp, &header, &rows);
                self.artifacts.write(&format!("{stem}.csv"), &text)?;
            }
        }
        Ok(())
    }

    fn gen(&mut self) -> Result<i32, CliError> {
        let ds = self.training_data()?;
        let header = header_for(
            &ds,
            self.cfg.seed,
            Some(self.cfg.dataset()?.clone()),
            Some(self.stamp.config_hash.clone()),
        );
        let path = self.artifacts.dir().join("dataset.txt");
        write_dataset(&path, &ds, &header)?;
        self.artifacts.record(path);
        Ok(EXIT_OK)
    }

    fn train(&mut self) -> Result<i32, CliError> {
        let loss = self.cfg.loss()?.clone();
        let optim = self.cfg.optim()?.clone();
        let family = self.cfg.family()?;
        let ds = self.training_data()?;
        let init = self.seed("init");
        let model = build_model(self.cfg, ds.dim(), init)?;
        let opt = optim.with_seed(self.seed("train"));
        let out = train(model, &ds, &family, &loss, &opt)?;
        let manifest = save_checkpoint(
            self.artifacts.dir(),
            "checkpoint",
            &out.model,
            Some(&self.stamp.config_hash),
            self.cfg.seed,
        )?;
        self.artifacts.record(manifest.with_extension("bin"));
        self.artifacts.record(manifest);
        let csv = history_csv(&out.history);
        let mut lines = csv.lines();
        let header: Vec<&str> = lines.next().unwrap_or_default().split(',').collect();
        let rows: Vec<Vec<String>> = lines
            .map(|l| l.split(',').map(str::to_string).collect())
            .collect();
        self.artifacts
            .write("history.csv", &stamped_csv(self.stamp, &header, &rows))?;
        let summary = json!({
            "objective": loss.objective.name(),
            "views": loss.views,
            "epochs": opt.epochs,
            "initial": out.initial,
            "final": out.history.last(),
        });
        self.artifacts
            .write("train.json", &report_json(self.stamp, "train", &summary)?)?;
        Ok(EXIT_OK)
    }

    fn probe(&mut self) -> Result<i32, CliError> {
        let ds = self.eval_data()?;
        let (enc, source) = self.encoder(ds.dim())?;
        let domains = self.cfg.domains(ds.dim());
        let report = domain_risk_report(&enc, &domains, &ds)?;
        let payload = json!({"encoder": source, "domain_risk": report});
        self.emit("probe", "probe", &payload, || {
            let mut rows = Vec::new();
            for (a, row) in report.transfer.iter().enumerate() {
                for (b, v) in row.iter().enumerate() {
                    rows.push(vec![
                        "transfer".into(),
                        report.domains[a].clone(),
                        report.domains[b].clone(),
                        num(*v),
                    ]);
                }
            }
            for (d, name) in report.domains.iter().enumerate() {
                rows.push(vec![
                    "zero_one".into(),
                    name.clone(),
                    name.clone(),
                    num(report.zero_one[d]),
                ]);
                rows.push(vec![
                    "shared_risk".into(),
                    "shared".into(),
                    name.clone(),
                    num(report.shared_risk[d]),
                ]);
                rows.push(vec![
                    "shared_zero_one".into(),
                    "shared".into(),
                    name.clone(),
                    num(report.shared_zero_one[d]),
                ]);
            }
            for (metric, v) in [
                ("worst_gap_transfer", report.worst_gap_transfer),
                ("worst_gap_shared", report.worst_gap_shared),
                (
                    "worst_zero_one_gap_shared",
                    report.worst_zero_one_gap_shared,
                ),
            ] {
                rows.push(vec![metric.into(), String::new(), String::new(), num(v)]);
            }
            (vec!["metric", "head", "domain", "value"], rows)
        })?;
        Ok(EXIT_OK)
    }

    fn diagnose(&mut self, which: Diagnostic) -> Result<i32, CliError> {
        let stem = which.name();
        let command = format!("diagnose {stem}");
        let plan = self.cfg.eval.clone();
        if which == Diagnostic::Toy {
            let s = self.seed("diagnose");
            let rep = toy_counterexample(plan.toy.epsilon, plan.toy.n, s)?;
            self.emit(stem, &command, &rep, || {
                let rows = vec![
                    vec![
                        "align".into(),
                        num(rep.analytic.align),
                        num(rep.empirical.align.mean),
                        num(rep.empirical.align.std_err),
                    ],
                    vec![
                        "risk0".into(),
                        num(rep.analytic.risk0),
                        num(rep.empirical.risk0),
                        String::new(),
                    ],
                    vec![
                        "risk1".into(),
                        num(rep.analytic.risk1),
                        num(rep.empirical.risk1),
                        String::new(),
                    ],
                ];
                (vec!["quantity", "analytic", "empirical", "std_err"], rows)
            })?;
            return Ok(EXIT_OK);
        }

        let ds = self.eval_data()?;
        let family = self.cfg.family()?;
        let (enc, source) = self.encoder(ds.dim())?;
        let diag_seed = self.seed("diagnose");
        let sigma = |ds: &Dataset, family: &TransformationFamily| -> Result<SigmaDelta, CliError> {
            let k = plan.sigma.max_points.min(ds.n());
            let sub = ds.subset(&(0..k).collect::<Vec<_>>())?;
            Ok(estimate_sigma_delta(
                &sub,
                family,
                plan.sigma.delta,
                plan.sigma.transformation_samples,
                derive_seed(diag_seed, "sigma"),
            )?)
        };
        let est = AugmentedEstimate {
            repetitions: plan.bounds.repetitions,
            pair_draws: plan.bounds.pair_draws,
            seed: derive_seed(diag_seed, "augment"),
        };
        let mut code = EXIT_OK;
        match which {
            Diagnostic::Toy => unreachable!(),
            Diagnostic::Theorem2 | Diagnostic::Lemma1 | Diagnostic::Theorem1 => {
                let report = match which {
                    Diagnostic::Theorem2 => {
                        let head = linear_probe_sq(&enc, &ds)?.head;
                        theorem2_check(&enc, &head, &ds, &family)?
                    }
                    Diagnostic::Lemma1 => {
                        let head = linear_probe_sq(&enc, &ds)?.head;
                        let sd = sigma(&ds, &family)?;
                        let l = enc.lipschitz_estimate(Some(ds.samples()))?;
                        lemma1_report(&enc, &head, &ds, &family, &sd, l, est)?
                    }
                    _ => {
                        let sd = sigma(&ds, &family)?;
                        let l = enc.lipschitz_estimate(Some(ds.samples()))?;
                        theorem1_diagnostics(
                            &enc,
                            &ds,
                            &family,
                            &sd,
                            l,
                            plan.bounds.c1,
                            plan.bounds.c2,
                            est,
                        )?
                    }
                };
                if report.pass == Some(false) {
                    eprintln!("bound violated: lhs {} > rhs {}", report.lhs, report.rhs);
                    code = EXIT_BOUND_VIOLATION;
                }
                let payload = json!({"encoder": source, "bound": report});
                self.emit(stem, &command, &payload, || {
                    (vec!["quantity", "value"], bound_rows(&report))
                })?;
            }
            Diagnostic::SigmaDelta => {
                let sd = sigma(&ds, &family)?;
                let summary = sigma_summary(&sd);
                self.emit(stem, &command, &summary, || {
                    let mut rows: Vec<Vec<String>> = sd
                        .per_class
                        .iter()
                        .map(|c| {
                            vec![
                                c.class.to_string(),
                                c.size.to_string(),
                                num(c.sigma),
                                format!("{:?}", c.method).to_lowercase(),
                            ]
                        })
                        .collect();
                    rows.push(vec![
                        "min".into(),
                        String::new(),
                        num(sd.sigma_hat),
                        String::new(),
                    ]);
                    (vec!["class", "size", "sigma", "method"], rows)
                })?;
            }
            Diagnostic::ViewScaling => {
                let vs = &plan.view_scaling;
                let study = view_scaling_study(
                    &enc,
                    &ds,
                    &family,
                    &vs.m,
                    vs.repeats,
                    derive_seed(diag_seed, "views"),
                    vs.mode,
                )?;
                let payload = json!({"encoder": source, "scaling": study});
                self.emit(stem, &command, &payload, || {
                    let rows = study
                        .rows
                        .iter()
                        .map(|r| {
                            vec![
                                r.m.to_string(),
                                r.m_used.to_string(),
                                num(r.mean_gap),
                                num(r.max_gap),
                                num(r.min_gap),
                                num(r.std_err),
                            ]
                        })
                        .collect();
                    (
                        vec!["m", "m_used", "mean_gap", "max_gap", "min_gap", "std_err"],
                        rows,
                    )
                })?;
            }
        }
        Ok(code)
    }

    fn compare(&mut self) -> Result<i32, CliError> {
        let cmp = self.cfg.compare()?.clone();
        let family = self.cfg.family()?;
        let optim = self.cfg.optim()?.clone();
        let data_spec = self.cfg.dataset()?.clone();
        let (data_seed, init_seed, train_seed) =
            (self.seed("data"), self.seed("init"), self.seed("train"));
        let probe_seeds: Vec<(u64, u64)> = cmp
            .probe_domains
            .iter()
            .map(|d| {
                (
                    self.seed(&format!("probe-train:{}", d.name)),
                    self.seed(&format!("probe-test:{}", d.name)),
                )
            })
            .collect();
        let cfg = self.cfg;

        let one_run = |method: &Method, s: usize| -> Result<Vec<f64>, CliError> {
            let s = s as u64;
            let ds = data_spec.generate(derive_index(data_seed, s))?;
            let model = build_model(cfg, ds.dim(), derive_index(init_seed, s))?;
            let out = train(
                model,
                &ds,
                &family,
                &method.loss,
                &optim.with_seed(derive_index(train_seed, s)),
            )?;
            let enc = out.model.encoder;
            let source_head = linear_probe_sq(&enc, &ds)?.head;
            cmp.probe_domains
                .iter()
                .zip(&probe_seeds)
                .map(|(dom, &(tr, te))| {
                    let test = dom.dataset.generate(derive_index(te, s))?;
                    match cmp.probe_fit {
                        ProbeFit::Source => accuracy(&enc, &source_head, &test),
                        ProbeFit::Target => {
                            let fit_on = dom.dataset.generate(derive_index(tr, s))?;
                            accuracy(&enc, &linear_probe_sq(&enc, &fit_on)?.head, &test)
                        }
                    }
                })
                .collect()
        };
        let jobs: Vec<(usize, usize)> = (0..cmp.methods.len())
            .flat_map(|m| (0..cmp.seeds).map(move |s| (m, s)))
            .collect();
        let results: Vec<Vec<f64>> = jobs
            .par_iter()
            .map(|&(m, s)| one_run(&cmp.methods[m], s))
            .collect::<Result<_, _>>()?;

        let domains: Vec<String> = cmp.probe_domains.iter().map(|d| d.name.clone()).collect();
        let mut methods_out = Vec::new();
        let mut rows = Vec::new();
        for (m, method) in cmp.methods.iter().enumerate() {
            let runs = &results[m * cmp.seeds..(m + 1) * cmp.seeds];
            let worst: Vec<f64> = runs
                .iter()
                .map(|r| r.iter().copied().fold(f64::INFINITY, f64::min))
                .collect();
            let mut per_domain = BTreeMap::new();
            for (d, name) in domains.iter().enumerate() {
                let accs: Vec<f64> = runs.iter().map(|r| r[d]).collect();
                let (mean, std) = mean_std(&accs);
                rows.push(vec![
                    method.name.clone(),
                    name.clone(),
                    num(mean),
                    num(std),
                    cmp.seeds.to_string(),
                ]);
                per_domain.insert(
                    name.clone(),
                    json!({"mean": mean, "std": std, "per_seed": accs}),
                );
            }
            let (wm, ws) = mean_std(&worst);
            rows.push(vec![
                method.name.clone(),
                "worst".into(),
                num(wm),
                num(ws),
                cmp.seeds.to_string(),
            ]);
            methods_out.push(json!({
                "name": method.name,
                "objective": method.loss.objective.name(),
                "views": method.loss.views,
                "domains": per_domain,
                "worst": {"mean": wm, "std": ws, "per_seed": worst},
            }));
        }
        let payload = json!({
            "domains": domains,
            "seeds": cmp.seeds,
            "probe_fit": cmp.probe_fit,
            "methods": methods_out,
        });
        self.emit("compare", "compare", &payload, || {
            (
                vec!["method", "domain", "mean_accuracy", "std_accuracy", "seeds"],
                rows,
            )
        })?;
        Ok(EXIT_OK)
    }
}

/// Default output directory of a config.
pub fn default_out(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output
        .as_deref()
        .map_or_else(|| Path::new("out").to_path_buf(), PathBuf::from)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_std_of_constant_runs_is_zero() {
        assert_eq!(mean_std(&[0.5, 0.5, 0.5]), (0.5, 0.0));
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(mean_std(&[0.7]).1, 0.0);
    }
}
