//! One function per subcommand. Each writes CSV tables plus a
//! `<command>_summary.json` into the output directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use swimrl::agents::{APAgent, ActionMode, AgentCheckpoint, PrescribedController};
use swimrl::flows::FlowSpec;
use swimrl::theory::{d_tilde_from_bk, BaselineParams, CramerFit, Histogram};
use swimrl::training::{
    evaluate, lyapunov_experiment, pc_vs_ap_experiment, return_distribution_experiment,
    separation_histogram_experiment, steady_second_moment, train, value_validation_experiment, Agent, GradientSource,
    HybridConfig, PolicyController, ReturnStats, Winner,
};

use crate::config::{Command, ExperimentConfig};
use crate::error::CliError;
use crate::record::{export_csv, provenance, unix_now, write_json, ResultRecord};

/// Per-run JSON summary written next to the CSV tables.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub experiment: String,
    pub config_hash: String,
    pub env_hash: String,
    pub provenance: String,
    pub created_unix: u64,
    pub metrics: BTreeMap<String, f64>,
    pub files: Vec<String>,
    #[serde(default)]
    pub notes: BTreeMap<String, String>,
    pub config: ExperimentConfig,
}

pub struct Context {
    pub command: Command,
    pub cfg: ExperimentConfig,
    /// Directory of the config file, for resolving relative paths.
    pub base: PathBuf,
    pub out: PathBuf,
    pub quiet: bool,
    config_hash: String,
    env_hash: String,
    metrics: BTreeMap<String, f64>,
    notes: BTreeMap<String, String>,
    files: Vec<String>,
}

impl Context {
    pub fn new(command: Command, cfg: ExperimentConfig, base: PathBuf, out: PathBuf, quiet: bool) -> Self {
        let config_hash = cfg.config_hash();
        let env_hash = cfg.env_hash();
        Self {
            command,
            cfg,
            base,
            out,
            quiet,
            config_hash,
            env_hash,
            metrics: BTreeMap::new(),
            notes: BTreeMap::new(),
            files: Vec::new(),
        }
    }

    fn record(&self, metric: &str, columns: &[&str]) -> ResultRecord {
        ResultRecord::new(self.command.name(), metric, &self.config_hash, &self.env_hash, columns)
    }

    fn write(&mut self, name: &str, record: &ResultRecord) -> Result<(), CliError> {
        export_csv(record, &self.out.join(name))?;
        self.files.push(name.to_string());
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        write_json(value, &self.out.join(name))?;
        self.files.push(name.to_string());
        Ok(())
    }

    fn metric(&mut self, name: &str, value: f64) {
        if !self.quiet {
            println!("{}: {name} = {value:.6e}", self.command);
        }
        self.metrics.insert(name.to_string(), value);
    }

    fn note(&mut self, name: &str, value: String) {
        if !self.quiet {
            println!("{}: {name} = {value}", self.command);
        }
        self.notes.insert(name.to_string(), value);
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    pub fn finish(mut self) -> Result<Summary, CliError> {
        let name = format!("{}_summary.json", self.command.name().replace('-', "_"));
        self.files.push(name.clone());
        let summary = Summary {
            experiment: self.command.name().to_string(),
            config_hash: self.config_hash,
            env_hash: self.env_hash,
            provenance: provenance(),
            created_unix: unix_now(),
            metrics: self.metrics,
            files: self.files,
            notes: self.notes,
            config: self.cfg,
        };
        write_json(&summary, &self.out.join(name))?;
        Ok(summary)
    }
}

pub fn dispatch(ctx: &mut Context) -> Result<(), CliError> {
    match ctx.command {
        Command::Lyapunov => lyapunov(ctx),
        Command::ValidateDist => validate_dist(ctx),
        Command::ValidateValue => validate_value(ctx),
        Command::Train => train_cmd(ctx),
        Command::Eval => eval(ctx),
        Command::Compare => compare(ctx),
        Command::HybridEval => hybrid_eval(ctx),
    }
}

fn gradient_source(flow: &FlowSpec) -> GradientSource {
    match flow {
        FlowSpec::Bk(p) => GradientSource::Bk(*p),
        FlowSpec::Abc(p) => GradientSource::Abc(*p),
    }
}

fn lyapunov(ctx: &mut Context) -> Result<(), CliError> {
    let lc = ctx.cfg.lyapunov_config().expect("validated");
    let res = lyapunov_experiment(&gradient_source(&ctx.cfg.env.flow), &lc)?;
    let mut rec = ctx.record("finite_time_exponents", &["sample", "lambda"]);
    for (i, &l) in res.samples.iter().enumerate() {
        rec.push(vec![i as f64, l]);
    }
    ctx.write("lyapunov_samples.csv", &rec)?;
    let h = &res.fit.histogram;
    let mut rec = ctx.record("exponent_density", &["lambda", "density"]);
    for (c, d) in h.centers().into_iter().zip(h.density(res.samples.len())) {
        rec.push(vec![c, d]);
    }
    ctx.write("lyapunov_histogram.csv", &rec)?;
    ctx.metric("lambda_bar", res.fit.lambda_bar);
    ctx.metric("s1_curv", res.fit.s1_curv);
    ctx.metric("d_tilde", res.d_tilde);
    ctx.metric("optimal_phi", res.optimal_phi);
    Ok(())
}

fn cramer_fit(ctx: &mut Context) -> Result<CramerFit, CliError> {
    let d = ctx.cfg.distribution.as_ref().expect("validated");
    if let Some(f) = d.fit {
        return Ok(CramerFit {
            lambda_bar: f.lambda_bar,
            s1_curv: f.s1_curv,
            t_window: f64::INFINITY,
            histogram: Histogram { edges: vec![], counts: vec![] },
        });
    }
    match (&ctx.cfg.env.flow, ctx.cfg.lyapunov_config()) {
        (_, Some(lc)) => {
            let res = lyapunov_experiment(&gradient_source(&ctx.cfg.env.flow), &lc)?;
            ctx.metric("lambda_bar", res.fit.lambda_bar);
            ctx.metric("s1_curv", res.fit.s1_curv);
            Ok(res.fit)
        }
        (FlowSpec::Bk(p), None) => Ok(CramerFit::bk(p.diffusivity, p.dim)),
        (FlowSpec::Abc(_), None) => unreachable!("validated"),
    }
}

fn phi_tag(phi: f64) -> String {
    format!("{phi}").replace('.', "p")
}

fn validate_dist(ctx: &mut Context) -> Result<(), CliError> {
    let fit = cramer_fit(ctx)?;
    let hc = ctx.cfg.histogram_config().expect("validated");
    let phis = ctx.cfg.distribution.as_ref().unwrap().phis.clone();
    let flow = ctx.cfg.env.flow;
    for &phi in &phis {
        let r = separation_histogram_experiment(&flow, phi, &fit, &hc)?;
        let rec = match &r.predicted_density {
            Some(pred) => {
                let mut rec = ctx.record("separation_density", &["bin_center", "empirical_density", "predicted_density"]);
                for i in 0..r.centers.len() {
                    rec.push(vec![r.centers[i], r.density[i], pred[i]]);
                }
                rec
            }
            None => {
                let mut rec = ctx.record("separation_density", &["bin_center", "empirical_density"]);
                for i in 0..r.centers.len() {
                    rec.push(vec![r.centers[i], r.density[i]]);
                }
                rec
            }
        };
        ctx.write(&format!("validate_dist_phi_{}.csv", phi_tag(phi)), &rec)?;
        ctx.metric(&format!("phi_{}.fitted_slope", phi_tag(phi)), r.fitted_slope);
        ctx.metric(&format!("phi_{}.predicted_slope", phi_tag(phi)), r.predicted_slope);
    }
    if let (FlowSpec::Bk(p), Some(sc)) = (flow, ctx.cfg.steady_config()) {
        let mut rec = ctx.record("steady_second_moment", &["phi", "empirical", "stderr", "predicted"]);
        for &phi in &phis {
            let m = steady_second_moment(&p, phi, &sc)?;
            rec.push(vec![phi, m.empirical, m.stderr, m.predicted]);
            ctx.metric(&format!("phi_{}.steady_z", phi_tag(phi)), (m.empirical - m.predicted) / m.stderr);
        }
        ctx.write("steady_moment.csv", &rec)?;
    }
    Ok(())
}

fn validate_value(ctx: &mut Context) -> Result<(), CliError> {
    let v = ctx.cfg.value.clone().expect("validated");
    let e = &ctx.cfg.env;
    let d_tilde = match (v.d_tilde, &e.flow) {
        (Some(d), _) => d,
        (None, FlowSpec::Bk(p)) => d_tilde_from_bk(p.diffusivity, p.dim),
        (None, FlowSpec::Abc(_)) => unreachable!("validated"),
    };
    let base = BaselineParams::new(v.phi, d_tilde, e.beta, e.nu, e.horizon, e.flow.kappa(), e.flow.dim())?;
    let pts = value_validation_experiment(&e.flow, &base, &ctx.cfg.value_config().unwrap())?;
    let mut rec = ctx.record(
        "value_error_surface",
        &["t", "s", "monte_carlo", "stderr", "predicted", "abs_error", "rel_error"],
    );
    for p in &pts {
        rec.push(vec![p.t, p.s, p.monte_carlo, p.stderr, p.predicted, p.abs_error, p.rel_error]);
    }
    ctx.write("value_grid.csv", &rec)?;
    ctx.metric("max_rel_error", pts.iter().map(|p| p.rel_error).fold(0.0, f64::max));
    ctx.metric("max_abs_error", pts.iter().map(|p| p.abs_error).fold(0.0, f64::max));
    Ok(())
}

fn returns_record(ctx: &Context, metric: &str, named: &[(&str, &ReturnStats)]) -> ResultRecord {
    let mut cols = vec!["episode"];
    cols.extend(named.iter().map(|n| n.0));
    let mut rec = ctx.record(metric, &cols);
    for i in 0..named[0].1.returns.len() {
        let mut row = vec![i as f64];
        row.extend(named.iter().map(|n| n.1.returns[i]));
        rec.push(row);
    }
    rec
}

fn stats_metrics(ctx: &mut Context, prefix: &str, st: &ReturnStats) {
    ctx.metric(&format!("{prefix}mean_return"), st.mean);
    ctx.metric(&format!("{prefix}median_return"), st.median);
    ctx.metric(&format!("{prefix}stderr"), st.stderr);
    ctx.metric(&format!("{prefix}aborted"), st.aborted as f64);
}

fn train_cmd(ctx: &mut Context) -> Result<(), CliError> {
    let env = ctx.cfg.env.environment()?;
    let tc = ctx.cfg.train_config();
    let acfg = ctx.cfg.agent.clone().expect("validated");
    let mut agent = Agent::build(&env, &acfg, &tc)?;
    let curve = train(&mut agent, &env, &tc)?;
    let mut rec = ctx.record("learning_curve", &["episode", "mean_return", "median_return", "stderr"]);
    for p in &curve.points {
        rec.push(vec![p.episode as f64, p.mean_return, p.median_return, p.stderr]);
    }
    ctx.write("learning_curve.csv", &rec)?;
    ctx.write_json("agent.json", &agent.checkpoint())?;
    let st = evaluate(&env, &agent.evaluator(), &tc, "eval", tc.eval_episodes)?;
    let rec = returns_record(ctx, "evaluation_returns", &[("return", &st)]);
    ctx.write("eval_returns.csv", &rec)?;
    stats_metrics(ctx, "", &st);
    ctx.metric("skipped_updates", curve.skipped_updates as f64);
    Ok(())
}

fn load_checkpoint(ctx: &Context) -> Result<AgentCheckpoint, CliError> {
    let path = ctx.resolve(ctx.cfg.checkpoint.as_ref().expect("validated"));
    let text = std::fs::read_to_string(&path)
        .map_err(|e| CliError::Config(format!("cannot read checkpoint {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: bad checkpoint: {e}", path.display())))
}

fn eval(ctx: &mut Context) -> Result<(), CliError> {
    let ck = load_checkpoint(ctx)?;
    let env = ctx.cfg.env.environment()?;
    let tc = ctx.cfg.train_config();
    let baseline = match &ck {
        AgentCheckpoint::Ap { baseline, .. } => Some(*baseline),
        _ => None,
    };
    let ctrl = PolicyController { policy: ck.policy()?, mode: ActionMode::Mean, baseline };
    let st = evaluate(&env, &ctrl, &tc, "eval", tc.eval_episodes)?;
    stats_metrics(ctx, "", &st);
    let pc_phi = ctx.cfg.agent.as_ref().map(|a| a.phi).or(baseline.map(|b| b.phi));
    let rec = match pc_phi {
        Some(phi) => {
            let pc = evaluate(&env, &PrescribedController::new(phi)?, &tc, "eval", tc.eval_episodes)?;
            stats_metrics(ctx, "pc_", &pc);
            ctx.metric("pc_phi", phi);
            returns_record(ctx, "evaluation_returns", &[("agent", &st), ("pc", &pc)])
        }
        None => returns_record(ctx, "evaluation_returns", &[("agent", &st)]),
    };
    ctx.write("eval_returns.csv", &rec)?;
    Ok(())
}

fn compare(ctx: &mut Context) -> Result<(), CliError> {
    let section = ctx.cfg.compare.clone().expect("validated");
    if !section.inputs.is_empty() {
        return tabulate(ctx, &section.inputs);
    }
    let env = ctx.cfg.env.environment()?;
    let tc = ctx.cfg.train_config();
    let acfg = ctx.cfg.agent.clone().expect("validated");
    let rows = pc_vs_ap_experiment(&env, &section.phis, &acfg, &tc)?;
    let mut rec = ctx.record(
        "pc_vs_ap",
        &["phi", "pc_mean", "pc_stderr", "ap_mean", "ap_stderr", "diff_mean", "diff_stderr", "winner"],
    );
    for r in &rows {
        let w = match r.winner {
            Winner::Pc => -1.0,
            Winner::Tie => 0.0,
            Winner::Ap => 1.0,
        };
        rec.push(vec![r.phi, r.pc.mean, r.pc.stderr, r.ap.mean, r.ap.stderr, r.diff_mean, r.diff_stderr, w]);
        ctx.note(&format!("phi_{}.winner", phi_tag(r.phi)), format!("{:?}", r.winner).to_lowercase());
    }
    ctx.note("winner_code", "-1 = pc, 0 = tie, 1 = ap".into());
    ctx.write("compare_table.csv", &rec)?;
    Ok(())
}

/// Tabulates earlier `eval` summaries; all must share one environment.
fn tabulate(ctx: &mut Context, inputs: &[PathBuf]) -> Result<(), CliError> {
    let mut summaries = Vec::new();
    for p in inputs {
        let path = ctx.resolve(p);
        let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
        let s: Summary = serde_json::from_str(&text)
            .map_err(|e| CliError::Refused(format!("{}: not a result summary: {e}", path.display())))?;
        summaries.push((path, s));
    }
    for (path, s) in &summaries {
        if s.env_hash != ctx.env_hash {
            return Err(CliError::Refused(format!(
                "{}: environment hash {} differs from this config's {}; refusing to compare",
                path.display(),
                s.env_hash,
                ctx.env_hash
            )));
        }
    }
    let mut rec = ctx.record("comparison", &["input", "mean_return", "median_return", "stderr"]);
    for (i, (path, s)) in summaries.iter().enumerate() {
        let get = |k: &str| s.metrics.get(k).copied().unwrap_or(f64::NAN);
        rec.push(vec![i as f64, get("mean_return"), get("median_return"), get("stderr")]);
        ctx.note(&format!("input_{i}"), path.display().to_string());
    }
    ctx.write("compare_table.csv", &rec)?;
    Ok(())
}

fn hybrid_eval(ctx: &mut Context) -> Result<(), CliError> {
    let ck = load_checkpoint(ctx)?;
    let AgentCheckpoint::Ap { baseline, optimizer, .. } = &ck else {
        return Err(CliError::Config("key `checkpoint`: hybrid-eval needs an AP checkpoint".into()));
    };
    let ap = APAgent::new(ck.policy()?, *baseline, *optimizer)?;
    let env = ctx.cfg.env.environment()?;
    let tc = ctx.cfg.train_config();
    let hy = ctx.cfg.hybrid.clone().unwrap_or_else(HybridConfig::default);
    let r = return_distribution_experiment(&env, &ap, &hy, &tc)?;
    let rec = returns_record(ctx, "return_distributions", &[("ap", &r.ap), ("pc", &r.pc), ("hybrid", &r.hybrid)]);
    ctx.write("return_distributions.csv", &rec)?;
    stats_metrics(ctx, "ap_", &r.ap);
    stats_metrics(ctx, "pc_", &r.pc);
    stats_metrics(ctx, "hybrid_", &r.hybrid);
    Ok(())
}
