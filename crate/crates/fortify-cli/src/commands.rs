//! Subcommand implementations.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use serde_json::json;

use fortify_core::bridges::{ModelInputs, OutcomeBridge, ResidualModel, TreatmentBridge};
use fortify_core::dataset::{load_csv, ObservedData};
use fortify_core::estimators::{
    estimate_dr, estimate_pdr, fit_fortified, EstimateResult, Method, ModelSet, ProjectionMode,
};
use fortify_core::inference::{
    bootstrap_se, confidence_interval, mc_study, McConfig, McReport,
    ReplicateOutcome,
};
use fortify_core::linalg::{mean, rms, sample_variance};
use fortify_core::projection::{
    AceBasis, AceConfig, AlphaCoefficients, LawPoint, ReferenceLaw, SubsetFamily, SubsetProjector,
};
use fortify_core::rng::SplitMix64;
use fortify_core::simulation::{
    remark_basis, true_nuisances, DiscreteToyLaw, Scenario, Section4Dgp,
};

use crate::config::RunConfig;
use crate::ResolvedCommon;

fn write_out(dir: &Path, name: &str, contents: &str) -> Result<(), String> {
    std::fs::create_dir_all(dir).map_err(|e| format!("cannot create {}: {e}", dir.display()))?;
    std::fs::write(dir.join(name), contents)
        .map_err(|e| format!("cannot write {}: {e}", dir.join(name).display()))
}

fn parse_methods(names: &[String]) -> Result<Vec<Method>, String> {
    let mut out = Vec::new();
    for name in names {
        out.push(Method::parse(name).ok_or_else(|| {
            format!("unknown method {name:?}; expected fPOR, fPIPW, fPMR, PDR<j> or DR")
        })?);
    }
    if out.is_empty() {
        return Err("estimator list is empty".into());
    }
    Ok(out)
}

fn model_set(cfg: &RunConfig, data: &ObservedData, gamma: usize) -> Result<ModelSet, String> {
    let (k, d_w, p) = (data.k(), data.d_w(), data.p());
    let h = match &cfg.h_terms {
        Some(terms) => OutcomeBridge::new(terms.clone(), d_w, p).map_err(|e| e.to_string())?,
        None => OutcomeBridge::default_linear(d_w, p),
    };
    let l = match &cfg.l_terms {
        Some(terms) => ResidualModel::new(terms.clone(), k, p, gamma).map_err(|e| e.to_string())?,
        None => ResidualModel::with_interactions(k, p, gamma, cfg.l_interaction_order.unwrap_or(1)),
    };
    let mut q = TreatmentBridge::new(k, p);
    q.sign_variant = cfg.q_sign_variant.unwrap_or(false);
    Ok(ModelSet { h, l, q, c2_terms: cfg.c2_terms.clone() })
}

fn ace_config(cfg: &RunConfig) -> AceConfig {
    cfg.ace.clone().unwrap_or_default()
}

/// One full-method estimate on one dataset. PDR and DR ignore gamma.
fn run_method(
    data: &ObservedData,
    cfg: &RunConfig,
    method: Method,
    gamma: usize,
) -> Result<EstimateResult, String> {
    let ace = ace_config(cfg);
    match method {
        Method::Dr => estimate_dr(data).map_err(|e| e.to_string()),
        Method::Pdr(idx) => estimate_pdr(data, idx, &ace).map_err(|e| e.to_string()),
        fortified => {
            let models = model_set(cfg, data, gamma)?;
            let inputs = ModelInputs::identity(data);
            let fit = fit_fortified(data, &inputs, &models, gamma, &ace, ProjectionMode::Ace)
                .map_err(|e| e.to_string())?;
            Ok(match fortified {
                Method::Fpor => fit.fpor(),
                Method::Fpipw => fit.fpipw(),
                _ => fit.fpmr(),
            })
        }
    }
}

fn results_csv(results: &[EstimateResult]) -> String {
    let mut out = String::from("gamma,method,tau_hat,se,ci_lower,ci_upper,converged\n");
    for r in results {
        let fmt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
        let _ = writeln!(
            out,
            "{},{},{:.6},{},{},{},{}",
            r.gamma,
            r.method.label(),
            r.tau_hat,
            fmt(r.se),
            fmt(r.ci_lower),
            fmt(r.ci_upper),
            r.diagnostics.converged
        );
    }
    out
}

pub fn estimate(
    cfg: RunConfig,
    common: &ResolvedCommon,
    data_flag: &Option<PathBuf>,
    gamma_flag: &Option<Vec<usize>>,
    methods_flag: &Option<Vec<String>>,
    bootstrap_flag: Option<usize>,
) -> Result<ExitCode, String> {
    let path = data_flag
        .clone()
        .or_else(|| cfg.data.clone())
        .ok_or("estimate needs --data or a data path in the config")?;
    let roles = cfg.roles.clone().ok_or("estimate needs column roles in the config")?;
    let data = load_csv(&path, &roles).map_err(|e| e.to_string())?;

    let gammas = gamma_flag
        .clone()
        .or_else(|| cfg.gamma.clone())
        .unwrap_or_else(|| vec![data.k()]);
    for &g in &gammas {
        if g < 1 || g > data.k() {
            return Err(format!("gamma={g} out of range 1..={} for this dataset", data.k()));
        }
    }
    let method_names = methods_flag
        .clone()
        .or_else(|| cfg.methods.clone())
        .unwrap_or_else(|| vec!["fPMR".to_string()]);
    let methods = parse_methods(&method_names)?;
    let seed = cfg.resolve_seed(common.seed_flag);

    let use_bootstrap = bootstrap_flag.is_some()
        || cfg.se_engine.as_deref() == Some("bootstrap");
    let mut boot_cfg = cfg.bootstrap.clone().unwrap_or_default();
    if let Some(b) = bootstrap_flag {
        boot_cfg.b_samples = b;
    }
    boot_cfg.seed = seed;

    let mut results: Vec<EstimateResult> = Vec::new();
    for &gamma in &gammas {
        for &method in &methods {
            // PDR and DR do not vary with gamma; emit them once.
            if matches!(method, Method::Pdr(_) | Method::Dr) && gamma != gammas[0] {
                continue;
            }
            let mut result = run_method(&data, &cfg, method, gamma)?;
            if use_bootstrap {
                let summary = bootstrap_se(
                    &data,
                    |resampled| run_method(resampled, &cfg, method, gamma).map(|r| r.tau_hat),
                    &boot_cfg,
                )
                .map_err(|e| e.to_string())?;
                let (lo, hi) = confidence_interval(result.tau_hat, summary.se, boot_cfg.ci_level);
                result.se = Some(summary.se);
                result.ci_lower = Some(lo);
                result.ci_upper = Some(hi);
                result.diagnostics.se_engine = Some("bootstrap".into());
            }
            results.push(result);
        }
    }

    let report = json!({
        "command": "estimate",
        "data": path,
        "gamma": gammas,
        "methods": method_names,
        "seed": seed,
        "se_engine": if use_bootstrap { "bootstrap" } else { "per-method plug-in" },
        "results": results,
    });
    write_out(&common.out, "report.json", &serde_json::to_string_pretty(&report).unwrap())?;
    write_out(&common.out, "report.csv", &results_csv(&results))?;
    println!("{}", results_csv(&results));
    Ok(ExitCode::SUCCESS)
}

pub fn simulate(
    cfg: RunConfig,
    common: &ResolvedCommon,
    n_flag: Option<usize>,
    tau_flag: Option<f64>,
) -> Result<ExitCode, String> {
    let n = n_flag.or(cfg.n).unwrap_or(3000);
    let tau_star = tau_flag.or(cfg.tau_star).unwrap_or(2.0);
    let seed = cfg.resolve_seed(common.seed_flag);
    let dgp = Section4Dgp { tau_star, n, seed };
    let (data, _) = dgp.generate().map_err(|e| e.to_string())?;
    write_out(&common.out, "data.csv", &data.to_csv_string())?;
    println!(
        "wrote {} rows (tau_star={tau_star}, seed={seed}) to {}",
        n,
        common.out.join("data.csv").display()
    );
    Ok(ExitCode::SUCCESS)
}

#[allow(clippy::too_many_arguments)]
pub fn mc(
    cfg: RunConfig,
    common: &ResolvedCommon,
    reps_flag: Option<usize>,
    n_flag: Option<usize>,
    scenario_flag: Option<&str>,
    methods_flag: &Option<Vec<String>>,
    bootstrap_flag: Option<usize>,
) -> Result<ExitCode, String> {
    let scenario = cfg.resolve_scenario(scenario_flag)?;
    let n = n_flag.or(cfg.n).unwrap_or(3000);
    let reps = reps_flag.or(cfg.reps).unwrap_or(200);
    if reps < 1 {
        return Err("mc needs at least one replicate".into());
    }
    let tau_star = cfg.tau_star.unwrap_or(2.0);
    let seed = cfg.resolve_seed(common.seed_flag);
    let method_names = methods_flag.clone().or_else(|| cfg.methods.clone()).unwrap_or_else(|| {
        if scenario == Scenario::None {
            ["fPOR", "fPIPW", "fPMR", "PDR1", "PDR2", "DR"].map(String::from).to_vec()
        } else {
            ["fPOR", "fPIPW", "fPMR"].map(String::from).to_vec()
        }
    });
    let methods = parse_methods(&method_names)?;

    let use_bootstrap =
        bootstrap_flag.is_some() || cfg.se_engine.as_deref() == Some("bootstrap");
    let mut boot_cfg = cfg.bootstrap.clone().unwrap_or_default();
    if let Some(b) = bootstrap_flag {
        boot_cfg.b_samples = b;
    }

    let ace = ace_config(&cfg);
    let mode = if scenario.identity_projection() {
        ProjectionMode::Identity
    } else {
        ProjectionMode::Ace
    };

    let bundle = |data: &ObservedData| -> ReplicateOutcome {
        let mut out: ReplicateOutcome = Vec::new();
        let fortified: Vec<Method> = methods
            .iter()
            .copied()
            .filter(|m| matches!(m, Method::Fpor | Method::Fpipw | Method::Fpmr))
            .collect();
        if !fortified.is_empty() {
            let shared = model_set(&cfg, data, 1)
                .and_then(|models| {
                    scenario.build_inputs(data).map_err(|e| e.to_string()).and_then(|inputs| {
                        fit_fortified(data, &inputs, &models, 1, &ace, mode)
                            .map_err(|e| e.to_string())
                    })
                });
            match shared {
                Ok(fit) => {
                    for m in &fortified {
                        let est = match m {
                            Method::Fpor => fit.fpor(),
                            Method::Fpipw => fit.fpipw(),
                            _ => fit.fpmr(),
                        };
                        out.push((*m, Ok(est)));
                    }
                }
                Err(e) => {
                    for m in &fortified {
                        out.push((*m, Err(e.clone())));
                    }
                }
            }
        }
        for m in &methods {
            match m {
                Method::Pdr(idx) => out
                    .push((*m, estimate_pdr(data, *idx, &ace).map_err(|e| e.to_string()))),
                Method::Dr => out.push((*m, estimate_dr(data).map_err(|e| e.to_string()))),
                _ => {}
            }
        }
        if use_bootstrap {
            for (method, outcome) in out.iter_mut() {
                if let Ok(est) = outcome {
                    let mut rep_cfg = boot_cfg.clone();
                    rep_cfg.seed = fortify_core::rng::derive_seed(est.tau_hat.to_bits(), 1);
                    match bootstrap_se(
                        data,
                        |resampled| {
                            bootstrap_point(resampled, &cfg, *method, scenario, &ace, mode)
                        },
                        &rep_cfg,
                    ) {
                        Ok(summary) => {
                            let (lo, hi) =
                                confidence_interval(est.tau_hat, summary.se, rep_cfg.ci_level);
                            est.se = Some(summary.se);
                            est.ci_lower = Some(lo);
                            est.ci_upper = Some(hi);
                        }
                        Err(e) => *outcome = Err(e.to_string()),
                    }
                }
            }
        }
        out
    };

    let mc_cfg = McConfig {
        n,
        reps,
        tau_star,
        seed,
        se_engine: if use_bootstrap { "bootstrap".into() } else { "influence".into() },
    };
    let report: McReport = mc_study(
        |n, seed| {
            Section4Dgp { tau_star, n, seed }.generate().expect("benchmark generation").0
        },
        bundle,
        &mc_cfg,
    );
    write_out(&common.out, "report.csv", &report.to_csv_string())?;
    write_out(
        &common.out,
        "report.json",
        &serde_json::to_string_pretty(&json!({
            "command": "mc",
            "scenario": format!("{scenario:?}"),
            "report": report,
        }))
        .unwrap(),
    )?;
    println!("{}", report.to_csv_string());
    Ok(ExitCode::SUCCESS)
}

fn bootstrap_point(
    data: &ObservedData,
    cfg: &RunConfig,
    method: Method,
    scenario: Scenario,
    ace: &AceConfig,
    mode: ProjectionMode,
) -> Result<f64, String> {
    match method {
        Method::Dr => estimate_dr(data).map(|r| r.tau_hat).map_err(|e| e.to_string()),
        Method::Pdr(idx) => {
            estimate_pdr(data, idx, ace).map(|r| r.tau_hat).map_err(|e| e.to_string())
        }
        fortified => {
            let models = model_set(cfg, data, 1)?;
            let inputs = scenario.build_inputs(data).map_err(|e| e.to_string())?;
            let fit = fit_fortified(data, &inputs, &models, 1, ace, mode)
                .map_err(|e| e.to_string())?;
            Ok(match fortified {
                Method::Fpor => fit.fpor().tau_hat,
                Method::Fpipw => fit.fpipw().tau_hat,
                _ => fit.fpmr().tau_hat,
            })
        }
    }
}

struct OracleOutcome {
    name: &'static str,
    status: &'static str,
    detail: String,
}

pub fn oracle_check(
    cfg: RunConfig,
    common: &ResolvedCommon,
    fixture: Option<&Path>,
) -> Result<ExitCode, String> {
    let seed = cfg.resolve_seed(common.seed_flag);
    let mut outcomes: Vec<OracleOutcome> = Vec::new();
    let mut record = |name: &'static str, result: Result<(bool, String), String>| {
        let outcome = match result {
            Ok((true, detail)) => OracleOutcome { name, status: "PASS", detail },
            Ok((false, detail)) => OracleOutcome { name, status: "FAIL", detail },
            Err(e) => OracleOutcome { name, status: "ERROR", detail: e },
        };
        println!("{} {} - {}", outcome.status, outcome.name, outcome.detail);
        outcomes.push(outcome);
    };

    // Coefficient recursion identities up to K = 6.
    record("alpha-recursion", {
        let mut worst = 0.0_f64;
        for k in 1..=6usize {
            for gamma in 1..=k {
                let a = AlphaCoefficients::compute(gamma, k).map_err(|e| e.to_string())?;
                for i in (gamma + 1)..=k {
                    let mut sum = 0.0;
                    for j in gamma..=i {
                        sum += fortify_core::projection::binomial(gamma, i - j) as f64
                            * a.value(j);
                    }
                    worst = worst.max(sum.abs());
                }
            }
        }
        Ok((worst <= 1e-12, format!("worst identity residual {worst:.2e} (tol 1e-12)")))
    });

    // Fixture-dependent checks share the loaded law.
    let law_result: Result<ReferenceLaw, String> = (|| {
        let toy = match fixture {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| format!("cannot read fixture {}: {e}", path.display()))?;
                DiscreteToyLaw::from_json(&text).map_err(|e| e.to_string())?
            }
            None => DiscreteToyLaw::correlated_fixture(),
        };
        toy.observable_law().map_err(|e| e.to_string())
    })();

    record("discrete-basis-membership", match &law_result {
        Ok(law) => {
            let basis = remark_basis(law);
            let mut worst = 0.0_f64;
            for (_, values) in &basis {
                worst =
                    worst.max(law.max_constraint_violation(values, 1).map_err(|e| e.to_string())?);
            }
            Ok((
                basis.len() == 13 && worst <= 1e-12,
                format!("13 spanning elements, worst conditional mean {worst:.2e} (tol 1e-12)"),
            ))
        }
        Err(e) => Err(format!("support error: {e}")),
    });

    record("structural-orthogonality", match &law_result {
        Ok(law) => {
            // Under a structural model whose residual has conditional mean Z2
            // given (A, Z), every constrained d satisfies E[d * Z2] = 0.
            let z2: Vec<f64> = law.points().iter().map(|p| p.z[1]).collect();
            let mut worst = 0.0_f64;
            for (_, values) in remark_basis(law) {
                let inner: f64 = law
                    .probabilities()
                    .iter()
                    .zip(values.iter().zip(&z2))
                    .map(|(p, (d, z))| p * d * z)
                    .sum();
                worst = worst.max(inner.abs());
            }
            Ok((worst <= 1e-12, format!("worst E[d*Z2] {worst:.2e} (tol 1e-12)")))
        }
        Err(e) => Err(format!("support error: {e}")),
    });

    // Iterative projection vs the closed form on a large discrete sample.
    record("iterative-vs-closed-form", {
        let toy = DiscreteToyLaw::independent_uniform();
        let sample = toy.sample(20_000, seed ^ 0x5555).map_err(|e| e.to_string())?;
        let n = sample.n();
        let mut counts = std::collections::HashMap::new();
        for i in 0..n {
            *counts
                .entry((
                    sample.z()[(i, 0)].to_bits(),
                    sample.z()[(i, 1)].to_bits(),
                    sample.a()[i].to_bits(),
                ))
                .or_insert(0usize) += 1;
        }
        let mut keys: Vec<_> = counts.keys().copied().collect();
        keys.sort_unstable();
        let points: Vec<LawPoint> = keys
            .iter()
            .map(|&(z1, z2, a)| {
                LawPoint::new(vec![f64::from_bits(z1), f64::from_bits(z2)], f64::from_bits(a))
            })
            .collect();
        let probs: Vec<f64> = keys.iter().map(|k| counts[k] as f64 / n as f64).collect();
        let law = ReferenceLaw::from_joint(points, probs).map_err(|e| e.to_string())?;
        let alphas = AlphaCoefficients::compute(1, 2).map_err(|e| e.to_string())?;
        let family = SubsetFamily::enumerate(2, 1).map_err(|e| e.to_string())?;
        let projector =
            SubsetProjector::from_data(&sample, &family, &AceBasis::SaturatedIndicators)
                .map_err(|e| e.to_string())?;
        let mut rng = SplitMix64::new(seed ^ 0xAAAA);
        let mut worst = 0.0_f64;
        for _ in 0..5 {
            let g_support: Vec<f64> =
                (0..law.len()).map(|_| 2.0 * rng.next_f64() - 1.0).collect();
            let d_support = law.project_closed_form(&g_support, &alphas).map_err(|e| e.to_string())?;
            let mut g_rows = Vec::with_capacity(n);
            let mut d_rows = Vec::with_capacity(n);
            for i in 0..n {
                let idx = law
                    .lookup(&[sample.z()[(i, 0)], sample.z()[(i, 1)]], sample.a()[i], &[])
                    .ok_or("sample point missing from the fitted law")?;
                g_rows.push(g_support[idx]);
                d_rows.push(d_support[idx]);
            }
            let (ace_rows, _) = projector.project(&g_rows, 1e-10, 500);
            let diff: Vec<f64> = ace_rows.iter().zip(&d_rows).map(|(a, b)| a - b).collect();
            worst = worst.max(rms(&diff));
        }
        Ok((worst <= 0.05, format!("worst empirical L2 distance {worst:.4} (tol 0.05)")))
    });

    // Benchmark-process moment identities with the true nuisance functions.
    record("benchmark-moment-identities", {
        let data = Section4Dgp { tau_star: 2.0, n: 200_000, seed: seed ^ 0x99 }
            .generate()
            .map_err(|e| e.to_string())?
            .0;
        let tn = true_nuisances(&data, 2.0);
        let n = data.n();
        let mut checks = Vec::new();
        let mut ok = true;
        for (name, rows) in [
            (
                "E[Z1 (Y-h-l)]",
                (0..n)
                    .map(|i| data.z()[(i, 0)] * (data.y()[i] - tn.h[i] - tn.l[i]))
                    .collect::<Vec<f64>>(),
            ),
            (
                "E[(-1)^(1-A) q (Y-h-l)]",
                (0..n)
                    .map(|i| {
                        let s = if data.a()[i] == 1.0 { 1.0 } else { -1.0 };
                        s * tn.q[i] * (data.y()[i] - tn.h[i] - tn.l[i])
                    })
                    .collect(),
            ),
            (
                "E[q(Z,1,X) A Y - q(Z,0,X)(1-A) Y] - tau",
                (0..n)
                    .map(|i| {
                        let s = if data.a()[i] == 1.0 { 1.0 } else { -1.0 };
                        s * tn.q[i] * data.y()[i] - 2.0
                    })
                    .collect(),
            ),
        ] {
            let m = mean(&rows);
            let se = (sample_variance(&rows) / n as f64).sqrt();
            if m.abs() > 3.0 * se {
                ok = false;
            }
            checks.push(format!("{name}: {m:.5} (3se {:.5})", 3.0 * se));
        }
        Ok((ok, checks.join("; ")))
    });

    // Nesting of the constraint spaces by exact enumeration, K <= 3.
    record("constraint-nesting", {
        let mut worst = 0.0_f64;
        for k in 1..=3usize {
            let mut points = Vec::new();
            for code in 0..(2 * 3usize.pow(k as u32)) {
                let a = (code % 2) as f64;
                let mut z = Vec::with_capacity(k);
                let mut rest = code / 2;
                for _ in 0..k {
                    z.push((rest % 3) as f64 - 1.0);
                    rest /= 3;
                }
                points.push(LawPoint::new(z, a));
            }
            let mut rng = SplitMix64::new(seed ^ (700 + k as u64));
            let raw: Vec<f64> = (0..points.len()).map(|_| 0.05 + rng.next_f64()).collect();
            let total: f64 = raw.iter().sum();
            let probs: Vec<f64> = raw.iter().map(|v| v / total).collect();
            let law = ReferenceLaw::from_joint(points, probs).map_err(|e| e.to_string())?;
            let g: Vec<f64> = (0..law.len()).map(|_| 2.0 * rng.next_f64() - 1.0).collect();
            for gamma in 1..=k {
                let alphas = AlphaCoefficients::compute(gamma, k).map_err(|e| e.to_string())?;
                let d = law.project_closed_form(&g, &alphas).map_err(|e| e.to_string())?;
                for gamma_prime in gamma..=k {
                    worst = worst
                        .max(law.max_constraint_violation(&d, gamma_prime).map_err(|e| e.to_string())?);
                }
            }
        }
        Ok((worst <= 1e-12, format!("worst conditional mean {worst:.2e} (tol 1e-12)")))
    });

    let all_pass = outcomes.iter().all(|o| o.status == "PASS");
    let report = json!({
        "command": "oracle-check",
        "seed": seed,
        "checks": outcomes
            .iter()
            .map(|o| json!({"name": o.name, "status": o.status, "detail": o.detail}))
            .collect::<Vec<_>>(),
        "all_pass": all_pass,
    });
    write_out(&common.out, "oracle.json", &serde_json::to_string_pretty(&report).unwrap())?;
    Ok(if all_pass { ExitCode::SUCCESS } else { ExitCode::from(2) })
}
