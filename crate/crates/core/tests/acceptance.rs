//! End-to-end acceptance run: one PASS/FAIL line per property, non-zero exit
//! if any fails.

mod common;

use std::path::PathBuf;
use std::time::Instant;

use rand::Rng;
use tcpo_core::micropolicy::LossConfig;
use tcpo_core::preference::{
    apc_penalty, approximation_gap, apw_loss, bt_preference_prob, dpo_naive_loss, optimal_policy, q_value, tcpo_loss,
    BranchStats, PairStats,
};
use tcpo_core::questworld::{TaskCategory, ACT, BOS, EOS};
use tcpo_core::trainer::{
    evaluate, read_metrics_csv, run_kappa_sweep, run_online, run_sft, sample_efficiency, write_efficiency_csv,
    write_kappa_csv, write_metrics_csv, EfficiencyCell, MetricsPoint, Method, RandomActor, RunResult, TrainConfig,
    DEFAULT_KAPPAS,
};
use tcpo_core::trajectory::{step_scores, trajectory_score, ReplayBuffer, StepRecord, CachedScores};
use tcpo_core::micropolicy::SequenceScore;
use tcpo_core::{seed, Exec};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random_branch<R: Rng>(rng: &mut R) -> BranchStats {
    BranchStats {
        thought_logp: rng.random_range(-30.0..0.0),
        ref_joint_logp: rng.random_range(-30.0..0.0),
        action_prob: if rng.random_bool(0.1) { 1.0 } else { rng.random_range(1e-4..1.0) },
    }
}

fn random_stats<R: Rng>(rng: &mut R) -> PairStats {
    let n = rng.random_range(1..4);
    PairStats {
        win: random_branch(rng),
        lose: random_branch(rng),
        win_action_probs: (0..n).map(|_| rng.random_range(0.01..1.0)).collect(),
        win_ref_action_probs: (0..n).map(|_| rng.random_range(0.01..1.0)).collect(),
    }
}

fn gradient_oracle() -> Outcome {
    let t = Instant::now();
    let mut worst = 0.0f64;
    let mut lines = Vec::new();
    let mut instances = 0;
    for spec in common::all_specs() {
        let s = common::fd_check(&LossConfig::new(spec), 20, 41);
        instances += s.instances;
        worst = worst.max(s.max_rel_err);
        lines.push(format!("{} {:.1e}", spec.name(), s.max_rel_err));
    }
    let secs = t.elapsed().as_secs_f64();
    check(
        worst <= common::FD_TOL && instances >= 100 && secs <= 60.0,
        format!("{instances} instances, step {:e}, max rel err {worst:.2e} ({}) in {secs:.1} s", common::FD_STEP, lines.join(", ")),
    )
}

fn initialization_identity() -> Outcome {
    let ln2 = std::f64::consts::LN_2;
    let mut rng = seed::rng(2);
    let mut worst = 0.0f64;
    let mut apc_exact = true;
    for _ in 0..1000 {
        // θ = reference: the reference joint log-probability equals the
        // current thought plus action log-probability
        let p: f64 = rng.random_range(1e-3..=1.0);
        let side = |t: f64| BranchStats { thought_logp: t, ref_joint_logp: t + p.ln(), action_prob: p };
        let q: Vec<f64> = (0..3).map(|_| rng.random_range(0.01..1.0)).collect();
        let stats = PairStats {
            win: side(rng.random_range(-20.0..0.0)),
            lose: side(rng.random_range(-20.0..0.0)),
            win_action_probs: q.clone(),
            win_ref_action_probs: q.clone(),
        };
        let naive = dpo_naive_loss(&stats, 0.1).unwrap().loss;
        let full = tcpo_loss(&stats, 0.1, 0.1).unwrap();
        worst = worst.max((naive - ln2).abs()).max((full.loss - ln2).abs());
        apc_exact &= full.apc_penalty == 0.0 && apc_penalty(&q, &q).unwrap() == 0.0;
    }
    check(
        worst <= 1e-12 && apc_exact,
        format!("max |loss - ln 2| = {worst:.1e} over 1000 pairs (ln 2 = {ln2:.7}); apc_penalty exactly 0: {apc_exact}"),
    )
}

/// Small online setup shared by the harness checks.
fn small_config() -> TrainConfig {
    let mut cfg = TrainConfig::new(Method::Tcpo, 3e-4, vec![0, 1]);
    cfg.beta = 1.0;
    cfg.temperature = 1.0;
    cfg.max_env_steps = 600;
    cfg.start_training_samples = 200;
    cfg.eval_every = 200;
    cfg.eval_episodes = 10;
    cfg.profile_prompts = 16;
    cfg.grad_accum = 32;
    cfg.policy.embed = 8;
    cfg.policy.hidden = 16;
    cfg.world.weights = tcpo_core::questworld::CategoryWeights::from_array([0.5, 0.0, 0.0, 0.5]);
    cfg.sft.episodes = 20;
    cfg
}

fn same_run(a: &RunResult, b: &RunResult) -> bool {
    a.rows == b.rows && a.params.as_slice() == b.params.as_slice() && a.log == b.log && a.updates == b.updates
}

fn reduction_identities() -> Outcome {
    let mut rng = seed::rng(3);
    let mut bitwise = 0;
    for _ in 0..1000 {
        let s = random_stats(&mut rng);
        let beta = rng.random_range(0.01..2.0);
        let a = tcpo_loss(&s, beta, 0.0).unwrap().loss;
        let b = apw_loss(&s, beta).unwrap().loss;
        bitwise += (a.to_bits() == b.to_bits()) as usize;
    }
    let cfg = small_config();
    let sft = run_sft(&cfg, Exec::default()).map_err(|e| e.to_string())?;
    let (_, runs) = run_kappa_sweep(&cfg, &[0.0, 0.1], &sft, Exec::default()).map_err(|e| e.to_string())?;
    let apw = TrainConfig { method: Method::ApwOnly, ..cfg.clone() };
    let mut equal_runs = 0;
    let mut updates = 0;
    for (i, &s) in cfg.seeds.iter().enumerate() {
        let base = run_online(&apw, s, &sft.params, &sft.reference, Exec::default()).map_err(|e| e.to_string())?;
        equal_runs += same_run(&runs[0][i], &base) as usize;
        updates += base.updates;
    }
    check(
        bitwise == 1000 && equal_runs == cfg.seeds.len() && updates > 0,
        format!(
            "tcpo(kappa=0) == apw bitwise on {bitwise}/1000 pairs; kappa=0 sweep column == apw_only run on {equal_runs}/{} seeds ({updates} updates)",
            cfg.seeds.len()
        ),
    )
}

fn approximation_gap_algebra() -> Outcome {
    let mut rng = seed::rng(4);
    let (mut worst_lib, mut worst_direct) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let s = random_stats(&mut rng);
        let beta = rng.random_range(0.01..2.0);
        let joint = dpo_naive_loss(&s, beta).unwrap().margin;
        let weighted = apw_loss(&s, beta).unwrap().margin;
        // Δ written out from its definition
        let delta = |b: &BranchStats| b.action_prob.ln() + (1.0 - b.action_prob) * (b.thought_logp - b.ref_joint_logp);
        let direct = beta * (delta(&s.win) - delta(&s.lose));
        let lib = beta
            * (approximation_gap(s.win.action_prob, s.win.log_ratio()).unwrap()
                - approximation_gap(s.lose.action_prob, s.lose.log_ratio()).unwrap());
        worst_direct = worst_direct.max((joint - weighted - direct).abs());
        worst_lib = worst_lib.max((joint - weighted - lib).abs());
    }
    let at_one = [-50.0, -1.0, 0.0, 3.0].iter().all(|&r| approximation_gap(1.0, r).unwrap() == 0.0);
    check(
        worst_direct <= 1e-10 && worst_lib <= 1e-10 && at_one,
        format!("max residual {worst_direct:.1e} (direct), {worst_lib:.1e} (library) over 1000 pairs; gap(p=1) == 0 exactly: {at_one}"),
    )
}

fn optimal_policy_and_bradley_terry() -> Outcome {
    let mut rng = seed::rng(5);
    let (mut worst_pi, mut worst_bt) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let (pi_theta, pi_ref): (f64, f64) = (rng.random_range(1e-6..=1.0), rng.random_range(1e-6..=1.0));
        let beta = rng.random_range(0.01..5.0);
        let q = q_value(beta, pi_theta.ln(), pi_ref.ln());
        worst_pi = worst_pi.max((optimal_policy(pi_ref, q, beta) - pi_theta).abs());
        let (q1, q2) = (rng.random_range(-40.0..40.0), rng.random_range(-40.0..40.0));
        worst_bt = worst_bt.max((bt_preference_prob(q1, q2) + bt_preference_prob(q2, q1) - 1.0).abs());
    }
    check(
        worst_pi <= 1e-12 && worst_bt <= 1e-12,
        format!("max |pi_ref exp(Q/beta) - pi_theta| = {worst_pi:.1e}; max |bt(q1,q2) + bt(q2,q1) - 1| = {worst_bt:.1e}"),
    )
}

fn record(key: usize, score: f64, id: u64) -> StepRecord {
    let s = SequenceScore { token_logps: vec![-0.1; 3], act_index: 1, thought_logp: -0.2, action_logp: -0.1 };
    StepRecord {
        episode_id: id,
        step: 0,
        category: TaskCategory::Pick,
        context_key: format!("k{key}"),
        prompt: vec![BOS],
        response: vec![20, ACT, EOS],
        admissible: true,
        success: false,
        score,
        cached: Some(CachedScores { behavior: s.clone(), reference: s }),
    }
}

fn scoring_and_pairing() -> Outcome {
    let fixed = trajectory_score(true, &[false, false, false]) == 50.0 && trajectory_score(false, &[true]) == -1.0;
    let steps = step_scores(true, &[false, false, false], 0.99).unwrap();
    let direct = 0.99f64 * 0.99 * 50.0;
    let step_ok = (steps[0] - 49.005).abs() <= 1e-12 && (steps[0] - direct).abs() <= 1e-12 && steps[2] == 50.0;

    let mut rng = seed::rng(6);
    let choices = [50.0, 49.005, 0.0, -1.0, 48.0];
    let mut buffers = 0;
    let mut mismatches = 0;
    for _ in 0..2000 {
        let n = rng.random_range(0..=20);
        let records: Vec<StepRecord> = (0..n)
            .map(|i| {
                let s = if rng.random_bool(0.5) { choices[rng.random_range(0..choices.len())] } else { rng.random_range(-2.0..50.0) };
                record(rng.random_range(0..3), s, i as u64)
            })
            .collect();
        let mut buf = ReplayBuffer::new(20, None);
        for r in &records {
            buf.insert(r.clone()).unwrap();
        }
        let mut got: Vec<(u64, u64)> = buf.all_pairs().iter().map(|p| (p.win.episode_id, p.lose.episode_id)).collect();
        let mut want = Vec::new();
        for a in &records {
            for b in &records {
                if a.context_key == b.context_key && a.score - b.score > 1e-9 {
                    want.push((a.episode_id, b.episode_id));
                }
            }
        }
        got.sort();
        want.sort();
        mismatches += (got != want) as usize;
        buffers += 1;
    }
    check(
        fixed && step_ok && mismatches == 0,
        format!(
            "P(success, 0 invalid) = 50, P(failure, 1 invalid) = -1: {fixed}; score(t=1 of 3, gamma 0.99) = {:.12}; build_pairs vs enumeration mismatches {mismatches}/{buffers}",
            steps[0]
        ),
    )
}

fn desk_config() -> TrainConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/pick_desk.json");
    TrainConfig::from_json(&std::fs::read_to_string(path).expect("desk config")).expect("valid desk config")
}

/// Results of the desk-scale Pick runs, shared by the learning and
/// concentration checks.
struct DeskRuns {
    random: f64,
    start: f64,
    tcpo: Vec<RunResult>,
    dpo: Vec<RunResult>,
    tcpo_secs: f64,
}

fn desk_runs() -> Result<DeskRuns, String> {
    let cfg = desk_config();
    let exec = Exec::default();
    let t = Instant::now();
    let sampler = cfg.sampler();
    let random = evaluate(&RandomActor, &sampler, cfg.eval_episodes, &cfg.eval_seeds, exec).map_err(|e| e.to_string())?.weighted;
    let sft = run_sft(&cfg, exec).map_err(|e| e.to_string())?;
    let tcpo = cfg
        .seeds
        .iter()
        .map(|&s| run_online(&cfg, s, &sft.params, &sft.reference, exec))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| e.to_string())?;
    let tcpo_secs = t.elapsed().as_secs_f64();
    let dpo_cfg = TrainConfig { method: Method::DpoNaive, ..cfg.clone() };
    let dpo = cfg
        .seeds
        .iter()
        .map(|&s| run_online(&dpo_cfg, s, &sft.params, &sft.reference, exec))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| e.to_string())?;
    let start = tcpo[0].rows[0].eval.weighted;
    Ok(DeskRuns { random, start, tcpo, dpo, tcpo_secs })
}

fn desk_learning(d: &DeskRuns) -> Outcome {
    let finals: Vec<f64> = d.tcpo.iter().map(|r| r.final_row().eval.weighted).collect();
    let mean = finals.iter().sum::<f64>() / finals.len() as f64;
    let steps = d.tcpo.iter().map(|r| r.env_steps).max().unwrap_or(0);
    let cfg = desk_config();
    check(
        d.tcpo.len() >= 5 && d.random > 0.0 && mean >= 3.0 * d.random && steps <= 5000 && d.tcpo_secs <= 900.0 && cfg.active_categories() == [TaskCategory::Pick],
        format!(
            "random {:.3}, 3x = {:.3}; after behaviour cloning {:.3}; TCPO final over {} seeds {:?} mean {mean:.3} ({:.2}x random) within {steps} env steps; {:.0} s",
            d.random,
            3.0 * d.random,
            d.start,
            finals.len(),
            finals.iter().map(|x| (x * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
            mean / d.random,
            d.tcpo_secs
        ),
    )
}

fn apw_concentration(d: &DeskRuns) -> Outcome {
    let medians = |runs: &[RunResult]| -> Vec<f64> { runs.iter().map(|r| r.profile_median().unwrap_or(f64::NAN)).collect() };
    let (t, n) = (medians(&d.tcpo), medians(&d.dpo));
    let wins = t.iter().zip(&n).filter(|(a, b)| a >= b).count();
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(" ");
    check(
        wins >= 3 && t.len() == 5,
        format!("median sampled p(a|thought), TCPO [{}] vs dpo_naive [{}]: TCPO >= in {wins}/5 seeds", fmt(&t), fmt(&n)),
    )
}

fn harness_fidelity() -> Outcome {
    let cfg = small_config();
    let exec = Exec::default();
    let sft = run_sft(&cfg, exec).map_err(|e| e.to_string())?;
    let (table, runs) = run_kappa_sweep(&cfg, &DEFAULT_KAPPAS, &sft, exec).map_err(|e| e.to_string())?;
    let mut kappa_csv = Vec::new();
    write_kappa_csv(&table, &mut kappa_csv).map_err(|e| e.to_string())?;
    let kappa_text = String::from_utf8(kappa_csv).unwrap();
    let lines: Vec<&str> = kappa_text.lines().collect();
    let kappa_ok = lines.first() == Some(&"task,kappa=0.001,kappa=0.01,kappa=0.1,kappa=1")
        && lines[1..].iter().map(|l| l.split(',').next().unwrap()).eq(["Pick", "Pick2", "Clean", "Examine", "Avg"])
        && lines.iter().all(|l| l.split(',').count() == 5);

    let streams: Vec<(String, Vec<Vec<MetricsPoint>>)> = DEFAULT_KAPPAS
        .iter()
        .zip(&runs)
        .map(|(k, col)| (format!("tcpo(kappa={k})"), col.iter().map(|r| r.rows.iter().map(MetricsPoint::from).collect()).collect()))
        .collect();
    let eff = sample_efficiency(&streams, &[0.0, 1.5]);
    let mut eff_csv = Vec::new();
    write_efficiency_csv(&eff, &mut eff_csv).map_err(|e| e.to_string())?;
    let eff_text = String::from_utf8(eff_csv).unwrap();
    let censoring = eff.rows.iter().all(|(_, c)| c[0] == EfficiencyCell::Steps(0.0) && c[1] == EfficiencyCell::Censored { reached: 0, runs: 2 });
    let eff_ok = eff_text.lines().next() == Some("method,success_rate=0,success_rate=1.5")
        && eff_text.lines().count() == 1 + DEFAULT_KAPPAS.len()
        && eff_text.contains("censored(0/2)")
        && censoring;

    let metrics = |exec: Exec| -> Result<Vec<u8>, String> {
        let sft = run_sft(&cfg, exec).map_err(|e| e.to_string())?;
        let r = run_online(&cfg, 0, &sft.params, &sft.reference, exec).map_err(|e| e.to_string())?;
        let mut buf = Vec::new();
        write_metrics_csv(&r.rows, &mut buf).map_err(|e| e.to_string())?;
        Ok(buf)
    };
    let first = metrics(exec)?;
    let second = metrics(exec)?;
    let sequential = metrics(Exec::Sequential)?;
    let identical = first == second && first == sequential && read_metrics_csv(first.as_slice()).is_ok();
    check(
        kappa_ok && eff_ok && identical,
        format!(
            "kappa table {}x{} over {:?}: {kappa_ok}; efficiency table with censoring: {eff_ok}; rerun metrics byte-identical ({} bytes, parallel and sequential): {identical}",
            lines.len(),
            lines.first().map_or(0, |l| l.split(',').count()),
            DEFAULT_KAPPAS,
            first.len()
        ),
    )
}

fn main() {
    let total = Instant::now();
    let mut failed = 0;
    let mut report = |name: &str, outcome: Outcome| {
        match &outcome {
            Ok(d) => println!("PASS {name}: {d}"),
            Err(d) => {
                failed += 1;
                println!("FAIL {name}: {d}");
            }
        }
    };
    report("gradient_oracle", gradient_oracle());
    report("initialization_identity", initialization_identity());
    report("reduction_identities", reduction_identities());
    report("approximation_gap_algebra", approximation_gap_algebra());
    report("optimal_policy_and_bradley_terry", optimal_policy_and_bradley_terry());
    report("scoring_and_pairing", scoring_and_pairing());
    match desk_runs() {
        Ok(d) => {
            report("desk_scale_learning", desk_learning(&d));
            report("apw_concentration", apw_concentration(&d));
        }
        Err(e) => {
            report("desk_scale_learning", Err(e.clone()));
            report("apw_concentration", Err(e));
        }
    }
    report("harness_fidelity", harness_fidelity());
    println!("acceptance: {} failed, {:.0} s", failed, total.elapsed().as_secs_f64());
    if failed > 0 {
        std::process::exit(1);
    }
}
