//! End-to-end acceptance suite: one PASS/FAIL line per criterion, nonzero
//! exit if any fails. Criteria 5 to 8 train at the default desk-scale
//! configuration and take several minutes each.

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::*;
use semfuse::checkpoint::Checkpoint;
use semfuse::data::{generate_synthetic, Split, SynthSpec};
use semfuse::train::{
    run_ablation, semantic_train, warm_start, AblationPlan, AblationRow, LogEvent, ROW_OURS,
};
use semfuse::{AttentionVariant, FusionModel, ImagePair, LabelPalette, TrainConfig};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

struct Suite {
    failed: usize,
}

impl Suite {
    fn run(&mut self, id: usize, name: &str, budget: Duration, f: impl FnOnce() -> Verdict) {
        let t = Instant::now();
        let v = f();
        let elapsed = t.elapsed();
        let pass = v.pass && elapsed < budget;
        if !pass {
            self.failed += 1;
        }
        let late = if elapsed < budget { "" } else { " over budget" };
        println!(
            "{} {id}. {name}: {} ({:.1}s / {}s{late})",
            if pass { "PASS" } else { "FAIL" },
            v.detail,
            elapsed.as_secs_f64(),
            budget.as_secs()
        );
    }
}

fn minutes(m: u64) -> Duration {
    Duration::from_secs(60 * m)
}

/// Mean `|I_f − (I_ir + I_vis)/2|` over whole images.
fn average_deviation(model: &FusionModel, pairs: &[ImagePair]) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for p in pairs {
        let f = model.forward(p).unwrap();
        for ((&f, &a), &b) in f
            .pixels()
            .iter()
            .zip(p.ir.pixels())
            .zip(p.vis_luma.pixels())
        {
            sum += (f - 0.5 * (a + b)).abs();
            n += 1;
        }
    }
    sum / n as f64
}

fn attention() -> Verdict {
    let err = attention_max_error(200, 1);
    verdict(
        err <= 1e-6,
        format!("max abs error {err:.2e} over 200 instances"),
    )
}

fn losses() -> Verdict {
    let errors = loss_max_errors(100, 2);
    let fixtures = loss_fixture_failures();
    let worst = errors.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    let pass = worst <= 1e-6 && fixtures.is_empty();
    let mut detail = errors
        .iter()
        .map(|(n, e)| format!("{n} {e:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    if !fixtures.is_empty() {
        detail.push_str(&format!("; fixtures failed: {}", fixtures.join("; ")));
    }
    verdict(pass, detail)
}

fn gradients() -> Verdict {
    let mut problems = Vec::new();
    let mut compared = 0;
    let mut kinked = 0;
    for (i, loss) in CheckedLoss::ALL.into_iter().enumerate() {
        let check = gradient_check(loss, AttentionVariant::Sla, 10, 1e-3, 30 + i as u64);
        compared += check.checked(1e-6);
        kinked += check.kinked;
        if check.samples.len() < 10 {
            problems.push(format!("{loss:?}: {} smooth samples", check.samples.len()));
        }
        for s in check.failures(1e-6, 1e-4) {
            problems.push(format!(
                "{loss:?} {}[{}] rel {:.1e}",
                s.param,
                s.index,
                s.rel_error()
            ));
        }
    }
    let detail = format!("{compared} gradients compared, {kinked} kinked draws skipped");
    if problems.is_empty() {
        verdict(true, detail)
    } else {
        verdict(false, format!("{detail}; {}", problems.join(", ")))
    }
}

fn metrics() -> Verdict {
    let mut bad = Vec::new();
    for (name, got, want) in metric_fixtures().into_iter().chain(confusion_fixture()) {
        if (got - want).abs() > 1e-9 {
            bad.push(format!("{name}: {got} != {want}"));
        }
    }
    verdict(
        bad.is_empty(),
        if bad.is_empty() {
            "all fixtures exact".into()
        } else {
            bad.join(", ")
        },
    )
}

struct Shared {
    config: TrainConfig,
    train: Vec<ImagePair>,
    val: Vec<ImagePair>,
    theta: Option<Checkpoint>,
    warm_deviation: f64,
}

fn warm(shared: &mut Shared) -> Verdict {
    let cfg = &shared.config;
    let out = match warm_start(
        FusionModel::new(cfg).unwrap(),
        &shared.train,
        cfg,
        &mut |_: &LogEvent| {},
    ) {
        Ok(o) => o,
        Err(e) => return verdict(false, e.to_string()),
    };
    let last = *out.state.epoch_means.last().unwrap();
    let model = out.checkpoint.fusion.clone();
    let dev = average_deviation(&model, &shared.train);
    shared.warm_deviation = average_deviation(&model, &shared.val);
    shared.theta = Some(out.checkpoint);
    verdict(
        last < 0.02 && dev < 0.02,
        format!(
            "{} epochs, final mean L_WS {last:.4}, deviation from average {dev:.4}",
            out.state.epoch_means.len()
        ),
    )
}

fn semantic(shared: &Shared) -> Verdict {
    let Some(theta) = &shared.theta else {
        return verdict(false, "no warm-start snapshot");
    };
    let mut min_corr = f64::INFINITY;
    let mut steps = 0;
    let out = semantic_train(
        Some(theta),
        &shared.train,
        &shared.val,
        &shared.config,
        &mut |e: &LogEvent| {
            if let LogEvent::Step(r) = e {
                min_corr = min_corr.min(r.corr_sum);
                steps += 1;
            }
        },
    );
    let out = match out {
        Ok(o) => o,
        Err(e) => return verdict(false, e.to_string()),
    };
    let v = &out.state.validation;
    let (first, last) = (v.first().unwrap(), v.last().unwrap());
    let ratio = last.sem / first.sem;
    verdict(
        ratio <= 0.7 && last.miou >= 0.5 && min_corr > 0.2,
        format!(
            "{} epochs, val L_sem {:.3} -> {:.3} (ratio {ratio:.3}), final val mIoU {:.3}, min corr sum {min_corr:.3} over {steps} steps",
            v.len() - 1,
            first.sem,
            last.sem,
            last.miou
        ),
    )
}

fn without_sem(shared: &Shared) -> Verdict {
    let Some(theta) = &shared.theta else {
        return verdict(false, "no warm-start snapshot");
    };
    let cfg = TrainConfig {
        sem_loss: false,
        ..shared.config.clone()
    };
    let out = match semantic_train(
        Some(theta),
        &shared.train,
        &shared.val,
        &cfg,
        &mut |_: &LogEvent| {},
    ) {
        Ok(o) => o,
        Err(e) => return verdict(false, e.to_string()),
    };
    let dev = average_deviation(&out.last.fusion, &shared.val);
    let shift = (dev - shared.warm_deviation).abs();
    verdict(
        shift <= 0.03,
        format!(
            "val deviation from average {:.4} after warm start, {dev:.4} after semantic phase (shift {shift:.4})",
            shared.warm_deviation
        ),
    )
}

fn ablation(shared: &Shared) -> Verdict {
    let full = AblationPlan::default_plan(&shared.config, &LabelPalette::synthetic());
    let rows: Vec<AblationRow> = full
        .rows
        .into_iter()
        .filter(|r| [ROW_OURS, "w/o WS", "w/o L_reg"].contains(&r.name.as_str()))
        .collect();
    let plan = AblationPlan { rows };
    let results = run_ablation(
        &plan,
        &shared.train,
        &shared.val,
        &LabelPalette::synthetic(),
        &mut |_: &LogEvent| {},
    );
    let mut miou = Vec::new();
    for r in &results {
        match &r.outcome {
            Ok(report) => miou.push((r.name.as_str(), report.miou().unwrap_or(f64::NAN))),
            Err(e) => return verdict(false, format!("{}: {e}", r.name)),
        }
    }
    let ours = miou.iter().find(|(n, _)| *n == ROW_OURS).unwrap().1;
    let pass = miou.iter().all(|&(_, m)| ours >= m - 0.02);
    let detail = miou
        .iter()
        .map(|(n, m)| format!("{n} {m:.3}"))
        .collect::<Vec<_>>()
        .join(", ");
    verdict(pass, format!("val mIoU: {detail}"))
}

fn determinism() -> Verdict {
    let spec = SynthSpec {
        size: 32,
        count: 8,
        ..SynthSpec::default()
    };
    let train = generate_synthetic(&spec).unwrap();
    let val = generate_synthetic(
        &SynthSpec {
            count: 4,
            ..spec.clone()
        }
        .for_split(Split::Val),
    )
    .unwrap();
    let cfg = TrainConfig {
        warm_start_epochs: 3,
        semantic_epochs: 3,
        ..TrainConfig::default()
    };
    let pipeline = || {
        let w = warm_start(
            FusionModel::new(&cfg).unwrap(),
            &train,
            &cfg,
            &mut |_: &LogEvent| {},
        )
        .unwrap();
        let s = semantic_train(
            Some(&w.checkpoint),
            &train,
            &val,
            &cfg,
            &mut |_: &LogEvent| {},
        )
        .unwrap();
        let mut trace = w.state.loss_trace();
        trace.extend(s.state.loss_trace());
        let sums = [
            w.checkpoint.checksum(),
            s.best.checksum(),
            s.last.checksum(),
        ];
        (trace, sums, s.last)
    };
    let (trace_a, sums_a, last) = pipeline();
    let (trace_b, sums_b, _) = pipeline();
    let same_trace = trace_a
        .iter()
        .map(|v| v.to_bits())
        .eq(trace_b.iter().map(|v| v.to_bits()));

    let restored = Checkpoint::from_bytes(&last.to_bytes()).unwrap();
    let round_trip = val.iter().all(|p| {
        let a = last.fusion.forward(p).unwrap();
        let b = restored.fusion.forward(p).unwrap();
        let bits = |i: &semfuse::Image| i.pixels().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        let seg = |c: &Checkpoint| c.seg.as_ref().unwrap().seg_forward(&a).unwrap();
        bits(&a) == bits(&b) && seg(&last) == seg(&restored)
    });
    verdict(
        same_trace && sums_a == sums_b && round_trip,
        format!(
            "{} logged losses identical: {same_trace}, checksums identical: {}, round trip bit-exact: {round_trip}",
            trace_a.len(),
            sums_a == sums_b
        ),
    )
}

fn main() -> ExitCode {
    let mut suite = Suite { failed: 0 };
    suite.run(1, "attention oracle", Duration::from_secs(10), attention);
    suite.run(2, "loss oracles", Duration::from_secs(10), losses);
    suite.run(3, "gradient checks", minutes(2), gradients);
    suite.run(4, "metric oracles", Duration::from_secs(1), metrics);

    let mut shared = Shared {
        config: TrainConfig::default(),
        train: generate_synthetic(&SynthSpec::default().for_split(Split::Train)).unwrap(),
        val: generate_synthetic(
            &SynthSpec {
                count: 16,
                ..SynthSpec::default()
            }
            .for_split(Split::Val),
        )
        .unwrap(),
        theta: None,
        warm_deviation: f64::NAN,
    };
    suite.run(5, "warm-start convergence", minutes(5), || {
        warm(&mut shared)
    });
    suite.run(6, "semantic phase", minutes(20), || semantic(&shared));
    suite.run(7, "ablation directionality", minutes(90), || {
        ablation(&shared)
    });
    suite.run(8, "w/o L_sem stays at the average", minutes(10), || {
        without_sem(&shared)
    });
    suite.run(9, "determinism and round trip", minutes(10), determinism);

    if suite.failed == 0 {
        println!("acceptance: all 9 criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {} of 9 criteria failed", suite.failed);
        ExitCode::FAILURE
    }
}
