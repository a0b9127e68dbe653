//! Trains one student per method on a synthetic task across several seeds
//! and prints test accuracy plus gradient-probe summaries. Useful for
//! sizing a task before committing to a config.
//!
//! Usage: methods_sweep [--seeds N] [--spread X] [--epochs N] [--lr X]
//!                      [--hidden N] [--samples-per-class N] [--diag-samples N]
//!                      [--rate] [--diag-train] [--lambda X] [--alpha X] [--beta X]
//!                      [--tau X] [--teacher-epochs N] [--teacher-wd X]

use std::time::Instant;

use spikedistill::data::{gen_synthetic, Split, SyntheticSpec};
use spikedistill::diagnostics::{run_diagnostics, temporal_accuracy_report, DiagnosticsReport, LayerStat};
use spikedistill::distill::{DistillConfig, Method};
use spikedistill::lif::LifParams;
use spikedistill::network::{Encoder, SpikingNet};
use spikedistill::optim::TrainPlan;
use spikedistill::rng::{substream_rng, Stream};
use spikedistill::teacher::{dataset_logits, mlp_accuracy, train_teacher};
use spikedistill::train::{encode_dataset, train_student};

fn arg(name: &str, default: f64) -> f64 {
    let mut args = std::env::args();
    while let Some(a) = args.next() {
        if a == name {
            return args
                .next()
                .and_then(|v| v.parse().ok())
                .unwrap_or_else(|| panic!("{name} needs a numeric value"));
        }
    }
    default
}

fn flag(name: &str) -> bool {
    std::env::args().any(|a| a == name)
}

fn pooled(stats: &[LayerStat]) -> (usize, f64) {
    let values: Vec<f64> = stats.iter().flat_map(|s| s.values.iter().copied()).collect();
    if values.is_empty() {
        (0, f64::NAN)
    } else {
        (values.len(), values.iter().sum::<f64>() / values.len() as f64)
    }
}

fn per_layer(stats: &[LayerStat]) -> String {
    stats
        .iter()
        .map(|s| match s.mean {
            Some(m) => format!("L{} {m:.4}", s.layer),
            None => format!("L{} -", s.layer),
        })
        .collect::<Vec<_>>()
        .join(" ")
}

fn line(tag: &str, report: &DiagnosticsReport) {
    let (np, pair) = pooled(&report.pair_share);
    let (nr, refa) = pooled(&report.ref_align);
    let (nk, kdr) = pooled(&report.kd_ratio);
    println!(
        "    {tag}: pair_share {pair:.4} (n={np})  ref_align {refa:.4} (n={nr})  kd_ratio {kdr:.4} (n={nk})"
    );
    println!(
        "      layers: pair [{}]  ref [{}]  kdr [{}]",
        per_layer(&report.pair_share),
        per_layer(&report.ref_align),
        per_layer(&report.kd_ratio)
    );
}

fn main() {
    let seeds = arg("--seeds", 5.0) as u64;
    let spread = arg("--spread", 0.35);
    let epochs = arg("--epochs", 30.0) as usize;
    let lr = arg("--lr", 0.2);
    let hidden = arg("--hidden", 32.0) as usize;
    let hidden2 = arg("--hidden2", 0.0) as usize;
    let spc = arg("--samples-per-class", 40.0) as usize;
    let diag_samples = arg("--diag-samples", 40.0) as usize;
    let encoder = if flag("--rate") { Encoder::Rate } else { Encoder::Constant };
    let diag_split = if flag("--diag-train") { Split::Train } else { Split::Test };
    let init_scale = arg("--init-scale", 1.0);
    let lif = LifParams {
        leak_alpha: arg("--lif-alpha", 0.5),
        ..LifParams::default()
    };
    let lambda = arg("--lambda", 1.0);
    let alpha = arg("--alpha", 0.6);
    let beta = arg("--beta", 0.15);
    let tau = arg("--tau", 4.0);

    let spec = SyntheticSpec {
        classes: 5,
        dimension: 16,
        samples_per_class: spc,
        spread,
    };
    let teacher_plan = TrainPlan {
        epochs: arg("--teacher-epochs", 40.0) as usize,
        batch_size: 16,
        learning_rate: 0.1,
        momentum: 0.9,
        weight_decay: arg("--teacher-wd", 0.0),
        cosine_schedule: true,
    };
    let student_plan = TrainPlan {
        epochs,
        batch_size: 16,
        learning_rate: lr,
        momentum: 0.9,
        weight_decay: 0.0,
        cosine_schedule: true,
    };
    let methods = [Method::TimestepKd, Method::Ela, Method::Sta, Method::Seal];
    let timesteps = 4;

    println!(
        "task: C=5 D=16 T={timesteps} spread={spread} spc={spc} hidden={hidden} \
         epochs={epochs} lr={lr} diag_samples={diag_samples} encoder={encoder:?} \
         diag_split={diag_split:?} lambda={lambda} alpha={alpha} beta={beta} tau={tau}"
    );

    let mut acc_sum = vec![0.0; methods.len()];
    let mut acc_by_seed = vec![vec![0.0; methods.len()]; seeds as usize];
    let mut probes: Vec<[f64; 6]> = Vec::new();
    let mut agg_dominates = 0usize;
    let mut cwe_positive = 0usize;
    for seed in 1..=seeds {
        let started = Instant::now();
        let (train, test) = gen_synthetic(&spec, seed).unwrap();
        let teacher = train_teacher(&train, &teacher_plan, &[64], seed).unwrap();
        let teacher_train_acc = mlp_accuracy(&teacher.net, &train).unwrap();
        let teacher_test_acc = mlp_accuracy(&teacher.net, &test).unwrap();
        let diag_set = if diag_split == Split::Train { &train } else { &test };
        let diag_logits = dataset_logits(&teacher.net, diag_set).unwrap();
        let encoded_test = encode_dataset(&test, encoder, timesteps, seed).unwrap();

        println!(
            "seed {seed}: teacher train {teacher_train_acc:.3} test {teacher_test_acc:.3}"
        );
        let mut probe = [f64::NAN; 6];
        for (mi, method) in methods.iter().enumerate() {
            let mut config = DistillConfig::default();
            config.method = *method;
            config.lambda_kd = lambda;
            config.alpha_ela = alpha;
            config.beta_sta = beta;
            config.temperature = tau;
            let mut dims = vec![16, hidden];
            if hidden2 > 0 {
                dims.push(hidden2);
            }
            dims.push(5);
            let mut init = substream_rng(seed, Stream::StudentInit, 0);
            let net = SpikingNet::random(&dims, lif, timesteps, init_scale, &mut init).unwrap();
            let arts = train_student(
                net,
                &train,
                Some(&teacher.logits),
                &student_plan,
                &config,
                encoder,
                seed,
            )
            .unwrap();
            let outputs: Vec<_> = encoded_test
                .iter()
                .map(|e| arts.net.forward(e).unwrap().logits)
                .collect();
            let report = temporal_accuracy_report(&outputs, test.labels()).unwrap();
            acc_sum[mi] += report.aggregated;
            acc_by_seed[(seed - 1) as usize][mi] = report.aggregated;
            if *method == Method::Seal {
                if report.per_timestep.iter().all(|&a| a <= report.aggregated) {
                    agg_dominates += 1;
                }
                if report.fraction_correct_with_errors() > 0.0 {
                    cwe_positive += 1;
                }
            }
            let train_acc = arts.metrics.last().unwrap().aggregated_accuracy;
            print!(
                "  {:<12} train {train_acc:.3} test {:.3} per-t [",
                method.as_str(),
                report.aggregated
            );
            for a in &report.per_timestep {
                print!(" {a:.3}");
            }
            println!(" ] correct-with-errors {:.3}", report.fraction_correct_with_errors());

            if matches!(method, Method::TimestepKd | Method::Seal) {
                let diag = run_diagnostics(
                    &arts.net,
                    diag_set,
                    Some(&diag_logits),
                    &config,
                    encoder,
                    diag_samples,
                    seed,
                )
                .unwrap();
                line(method.as_str(), &diag);
                let base = if *method == Method::TimestepKd { 0 } else { 3 };
                probe[base] = pooled(&diag.pair_share).1;
                probe[base + 1] = pooled(&diag.ref_align).1;
                probe[base + 2] = pooled(&diag.kd_ratio).1;
            }
            assert_eq!(test.split(), Split::Test);
        }
        probes.push(probe);
        println!("  seed time {:.1?}", started.elapsed());
    }
    println!("mean test accuracy over {seeds} seeds:");
    for (mi, method) in methods.iter().enumerate() {
        println!("  {:<12} {:.4}", method.as_str(), acc_sum[mi] / seeds as f64);
    }

    // Criterion scoreboard: per-seed wins and seed-mean inequalities.
    let n = seeds as f64;
    let wins = |f: &dyn Fn(&[f64; 6]) -> bool| probes.iter().filter(|p| f(p)).count();
    let pair_wins = wins(&|p: &[f64; 6]| p[3] > p[0]);
    let ref_wins = wins(&|p: &[f64; 6]| p[4] > 0.0);
    let kdr_wins = wins(&|p: &[f64; 6]| p[5] < p[2]);
    let gap_wins = acc_by_seed.iter().filter(|a| a[3] > a[0]).count();
    let mean = |i: usize| probes.iter().map(|p| p[i]).sum::<f64>() / n;
    let m = [mean(0), mean(1), mean(2), mean(3), mean(4), mean(5)];
    let acc = |mi: usize| acc_sum[mi] / n;
    println!(
        "probe means: kd pair {:.4} ref {:.4} kdr {:.4} | seal pair {:.4} ref {:.4} kdr {:.4}",
        m[0], m[1], m[2], m[3], m[4], m[5]
    );
    println!(
        "checks: pair {} ({}/{seeds})  ref {} ({}/{seeds})  kdr {} ({}/{seeds})",
        ok(m[3] > m[0]),
        pair_wins,
        ok(m[4] > 0.0),
        ref_wins,
        ok(m[5] < m[2]),
        kdr_wins
    );
    println!(
        "order: seal>=ela {}  seal>=sta {}  ela>=kd {}  sta>=kd {}  gap>0 ({gap_wins}/{seeds})",
        ok(acc(3) >= acc(1)),
        ok(acc(3) >= acc(2)),
        ok(acc(1) >= acc(0)),
        ok(acc(2) >= acc(0)),
    );
    println!(
        "temporal: agg-dominates ({agg_dominates}/{seeds})  correct-with-errors>0 ({cwe_positive}/{seeds})"
    );
}

fn ok(b: bool) -> &'static str {
    if b {
        "PASS"
    } else {
        "FAIL"
    }
}
