//! Train the three loss arms on one synthetic world and compare them.
//!
//! Usage: cargo run --release -p cmpc-core --example ablation -- [seed] [epochs] [deviate-mode]

use std::time::Instant;

use cmpc_core::protocols::{EvalSpec, Evaluator};
use cmpc_core::synth::{generate, split_by_identity, TrainingSet, WorldConfig};
use cmpc_core::trainer::{train, LossMode, TrainConfig};

fn main() -> cmpc_core::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let seed: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(50);
    let mut world = WorldConfig {
        seed,
        ..WorldConfig::default()
    };
    if let Some(mode) = args.get(3) {
        world.deviate_mode = mode.parse()?;
    }
    let records = generate(&world)?;
    let split = split_by_identity(&records, 0.2, seed, true)?;
    let data = TrainingSet::from_records(&split.train)?;
    let evaluator = Evaluator::new(
        &split.test,
        &EvalSpec {
            seed,
            ..EvalSpec::default()
        },
    )?;
    for loss in [LossMode::Cid, LossMode::Cmpc, LossMode::CmpcRecal] {
        let t = Instant::now();
        let config = TrainConfig {
            loss,
            epochs,
            seed,
            ..TrainConfig::default()
        };
        let state = train(config, &data, None)?;
        let report = evaluator.evaluate_encoders(&state.voice, &state.face)?;
        let m = report.matching_for(cmpc_core::protocols::Stratum::U).unwrap();
        let v = report.verification_for(cmpc_core::protocols::Stratum::U).unwrap();
        let r = report.retrieval.as_ref().unwrap();
        let mut line = format!(
            "{loss:<10} match {:.3}/{:.3} auc {:.3} map {:.3}/{:.3}",
            m.v2f, m.f2v, v.auc, r.v2f, r.f2v
        );
        if let Some(rc) = &state.recalibration {
            let (mut dev, mut clean) = (Vec::new(), Vec::new());
            for (rec, &w) in split.train.iter().zip(&rc.weights) {
                if rec.truth.deviate.is_some() { dev.push(w) } else { clean.push(w) }
            }
            let mean = |x: &[f64]| x.iter().sum::<f64>() / x.len() as f64;
            line += &format!(" w dev {:.3} clean {:.3}", mean(&dev), mean(&clean));
        }
        println!("{line} ({:.1}s)", t.elapsed().as_secs_f64());
    }
    Ok(())
}
