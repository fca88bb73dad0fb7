//! Directional ablation study over several training seeds on one corpus.
//! Arguments are dotted config overrides, e.g. `joint.iterations=200`.

use std::time::Instant;

use convqa::config::RunConfig;
use convqa::experiment::{seed_study, synthetic_splits, Variant};

fn main() -> convqa::Result<()> {
    let mut cfg = RunConfig::default();
    let mut seeds = vec![0, 1, 2, 3, 4];
    for arg in std::env::args().skip(1) {
        if let Some(list) = arg.strip_prefix("seeds=") {
            seeds = list.split(',').map(|s| s.parse().unwrap()).collect();
        } else {
            cfg.set(&arg)?;
        }
    }
    cfg.validate()?;
    let splits = synthetic_splits(&cfg)?;
    let clock = Instant::now();
    let (mut kl, mut no_kl) = (0.0, 0.0);
    let mut wins = [0; 4];
    for &seed in &seeds {
        let mut c = cfg.clone();
        c.seed = seed;
        let s = seed_study(&c, &splits)?;
        kl += s.pretrain_recall_kl;
        no_kl += s.pretrain_recall_no_kl;
        let full = s.f1(Variant::Full);
        print!(
            "seed {seed}: pre R@T kl {:.4} no_kl {:.4} | golden in T {} -> {} | F1",
            s.pretrain_recall_kl, s.pretrain_recall_no_kl, s.golden_in_t_identity, s.golden_in_t_trained
        );
        for (i, v) in Variant::ALL.into_iter().enumerate() {
            let r = s.rows.iter().find(|r| r.variant == v).unwrap();
            print!(" {v} {:.4}/{:.3}", r.report.f1, r.report.recall);
            wins[i] += (full >= s.f1(v)) as usize;
        }
        println!("  [{:.0?}]", clock.elapsed());
    }
    let n = seeds.len() as f64;
    println!("mean pre R@T kl {:.4} no_kl {:.4}; full>=variant wins {:?}", kl / n, no_kl / n, &wins[1..]);
    Ok(())
}
