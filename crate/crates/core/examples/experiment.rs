//! End-to-end toy experiment: source-only baseline vs adapted model.
//!
//! `cargo run --release --example experiment -- [seed] [height] [width] [n_source] [n_target]`
//!
//! Target mIoU is measured on the adaptation images themselves. Set `BETA=0`
//! to drop the focal term.

use std::time::Instant;

use lse_core::pipeline::{RunConfig, Session};
use lse_core::selection::ImageId;
use lse_core::synth::{generate_scenes, DomainPair};

fn main() -> lse_core::Result<()> {
    env_logger::init();
    let args: Vec<u64> = std::env::args().skip(1).map(|a| a.parse().expect("integer")).collect();
    let seed = args.first().copied().unwrap_or(0);
    let h = args.get(1).copied().unwrap_or(32) as usize;
    let w = args.get(2).copied().unwrap_or(64) as usize;
    let n_src = args.get(3).copied().unwrap_or(200) as usize;
    let n_tgt = args.get(4).copied().unwrap_or(200) as usize;

    let pair = DomainPair::default_pair(h, w, seed);
    let source = generate_scenes(&pair.source, n_src)?;
    let target_pairs = generate_scenes(&pair.target, n_tgt)?;
    let target: Vec<(ImageId, _)> = target_pairs
        .iter()
        .enumerate()
        .map(|(i, (x, _))| (i as ImageId, x.clone()))
        .collect();

    let mut cfg = RunConfig::default();
    cfg.run.seed = seed;
    if let Ok(v) = std::env::var("BETA") {
        cfg.loss.beta = v.parse().expect("BETA must be a number");
    }
    let t0 = Instant::now();
    let mut s = Session::new(cfg.clone(), 6, h, w);
    s.train_source(&source, cfg.run.source_steps)?;
    let src = s.evaluate(&source)?.1;
    let base = s.evaluate(&target_pairs)?.1;
    println!(
        "source-only: src {:.4} tgt {:.4} ({:.1}s) iou {:?}",
        src.miou,
        base.miou,
        t0.elapsed().as_secs_f64(),
        base.iou.iter().map(|v| v.map(|x| (x * 100.0).round())).collect::<Vec<_>>()
    );
    for r in 0..cfg.run.rounds {
        let out = s.adapt_round(&source, &target, r)?;
        let rep = s.evaluate(&target_pairs)?.1;
        println!(
            "round {r}: selected {} h {:?} tgt {:.4} ({:.1}s) iou {:?}",
            out.selection.selected.len(),
            out.selection.thresholds.values.iter().map(|v| v.map(|x| (x * 100.0).round() / 100.0)).collect::<Vec<_>>(),
            rep.miou,
            t0.elapsed().as_secs_f64(),
            rep.iou.iter().map(|v| v.map(|x| (x * 100.0).round())).collect::<Vec<_>>()
        );
    }
    Ok(())
}
