//! Runs the desk ablation for a set of modes and seeds.
//!
//! Usage: `cargo run --release --example ablation -- [config.json] [seeds] [modes]`

use std::time::Instant;

use passage_distill::experiment::DeskExperiment;
use passage_distill::Mode;

fn main() -> passage_distill::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let exp: DeskExperiment = match args.first() {
        Some(p) if p != "-" => serde_json::from_str(&std::fs::read_to_string(p).expect("read config")).expect("parse config"),
        _ => DeskExperiment::default(),
    };
    let seeds: Vec<u64> = args
        .get(1)
        .map(|s| s.split(',').map(|x| x.parse().expect("seed")).collect())
        .unwrap_or_else(|| vec![0, 1, 2]);
    let modes: Vec<Mode> = args
        .get(2)
        .map(|s| s.split(',').map(|x| x.parse().expect("mode")).collect())
        .unwrap_or_else(|| vec![Mode::Basic, Mode::Sd, Mode::Wd, Mode::Fnf, Mode::Full]);
    let mut means = vec![0.0; modes.len()];
    for &seed in &seeds {
        let prep = exp.prepare(seed)?;
        println!("seed {seed} overlap oracle mrr {:.4}", overlap_mrr(&prep));
        for (i, &mode) in modes.iter().enumerate() {
            let t = Instant::now();
            let out = exp.run(&prep, mode, seed)?;
            let h = &out.history;
            let curve: Vec<String> = h.epochs.iter().map(|e| format!("{:.3}", e.heldout_mrr10.unwrap_or(f64::NAN))).collect();
            let last = h.epochs.last().expect("epochs");
            println!(
                "seed {seed} {mode:6} mrr {:.4} init {:.3} ({:.1}s) masked {:.3} ce {:.3} de {:.3} curve [{}]",
                h.final_mrr10().unwrap_or(f64::NAN),
                h.initial_mrr10.unwrap_or(f64::NAN),
                t.elapsed().as_secs_f64(),
                last.masked_rate,
                last.l_ce,
                last.l_de,
                curve.join(" ")
            );
            means[i] += h.final_mrr10().unwrap_or(f64::NAN) / seeds.len() as f64;
        }
    }
    for (m, v) in modes.iter().zip(&means) {
        println!("mean {m:6} {v:.4}");
    }
    Ok(())
}

fn overlap_mrr(prep: &passage_distill::experiment::Prepared) -> f64 {
    use std::collections::HashSet;
    let mut total = 0.0;
    for (qid, q) in &prep.heldout.queries {
        let qs: HashSet<u32> = q.real().iter().copied().collect();
        let mut scored: Vec<(usize, &String)> = prep
            .heldout
            .docs
            .iter()
            .zip(&prep.heldout.doc_ids)
            .map(|(d, id)| (d.real().iter().filter(|t| qs.contains(t)).count(), id))
            .collect();
        scored.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(b.1)));
        if let Some(r) = scored.iter().take(10).position(|(_, id)| prep.heldout.qrels.is_relevant(qid, id)) {
            total += 1.0 / (r + 1) as f64;
        }
    }
    total / prep.heldout.queries.len() as f64
}
