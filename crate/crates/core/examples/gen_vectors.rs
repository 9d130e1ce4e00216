//! Regenerates the shipped conformance vectors from the path-enumeration
//! oracle: `cargo run --example gen_vectors -- crates/core/data`.

use std::path::PathBuf;

use rand::Rng;
use sdctc::check::{random_ctc_case, random_sdctc_case, rows, sdctc_bruteforce, CtcVector, SdCtcVector, VectorFile};
use sdctc::ctc::ctc_bruteforce;
use sdctc::grid::ProbabilityGrid;
use sdctc::synth::sample_rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "crates/core/data".into()));
    let mut rng = sample_rng(2024, 0, 0);
    let mut ctc = Vec::new();
    while ctc.len() < 40 {
        let (probs, target) = random_ctc_case(6, 3, 3, &mut rng);
        let likelihood = ctc_bruteforce(probs.view(), &target)?;
        if likelihood > 0.0 || rng.random_bool(0.2) {
            ctc.push(CtcVector { probs: rows(probs.view()), target, likelihood });
        }
    }
    let mut sd = Vec::new();
    while sd.len() < 30 {
        let (ps, pv, ts) = random_sdctc_case(5, 2, 2, &mut rng);
        let loss = sdctc_bruteforce(&ps, &pv, &ts)?;
        if loss.is_finite() {
            sd.push(SdCtcVector {
                ps: rows(ps.probs()),
                pv: rows(pv.probs()),
                transcripts: ts.into_iter().map(|t| t.0).collect(),
                loss,
            });
        }
    }
    std::fs::write(dir.join("ctc_vectors.json"), serde_json::to_string_pretty(&VectorFile { version: 1, cases: ctc })?)?;
    std::fs::write(dir.join("sdctc_vectors.json"), serde_json::to_string_pretty(&VectorFile { version: 1, cases: sd })?)?;
    Ok(())
}
