use std::path::PathBuf;

use gconv::pipeline::{run_pipeline, verify_network, PipelineOptions};
use gconv::{parse_network, presets, NetworkIR};

fn corpus() -> Vec<(String, NetworkIR)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../networks");
    let mut out: Vec<_> = std::fs::read_dir(&dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .map(|p| {
            let text = std::fs::read_to_string(&p).unwrap();
            let name = p.file_stem().unwrap().to_string_lossy().into_owned();
            let net = parse_network(&text).unwrap_or_else(|e| panic!("{name}: {e}"));
            (name, net)
        })
        .collect();
    out.sort_by(|a, b| a.0.cmp(&b.0));
    assert!(out.len() >= 5);
    out
}

#[test]
fn every_preset_compiles_the_corpus() {
    for (name, net) in corpus() {
        for accel in presets() {
            for fuse in [false, true] {
                let opts = PipelineOptions { fuse, exchange: true };
                let out = run_pipeline(&net, &accel, opts)
                    .unwrap_or_else(|e| panic!("{name} on {}: {e}", accel.name));
                assert!(out.report.chain_length <= out.report.unfused_chain_length);
                assert!(out.report.perf.totals.cycles > 0);
            }
        }
    }
}

#[test]
fn corpus_matches_reference() {
    for (name, net) in corpus() {
        for fused in [false, true] {
            let s = verify_network(&net, 2, fused).unwrap_or_else(|e| panic!("{name}: {e}"));
            assert!(s.passed, "{name} fused={fused}: {:?}", s.mismatches);
        }
    }
}

#[test]
fn mobilenet_block_is_linear() {
    let (_, net) = corpus().into_iter().find(|(n, _)| n == "mobilenet_block").unwrap();
    assert_eq!(net.layers.len(), 4);
    for w in net.layers.windows(2) {
        assert_eq!(w[1].inputs, vec![w[0].id.clone()]);
    }
}
