//! Shared fixtures for the benchmarks in `benches/`.

use gconv::{parse_network, NetworkIR};

pub const CORPUS: [(&str, &str); 5] = [
    ("alexnet_like", include_str!("../../../networks/alexnet_like.json")),
    ("mobilenet_block", include_str!("../../../networks/mobilenet_block.json")),
    ("resnet_block", include_str!("../../../networks/resnet_block.json")),
    ("inception_concat", include_str!("../../../networks/inception_concat.json")),
    ("batchnorm_train", include_str!("../../../networks/batchnorm_train.json")),
];

pub fn corpus() -> Vec<(&'static str, NetworkIR)> {
    CORPUS
        .iter()
        .map(|(name, text)| (*name, parse_network(text).expect("corpus network parses")))
        .collect()
}

#[cfg(test)]
mod tests {
    #[test]
    fn corpus_parses() {
        assert_eq!(super::corpus().len(), 5);
    }
}
