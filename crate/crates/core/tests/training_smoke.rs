//! Short training runs on the real digit set. Skipped when the data is absent.

use std::path::PathBuf;

use symwd_core::data::{DataDir, SourceTag, Split};
use symwd_core::model::{ArchKind, ArchSpec, Network};
use symwd_core::training::{train_network, LossWeights, TrainConfig};

const IMAGES: usize = 5000;

fn data_dir() -> Option<DataDir> {
    let root = std::env::var_os("SYMWD_DATA")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data"));
    root.join("mnist/train-images-idx3-ubyte")
        .is_file()
        .then(|| DataDir::resolve(Some(&root)))
}

#[test]
fn loss_falls_over_first_three_epochs() {
    let Some(dir) = data_dir() else {
        eprintln!("skipping: digit training set not found");
        return;
    };
    let data = dir.load(SourceTag::Digits, Split::Train).unwrap().head(IMAGES).unwrap();
    let weights = LossWeights::new(0.5, 0.5).unwrap();
    let config = TrainConfig { epochs: 3, loss_weights: weights, ..TrainConfig::default() };
    let mut net = Network::build(ArchKind::Symbiotic, ArchSpec::default(), 0);
    let report = train_network(&mut net, &data, &config, &mut |_| {}).unwrap();

    let objective: Vec<f64> = report
        .log
        .iter()
        .map(|e| {
            f64::from(weights.classifier) * e.classifier_loss.unwrap()
                + f64::from(weights.generator) * e.generator_loss.unwrap()
        })
        .collect();
    let rises = objective.windows(2).filter(|w| w[1] > w[0]).count();
    assert!(rises <= 1, "{objective:?}");
    assert!(objective[2] < objective[0], "{objective:?}");
}
