//! Published ablation and comparison scores, used as table-format fixtures.

use respex::metrics::TableRow;

pub const ABLATION_GOLDEN: &str = include_str!("ablation.md");
pub const SOTA_GOLDEN: &str = include_str!("sota.md");

fn pct(v: f64) -> Option<f64> {
    Some(v / 100.0)
}

/// Dev UAR, Test UAR, Dev AS, Test SE, Test SP, Test AS.
pub fn ablation_rows() -> Vec<TableRow> {
    let rows: [(&str, [Option<f64>; 6]); 8] = [
        ("CNN8", [None, pct(40.36), pct(52.99), pct(39.42), pct(59.72), pct(49.57)]),
        ("CNN8-Att", [pct(38.51), pct(42.75), pct(49.56), pct(43.76), pct(49.65), pct(46.70)]),
        ("CNN8-Dila", [pct(34.75), pct(40.26), pct(53.27), pct(35.85), pct(69.92), pct(52.89)]),
        ("CNN8-Dila-Att", [pct(41.55), pct(45.45), pct(50.83), pct(49.62), pct(46.93), pct(48.27)]),
        ("ResNet", [pct(41.69), pct(45.33), pct(54.48), pct(43.67), pct(58.01), pct(50.84)]),
        ("ResNet-Att", [pct(37.59), pct(43.62), pct(47.66), pct(39.51), pct(62.76), pct(51.13)]),
        ("ResNet-Dila", [pct(37.20), pct(43.39), pct(52.65), pct(46.73), pct(44.59), pct(45.66)]),
        ("ResNet-Dila-Att", [pct(39.51), pct(46.82), pct(52.92), pct(51.83), pct(50.22), pct(51.02)]),
    ];
    rows.iter()
        .map(|(name, v)| TableRow {
            name: name.to_string(),
            dev_uar: v[0],
            test_uar: v[1],
            dev_as: v[2],
            test_se: v[3],
            test_sp: v[4],
            test_as: v[5],
        })
        .collect()
}

/// SE, SP, AS, UAR on the test set.
pub fn sota_rows() -> Vec<TableRow> {
    let rows: [(&str, [Option<f64>; 4]); 8] = [
        ("MFCC-HMM-GMM", [None, None, pct(39.56), None]),
        ("MFCC-Decision Tree", [pct(20.81), pct(78.05), pct(49.43), None]),
        ("STFT-Wavelet-SVM", [None, None, pct(49.86), None]),
        ("STFT-Wavelet-BiResNet", [pct(31.12), pct(69.20), pct(50.16), None]),
        ("STFT-ResNet-Attention", [pct(17.84), pct(81.25), pct(49.55), None]),
        ("LogMel-CNN8-Prototype", [pct(27.78), pct(72.96), pct(50.37), pct(36.16)]),
        ("CNN8-Dila", [pct(35.85), pct(69.92), pct(52.89), pct(40.26)]),
        ("ResNet-Dila-Att", [pct(51.83), pct(50.22), pct(51.02), pct(46.82)]),
    ];
    rows.iter()
        .map(|(name, v)| TableRow {
            name: name.to_string(),
            test_se: v[0],
            test_sp: v[1],
            test_as: v[2],
            test_uar: v[3],
            ..Default::default()
        })
        .collect()
}
