//! Feature-geometry probe: how diverse are the capture-layer features, and
//! what do the similarity losses do over an attack run?

use segattack_core::adapter::load_model;
use segattack_core::attack::{fspgd, AttackConfig};
use segattack_core::data::load_manifest;
use segattack_core::featsim::gram;

fn main() {
    let root = std::env::temp_dir().join("deskprobe");
    let eval_manifest = load_manifest(&root.join("eval-0")).unwrap();
    let layer = std::env::args().nth(1).unwrap_or_else(|| "enc3".into());
    let weights = root.join("toy-cnn-a-0-e20.json");
    let model = load_model("toy-cnn-a", Some(&weights)).unwrap();

    let (image, _) = eval_manifest.load_pair(0).unwrap();
    let (_, features) = model.forward_with_features(&image, &layer).unwrap();
    println!(
        "layer {layer}: {} channels × {} pixels {:?}",
        features.channels(),
        features.pixels(),
        features.spatial()
    );
    let norms: Vec<f64> = features
        .values()
        .columns()
        .into_iter()
        .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let mean_norm = norms.iter().sum::<f64>() / norms.len() as f64;
    let zero_cols = norms.iter().filter(|&&n| n < 1e-9).count();
    println!("column norms: mean {mean_norm:.4}, zero columns {zero_cols}");

    let g = gram(&features).unwrap();
    let n = g.size();
    let mut sum = 0.0;
    let mut above = 0usize;
    let mut count = 0usize;
    for p in 0..n {
        for q in (p + 1)..n {
            let v = g.values()[(p, q)];
            sum += v;
            count += 1;
            if v > 0.5 {
                above += 1;
            }
        }
    }
    println!(
        "off-diagonal cosine: mean {:.4}, fraction > 0.5: {:.3}",
        sum / count as f64,
        above as f64 / count as f64
    );

    let cfg = AttackConfig {
        layer: Some(layer.clone()),
        ..Default::default()
    };
    let trace = fspgd(model.as_ref(), &image, &cfg).unwrap();
    for r in trace.records.iter().step_by(4) {
        println!(
            "t {:2}: λ {:.2} l_ex {:+.4} l_in {:+.4} K {}",
            r.t,
            r.lambda.unwrap(),
            r.l_ex.unwrap(),
            r.l_in.unwrap(),
            "", // mask count not in record
        );
    }
    let last = trace.records.last().unwrap();
    println!(
        "final: l_ex {:+.4} l_in {:+.4}",
        last.l_ex.unwrap(),
        last.l_in.unwrap()
    );
}
