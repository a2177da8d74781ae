use segattack_core::data::{generate_synthetic, SynthSpec};

fn main() {
    let out = std::env::temp_dir().join("synthcheck");
    let _ = std::fs::remove_dir_all(&out);
    for seed in 0..4u64 {
        let (train, eval) = SynthSpec::desk_preset(seed);
        let t = std::time::Instant::now();
        match generate_synthetic(&train, &out.join(format!("train{seed}"))) {
            Ok(m) => println!("seed {seed} train ok ({} imgs, {:?})", m.len(), t.elapsed()),
            Err(e) => println!("seed {seed} train FAIL: {e}"),
        }
        match generate_synthetic(&eval, &out.join(format!("eval{seed}"))) {
            Ok(m) => println!("seed {seed} eval ok ({} imgs)", m.len()),
            Err(e) => println!("seed {seed} eval FAIL: {e}"),
        }
    }
}
