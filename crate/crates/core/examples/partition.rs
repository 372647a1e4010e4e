//! Atrous partitioning of a small labelled map: every sub-image collects the
//! pixels that share a residue modulo the dilation rate, and departitioning
//! restores the original exactly.
//!
//! ```text
//! cargo run --release --example partition
//! ```

use accvit::partition::{departition_dilated, departition_windows, partition_dilated, partition_windows, PartitionSpec, WindowSpec};
use accvit::tensor::Tensor;

fn show(label: &str, t: &Tensor<f32>) {
    let d = t.dims();
    let (h, w) = (d[2], d[3]);
    println!("{label} {d:?}");
    for img in 0..d[0] {
        for r in 0..h {
            let row: Vec<String> = (0..w).map(|c| format!("{:>3}", t.get(&[img, 0, r, c]))).collect();
            println!("  [{img}] {}", row.join(""));
        }
    }
}

fn main() -> accvit::Result<()> {
    let x = Tensor::<f32>::from_fn(&[1, 1, 8, 8], |i| i as f32)?;
    show("input", &x);
    for level in 1..=2 {
        let spec = PartitionSpec::new(level, (8, 8))?;
        let sub = partition_dilated(&x, &spec)?;
        let label = format!("level {level} (rate {}): {} sub-images of {:?}", spec.rate, spec.sub_images(), spec.sub_hw);
        if level == 1 {
            show(&label, &sub);
        } else {
            let first: Vec<f32> = sub.data()[..spec.sub_hw.0 * spec.sub_hw.1].to_vec();
            println!("{label}; sub-image 0 holds {first:?}");
        }
        assert_eq!(departition_dilated(&sub, &spec)?, x);
    }

    // Window partition of the rate-2 sub-images into 2×2 windows.
    let spec = PartitionSpec::new(1, (8, 8))?;
    let sub = partition_dilated(&x, &spec)?;
    let ws = WindowSpec::new(2, spec.sub_hw)?;
    let windows = partition_windows(&sub, &ws)?;
    println!("windows {:?} (windows, tokens, channels)", windows.dims());
    let first: Vec<f32> = (0..ws.tokens()).map(|t| windows.get(&[0, t, 0])).collect();
    println!("first window tokens {first:?}");
    assert_eq!(departition_windows(&windows, &ws)?, sub);

    match PartitionSpec::new(3, (12, 12)) {
        Err(e) => println!("12×12 at level 3: {e}"),
        Ok(_) => unreachable!(),
    }
    Ok(())
}
