//! Scores fusion outputs with all seven quality metrics (En, SD, MI,
//! FMI_dct, FMI_w, SSIM_a, VIF) and prints the CSV report, including the
//! degenerate case where the "fused" image is one of the sources.
//!
//!     cargo run --release --example quality_report

use nestfuse::{evaluate_pair, render_csv, synthetic_pair, FeatureMap};

fn main() {
    let mut rows = Vec::new();
    for seed in 0..4u64 {
        let (ir, vis) = synthetic_pair(seed, 64, 64);
        // A cheap stand-in fusion: the pixelwise average of the sources.
        let mean = FeatureMap::from_fn(64, 64, |y, x| {
            0.5 * (ir.get(0, y, x) + vis.get(0, y, x))
        });
        let report = evaluate_pair(&mean, &ir, &vis).expect("metrics");
        rows.push((format!("mean_fuse_{seed}"), report));
    }

    // Degenerate identity: fused == both sources scores SSIM_a = FMI = VIF = 1.
    let (ir, _) = synthetic_pair(99, 64, 64);
    let identity = evaluate_pair(&ir, &ir, &ir).expect("metrics");
    rows.push(("identity".to_string(), identity));

    print!("{}", render_csv(&rows));
    println!();
    println!(
        "identity row sanity: SSIM_a = {:.5}, FMI_dct = {:.5}, VIF = {:.5}, MI = 2 En = {:.5}",
        identity.ssim_a,
        identity.fmi_dct,
        identity.vif,
        identity.mutual_information
    );
}
