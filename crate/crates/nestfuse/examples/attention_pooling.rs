//! Walks through the two attention mechanisms that drive fusion: spatial
//! weight maps from per-position activity, and channel weights from global
//! pooling (average, max, or nuclear norm), then their combination.
//!
//!     cargo run --release --example attention_pooling

use nestfuse::fusion::{
    channel_fuse, channel_weights, combine, global_pool, spatial_fuse, spatial_weight_maps,
};
use nestfuse::{FeatureMap, PoolingKind};

fn main() {
    // Two small 3-channel feature stacks: one with a bright corner, one
    // with a bright center band.
    let phi1 = FeatureMap::from_fn_chw(3, 6, 6, |c, y, x| {
        if y < 3 && x < 3 {
            1.0 + c as f32
        } else {
            0.1
        }
    });
    let phi2 = FeatureMap::from_fn_chw(3, 6, 6, |c, y, x| {
        if (2..4).contains(&y) && (1..5).contains(&x) {
            2.0 - 0.3 * c as f32
        } else {
            0.2
        }
    });

    let (b1, _b2) = spatial_weight_maps(&phi1, &phi2).expect("weights");
    println!("spatial weight of source 1 (rows of the 6x6 map):");
    for y in 0..6 {
        let row: Vec<String> = (0..6).map(|x| format!("{:.2}", b1.get(0, y, x))).collect();
        println!("  {}", row.join(" "));
    }

    println!("\nchannel weights per pooling kind (source 1 vs source 2):");
    for kind in PoolingKind::ALL {
        let (a1, a2) = channel_weights(&phi1, &phi2, kind).expect("weights");
        let fmt = |v: &[f32]| {
            v.iter()
                .map(|w| format!("{w:.3}"))
                .collect::<Vec<_>>()
                .join(", ")
        };
        println!("  {kind:>7}: alpha1 = [{}], alpha2 = [{}]", fmt(&a1), fmt(&a2));
    }

    println!("\nglobal pooling values of channel 0, source 1:");
    let c0 = phi1.channel(0);
    for kind in PoolingKind::ALL {
        let v = global_pool(c0, 6, 6, kind).expect("pool");
        println!("  {kind:>7}: {v:.4}");
    }

    let spatial = spatial_fuse(&phi1, &phi2).expect("spatial");
    let channel = channel_fuse(&phi1, &phi2, PoolingKind::Nuclear).expect("channel");
    let fused = combine(&spatial, &channel).expect("combine");
    println!(
        "\ncombined fusion of the two paths: value range [{:.3}, {:.3}]",
        fused.min_value(),
        fused.max_value()
    );

    // With identical sources every weight collapses to 1/2 and fusion is
    // exact identity, bit for bit.
    let identity = combine(
        &spatial_fuse(&phi1, &phi1).unwrap(),
        &channel_fuse(&phi1, &phi1, PoolingKind::Avg).unwrap(),
    )
    .unwrap();
    println!(
        "identity fusion max abs deviation: {:.1}",
        identity.max_abs_diff(&phi1)
    );
}
