//! Latency measurements at benchmark scale. Everything runs inside one test
//! so timed regions never overlap with other tests of this binary.

use specdec_lab::bench::{decompose_draft, measure_draft, measure_head, nu_of};
use specdec_lab::heads::{DraftHead, FullHead};
use specdec_lab::models::{BackboneConfig, DrafterBackbone, TargetConfig, ToyTargetModel};
use specdec_lab::seed::rng_for;
use specdec_lab::TokenId;

const V: usize = 131_072;

fn full_head(d: usize, seed: u64) -> DraftHead<f32> {
    let mut rng = rng_for(seed, "latency-test");
    DraftHead::Full(FullHead::random(V, d, &mut rng))
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs[xs.len() / 2]
}

#[test]
fn benchmark_scale_latency() {
    // Larger hidden size costs strictly more.
    let small = measure_head(&full_head(1024, 1), 1, 15, 2, 0).unwrap();
    let big_head = full_head(2048, 2);
    let big = measure_head(&big_head, 1, 15, 2, 0).unwrap();
    assert!(
        big.median_s > small.median_s,
        "d=2048 {} vs d=1024 {}",
        big.median_s,
        small.median_s
    );

    // Repeatability and the full-vs-full ratio.
    let a = measure_head(&big_head, 1, 30, 2, 0).unwrap();
    let b = measure_head(&big_head, 1, 30, 2, 1).unwrap();
    let ratio = a.median_s / b.median_s;
    assert!((0.8..=1.25).contains(&ratio), "full vs full {ratio}");
    assert!((a.median_s - b.median_s).abs() <= 0.25 * a.median_s.min(b.median_s));
    assert!((0.8..=1.25).contains(&nu_of(&a, &b).unwrap()));
    drop(big_head);

    // Draft decomposition with a tiny backbone and a full vocabulary head.
    let target = ToyTargetModel::new(
        &TargetConfig {
            vocab_size: V,
            ..TargetConfig::default()
        },
        3,
    )
    .unwrap();
    let backbone = DrafterBackbone::new(
        &BackboneConfig {
            vocab_size: V,
            d: 64,
            context: 4,
        },
        4,
    )
    .unwrap();
    let head = full_head(64, 5);
    let context = [TokenId(17), TokenId(4)];
    let parts = decompose_draft(&backbone, &head, &target, &context, 4, 15, 0).unwrap();
    let share = parts.t_head / parts.t_draft();
    assert!(share > 0.45, "head share of draft time {share}");
    // Interleaved short blocks, so slow drift in machine speed hits both
    // measurements alike.
    let (mut phased, mut whole) = (Vec::new(), Vec::new());
    for block in 0..9 {
        phased.push(
            decompose_draft(&backbone, &head, &target, &context, 4, 5, block)
                .unwrap()
                .t_draft(),
        );
        whole.push(measure_draft(&backbone, &head, &context, 4, 5, block).unwrap().median_s);
    }
    let (phased, whole) = (median(phased), median(whole));
    let gap = (phased - whole).abs() / whole;
    assert!(gap <= 0.05, "phases {phased} vs whole draft {whole} ({gap})");
    let none = decompose_draft(&backbone, &head, &target, &context, 0, 5, 0).unwrap();
    assert_eq!(none.t_draft(), 0.0);
}
