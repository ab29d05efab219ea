use std::collections::BTreeSet;

use dihc_core::data::{generate_synthetic, next_batch, split};
use dihc_core::gradcheck::{check_op, run_all, OPS, TOLERANCE};
use dihc_core::network::ensemble_forward;
use dihc_core::tensor::{set_conv3d_backward_corruption, Graph};
use dihc_core::trainer::{Trainer, TrainConfig};

#[test]
fn every_op_passes() {
    let report = run_all(0).unwrap();
    for r in &report.ops {
        println!("{:<18} {:.3e}  {}", r.op, r.worst_rel_err, r.worst_variant);
        assert!(r.cases >= 20, "{} ran {} cases", r.op, r.cases);
    }
    assert!(report.passed(), "failures: {:?}", report.failures());
    let names: Vec<_> = report.ops.iter().map(|r| r.op).collect();
    assert_eq!(names, OPS);
}

#[test]
fn corrupted_conv_backward_is_caught() {
    set_conv3d_backward_corruption(true);
    let conv = check_op("conv3d", 3);
    let other = check_op("upsample", 3);
    set_conv3d_backward_corruption(false);
    let conv = conv.unwrap();
    assert!(!conv.passed() && conv.worst_rel_err > 10.0 * TOLERANCE, "{conv:?}");
    assert!(other.unwrap().passed());
}

#[test]
fn suite_covers_every_op_in_a_training_graph() {
    let data = generate_synthetic(4, [8, 8, 8], 0).unwrap();
    let s = split(&data, 0.5, 0).unwrap();
    let cfg = TrainConfig { patch: [8, 8, 8], base_channels: 4, depth: 3, detach_pseudo: false, ..Default::default() };
    let mut tr = Trainer::new(cfg).unwrap();
    let batch = next_batch(&s, &tr.cfg.batch_spec(), 0).unwrap();
    let preds = ensemble_forward(&mut tr.models, &batch.x, true).unwrap();
    let (total, _) = tr.losses(&preds, &batch, 0).unwrap();
    let seen: BTreeSet<&str> = Graph::trace(&total).nodes.iter().map(|n| n.op).collect();
    let missing: Vec<_> = seen.iter().filter(|op| !OPS.contains(op)).collect();
    assert!(missing.is_empty(), "ops without a gradient check: {missing:?}");
}
