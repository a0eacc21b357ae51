use kpdiff::verify::{check, OPS};

#[test]
fn every_op_passes_for_two_seeds() {
    for op in OPS {
        for seed in 0..2 {
            let t = std::time::Instant::now();
            let r = check(op, seed, false).unwrap();
            eprintln!(
                "{op} seed {seed}: {:.3e} ({:.1?})",
                r.max_rel_error,
                t.elapsed()
            );
            assert!(r.passed(), "{r:?}");
        }
    }
}
