use brnet_core::losses::{LossVariant, VariantKind};
use brnet_core::nets::ArchitectureSpec;
use brnet_core::synthdata::{generate, SyntheticConfig};
use brnet_core::training::{train, TrainConfig};

#[test]
fn diag() {
    let ds = generate(&SyntheticConfig::default()).unwrap();
    let spec = ArchitectureSpec::default();
    for kind in [VariantKind::Vanilla, VariantKind::BrNet, VariantKind::Zafar, VariantKind::AdvMse, VariantKind::MultiTask] {
        let mut tc = TrainConfig::new(LossVariant::new(kind));
        tc.iterations = 1500;
        tc.log_every = 100;
        tc.seed = 1;
        let t0 = std::time::Instant::now();
        let (_, logs) = train(&ds, &spec, &tc, |_, _| {}).unwrap();
        println!("=== {kind} ({:?})", t0.elapsed());
        for l in &logs {
            println!("  it {:4} loss_c {:7.3} adv {:8.4} bacc {:.4} dcor2 {:.4} mi {:.4}", l.iteration, l.loss_c, l.loss_adv, l.bacc, l.dcor2[0], l.mi[0]);
        }
    }
}
