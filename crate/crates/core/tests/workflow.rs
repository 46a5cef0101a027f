use dclab::config::{MethodName, RunConfig};
use dclab::data::{ConceptSpec, Family};
use dclab::model::ModelConfig;
use dclab::workflow::{pretrain, run_sequence, Phase, Pretrained, RunOutput};

fn tiny(tasks: usize) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model = ModelConfig { data_dim: 2, hidden: 16, time_dim: 8, embed_dim: 4 };
    cfg.schedule.steps = 20;
    cfg.sequence.tasks.truncate(tasks);
    cfg.sequence.train_points = 40;
    cfg.sequence.snapshot_points = 30;
    cfg.pretrain.iterations = 40;
    cfg.pretrain.points = 200;
    cfg.pretrain.prior_samples = 40;
    cfg.train.iterations = 25;
    cfg.metrics.dc_accuracy_points = 10;
    cfg.metrics.dc_accuracy_trials = 4;
    cfg.resolved()
}

fn run(cfg: &RunConfig, method: MethodName, base: &Pretrained) -> RunOutput {
    let mut c = cfg.clone();
    c.method = method;
    run_sequence(&c, base).unwrap()
}

fn values(out: &RunOutput, prefix: &str) -> Vec<Vec<f64>> {
    out.model.params().into_iter().filter(|p| p.name.starts_with(prefix)).map(|p| p.values().to_vec()).collect()
}

fn base_values(base: &Pretrained, prefix: &str) -> Vec<Vec<f64>> {
    base.model.params().into_iter().filter(|p| p.name.starts_with(prefix)).map(|p| p.values().to_vec()).collect()
}

#[test]
fn phase_counts_follow_the_method() {
    let cfg = tiny(2);
    let base = pretrain(&cfg, 1).unwrap();
    for m in MethodName::ALL {
        let out = run(&cfg, m, &base);
        out.log.check_order().unwrap();
        let events = |p: Phase| out.log.events.iter().filter(|e| e.phase == p).count();
        assert_eq!(events(Phase::Train), 2 * cfg.train.iterations, "{m}");
        assert_eq!(out.log.count(Phase::Snapshot), 2, "{m}");
        let dsc = if m.uses_dsc() { cfg.dsc_iterations() } else { 0 };
        assert_eq!(events(Phase::Dsc), dsc, "{m}");
        assert_eq!(out.log.count(Phase::FimUpdate), if m.uses_ewc() { 2 } else { 0 }, "{m}");
        assert_eq!(out.fisher.is_some(), m.uses_ewc(), "{m}");
        assert_eq!(out.store.cells.len(), 3, "{m}");
    }
}

#[test]
fn consolidation_budget_is_a_fifth_of_training() {
    let cfg = tiny(1);
    assert_eq!(cfg.dsc_iterations(), 5);
    assert_eq!(cfg.ewc_iterations(), 5);
}

#[test]
fn identical_inputs_give_identical_outputs() {
    let cfg = tiny(2);
    let a = run(&cfg, MethodName::DscEwcDc, &pretrain(&cfg, 4).unwrap());
    let b = run(&cfg, MethodName::DscEwcDc, &pretrain(&cfg, 4).unwrap());
    assert_eq!(a.report, b.report);
    assert_eq!(a.store, b.store);
    assert_eq!(a.log, b.log);
    assert_eq!(a.model, b.model);
    let c = run(&cfg, MethodName::DscEwcDc, &pretrain(&cfg, 5).unwrap());
    assert_ne!(a.report, c.report);
}

#[test]
fn shorter_sequence_is_a_prefix_of_the_longer_one() {
    let (one, two) = (tiny(1), tiny(2));
    let base = pretrain(&one, 2).unwrap();
    let a = run(&one, MethodName::EwcDc, &base);
    let b = run(&two, MethodName::EwcDc, &base);
    assert_eq!(a.store.cell(1, 1).unwrap(), b.store.cell(1, 1).unwrap());
    assert_eq!(a.report.value(1, "a_mmd"), b.report.value(1, "a_mmd"));
    // Row 1 is frozen once task 1 ends.
    assert_eq!(values(&a, "concept.1"), values(&b, "concept.1"));
}

#[test]
fn embedding_only_touches_nothing_but_rows() {
    let cfg = tiny(2);
    let base = pretrain(&cfg, 3).unwrap();
    let out = run(&cfg, MethodName::TiEmbeddingOnly, &base);
    assert!(out.model.adapters.is_empty());
    for prefix in ["trunk", "head", "kv", "concept.0"] {
        assert_eq!(values(&out, prefix), base_values(&base, prefix), "{prefix}");
    }
    assert_eq!(out.model.num_seen(), 2);
}

#[test]
fn full_kv_finetune_leaves_trunk_alone() {
    let cfg = tiny(1);
    let base = pretrain(&cfg, 3).unwrap();
    let out = run(&cfg, MethodName::KvFullSequential, &base);
    assert_eq!(values(&out, "trunk"), base_values(&base, "trunk"));
    assert_ne!(values(&out, "kv"), base_values(&base, "kv"));
}

#[test]
fn clora_stacks_frozen_adapters() {
    let cfg = tiny(2);
    let base = pretrain(&cfg, 6).unwrap();
    let one = run(&tiny(1), MethodName::Clora, &base);
    let two = run(&cfg, MethodName::Clora, &base);
    assert_eq!(two.model.adapters.len(), 2);
    assert_eq!(one.model.adapters[0], two.model.adapters[0]);
    assert_eq!(two.degeneracy.len(), 2 * cfg.train.iterations);
    assert!(two.degeneracy.iter().filter(|r| r.task == 1).all(|r| r.forget == 0.0));
}

#[test]
fn lora_merge_averages_task_products() {
    let cfg = tiny(2);
    let base = pretrain(&cfg, 7).unwrap();
    let out = run(&cfg, MethodName::LoraMerge, &base);
    assert_eq!(out.task_adapters.len(), 2);
    let (k, _) = out.model.active_adapter().unwrap().products();
    let (k1, _) = out.task_adapters[0].products();
    let (k2, _) = out.task_adapters[1].products();
    for i in 0..k.len() {
        assert!((k.values()[i] - 0.5 * (k1.values()[i] + k2.values()[i])).abs() < 1e-12);
    }
    assert_eq!(out.log.phases(2), vec![Phase::Train, Phase::Replace, Phase::Snapshot]);
}

#[test]
fn unseparable_sequence_is_rejected() {
    let mut cfg = tiny(1);
    let ring = ConceptSpec::new(Family::Ring { radius: 1.5, center: [0.0, 0.0], sigma: 0.08 }, 9);
    cfg.sequence.tasks = vec![ring.clone(), ring];
    assert!(matches!(cfg.validate(), Err(dclab::Error::Config(_))));
}
