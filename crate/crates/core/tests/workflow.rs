use std::sync::Arc;

use modrl_core::drpo::{train, Checkpoint, TrainConfig};
use modrl_core::harness::task::{text_output, SyntheticTask, TaskConfig};
use modrl_core::harness::{eval_winrate, gen_preference_dataset, EvalOptions};
use modrl_core::orchestrator::generators::FixedText;
use modrl_core::orchestrator::{run_parallel, ModuleSpec, Role};
use modrl_core::reward::attribution::{attribute_errors, AttributionConfig, ByContribution};

fn short_config() -> TrainConfig {
    TrainConfig {
        epochs: 4,
        ..TrainConfig::default()
    }
}

#[test]
fn checkpoint_restores_the_trained_ensemble() {
    let task = SyntheticTask::new(TaskConfig::default()).unwrap();
    let data = gen_preference_dataset(&task, 400, 0.0, 3).unwrap();
    let mut trained = task.base_ensemble();
    let cfg = short_config();
    let outcome = train(&mut trained, &task.rm, &data, &cfg).unwrap();
    let ckpt = Checkpoint::capture(&trained, &outcome, &cfg);

    let restored_ckpt = Checkpoint::from_json(&ckpt.to_json()).unwrap();
    assert_eq!(restored_ckpt.digest(), ckpt.digest());
    let mut restored = task.base_ensemble();
    restored_ckpt.apply(&mut restored).unwrap();

    let ctxs = task.contexts("check", 100, 3);
    let base = task.base_ensemble();
    let a = eval_winrate(&trained, &base, &task.rm, &ctxs, 9, EvalOptions::default()).unwrap();
    let b = eval_winrate(&restored, &base, &task.rm, &ctxs, 9, EvalOptions::default()).unwrap();
    assert_eq!(a, b);
    assert_ne!(ckpt.params, ckpt.base.tables);
}

#[test]
fn expanding_a_trained_ensemble_leaves_existing_modules_alone() {
    let task = SyntheticTask::new(TaskConfig::default()).unwrap();
    let data = gen_preference_dataset(&task, 300, 0.0, 4).unwrap();
    let mut ens = task.base_ensemble();
    train(&mut ens, &task.rm, &data, &short_config()).unwrap();
    let before: Vec<String> = (0..ens.len()).map(|i| ens.params(i).digest()).collect();
    let ctx = &task.contexts("expand", 1, 4)[0];
    let old_run = run_parallel(&ens, ctx, 11).unwrap();

    let extra = text_output("verify", &task.noise[0]);
    ens.register(
        ModuleSpec::new("checker", Role::Verify).depends_on(&[task.module_ids[0].as_str()]),
        Arc::new(FixedText { output: extra }),
    )
    .unwrap();
    assert_eq!(ens.len(), before.len() + 1);
    for (i, d) in before.iter().enumerate() {
        assert_eq!(&ens.params(i).digest(), d);
    }

    let new_run = run_parallel(&ens, ctx, 11).unwrap();
    for old in &old_run.outputs {
        assert!(new_run.outputs.contains(old), "{} changed", old.module_id);
    }
    let attr = attribute_errors(
        &task.rm,
        &ens,
        &new_run.outputs,
        ctx,
        &ByContribution,
        &AttributionConfig::default(),
        0,
    )
    .unwrap();
    assert_eq!(attr.breakdown.modules.len(), 4);
}
