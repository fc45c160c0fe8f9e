//! End-to-end trainer contracts at toy scale: deterministic stages, variant
//! initialization, frozen-parameter invariance, objective equivalence under
//! a zero auxiliary weight, checkpoint resume, and evaluation hygiene.

mod common;

use std::collections::BTreeMap;

use uam_core::ckpt;
use uam_core::eval::{
    action_eval, score_answers, vlm_score, EvalConfig, ExpertOraclePolicy, ModelPolicy,
    OracleAnswerer, RandomAnswerer,
};
use uam_core::layout::VariantId;
use uam_core::model::{ModelBundle, ModelConfig};
use uam_core::tensor::Dtype;
use uam_core::train::{
    finetune_actions, init_variant, pretrain_generative, pretrain_vlm, FreezeSpec, TrainConfig,
};
use uam_core::world::{generate_dataset, DataSizes, Dataset, HoldoutConfig};

fn tiny_model_cfg() -> ModelConfig {
    ModelConfig {
        layers: 2,
        width: 32,
        heads: 4,
        ff_mult: 2,
        dtype: Dtype::F32,
        ..ModelConfig::default()
    }
}

fn tiny_dataset() -> Dataset {
    generate_dataset(
        90,
        &DataSizes {
            train_episodes: 24,
            eval_episodes_per_split: 8,
            qa_train: 48,
            qa_eval: 32,
        },
        &HoldoutConfig::default(),
    )
    .unwrap()
}

fn tiny_train_cfg(steps: usize) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: 4,
        lr: 1e-3,
        seed: 5,
        log_every: 5,
        ..TrainConfig::default()
    }
}

fn priors(ds: &Dataset) -> (ModelBundle, ModelBundle) {
    let vlm = pretrain_vlm(&tiny_train_cfg(10), &tiny_model_cfg(), &ds.qa_train, 400, None)
        .unwrap()
        .model;
    let gen = pretrain_generative(&tiny_train_cfg(10), &tiny_model_cfg(), &ds.train, 401, None)
        .unwrap()
        .model;
    (vlm, gen)
}

#[test]
fn stages_are_deterministic_given_seeds() {
    let ds = tiny_dataset();
    let cfg = tiny_train_cfg(8);
    let a = pretrain_vlm(&cfg, &tiny_model_cfg(), &ds.qa_train, 400, None).unwrap();
    let b = pretrain_vlm(&cfg, &tiny_model_cfg(), &ds.qa_train, 400, None).unwrap();
    assert_eq!(a.model.param_digest(), b.model.param_digest());
    assert_eq!(a.metrics, b.metrics, "identical seed, identical metric log");

    let g1 = pretrain_generative(&cfg, &tiny_model_cfg(), &ds.train, 401, None).unwrap();
    let g2 = pretrain_generative(&cfg, &tiny_model_cfg(), &ds.train, 401, None).unwrap();
    assert_eq!(g1.model.param_digest(), g2.model.param_digest());
    assert_eq!(g1.metrics, g2.metrics);
}

#[test]
fn untrained_probe_accuracy_sits_at_chance() {
    let ds = tiny_dataset();
    // a zero-step run is exactly the initialized model
    let out = pretrain_vlm(&tiny_train_cfg(0), &tiny_model_cfg(), &ds.qa_train, 400, None).unwrap();
    let (acc, _) = vlm_score(&out.model, &ds.qa_eval).unwrap();
    assert!(
        (acc - 1.0 / 16.0).abs() < 0.05,
        "untrained accuracy {acc} should be near chance"
    );
}

#[test]
fn oracle_and_random_answerers_bracket_the_suite() {
    let ds = tiny_dataset();
    let (acc, per_cat) = score_answers(&OracleAnswerer, &ds.qa_eval).unwrap();
    assert_eq!(acc, 1.0, "oracle answers everything: {per_cat:?}");
    let (acc, _) = score_answers(&RandomAnswerer { seed: 3 }, &ds.qa_eval).unwrap();
    assert!((acc - 1.0 / 16.0).abs() < 0.08, "random accuracy {acc}");
}

#[test]
fn variant_initialization_follows_the_prior_table() {
    let ds = tiny_dataset();
    let (vlm, gen) = priors(&ds);
    let cfg = tiny_model_cfg();

    // semantic pathway always loads the prior
    for variant in VariantId::DESIGN_POINTS {
        let m = init_variant(variant, &cfg, &vlm, Some(&gen), 500).unwrap();
        assert!(m
            .get_param("expert.sem.layer0.wq")
            .unwrap()
            .bit_eq(&vlm.get_param("expert.sem.layer0.wq").unwrap()));
        assert!(m
            .get_param("head.qa.w")
            .unwrap()
            .bit_eq(&vlm.get_param("head.qa.w").unwrap()));
    }

    let two = init_variant(VariantId::TwoExpert, &cfg, &vlm, Some(&gen), 500).unwrap();
    assert!(two.dor.is_none(), "no dorsal parameters in the baseline");

    // duplicated semantic weights
    let vision = init_variant(VariantId::VlmInitVision, &cfg, &vlm, None, 500).unwrap();
    assert!(vision
        .get_param("expert.dor.layer1.w1")
        .unwrap()
        .bit_eq(&vlm.get_param("expert.sem.layer1.w1").unwrap()));

    // generative prior loads the dorsal pathway
    let uam = init_variant(VariantId::Uam, &cfg, &vlm, Some(&gen), 500).unwrap();
    assert!(uam
        .get_param("expert.dor.layer0.wv")
        .unwrap()
        .bit_eq(&gen.get_param("expert.dor.layer0.wv").unwrap()));
    assert!(uam
        .get_param("enc.dor.w")
        .unwrap()
        .bit_eq(&gen.get_param("enc.dor.w").unwrap()));

    // random vs generative dorsal tensors differ
    let random = init_variant(VariantId::RandomInit, &cfg, &vlm, Some(&gen), 500).unwrap();
    assert!(!random
        .get_param("expert.dor.layer0.wv")
        .unwrap()
        .bit_eq(&uam.get_param("expert.dor.layer0.wv").unwrap()));

    // missing generative prior is a configuration error
    assert!(init_variant(VariantId::Uam, &cfg, &vlm, None, 500).is_err());
}

#[test]
fn zero_step_finetune_leaves_the_bundle_bit_identical() {
    let ds = tiny_dataset();
    let (vlm, gen) = priors(&ds);
    let model = init_variant(VariantId::Uam, &tiny_model_cfg(), &vlm, Some(&gen), 500).unwrap();
    let digest = model.param_digest();
    let out = finetune_actions(model, &tiny_train_cfg(0), &FreezeSpec::none(), &ds.train, None)
        .unwrap();
    assert_eq!(out.model.param_digest(), digest);
}

#[test]
fn frozen_groups_are_bit_identical_after_training() {
    let ds = tiny_dataset();
    let (vlm, gen) = priors(&ds);
    let model = init_variant(VariantId::Uam, &tiny_model_cfg(), &vlm, Some(&gen), 500).unwrap();
    let spec = FreezeSpec::vlm();
    let (_, frozen_names) = spec.partition(&model);
    let before: BTreeMap<String, _> = frozen_names
        .iter()
        .map(|n| (n.clone(), model.get_param(n).unwrap()))
        .collect();
    let out = finetune_actions(model, &tiny_train_cfg(6), &spec, &ds.train, None).unwrap();
    for (name, t) in &before {
        assert!(
            out.model.get_param(name).unwrap().bit_eq(t),
            "frozen parameter {name} moved"
        );
    }
    // and the probe score is bit-identical to the prior's
    let (s_prior, _) = vlm_score(&vlm, &ds.qa_eval).unwrap();
    let (s_after, _) = vlm_score(&out.model, &ds.qa_eval).unwrap();
    assert_eq!(s_prior.to_bits(), s_after.to_bits());
    // something else did train
    assert_ne!(out.model.param_digest(), vlm.param_digest());
}

#[test]
fn zero_lambda_reproduces_the_action_only_objective_bit_exactly() {
    let ds = tiny_dataset();
    let (vlm, gen) = priors(&ds);
    let cfg = tiny_model_cfg();
    let uam = init_variant(VariantId::Uam, &cfg, &vlm, Some(&gen), 500).unwrap();
    let gen_init = init_variant(VariantId::GenInit, &cfg, &vlm, Some(&gen), 500).unwrap();

    let mut tcfg = tiny_train_cfg(5);
    tcfg.lambda = 0.0;
    let a = finetune_actions(uam, &tcfg, &FreezeSpec::none(), &ds.train, None).unwrap();
    let b = finetune_actions(gen_init, &tcfg, &FreezeSpec::none(), &ds.train, None).unwrap();

    // every parameter the two bundles share must match bit for bit
    let mut names = Vec::new();
    b.model.for_each_param(|n, _| names.push(n.to_string()));
    for name in names {
        let x = a.model.get_param(&name).unwrap();
        let y = b.model.get_param(&name).unwrap();
        assert!(x.bit_eq(&y), "parameter {name} diverged under lambda = 0");
    }
}

#[test]
fn checkpoint_resume_reproduces_the_uninterrupted_run() {
    let ds = tiny_dataset();
    let cfg = tiny_model_cfg();
    let full = pretrain_vlm(&tiny_train_cfg(10), &cfg, &ds.qa_train, 400, None).unwrap();

    let half = pretrain_vlm(&tiny_train_cfg(5), &cfg, &ds.qa_train, 400, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let json = ckpt::save_checkpoint(
        dir.path(),
        "half",
        &half.model,
        "vlm-prior",
        half.final_step,
        &half.opt.to_tensors(),
        &half.metrics,
    )
    .unwrap();
    let loaded = ckpt::load_checkpoint(&json).unwrap();
    let state = uam_core::train::AdamState::from_tensors(&loaded.extra).unwrap();
    let resumed = pretrain_vlm(
        &tiny_train_cfg(10),
        &cfg,
        &ds.qa_train,
        400,
        Some((loaded.model, state, loaded.meta.step, loaded.meta.metrics.clone())),
    )
    .unwrap();
    assert_eq!(
        resumed.model.param_digest(),
        full.model.param_digest(),
        "resumed run must be bit-identical to the uninterrupted one"
    );
    assert_eq!(resumed.metrics, full.metrics);
}

#[test]
fn oracle_policy_solves_every_split_and_eval_is_pure() {
    let ds = tiny_dataset();
    let cfg = EvalConfig {
        n_rollouts: 8,
        ..EvalConfig::default()
    };
    for split in uam_core::world::SplitTag::ALL {
        let rate = action_eval(&ExpertOraclePolicy, ds.split(split), &cfg).unwrap();
        assert_eq!(rate.rate, 1.0, "oracle fails on {split:?}");
    }

    // an untrained model is near chance, and evaluation never mutates it
    let model = ModelBundle::init(VariantId::Uam, tiny_model_cfg(), 900).unwrap();
    let digest_before = model.param_digest();
    let policy = ModelPolicy {
        model: &model,
        sampler_steps: 1,
    };
    let rate = action_eval(&policy, &ds.eval_in_domain, &cfg).unwrap();
    assert!(rate.rate <= 0.2, "untrained success {}", rate.rate);
    assert_eq!(model.param_digest(), digest_before, "evaluation mutated the model");
}

#[test]
fn training_namespace_episodes_are_rejected_for_evaluation() {
    let ds = tiny_dataset();
    let cfg = EvalConfig {
        n_rollouts: 4,
        ..EvalConfig::default()
    };
    let err = action_eval(&ExpertOraclePolicy, &ds.train, &cfg).unwrap_err();
    assert!(matches!(err, uam_core::Error::Usage(_)));
}
