// speed probe: default config step time
use std::time::Instant;
use uam_core::layout::VariantId;
use uam_core::model::{ModelBundle, ModelConfig};
use uam_core::train::{finetune_actions, pretrain_vlm, FreezeSpec, TrainConfig};
use uam_core::world::{generate_dataset, DataSizes, HoldoutConfig};

fn main() {
    let t0 = Instant::now();
    let ds = generate_dataset(
        1,
        &DataSizes { train_episodes: 100, eval_episodes_per_split: 4, qa_train: 64, qa_eval: 32 },
        &HoldoutConfig::default(),
    )
    .unwrap();
    println!("dataset gen (100 ep): {:?}", t0.elapsed());

    let mcfg = ModelConfig::default();
    let tcfg = TrainConfig { steps: 20, batch_size: 32, seed: 1, log_every: 0, ..TrainConfig::default() };

    // UAM-architecture step timing (worst case: wm loss included)
    let model = ModelBundle::init(VariantId::Uam, mcfg.clone(), 2).unwrap();
    let t0 = Instant::now();
    let _ = finetune_actions(model, &tcfg, &FreezeSpec::none(), &ds.train, None).unwrap();
    let per_step = t0.elapsed().as_secs_f64() / 20.0;
    println!("uam finetune: {:.3} s/step -> 2000 steps = {:.1} min", per_step, per_step * 2000.0 / 60.0);

    let model = ModelBundle::init(VariantId::TwoExpert, mcfg.clone(), 2).unwrap();
    let t0 = Instant::now();
    let _ = finetune_actions(model, &tcfg, &FreezeSpec::none(), &ds.train, None).unwrap();
    let per_step = t0.elapsed().as_secs_f64() / 20.0;
    println!("two-expert finetune: {:.3} s/step -> 2000 steps = {:.1} min", per_step, per_step * 2000.0 / 60.0);

    let t0 = Instant::now();
    let _ = pretrain_vlm(&tcfg, &mcfg, &ds.qa_train, 3, None).unwrap();
    let per_step = t0.elapsed().as_secs_f64() / 20.0;
    println!("vlm pretrain: {:.3} s/step", per_step);
}
