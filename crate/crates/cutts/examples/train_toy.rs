//! Train the CI-sized model on the synthetic context-dependent corpus and
//! compare free-running validation MSE against the analytic context-blind
//! floor.
//!
//! Usage: cargo run --example train_toy [cu_mode] [steps] [seed] [paragraphs]

use cutts::corpus::{
    generate_synthetic, split_sized, synthetic_inventory, Language, Lexicon, SyntheticSpec,
};
use cutts::nn::Adam;
use cutts::taco_lite::{
    build_training_set, free_running_mse, train, CuMode, Model, ModelConfig, TrainConfig,
};
use cutts::text_context::{StubBackend, WhitespaceTokenizer};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let cu_mode: CuMode = args.get(1).map_or(CuMode::Pse, |s| s.parse().unwrap());
    let steps: u64 = args.get(2).map_or(1500, |s| s.parse().unwrap());
    let seed: u64 = args.get(3).map_or(0, |s| s.parse().unwrap());
    let paragraphs: usize = args.get(4).map_or(200, |s| s.parse().unwrap());

    let spec = SyntheticSpec::toy(2, 0.05);
    let floor = spec.context_blind_floor();
    let corpus = generate_synthetic(&spec, paragraphs, seed);
    let inventory = synthetic_inventory(&spec);
    let split = split_sized(&corpus, seed, 100, 100).expect("split");
    println!(
        "corpus: {} paragraphs, {} train / {} val utterances, context-blind floor {:.5}",
        paragraphs,
        split.train.len(),
        split.val.len(),
        floor
    );

    let tokenizer = WhitespaceTokenizer::new();
    let backend = StubBackend::new(32);
    let lexicon = Lexicon::new();
    let build = |keys: &[(String, usize)]| {
        build_training_set(
            &corpus,
            keys,
            cu_mode,
            1,
            &lexicon,
            Language::English,
            &inventory,
            &tokenizer,
            &backend,
            None,
        )
        .expect("training set")
    };
    let train_set = build(&split.train);
    let val_set = build(&split.val);

    let mut config = ModelConfig::toy(cu_mode, inventory.len());
    config.mel_bins = spec.mel_bins;
    let mut model = Model::init(config, seed).expect("model");
    let cfg = TrainConfig {
        steps,
        batch_size: 8,
        learning_rate: 2e-3,
        seed,
        log_every: 100,
    };
    let mut opt = Adam::new(cfg.learning_rate);

    let started = std::time::Instant::now();
    let trace = train(&mut model, &mut opt, &train_set, &cfg).expect("training");
    for row in &trace {
        println!(
            "step {:5}  loss {:.5}  (pre {:.5}, post {:.5}, stop {:.5})",
            row.step, row.loss, row.mse_pre, row.mse_post, row.stop_bce
        );
    }
    let val_mse = free_running_mse(&model, &val_set).expect("val mse");
    println!(
        "{:?}: free-running val MSE {:.5} = {:.3} x floor  ({:.1?} elapsed)",
        cu_mode,
        val_mse,
        val_mse / floor,
        started.elapsed()
    );
}
