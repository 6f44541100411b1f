//! Context-ablation study on a briefly trained toy model: synthesize the
//! same sentence under different previous sentences and measure how much the
//! predicted spectrogram moves.

use cutts::corpus::{
    generate_synthetic, split_sized, synthetic_inventory, g2p, Language, Lexicon, SyntheticSpec,
};
use cutts::nn::Adam;
use cutts::taco_lite::{
    build_training_set, prepare_context, train, CuMode, Model, ModelConfig, TrainConfig,
};
use cutts::text_context::{SentenceWindow, StubBackend, WhitespaceTokenizer};

fn window_with_prev(current: &str, prev: &str) -> SentenceWindow {
    SentenceWindow {
        paragraph_id: "ablation".to_string(),
        center_index: 1,
        center: current.to_string(),
        past: vec![(prev.to_string(), false)],
        future: vec![(String::new(), true)],
        context_width: 1,
    }
}

fn main() {
    let spec = SyntheticSpec::toy(2, 0.05);
    let corpus = generate_synthetic(&spec, 200, 0);
    let inventory = synthetic_inventory(&spec);
    let split = split_sized(&corpus, 0, 100, 100).expect("split");
    let tokenizer = WhitespaceTokenizer::new();
    let backend = StubBackend::new(32);
    let lexicon = Lexicon::new();
    let data = build_training_set(
        &corpus,
        &split.train,
        CuMode::Pse,
        1,
        &lexicon,
        Language::English,
        &inventory,
        &tokenizer,
        &backend,
        None,
    )
    .expect("training set");

    let mut config = ModelConfig::toy(CuMode::Pse, inventory.len());
    config.mel_bins = spec.mel_bins;
    config.context_width = 1;
    let mut model = Model::init(config, 0).expect("model");
    let cfg = TrainConfig {
        steps: 600,
        batch_size: 8,
        learning_rate: 2e-3,
        seed: 0,
        log_every: 200,
    };
    let mut opt = Adam::new(cfg.learning_rate);
    println!("training a PSE toy model for {} steps...", cfg.steps);
    train(&mut model, &mut opt, &data, &cfg).expect("training");

    let current = spec.class_vocab[0][0].clone();
    let phonemes = g2p(&current, &lexicon, Language::English, &inventory)
        .expect("g2p")
        .ids;
    let prevs = [spec.class_vocab[0][1].clone(), spec.class_vocab[1][0].clone()];
    let mut outputs = Vec::new();
    for prev in &prevs {
        let window = window_with_prev(&current, prev);
        let context =
            prepare_context(&window, CuMode::Pse, &tokenizer, &backend, None).expect("context");
        let result = model
            .synthesize(&phonemes, &context, 50, 0)
            .expect("synthesis");
        println!(
            "prev {prev:?}: {} frames, stop at {:?}",
            result.mel.nrows(),
            result.stop_step
        );
        outputs.push(result.mel);
    }
    let frames = outputs[0].nrows().min(outputs[1].nrows());
    let diff = (&outputs[0].slice(ndarray::s![..frames, ..])
        - &outputs[1].slice(ndarray::s![..frames, ..]))
        .mapv(f64::abs)
        .mean()
        .unwrap();
    println!(
        "same words {current:?} under class-0 vs class-1 predecessor: mean abs mel diff {diff:.4}"
    );
}
