//! Generate the synthetic context-dependent corpus and show why it has an
//! analytic context-blind error floor.

use cutts::corpus::{
    generate_synthetic, split_sized, synthetic_inventory, Lexicon, SyntheticSpec,
};

fn main() {
    let spec = SyntheticSpec::toy(2, 0.05);
    println!(
        "spec: {} classes, {} mel bins, {} frames/phoneme, noise sigma {}",
        spec.classes, spec.mel_bins, spec.frames_per_phoneme, spec.noise_sigma
    );
    println!("context-blind MSE floor: {:.5}", spec.context_blind_floor());
    println!("class vocabularies: {:?}", spec.class_vocab);

    let corpus = generate_synthetic(&spec, 200, 0);
    let inventory = synthetic_inventory(&spec);
    println!(
        "corpus: {} sentences, {} with targets, {} phonetic units",
        corpus.num_sentences(),
        corpus.target_keys().len(),
        inventory.len()
    );

    let split = split_sized(&corpus, 0, 100, 100).expect("split");
    println!(
        "split: {} train / {} val / {} test",
        split.train.len(),
        split.val.len(),
        split.test.len()
    );

    // Demonstrate the dependence on the PREVIOUS sentence's class: the same
    // text gets a different target under each predecessor class.
    let lexicon = Lexicon::new();
    let text = &spec.class_vocab[0][0];
    let t0 = spec.clean_target(text, Some(0), &lexicon);
    let t1 = spec.clean_target(text, Some(1), &lexicon);
    let diff = (&t0 - &t1).mapv(f64::abs).mean().unwrap();
    println!(
        "same text {text:?} under prev class 0 vs 1: mean abs target diff {diff:.4}"
    );

    let pid = corpus.paragraph_ids().next().unwrap().clone();
    let para = corpus.paragraph(&pid).unwrap();
    println!("paragraph {pid}:");
    for (i, s) in para.iter().enumerate() {
        println!(
            "  [{i}] {:?} prev_class={:?} target={}",
            s.text,
            s.prev_class,
            s.target_mel
                .as_ref()
                .map_or("none".to_string(), |m| format!("{}x{}", m.nrows(), m.ncols()))
        );
    }
}
