//! Feature pipeline tour: synthesize a chirp, trim padding silence, extract
//! an 80-bin mel spectrogram, reconstruct audio with Griffin-Lim, and write
//! the mel/WAV/PNG artifacts.

use cutts::features::{
    frame_count, griffin_lim, load_mel, mel_spectrogram, save_mel, save_mel_png, save_wav,
    trim_silence, AudioClip, MelParams,
};

fn chirp(seconds: f64) -> AudioClip {
    let sr = 16_000u32;
    let n = (seconds * sr as f64) as usize;
    let samples = (0..n)
        .map(|i| {
            let t = i as f64 / sr as f64;
            let freq = 200.0 + 1800.0 * t / seconds;
            (0.6 * (std::f64::consts::TAU * freq * t).sin()) as f32
        })
        .collect();
    AudioClip {
        samples,
        sample_rate: sr,
    }
}

fn main() {
    let params = MelParams::default();

    // pad the chirp with silence, then trim it back off
    let tone = chirp(1.0);
    let mut padded = vec![0.0f32; 4000];
    padded.extend_from_slice(&tone.samples);
    padded.extend_from_slice(&vec![0.0f32; 4000]);
    let clip = AudioClip {
        samples: padded,
        sample_rate: 16_000,
    };
    let trimmed = trim_silence(&clip, -40.0);
    println!(
        "trimmed {} -> {} samples (pure silence: {})",
        clip.samples.len(),
        trimmed.clip.samples.len(),
        trimmed.all_silence
    );

    let mel = mel_spectrogram(&trimmed.clip, &params).expect("mel");
    println!(
        "mel: {} frames x {} bins (predicted {:?})",
        mel.frames(),
        mel.bins(),
        frame_count(trimmed.clip.samples.len(), &params)
    );

    let dir = std::env::temp_dir().join("cutts_mel_features_demo");
    std::fs::create_dir_all(&dir).unwrap();
    let mel_path = dir.join("chirp.mel");
    save_mel(&mel, &mel_path).unwrap();
    let reloaded = load_mel(&mel_path).unwrap();
    println!(
        "mel file round-trip: {} frames, first value {:.4} == {:.4}",
        reloaded.frames(),
        reloaded.data[[0, 0]],
        mel.data[[0, 0]]
    );
    save_mel_png(&mel.data, &dir.join("chirp.png")).unwrap();

    let audio = griffin_lim(&mel, &params, 30);
    save_wav(&audio, &dir.join("chirp_reconstructed.wav")).unwrap();
    println!(
        "Griffin-Lim reconstruction: {} samples -> {}",
        audio.samples.len(),
        dir.display()
    );
}
