//! Synthetic paired audio-visual corpus, noise synthesis, SNR-exact mixing,
//! and the two-phase training curriculum.

mod corpus;
mod curriculum;
mod noise;
mod synth;

pub use corpus::{load_corpus, save_corpus, Corpus, ManifestEntry};
pub use curriculum::{curriculum_phase, CurriculumConfig, CurriculumPhase, SnrChoice};
pub use noise::{
    mix_at_snr, mix_components, overlap_speech, synth_noise, NoiseKind, NoiseSpec, Overlap,
};
pub use synth::{render_words, synth_sample, word_signature, Sample, SynthConfig, LEXICON};

/// Deterministic seed for a sub-stream identified by `parts`
/// (SplitMix64 finaliser folded over the inputs).
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    parts.iter().fold(mix(base), |acc, &p| mix(acc ^ mix(p)))
}
