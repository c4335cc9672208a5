use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::frontends::{hz_to_mel, mel_to_hz, VideoClip, Waveform};
use crate::tensor::Tensor;

/// 32 words of three or four letters, none with a doubled letter.
pub const LEXICON: [&str; 32] = [
    "bat", "cup", "dog", "fish", "gold", "hat", "jam", "kite", "lamp", "mud", "nest", "owl", "pig",
    "quiz", "rain", "sun", "tap", "van", "wind", "box", "yarn", "zip", "arm", "bird", "cake",
    "drum", "fox", "gem", "hip", "ink", "jet", "kid",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub min_words: usize,
    pub max_words: usize,
    /// Video frames per word slot; the last one is a silent gap.
    pub frames_per_word: usize,
    pub video_size: usize,
    pub sample_rate: u32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            min_words: 3,
            max_words: 8,
            frames_per_word: 7,
            video_size: 16,
            sample_rate: 16_000,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_words == 0 || self.min_words > self.max_words {
            return contract(format!(
                "word range {}..={} is empty",
                self.min_words, self.max_words
            ));
        }
        if self.frames_per_word < 2 || self.video_size < 8 {
            return contract("word slots need at least two frames and clips at least 8 pixels");
        }
        if !self
            .sample_rate
            .is_multiple_of(crate::frontends::VideoClip::FRAME_RATE)
        {
            return contract("sample rate must be a multiple of the video frame rate");
        }
        Ok(())
    }

    pub fn samples_per_frame(&self) -> usize {
        (self.sample_rate / VideoClip::FRAME_RATE) as usize
    }
}

/// One synthetic utterance with time-aligned audio and mouth video.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub seed: u64,
    pub transcript: Vec<String>,
    pub clean: Waveform,
    pub video: VideoClip,
    pub duration: f64,
}

impl Sample {
    pub fn text(&self) -> String {
        self.transcript.join(" ")
    }
}

const TONES_PER_WORD: usize = 3;
// Pixel levels are exact in f32 so clips survive the container unchanged.
const LIT: f64 = 0.875;
const DARK: f64 = 0.125;

/// Three tone frequencies unique to word `w`: one from each of three
/// interleaved mel-spaced bands between 200 Hz and 7 kHz, so no two words
/// share a tone.
pub fn word_signature(w: usize) -> [f64; TONES_PER_WORD] {
    let n = LEXICON.len();
    let (lo, hi) = (hz_to_mel(200.0), hz_to_mel(7000.0));
    let grid = |i: usize| mel_to_hz(lo + (hi - lo) * i as f64 / (3 * n - 1) as f64);
    [
        grid(w),
        grid(n + (5 * w) % n),
        grid(2 * n + (11 * w + 7) % n),
    ]
}

/// Renders one word slot per entry of `words` (lexicon indices) and returns
/// the waveform. `rng` supplies per-word amplitude and pitch jitter.
pub fn render_words(words: &[usize], cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let spf = cfg.samples_per_frame();
    let slot = cfg.frames_per_word * spf;
    let voiced = (cfg.frames_per_word - 1) * spf;
    let sr = cfg.sample_rate as f64;
    let mut out = vec![0.0; words.len() * slot];
    for (i, &w) in words.iter().enumerate() {
        let amp = rng.random_range(0.6..1.0) / TONES_PER_WORD as f64;
        let jitter = rng.random_range(0.985..1.015);
        let tones =
            word_signature(w).map(|f| (f * jitter, rng.random_range(0.0..std::f64::consts::TAU)));
        for n in 0..voiced {
            let t = n as f64 / sr;
            let env = (std::f64::consts::PI * n as f64 / voiced as f64).sin();
            let s: f64 = tones
                .iter()
                .map(|(f, ph)| (std::f64::consts::TAU * f * t + ph).sin())
                .sum();
            out[i * slot + n] = amp * env * s;
        }
    }
    out
}

/// Draws the mouth patch for word `w` at openness `o ∈ [0, 1]`.
///
/// Shape family (ellipse, box, diamond, cross) comes from `w mod 4`, width
/// from `(w / 4) mod 4`, and words 16–31 are drawn hollow. Openness scales
/// the vertical extent; a closed mouth is a thin horizontal line.
fn draw_mouth(w: Option<usize>, openness: f64, size: usize, frame: &mut [f64]) {
    let c = (size as f64 - 1.0) / 2.0;
    let unit = size as f64 / 16.0;
    let (kind, width, hollow) = match w {
        Some(w) => (w % 4, 3.0 + ((w / 4) % 4) as f64, w >= 16),
        None => (0, 4.0, false),
    };
    let half_w = width * unit;
    let half_h = (0.6 + 5.0 * openness) * unit;
    for y in 0..size {
        for x in 0..size {
            let dx = (x as f64 - c) / half_w;
            let dy = (y as f64 - c) / half_h;
            let r = match kind {
                0 => (dx * dx + dy * dy).sqrt(),
                1 => dx.abs().max(dy.abs()),
                2 => dx.abs() + dy.abs(),
                _ => dx.abs().min(dy.abs()) * 3.0 + dx.abs().max(dy.abs()) * 0.5,
            };
            let inside = if hollow {
                (0.6..=1.0).contains(&r)
            } else {
                r <= 1.0
            };
            frame[y * size + x] = if inside { LIT } else { DARK };
        }
    }
}

/// Synthesises a sample from `seed`: a 3–8 word transcript, its tone
/// rendering, and a mouth clip whose per-frame openness follows the audio
/// envelope.
pub fn synth_sample(seed: u64, cfg: &SynthConfig) -> Result<Sample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(cfg.min_words..=cfg.max_words);
    let words: Vec<usize> = (0..n).map(|_| rng.random_range(0..LEXICON.len())).collect();
    // Stored at f32 precision so container round trips are exact.
    let audio: Vec<f64> = render_words(&words, cfg, &mut rng)
        .into_iter()
        .map(|v| v as f32 as f64)
        .collect();

    let spf = cfg.samples_per_frame();
    let frames = n * cfg.frames_per_word;
    let frame_rms: Vec<f64> = audio
        .chunks(spf)
        .map(|c| (c.iter().map(|v| v * v).sum::<f64>() / c.len() as f64).sqrt())
        .collect();
    let peak = frame_rms.iter().cloned().fold(0.0, f64::max).max(1e-12);
    let s = cfg.video_size;
    let mut video = Tensor::zeros(&[frames, s, s]);
    for (f, chunk) in video.data_mut().chunks_mut(s * s).enumerate() {
        let slot = f / cfg.frames_per_word;
        let voiced = f % cfg.frames_per_word < cfg.frames_per_word - 1;
        let word = voiced.then_some(words[slot]);
        draw_mouth(word, (frame_rms[f] / peak).min(1.0), s, chunk);
    }
    Ok(Sample {
        id: format!("utt{seed:016x}"),
        seed,
        transcript: words.iter().map(|&w| LEXICON[w].to_string()).collect(),
        clean: Waveform::new(audio, cfg.sample_rate),
        video: VideoClip::new(video)?,
        duration: frames as f64 / VideoClip::FRAME_RATE as f64,
    })
}
