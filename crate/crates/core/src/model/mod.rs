//! The assembled recognizer: front-ends, bottleneck fusion, fusion encoder,
//! recognition heads, and the enhancement decoder, plus the per-utterance
//! training loss.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::derive_seed;
use crate::enhance::{
    enhance_loss, perceptual_loss, perceptual_target, recon_loss, EnhanceWeights,
    SpectrogramDecoder,
};
use crate::error::{contract, Result};
use crate::frontends::{
    AudioFrontend, MelConfig, Modality, ModalitySequence, VideoConfig, VideoFrontend,
};
use crate::fusion::{Avbc, BottleneckUpdate, FusionEncoder};
use crate::nn::{ConformerConfig, Ctx, Init};
use crate::recognition::{
    beam_search, ctc_loss, decoder_attention_loss, greedy_decode, hybrid_loss, CtcProjection,
    DecoderConfig, Hypothesis, LossReport, TransformerDecoder, Vocabulary, BLANK,
};
use crate::tensor::{ParamStore, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub mel: MelConfig,
    pub video: VideoConfig,
    /// Per-modality front-end Conformers.
    pub encoder: ConformerConfig,
    pub avbc_layers: usize,
    pub bottleneck_tokens: usize,
    /// Blocks (and shape) of the fusion Conformer.
    pub fusion: ConformerConfig,
    pub decoder: DecoderConfig,
    /// Temporal upsampling of the spectrogram decoder; equals the audio
    /// front-end's subsampling.
    pub upscale: usize,
    pub feature_mean: f64,
    pub feature_std: f64,
}

impl ModelConfig {
    pub fn desk() -> Self {
        Self {
            mel: MelConfig::default(),
            video: VideoConfig::desk(),
            encoder: ConformerConfig {
                layers: 1,
                ..ConformerConfig::desk()
            },
            avbc_layers: 2,
            bottleneck_tokens: 4,
            fusion: ConformerConfig {
                layers: 1,
                ..ConformerConfig::desk()
            },
            decoder: DecoderConfig::desk(),
            upscale: 4,
            feature_mean: -8.0,
            feature_std: 4.0,
        }
    }

    /// Shapes of the reference system (not trainable at desk scale).
    pub fn paper() -> Self {
        Self {
            mel: MelConfig::default(),
            video: VideoConfig::paper(),
            encoder: ConformerConfig::paper(),
            avbc_layers: 3,
            bottleneck_tokens: 4,
            fusion: ConformerConfig::paper(),
            decoder: DecoderConfig::paper(),
            upscale: 4,
            feature_mean: -8.0,
            feature_std: 4.0,
        }
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            other => Err(crate::Error::Config(format!(
                "unknown model profile {other:?}"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.fusion.validate()?;
        let d = self.encoder.d_model;
        if self.fusion.d_model != d || self.decoder.d_model != d {
            return contract("encoder, fusion, and decoder widths must agree");
        }
        if self.avbc_layers == 0 || self.upscale != 4 {
            return contract("need at least one AVBC layer and an upscale of 4");
        }
        if !(self.feature_std > 0.0) {
            return contract("feature standard deviation must be positive");
        }
        Ok(())
    }
}

/// One utterance prepared for the loss.
#[derive(Clone, Debug)]
pub struct TrainItem {
    pub noisy_mel: Tensor,
    pub clean_mel: Tensor,
    /// `T × H × W` clip, or `None` when the video stream is absent.
    pub video: Option<Tensor>,
    pub target: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossOptions {
    pub ctc_weight: f64,
    pub weights: EnhanceWeights,
    pub enhance_enabled: bool,
    pub update: BottleneckUpdate,
}

impl Default for LossOptions {
    fn default() -> Self {
        Self {
            ctc_weight: 0.1,
            weights: EnhanceWeights::default(),
            enhance_enabled: true,
            update: BottleneckUpdate::Averaged,
        }
    }
}

/// Tape handles of every loss term.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub ctc_a: Var,
    pub ctc_v: Option<Var>,
    pub att: Var,
    pub avsr: Var,
    pub recon: Option<Var>,
    pub percep: Option<Var>,
    pub total: Var,
}

impl LossVars {
    pub fn report(&self, tape: &Tape, opts: &LossOptions) -> LossReport {
        let v = |x: Option<Var>| x.map_or(0.0, |x| tape.scalar(x));
        LossReport::compose(
            tape.scalar(self.ctc_a),
            v(self.ctc_v),
            tape.scalar(self.att),
            v(self.recon),
            v(self.percep),
            opts.ctc_weight,
            opts.weights,
        )
    }
}

/// Encoder outputs of one utterance.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    pub z_a: Var,
    pub f_a: Var,
    pub f_v: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct AvsrModel {
    pub cfg: ModelConfig,
    pub vocab: Vocabulary,
    pub audio: AudioFrontend,
    pub video: VideoFrontend,
    pub avbc: Avbc,
    pub fusion: FusionEncoder,
    pub ctc: CtcProjection,
    pub decoder: TransformerDecoder,
    pub enhancer: SpectrogramDecoder,
}

impl AvsrModel {
    /// Builds the model and its freshly initialised parameters.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut init = Init::new(&mut store, &mut rng);
        let vocab = Vocabulary::characters();
        let d = cfg.encoder.d_model;
        let audio = AudioFrontend::new(
            &mut init.sub("audio"),
            cfg.mel.mel_bins,
            &cfg.encoder,
            cfg.feature_mean,
            cfg.feature_std,
        )?;
        let video = VideoFrontend::new(&mut init.sub("video"), &cfg.video, &cfg.encoder)?;
        let avbc = Avbc::new(
            &mut init.sub("avbc"),
            &cfg.encoder,
            cfg.avbc_layers,
            cfg.bottleneck_tokens,
            derive_seed(seed, &[0xB0]),
        )?;
        let fusion = FusionEncoder::new(&mut init.sub("fusion"), &cfg.fusion)?;
        let ctc = CtcProjection::new(&mut init.sub("ctc"), d, vocab.size());
        let decoder =
            TransformerDecoder::new(&mut init.sub("decoder"), &cfg.decoder, vocab.size())?;
        let enhancer = SpectrogramDecoder::new(&mut init.sub("enhancer"), d, &audio, cfg.upscale);
        let model = Self {
            cfg: cfg.clone(),
            vocab,
            audio,
            video,
            avbc,
            fusion,
            ctc,
            decoder,
            enhancer,
        };
        Ok((model, store))
    }

    /// Front-ends, AVBC, and fusion. `video = None` routes the AVBC with the
    /// video stream absent.
    pub fn encode(
        &self,
        cx: &mut Ctx,
        mel: Var,
        video: Option<Var>,
        update: BottleneckUpdate,
    ) -> Result<Encoded> {
        let h_a = self.audio.forward(cx, mel)?;
        let h_v = match video {
            Some(v) => Some(self.video.forward(cx, v)?),
            None => None,
        };
        if let Some(h_v) = h_v {
            let (na, nv) = (cx.tape.shape(h_a.tokens)[0], cx.tape.shape(h_v.tokens)[0]);
            if na != nv {
                return contract(format!("audio gives {na} tokens but video gives {nv}"));
            }
        }
        let (z_v, z_a) = self.avbc.encode(cx, h_v, h_a, update)?;
        let z_a_tokens = z_a.tokens;
        let (f_a, f_v) = self.fusion.forward(cx, z_a, z_v)?;
        Ok(Encoded {
            z_a: z_a_tokens,
            f_a: f_a.tokens,
            f_v: f_v.map(|f| f.tokens),
        })
    }

    /// The full training objective of one utterance. `percep_target`
    /// overrides the stop-gradient clean features; by default they are
    /// computed on the tape and detached.
    pub fn loss(
        &self,
        cx: &mut Ctx,
        item: &TrainItem,
        opts: &LossOptions,
        percep_target: Option<&Tensor>,
    ) -> Result<LossVars> {
        let mel = cx.tape.constant(item.noisy_mel.clone());
        let video = item.video.as_ref().map(|v| cx.tape.constant(v.clone()));
        let enc = self.encode(cx, mel, video, opts.update)?;

        let f_a = ModalitySequence::new(enc.f_a, Modality::FusedAudio);
        let lp_a = self.ctc.forward(cx, &f_a)?;
        let ctc_a = ctc_loss(cx.tape, lp_a, &item.target, BLANK)?;
        let ctc_v = match enc.f_v {
            Some(f) => {
                let lp_v = self
                    .ctc
                    .forward(cx, &ModalitySequence::new(f, Modality::FusedVideo))?;
                Some(ctc_loss(cx.tape, lp_v, &item.target, BLANK)?)
            }
            None => None,
        };
        let att = decoder_attention_loss(cx, &self.decoder, enc.f_a, &item.target)?;
        let avsr = hybrid_loss(cx.tape, ctc_a, ctc_v, att, opts.ctc_weight)?;

        let mut out = LossVars {
            ctc_a,
            ctc_v,
            att,
            avsr,
            recon: None,
            percep: None,
            total: avsr,
        };
        if opts.enhance_enabled {
            let frames = item.clean_mel.shape()[0];
            let x_hat = self.enhancer.forward(cx, enc.z_a, frames)?;
            let clean = cx.tape.constant(item.clean_mel.clone());
            let recon = recon_loss(cx.tape, x_hat, clean)?;
            let target = match percep_target {
                Some(t) => cx.tape.constant(t.clone()),
                None => perceptual_target(cx, &self.audio, clean)?,
            };
            let percep = perceptual_loss(cx, &self.audio, x_hat, target)?;
            let enh = enhance_loss(cx.tape, recon, percep, opts.weights)?;
            out.recon = Some(recon);
            out.percep = Some(percep);
            out.total = cx.tape.add(avsr, enh)?;
        }
        Ok(out)
    }

    /// Stop-gradient perceptual target `F(x_clean)` at the current parameters.
    pub fn perceptual_target_value(
        &self,
        store: &ParamStore,
        clean_mel: &Tensor,
    ) -> Result<Tensor> {
        let mut tape = Tape::new();
        let pv = store.bind_frozen(&mut tape);
        let mut cx = Ctx::new(&mut tape, &pv);
        let x = cx.tape.constant(clean_mel.clone());
        let f = perceptual_target(&mut cx, &self.audio, x)?;
        Ok(tape.value(f).clone())
    }

    /// Inference-time encoder outputs as plain tensors.
    pub fn encode_values(
        &self,
        store: &ParamStore,
        mel: &Tensor,
        video: Option<&Tensor>,
        update: BottleneckUpdate,
    ) -> Result<EncodedValues> {
        let mut tape = Tape::new();
        let pv = store.bind_frozen(&mut tape);
        let mut cx = Ctx::new(&mut tape, &pv);
        let m = cx.tape.constant(mel.clone());
        let v = video.map(|v| cx.tape.constant(v.clone()));
        let enc = self.encode(&mut cx, m, v, update)?;
        let x_hat = self.enhancer.forward(&mut cx, enc.z_a, mel.shape()[0])?;
        Ok(EncodedValues {
            z_a: tape.value(enc.z_a).clone(),
            f_a: tape.value(enc.f_a).clone(),
            reconstruction: tape.value(x_hat).clone(),
        })
    }

    /// Longest hypothesis (eos included) decoding may produce.
    pub fn max_decode_len(&self, tokens: usize) -> usize {
        tokens + 1
    }

    /// Decodes `f_a`. Width 1 runs the greedy search, which a width-1 beam
    /// reproduces exactly.
    pub fn transcribe(&self, store: &ParamStore, f_a: &Tensor, width: usize) -> Result<Hypothesis> {
        let max_len = self.max_decode_len(f_a.shape()[0]);
        if width == 1 {
            greedy_decode(store, &self.decoder, f_a, max_len)
        } else {
            beam_search(store, &self.decoder, f_a, width, max_len)
        }
    }
}

#[derive(Clone, Debug)]
pub struct EncodedValues {
    pub z_a: Tensor,
    pub f_a: Tensor,
    /// Enhancement decoder output for the input's frame count.
    pub reconstruction: Tensor,
}
