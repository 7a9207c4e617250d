use crate::kv::{join_list, KvDoc, KvError};

/// Which input modality a stream encodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stream {
    Visual,
    Audio,
}

impl Stream {
    pub fn prefix(self) -> &'static str {
        match self {
            Stream::Visual => "visual",
            Stream::Audio => "audio",
        }
    }
}

macro_rules! text_enum {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        impl std::fmt::Display for $name {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                f.write_str(match self { $($name::$variant => $text),+ })
            }
        }

        impl std::str::FromStr for $name {
            type Err = String;

            fn from_str(s: &str) -> Result<Self, String> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err(format!(
                        "expected one of [{}], got `{other}`",
                        [$($text),+].join(", ")
                    )),
                }
            }
        }
    };
}
pub(crate) use text_enum;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    /// Conv trunk, global pooling and two fully connected layers.
    Baseline,
    /// Conv trunk with local/global attention fusion over intermediate blocks.
    Attention,
}

text_enum!(Arch { Baseline => "baseline", Attention => "attention" });

/// How a local feature is scored against the global feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Compatibility {
    /// `1×1 conv(l + g)`.
    Additive,
    /// `⟨l, g⟩` per position.
    Dot,
}

text_enum!(Compatibility { Additive => "additive", Dot => "dot" });

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProjectorKind {
    Linear,
    Nonlinear,
}

text_enum!(ProjectorKind { Linear => "linear", Nonlinear => "nonlinear" });

/// Layout of both stream encoders.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub visual_channels: Vec<usize>,
    pub audio_channels: Vec<usize>,
    pub n_attention_taps: usize,
    pub embed_dim: usize,
    /// Width of the baseline's hidden fully connected layer before scaling.
    pub hidden_dim: usize,
    /// Multiplier on every channel count and the hidden width.
    pub width_scale: f64,
    pub compatibility: Compatibility,
    /// Input height × width of the visual stream.
    pub visual_size: (usize, usize),
    /// Mel bins × frames of the audio stream.
    pub audio_size: (usize, usize),
    /// Non-learned average pooling applied to inputs before the trunk.
    pub visual_stem_pool: usize,
    pub audio_stem_pool: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            visual_channels: vec![64, 128, 256, 512],
            audio_channels: vec![32, 64, 128, 256],
            n_attention_taps: 3,
            embed_dim: 128,
            hidden_dim: 512,
            width_scale: 1.0,
            compatibility: Compatibility::Additive,
            visual_size: (224, 224),
            audio_size: (64, 100),
            visual_stem_pool: 1,
            audio_stem_pool: 1,
        }
    }
}

impl EncoderConfig {
    fn scaled(&self, c: usize) -> usize {
        ((c as f64 * self.width_scale).round() as usize).max(1)
    }

    /// Channel widths after applying `width_scale`.
    pub fn channels(&self, stream: Stream) -> Vec<usize> {
        let base = match stream {
            Stream::Visual => &self.visual_channels,
            Stream::Audio => &self.audio_channels,
        };
        base.iter().map(|&c| self.scaled(c)).collect()
    }

    pub fn hidden(&self) -> usize {
        self.scaled(self.hidden_dim)
    }

    pub fn in_channels(stream: Stream) -> usize {
        match stream {
            Stream::Visual => 3,
            Stream::Audio => 1,
        }
    }

    pub fn input_size(&self, stream: Stream) -> (usize, usize) {
        match stream {
            Stream::Visual => self.visual_size,
            Stream::Audio => self.audio_size,
        }
    }

    pub fn stem_pool(&self, stream: Stream) -> usize {
        match stream {
            Stream::Visual => self.visual_stem_pool,
            Stream::Audio => self.audio_stem_pool,
        }
    }

    /// Spatial extent entering the first block.
    pub fn trunk_input(&self, stream: Stream) -> (usize, usize) {
        let (h, w) = self.input_size(stream);
        let k = self.stem_pool(stream);
        (h / k, w / k)
    }

    /// Pre-pool spatial extent at every block, following even-cropping and 2×2 pooling.
    pub fn block_extents(&self, stream: Stream) -> Vec<(usize, usize)> {
        let (mut h, mut w) = self.trunk_input(stream);
        let mut out = Vec::new();
        for _ in self.channels(stream) {
            out.push((h, w));
            h /= 2;
            w /= 2;
        }
        out
    }

    pub fn validate(&self) -> Result<(), String> {
        for stream in [Stream::Visual, Stream::Audio] {
            let ch = self.channels(stream);
            if ch.is_empty() {
                return Err(format!("{} encoder needs at least one block", stream.prefix()));
            }
            if self.n_attention_taps == 0 || self.n_attention_taps > ch.len() {
                return Err(format!(
                    "n_attention_taps {} must be in 1..={} for the {} stream",
                    self.n_attention_taps,
                    ch.len(),
                    stream.prefix()
                ));
            }
            let (h, w) = self.input_size(stream);
            let k = self.stem_pool(stream);
            if k == 0 || h % k != 0 || w % k != 0 {
                return Err(format!(
                    "{} stem pool {k} does not divide input {h}x{w}",
                    stream.prefix()
                ));
            }
            if let Some(&(bh, bw)) = self.block_extents(stream).last() {
                if bh < 2 || bw < 2 {
                    return Err(format!(
                        "{} input {h}x{w} is too small for {} blocks",
                        stream.prefix(),
                        ch.len()
                    ));
                }
            }
        }
        if self.embed_dim == 0 {
            return Err("embed_dim must be positive".into());
        }
        if !(self.width_scale > 0.0 && self.width_scale.is_finite()) {
            return Err(format!("width_scale must be positive, got {}", self.width_scale));
        }
        Ok(())
    }

    pub(crate) fn write_kv(&self, doc: &mut KvDoc) {
        doc.set("visual_channels", join_list(&self.visual_channels));
        doc.set("audio_channels", join_list(&self.audio_channels));
        doc.set("n_attention_taps", self.n_attention_taps);
        doc.set("embed_dim", self.embed_dim);
        doc.set("hidden_dim", self.hidden_dim);
        doc.set("width_scale", self.width_scale);
        doc.set("compatibility", self.compatibility);
        doc.set("visual_size", format!("{}x{}", self.visual_size.0, self.visual_size.1));
        doc.set("audio_size", format!("{}x{}", self.audio_size.0, self.audio_size.1));
        doc.set("visual_stem_pool", self.visual_stem_pool);
        doc.set("audio_stem_pool", self.audio_stem_pool);
    }

    pub(crate) const KEYS: &'static [&'static str] = &[
        "visual_channels",
        "audio_channels",
        "n_attention_taps",
        "embed_dim",
        "hidden_dim",
        "width_scale",
        "compatibility",
        "visual_size",
        "audio_size",
        "visual_stem_pool",
        "audio_stem_pool",
    ];

    /// Reads the encoder keys of `doc`, taking defaults for missing ones.
    pub fn from_kv(doc: &KvDoc) -> Result<Self, KvError> {
        let d = EncoderConfig::default();
        let size = |key: &str, default: (usize, usize)| -> Result<(usize, usize), KvError> {
            match doc.raw(key) {
                None => Ok(default),
                Some(v) => parse_size(v).ok_or_else(|| KvError::Value {
                    key: key.to_string(),
                    value: v.to_string(),
                    msg: "expected HxW".into(),
                }),
            }
        };
        Ok(EncoderConfig {
            visual_channels: doc.list("visual_channels")?.unwrap_or(d.visual_channels),
            audio_channels: doc.list("audio_channels")?.unwrap_or(d.audio_channels),
            n_attention_taps: doc.get_or("n_attention_taps", d.n_attention_taps)?,
            embed_dim: doc.get_or("embed_dim", d.embed_dim)?,
            hidden_dim: doc.get_or("hidden_dim", d.hidden_dim)?,
            width_scale: parse_ratio(doc, "width_scale", d.width_scale)?,
            compatibility: doc.get_or("compatibility", d.compatibility)?,
            visual_size: size("visual_size", d.visual_size)?,
            audio_size: size("audio_size", d.audio_size)?,
            visual_stem_pool: doc.get_or("visual_stem_pool", d.visual_stem_pool)?,
            audio_stem_pool: doc.get_or("audio_stem_pool", d.audio_stem_pool)?,
        })
    }
}

fn parse_size(v: &str) -> Option<(usize, usize)> {
    let (h, w) = v.split_once('x')?;
    Some((h.trim().parse().ok()?, w.trim().parse().ok()?))
}

/// Accepts `0.25` or `1/4`.
fn parse_ratio(doc: &KvDoc, key: &str, default: f64) -> Result<f64, KvError> {
    let Some(v) = doc.raw(key) else {
        return Ok(default);
    };
    let err = || KvError::Value {
        key: key.to_string(),
        value: v.to_string(),
        msg: "expected a number or a ratio like 1/4".into(),
    };
    match v.split_once('/') {
        Some((a, b)) => {
            let a: f64 = a.trim().parse().map_err(|_| err())?;
            let b: f64 = b.trim().parse().map_err(|_| err())?;
            Ok(a / b)
        }
        None => v.parse().map_err(|_| err()),
    }
}

/// Full two-stream model layout: encoders plus whichever heads are attached.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub arch: Arch,
    pub encoder: EncoderConfig,
    /// Distance-based correlation classifier.
    pub correlation_head: bool,
    /// Contrastive projection head.
    pub projector: Option<ProjectorKind>,
}

impl ModelSpec {
    pub fn to_kv(&self) -> KvDoc {
        let mut doc = KvDoc::default();
        doc.set("arch", self.arch);
        self.encoder.write_kv(&mut doc);
        doc.set("correlation_head", self.correlation_head);
        doc.set(
            "projector",
            self.projector.map_or("none".to_string(), |p| p.to_string()),
        );
        doc
    }

    pub fn from_kv(doc: &KvDoc) -> Result<Self, KvError> {
        let projector = match doc.raw("projector") {
            None | Some("none") => None,
            Some(_) => Some(doc.require::<ProjectorKind>("projector")?),
        };
        Ok(ModelSpec {
            arch: doc.require("arch")?,
            encoder: EncoderConfig::from_kv(doc)?,
            correlation_head: doc.get_or("correlation_head", false)?,
            projector,
        })
    }
}
