//! Clip manifests, WAV ingestion, random cropping and the synthetic machine corpus.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SAMPLE_RATE: u32 = 16_000;
/// Full-scale constant of signed 16-bit PCM.
pub const PCM_FULL_SCALE: f64 = 32_768.0;
pub const MANIFEST_HEADER: [&str; 6] = ["id", "path", "machine_type", "domain", "split", "label"];

pub type Result<T> = std::result::Result<T, DatasetError>;

#[derive(Error, Debug)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest {path}: {msg}")]
    Malformed { path: PathBuf, msg: String },
    #[error("manifest row {row}: invalid domain {value:?} (expected source|target)")]
    InvalidDomain { row: usize, value: String },
    #[error("manifest row {row}: invalid split {value:?} (expected train|test)")]
    InvalidSplit { row: usize, value: String },
    #[error("manifest row {row}: invalid label {value:?} (expected normal|anomalous|unknown)")]
    InvalidLabel { row: usize, value: String },
    #[error("manifest row {row}: clip {id:?} is labelled anomalous inside split=train")]
    AnomalousInTrain { row: usize, id: String },
    #[error("manifest row {row}: clip {id:?} has label unknown inside split=train")]
    UnknownInTrain { row: usize, id: String },
    #[error("manifest row {row}: duplicate clip id {id:?}")]
    DuplicateId { row: usize, id: String },
    #[error("manifest row {row}: referenced file {path} does not exist")]
    MissingFile { row: usize, path: PathBuf },
    #[error("{path}: {msg}")]
    Wav { path: PathBuf, msg: String },
    #[error("sample rate mismatch: file is {0} Hz, expected 16000 Hz")]
    SampleRateMismatch(u32),
    #[error("{0}: audio contains no samples")]
    EmptyAudio(PathBuf),
    #[error("clip of {have} samples is shorter than the requested {needed}")]
    ClipTooShort { needed: usize, have: usize },
    #[error("invalid synthesis spec: {0}")]
    InvalidSpec(String),
}

macro_rules! text_enum {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(rename_all = "snake_case")]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = String;
            fn from_str(s: &str) -> std::result::Result<Self, String> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err(other.to_string()),
                }
            }
        }
    };
}

text_enum!(Domain { Source => "source", Target => "target" });
text_enum!(Split { Train => "train", Test => "test" });
text_enum!(Label { Normal => "normal", Anomalous => "anomalous", Unknown => "unknown" });

/// One manifest row. `path` is kept as written; see [`Manifest::resolve`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClipMeta {
    pub id: String,
    pub path: PathBuf,
    pub machine_type: String,
    pub domain: Domain,
    pub split: Split,
    pub label: Label,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    pub meta: ClipMeta,
    /// Mono samples in [-1, 1] at 16 kHz.
    pub samples: Vec<f64>,
}

impl Clip {
    pub fn seconds(&self) -> f64 {
        self.samples.len() as f64 / SAMPLE_RATE as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub entries: Vec<ClipMeta>,
}

impl Manifest {
    pub fn resolve(&self, meta: &ClipMeta) -> PathBuf {
        self.root.join(&meta.path)
    }

    /// Machine types in order of first appearance.
    pub fn machine_types(&self) -> Vec<String> {
        let mut seen = HashSet::new();
        self.entries
            .iter()
            .filter(|e| seen.insert(e.machine_type.as_str()))
            .map(|e| e.machine_type.clone())
            .collect()
    }

    pub fn select<'a>(&'a self, machine_type: &'a str, split: Split) -> impl Iterator<Item = &'a ClipMeta> + 'a {
        self.entries
            .iter()
            .filter(move |e| e.machine_type == machine_type && e.split == split)
    }

    pub fn read(&self, meta: &ClipMeta) -> Result<Clip> {
        let samples = read_wav(&self.resolve(meta))?;
        Ok(Clip {
            meta: meta.clone(),
            samples,
        })
    }

    pub fn read_all<'a>(&self, metas: impl IntoIterator<Item = &'a ClipMeta>) -> Result<Vec<Clip>> {
        metas.into_iter().map(|m| self.read(m)).collect()
    }
}

fn parse_field<T: FromStr<Err = String>>(
    value: &str,
    row: usize,
    err: impl Fn(usize, String) -> DatasetError,
) -> Result<T> {
    value.parse().map_err(|v| err(row, v))
}

/// Loads and validates a manifest. Relative paths resolve against the manifest's directory.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let root = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let malformed = |msg: String| DatasetError::Malformed {
        path: path.to_path_buf(),
        msg,
    };
    let mut reader = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let header = reader.headers().map_err(|e| malformed(e.to_string()))?.clone();
    if header.iter().ne(MANIFEST_HEADER.iter().copied()) {
        return Err(malformed(format!(
            "header must be `{}`, found `{}`",
            MANIFEST_HEADER.join(","),
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut entries = Vec::new();
    let mut ids = HashSet::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| malformed(format!("row {row}: {e}")))?;
        let field = |k: usize| record.get(k).unwrap_or("").trim();
        if (0..4).any(|k| field(k).is_empty()) {
            return Err(malformed(format!("row {row}: empty id, path or machine_type")));
        }
        let meta = ClipMeta {
            id: field(0).to_string(),
            path: PathBuf::from(field(1)),
            machine_type: field(2).to_string(),
            domain: parse_field(field(3), row, |row, value| DatasetError::InvalidDomain { row, value })?,
            split: parse_field(field(4), row, |row, value| DatasetError::InvalidSplit { row, value })?,
            label: parse_field(field(5), row, |row, value| DatasetError::InvalidLabel { row, value })?,
        };
        if meta.split == Split::Train {
            match meta.label {
                Label::Anomalous => return Err(DatasetError::AnomalousInTrain { row, id: meta.id }),
                Label::Unknown => return Err(DatasetError::UnknownInTrain { row, id: meta.id }),
                Label::Normal => {}
            }
        }
        if !ids.insert(meta.id.clone()) {
            return Err(DatasetError::DuplicateId { row, id: meta.id });
        }
        let resolved = root.join(&meta.path);
        if !resolved.is_file() {
            return Err(DatasetError::MissingFile { row, path: resolved });
        }
        entries.push(meta);
    }
    Ok(Manifest { root, entries })
}

pub fn write_manifest(manifest: &Manifest, path: &Path) -> Result<()> {
    let io = |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut writer = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| DatasetError::Malformed {
        path: path.to_path_buf(),
        msg: e.to_string(),
    };
    writer.write_record(MANIFEST_HEADER).map_err(csv_err)?;
    for e in &manifest.entries {
        let p = e.path.to_string_lossy();
        writer
            .write_record([
                e.id.as_str(),
                p.as_ref(),
                e.machine_type.as_str(),
                e.domain.as_str(),
                e.split.as_str(),
                e.label.as_str(),
            ])
            .map_err(csv_err)?;
    }
    let bytes = writer.into_inner().map_err(|e| io(e.into_error()))?;
    fs::write(path, bytes).map_err(io)
}

/// Reads a 16-bit PCM WAV as mono (channel mean) samples scaled by 1/32768.
pub fn read_wav(path: &Path) -> Result<Vec<f64>> {
    let wav_err = |msg: String| DatasetError::Wav {
        path: path.to_path_buf(),
        msg,
    };
    let mut reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(source) => DatasetError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => wav_err(other.to_string()),
    })?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(wav_err(format!(
            "expected 16-bit integer PCM, found {:?} at {} bits",
            spec.sample_format, spec.bits_per_sample
        )));
    }
    if spec.sample_rate != SAMPLE_RATE {
        return Err(DatasetError::SampleRateMismatch(spec.sample_rate));
    }
    let channels = spec.channels as usize;
    let raw: Vec<i16> = reader
        .samples::<i16>()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| wav_err(e.to_string()))?;
    if raw.is_empty() || channels == 0 {
        return Err(DatasetError::EmptyAudio(path.to_path_buf()));
    }
    let scale = 1.0 / (channels as f64 * PCM_FULL_SCALE);
    Ok(raw
        .chunks_exact(channels)
        .map(|frame| frame.iter().map(|&s| s as f64).sum::<f64>() * scale)
        .collect())
}

/// Writes mono samples as 16-bit PCM at 16 kHz, saturating outside [-1, 1).
pub fn write_wav(path: &Path, samples: &[f64]) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let wav_err = |e: hound::Error| DatasetError::Wav {
        path: path.to_path_buf(),
        msg: e.to_string(),
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(wav_err)?;
    for &x in samples {
        let q = (x * PCM_FULL_SCALE).round().clamp(-PCM_FULL_SCALE, PCM_FULL_SCALE - 1.0);
        writer.write_sample(q as i16).map_err(wav_err)?;
    }
    writer.finalize().map_err(wav_err)
}

pub fn seconds_to_samples(seconds: f64) -> usize {
    (seconds * SAMPLE_RATE as f64).round() as usize
}

/// Contiguous window of `seconds` with a uniformly drawn start offset.
pub fn random_trim<R: Rng + ?Sized>(samples: &[f64], seconds: f64, rng: &mut R) -> Result<Vec<f64>> {
    let (offset, n) = random_trim_offset(samples.len(), seconds, rng)?;
    Ok(samples[offset..offset + n].to_vec())
}

/// The `(offset, length)` pair [`random_trim`] would use.
pub fn random_trim_offset<R: Rng + ?Sized>(len: usize, seconds: f64, rng: &mut R) -> Result<(usize, usize)> {
    let n = seconds_to_samples(seconds);
    if n == 0 || len < n {
        return Err(DatasetError::ClipTooShort { needed: n, have: len });
    }
    Ok((rng.gen_range(0..=len - n), n))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyKind {
    /// All tone frequencies scaled by `1 + strength`.
    ToneShift,
    /// Extra band-limited noise at `strength` times the clip's tonal RMS.
    BandNoise,
    /// Sinusoidal amplitude modulation of depth `strength`.
    AmplitudeMod,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub machine_types: Vec<String>,
    /// Train clips per machine type.
    pub clips_per_type: usize,
    /// Test clips per machine type, split evenly over label and domain.
    pub test_clips_per_type: usize,
    pub clip_seconds: f64,
    /// Inclusive range of the number of tones per machine.
    pub tones_per_machine: [usize; 2],
    pub tone_band: [f64; 2],
    pub noise_level: f64,
    pub anomaly_kind: AnomalyKind,
    pub anomaly_strength: f64,
    /// Fraction of train clips recorded in the target domain.
    pub target_fraction: f64,
    /// Relative change of the noise floor and tone balance in the target domain.
    pub domain_shift: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            machine_types: ["fan", "pump", "slider", "valve", "gearbox", "bearing"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            clips_per_type: 40,
            test_clips_per_type: 40,
            clip_seconds: 2.0,
            tones_per_machine: [3, 5],
            tone_band: [150.0, 3000.0],
            noise_level: 0.01,
            anomaly_kind: AnomalyKind::ToneShift,
            anomaly_strength: 0.1,
            target_fraction: 0.1,
            domain_shift: 0.3,
            seed: 7,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DatasetError::InvalidSpec(m));
        if self.machine_types.is_empty() {
            return bad("machine_types is empty".into());
        }
        let mut seen = HashSet::new();
        for m in &self.machine_types {
            if m.is_empty() || m.contains(['/', '\\', ',', '"']) || m == "." || m == ".." {
                return bad(format!("machine type {m:?} is not a plain name"));
            }
            if !seen.insert(m) {
                return bad(format!("machine type {m:?} listed twice"));
            }
        }
        if self.clips_per_type == 0 {
            return bad("clips_per_type must be > 0".into());
        }
        if !(self.clip_seconds >= 2.0) {
            return bad(format!("clip_seconds = {} must be >= 2", self.clip_seconds));
        }
        let [lo, hi] = self.tones_per_machine;
        if lo == 0 || lo > hi {
            return bad(format!("tones_per_machine = [{lo}, {hi}] is not a positive range"));
        }
        let [f0, f1] = self.tone_band;
        let nyquist = SAMPLE_RATE as f64 / 2.0;
        if !(f0 > 0.0 && f0 < f1 && f1 < nyquist) {
            return bad(format!("tone_band = [{f0}, {f1}] must lie inside (0, {nyquist}) Hz"));
        }
        if self.anomaly_kind == AnomalyKind::ToneShift && f1 * (1.0 + self.anomaly_strength) >= nyquist {
            return bad("tone_shift would move tones past Nyquist".into());
        }
        if !(self.anomaly_strength > 0.0 && self.anomaly_strength.is_finite()) {
            return bad(format!("anomaly_strength = {} must be > 0", self.anomaly_strength));
        }
        if !(self.noise_level >= 0.0 && self.noise_level.is_finite()) {
            return bad("noise_level must be finite and >= 0".into());
        }
        if !(0.0..=1.0).contains(&self.target_fraction) {
            return bad("target_fraction must lie in [0, 1]".into());
        }
        if !(self.domain_shift >= 0.0 && self.domain_shift < 1.0) {
            return bad("domain_shift must lie in [0, 1)".into());
        }
        Ok(())
    }
}

/// Generator parameters of one synthetic machine.
#[derive(Debug, Clone, PartialEq)]
pub struct MachineSignature {
    pub tone_freqs: Vec<f64>,
    pub tone_amps: Vec<f64>,
    pub noise_center: f64,
    pub noise_q: f64,
}

fn mix_seed(seed: u64, tags: &[u64]) -> u64 {
    // splitmix64 over the tag sequence
    let mut z = seed;
    for &t in tags {
        z = z.wrapping_add(t.wrapping_mul(0x9E37_79B9_7F4A_7C15)).wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

fn sub_rng(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(seed, tags))
}

pub fn machine_signature(spec: &SynthSpec, machine_index: usize) -> MachineSignature {
    let mut rng = sub_rng(spec.seed, &[1, machine_index as u64]);
    let [lo, hi] = spec.tones_per_machine;
    let count = rng.gen_range(lo..=hi);
    let [f0, f1] = spec.tone_band;
    // log-uniform frequencies keep low tones from crowding
    let mut tone_freqs: Vec<f64> = (0..count)
        .map(|_| (f0.ln() + rng.gen::<f64>() * (f1.ln() - f0.ln())).exp())
        .collect();
    tone_freqs.sort_by(f64::total_cmp);
    let tone_amps = (0..count).map(|_| rng.gen_range(0.3..1.0)).collect();
    let noise_center = (f0.ln() + rng.gen::<f64>() * (f1.ln() - f0.ln())).exp();
    MachineSignature {
        tone_freqs,
        tone_amps,
        noise_center,
        noise_q: rng.gen_range(1.0..4.0),
    }
}

/// RBJ constant-peak-gain band-pass biquad applied to `x`.
fn band_pass(x: &[f64], center: f64, q: f64) -> Vec<f64> {
    let w0 = 2.0 * std::f64::consts::PI * center / SAMPLE_RATE as f64;
    let alpha = w0.sin() / (2.0 * q);
    let a0 = 1.0 + alpha;
    let (b0, b2) = (alpha / a0, -alpha / a0);
    let (a1, a2) = (-2.0 * w0.cos() / a0, (1.0 - alpha) / a0);
    let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
    x.iter()
        .map(|&x0| {
            let y0 = b0 * x0 + b2 * x2 - a1 * y1 - a2 * y2;
            x2 = x1;
            x1 = x0;
            y2 = y1;
            y1 = y0;
            y0
        })
        .collect()
}

fn unit_rms(mut x: Vec<f64>) -> Vec<f64> {
    let r = crate::dsp::rms(&x);
    if r > 0.0 {
        x.iter_mut().for_each(|v| *v /= r);
    }
    x
}

/// Tonal RMS of a rendered clip before noise is added.
const TONE_RMS: f64 = 0.1;

fn render_clip(
    spec: &SynthSpec,
    sig: &MachineSignature,
    domain: Domain,
    label: Label,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let n = seconds_to_samples(spec.clip_seconds);
    let sr = SAMPLE_RATE as f64;
    let two_pi = 2.0 * std::f64::consts::PI;
    let anomalous = label == Label::Anomalous;
    let freq_scale = if anomalous && spec.anomaly_kind == AnomalyKind::ToneShift {
        1.0 + spec.anomaly_strength
    } else {
        1.0
    };
    let k = sig.tone_freqs.len();
    let mut tones = vec![0.0; n];
    for (i, (&f, &a)) in sig.tone_freqs.iter().zip(&sig.tone_amps).enumerate() {
        let phase = rng.gen::<f64>() * two_pi;
        let jitter = 1.0 + 0.002 * rng.sample::<f64, _>(StandardNormal);
        let mut amp = a * (1.0 + 0.02 * rng.sample::<f64, _>(StandardNormal));
        if domain == Domain::Target {
            // tilt the tone balance towards the upper tones
            let tilt = if k > 1 { i as f64 / (k - 1) as f64 - 0.5 } else { 0.0 };
            amp *= 1.0 + spec.domain_shift * tilt;
        }
        let w = two_pi * f * freq_scale * jitter / sr;
        for (t, v) in tones.iter_mut().enumerate() {
            *v += amp * (w * t as f64 + phase).sin();
        }
    }
    let tone_scale = TONE_RMS / crate::dsp::rms(&tones).max(1e-12);
    tones.iter_mut().for_each(|v| *v *= tone_scale);

    let white: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let floor = unit_rms(band_pass(&white, sig.noise_center, sig.noise_q));
    let noise_gain = spec.noise_level
        * if domain == Domain::Target {
            1.0 + spec.domain_shift
        } else {
            1.0
        };
    let mut x: Vec<f64> = tones.iter().zip(&floor).map(|(t, f)| t + noise_gain * f).collect();

    if anomalous {
        match spec.anomaly_kind {
            AnomalyKind::ToneShift => {}
            AnomalyKind::BandNoise => {
                let [f0, f1] = spec.tone_band;
                let center = rng.gen_range(f0..f1);
                let white: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
                let burst = unit_rms(band_pass(&white, center, 4.0));
                let g = spec.anomaly_strength * TONE_RMS;
                x.iter_mut().zip(&burst).for_each(|(v, b)| *v += g * b);
            }
            AnomalyKind::AmplitudeMod => {
                let fm = rng.gen_range(2.0..8.0);
                let ph = rng.gen::<f64>() * two_pi;
                for (t, v) in x.iter_mut().enumerate() {
                    *v *= 1.0 + spec.anomaly_strength * (two_pi * fm * t as f64 / sr + ph).sin();
                }
            }
        }
    }
    x
}

/// Writes `<out>/<machine>/<split>/<id>.wav` plus `<out>/manifest.csv` and returns the manifest.
pub fn synth_generate(spec: &SynthSpec, out_dir: &Path) -> Result<Manifest> {
    spec.validate()?;
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| DatasetError::Io { path, source }
    };
    fs::create_dir_all(out_dir).map_err(io(out_dir))?;
    let n_target_train = (spec.clips_per_type as f64 * spec.target_fraction).round() as usize;
    let mut entries = Vec::new();
    for (mi, machine) in spec.machine_types.iter().enumerate() {
        let sig = machine_signature(spec, mi);
        for split in [Split::Train, Split::Test] {
            let dir = out_dir.join(machine).join(split.as_str());
            fs::create_dir_all(&dir).map_err(io(&dir))?;
            let count = match split {
                Split::Train => spec.clips_per_type,
                Split::Test => spec.test_clips_per_type,
            };
            for idx in 0..count {
                let (domain, label) = match split {
                    Split::Train => {
                        let d = if idx >= count - n_target_train { Domain::Target } else { Domain::Source };
                        (d, Label::Normal)
                    }
                    Split::Test => {
                        let l = if idx % 2 == 1 { Label::Anomalous } else { Label::Normal };
                        let d = if (idx / 2) % 2 == 1 { Domain::Target } else { Domain::Source };
                        (d, l)
                    }
                };
                let split_tag = if split == Split::Train { 0 } else { 1 };
                let mut rng = sub_rng(spec.seed, &[2, mi as u64, split_tag, idx as u64]);
                let samples = render_clip(spec, &sig, domain, label, &mut rng);
                let id = format!("{machine}_{}_{idx:04}", split.as_str());
                let rel = PathBuf::from(machine).join(split.as_str()).join(format!("{id}.wav"));
                write_wav(&out_dir.join(&rel), &samples)?;
                entries.push(ClipMeta {
                    id,
                    path: rel,
                    machine_type: machine.clone(),
                    domain,
                    split,
                    label,
                });
            }
        }
    }
    let manifest = Manifest {
        root: out_dir.to_path_buf(),
        entries,
    };
    write_manifest(&manifest, &out_dir.join("manifest.csv"))?;
    Ok(manifest)
}
