//! Synthetic trigger-phrase corpus and the on-disk feature/label formats.
//!
//! Utterances are token sequences rendered as noisy prototype vectors, built
//! so that confusable negatives share the trigger's acoustic prefix exactly
//! (same prototypes, same noise level) and differ only after a configurable
//! divergence point. With the divergence at the full phrase length, nothing
//! before the trigger boundary separates the classes; discrimination must
//! come from post-trigger context. Token prototypes are unit-norm with
//! pairwise cosine below 0.8 so the phonetic branch has a learnable task.
//!
//! Features are canonically f32 on disk. Corpus generation is a pure
//! function of its spec, including the seed.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::Matrix;

/// Token prototype bank: `V` unit-norm `F`-dim vectors plus rendering
/// parameters.
#[derive(Debug, Clone)]
pub struct TokenAlphabet {
    prototypes: Matrix<f32>,
    pub sigma: f64,
    pub frames_per_token: usize,
}

impl TokenAlphabet {
    /// Rejection-sample prototypes until all pairwise cosines are < 0.8.
    pub fn generate(
        feature_dim: usize,
        vocab: usize,
        sigma: f64,
        frames_per_token: usize,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        if feature_dim == 0 || vocab == 0 || frames_per_token == 0 {
            return Err(Error::InvalidConfig(
                "alphabet dimensions must be >= 1".into(),
            ));
        }
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidConfig(format!("bad sigma {sigma}")));
        }
        let mut prototypes = Matrix::zeros(vocab, feature_dim);
        let mut accepted = 0usize;
        let mut attempts = 0usize;
        while accepted < vocab {
            attempts += 1;
            if attempts > 1000 * vocab {
                return Err(Error::InvalidConfig(format!(
                    "cannot place {vocab} prototypes with pairwise cosine < 0.8 in {feature_dim} dims"
                )));
            }
            let mut cand: Vec<f64> = (0..feature_dim).map(|_| rng.normal()).collect();
            let norm = cand.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-9 {
                continue;
            }
            for v in cand.iter_mut() {
                *v /= norm;
            }
            let ok = (0..accepted).all(|p| {
                let cos: f64 = (0..feature_dim)
                    .map(|c| prototypes.at(p, c) as f64 * cand[c])
                    .sum();
                cos.abs() < 0.8
            });
            if ok {
                for (c, &v) in cand.iter().enumerate() {
                    prototypes.set(accepted, c, v as f32);
                }
                accepted += 1;
            }
        }
        Ok(TokenAlphabet {
            prototypes,
            sigma,
            frames_per_token,
        })
    }

    pub fn vocab(&self) -> usize {
        self.prototypes.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.prototypes.cols()
    }

    pub fn prototype(&self, token: usize) -> &[f32] {
        self.prototypes.row(token)
    }

    /// One rendered frame of `token`: prototype plus isotropic noise.
    fn render_frame(&self, token: usize, rng: &mut SplitMix64, out: &mut [f32]) {
        for (c, slot) in out.iter_mut().enumerate() {
            *slot = self.prototypes.at(token, c) + (self.sigma * rng.normal()) as f32;
        }
    }
}

/// One synthetic utterance with all its labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub features: Matrix<f32>,
    pub tokens: Vec<usize>,
    pub phrase_true: bool,
    /// Frame where the trigger phrase ends (where it would end, for
    /// negatives); post-trigger context starts here.
    pub trigger_end_frame: usize,
}

/// Full recipe for a corpus; generation is a pure function of this value.
#[derive(Debug, Clone)]
pub struct CorpusSpec {
    pub feature_dim: usize,
    pub vocab: usize,
    pub sigma: f64,
    pub frames_per_token: usize,
    /// Trigger phrase token sequence.
    pub trigger: Vec<usize>,
    /// Confusables copy `trigger[..divergence_point]` exactly, then diverge.
    pub divergence_point: usize,
    /// Token pool for post-trigger continuations of true triggers.
    pub true_continuation: Vec<usize>,
    /// Token pool for post-trigger continuations of confusables.
    pub confusable_continuation: Vec<usize>,
    pub post_trigger_tokens: usize,
    pub n_true: usize,
    pub n_confusable: usize,
    pub n_negative: usize,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            feature_dim: 16,
            vocab: 8,
            sigma: 0.3,
            frames_per_token: 6,
            trigger: vec![0, 1, 2, 3],
            divergence_point: 4,
            true_continuation: vec![0, 1, 2, 3],
            confusable_continuation: vec![4, 5, 6, 7],
            post_trigger_tokens: 4,
            n_true: 100,
            n_confusable: 100,
            n_negative: 50,
            seed: 1,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_true == 0 || self.n_confusable == 0 || self.n_negative == 0 {
            return Err(Error::InvalidConfig(
                "every utterance class needs a nonzero count".into(),
            ));
        }
        if self.trigger.is_empty() {
            return Err(Error::InvalidConfig("trigger phrase is empty".into()));
        }
        if self.divergence_point > self.trigger.len() {
            return Err(Error::InvalidConfig(format!(
                "divergence point {} exceeds trigger length {}",
                self.divergence_point,
                self.trigger.len()
            )));
        }
        for (name, pool) in [
            ("true_continuation", &self.true_continuation),
            ("confusable_continuation", &self.confusable_continuation),
        ] {
            if pool.is_empty() && self.post_trigger_tokens > 0 {
                return Err(Error::InvalidConfig(format!("{name} pool is empty")));
            }
            if let Some(&bad) = pool.iter().find(|&&t| t >= self.vocab) {
                return Err(Error::InvalidConfig(format!(
                    "{name} token {bad} outside vocabulary {}",
                    self.vocab
                )));
            }
        }
        if let Some(&bad) = self.trigger.iter().find(|&&t| t >= self.vocab) {
            return Err(Error::InvalidConfig(format!(
                "trigger token {bad} outside vocabulary {}",
                self.vocab
            )));
        }
        if self.vocab < 2 {
            return Err(Error::InvalidConfig(
                "need at least 2 tokens to build divergent confusables".into(),
            ));
        }
        Ok(())
    }

    pub fn trigger_end_frame(&self) -> usize {
        self.trigger.len() * self.frames_per_token
    }
}

/// Train/dev/test utterance sets, class-balanced 60/20/20.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub train: Vec<Utterance>,
    pub dev: Vec<Utterance>,
    pub test: Vec<Utterance>,
}

impl Corpus {
    pub fn splits(&self) -> [(&'static str, &[Utterance]); 3] {
        [
            ("train", &self.train),
            ("dev", &self.dev),
            ("test", &self.test),
        ]
    }
}

fn render_utterance(
    alphabet: &TokenAlphabet,
    id: String,
    tokens: Vec<usize>,
    phrase_true: bool,
    trigger_end_frame: usize,
    rng: &mut SplitMix64,
) -> Utterance {
    // Up to 2 jitter frames re-render the final token, so lengths vary
    // without moving the trigger boundary.
    let jitter = rng.below(3);
    let frames = tokens.len() * alphabet.frames_per_token + jitter;
    let mut features = Matrix::zeros(frames, alphabet.feature_dim());
    for t in 0..frames {
        let token = tokens[(t / alphabet.frames_per_token).min(tokens.len() - 1)];
        alphabet.render_frame(token, rng, features.row_mut(t));
    }
    Utterance {
        id,
        features,
        tokens,
        phrase_true,
        trigger_end_frame,
    }
}

fn pick(pool: &[usize], rng: &mut SplitMix64) -> usize {
    pool[rng.below(pool.len())]
}

/// Deterministic corpus generation, a pure function of the `CorpusSpec`:
/// three classes, balanced 60/20/20 splits, confusables sharing the trigger
/// prefix exactly up to the divergence point.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let rng = SplitMix64::new(spec.seed);
    let alphabet = TokenAlphabet::generate(
        spec.feature_dim,
        spec.vocab,
        spec.sigma,
        spec.frames_per_token,
        &mut rng.fork(0),
    )?;
    let mut class_rng = rng.fork(1);
    let trigger_end = spec.trigger_end_frame();

    let mut true_utts = Vec::with_capacity(spec.n_true);
    for i in 0..spec.n_true {
        let mut tokens = spec.trigger.clone();
        for _ in 0..spec.post_trigger_tokens {
            tokens.push(pick(&spec.true_continuation, &mut class_rng));
        }
        true_utts.push(render_utterance(
            &alphabet,
            format!("true_{i:04}"),
            tokens,
            true,
            trigger_end,
            &mut class_rng,
        ));
    }

    let mut conf_utts = Vec::with_capacity(spec.n_confusable);
    for i in 0..spec.n_confusable {
        let mut tokens: Vec<usize> = spec.trigger[..spec.divergence_point].to_vec();
        // Fill the remainder of the trigger window with tokens that differ
        // from the real phrase at the divergence point.
        for pos in spec.divergence_point..spec.trigger.len() {
            let mut t = class_rng.below(spec.vocab);
            if pos == spec.divergence_point {
                while t == spec.trigger[pos] {
                    t = class_rng.below(spec.vocab);
                }
            }
            tokens.push(t);
        }
        for _ in 0..spec.post_trigger_tokens {
            tokens.push(pick(&spec.confusable_continuation, &mut class_rng));
        }
        conf_utts.push(render_utterance(
            &alphabet,
            format!("conf_{i:04}"),
            tokens,
            false,
            trigger_end,
            &mut class_rng,
        ));
    }

    let mut neg_utts = Vec::with_capacity(spec.n_negative);
    for i in 0..spec.n_negative {
        let len = spec.trigger.len() + spec.post_trigger_tokens;
        let mut tokens = Vec::with_capacity(len);
        for pos in 0..len {
            let mut t = class_rng.below(spec.vocab);
            if pos == 0 {
                while t == spec.trigger[0] {
                    t = class_rng.below(spec.vocab);
                }
            }
            tokens.push(t);
        }
        neg_utts.push(render_utterance(
            &alphabet,
            format!("neg_{i:04}"),
            tokens,
            false,
            trigger_end,
            &mut class_rng,
        ));
    }

    // 60/20/20 per class, then a fixed shuffle inside each split so classes
    // interleave.
    let mut corpus = Corpus {
        train: Vec::new(),
        dev: Vec::new(),
        test: Vec::new(),
    };
    for utts in [true_utts, conf_utts, neg_utts] {
        let n = utts.len();
        let n_train = (n * 6).div_ceil(10).min(n);
        let n_dev = (n - n_train).div_ceil(2);
        for (i, u) in utts.into_iter().enumerate() {
            if i < n_train {
                corpus.train.push(u);
            } else if i < n_train + n_dev {
                corpus.dev.push(u);
            } else {
                corpus.test.push(u);
            }
        }
    }
    let mut shuffle_rng = rng.fork(2);
    shuffle_rng.shuffle(&mut corpus.train);
    shuffle_rng.shuffle(&mut corpus.dev);
    shuffle_rng.shuffle(&mut corpus.test);
    Ok(corpus)
}

const FEATURE_MAGIC: &[u8; 8] = b"SKWSFEAT";
const FEATURE_VERSION: u16 = 1;

/// Serialize features: magic, u16 version, u32 T, u32 F, then T*F f32
/// little-endian row-major.
pub fn feature_bytes(features: &Matrix<f32>) -> Result<Vec<u8>> {
    if !features.all_finite() {
        return Err(Error::NonFinite {
            context: "feature matrix".into(),
        });
    }
    let mut out = Vec::with_capacity(18 + features.data().len() * 4);
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&u32::try_from(features.rows()).unwrap().to_le_bytes());
    out.extend_from_slice(&u32::try_from(features.cols()).unwrap().to_le_bytes());
    for v in features.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn parse_features(bytes: &[u8]) -> Result<Matrix<f32>> {
    if bytes.len() < 18 {
        return Err(Error::Truncated("feature header".into()));
    }
    if &bytes[..8] != FEATURE_MAGIC {
        return Err(Error::BadMagic {
            expected: "SKWSFEAT",
            found: bytes[..8].to_vec(),
        });
    }
    let version = u16::from_le_bytes([bytes[8], bytes[9]]);
    if version != FEATURE_VERSION {
        return Err(Error::UnsupportedVersion {
            format: "feature file",
            version,
        });
    }
    let rows = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[14..18].try_into().unwrap()) as usize;
    let want = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Truncated("feature dimensions overflow".into()))?;
    let payload = &bytes[18..];
    if payload.len() != want {
        return Err(Error::Truncated(format!(
            "feature payload: header says {rows}x{cols} ({want} bytes), file carries {}",
            payload.len()
        )));
    }
    let mut data = Vec::with_capacity(rows * cols);
    for chunk in payload.chunks_exact(4) {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::NonFinite {
                context: "feature payload".into(),
            });
        }
        data.push(v);
    }
    Matrix::from_vec(rows, cols, data)
}

pub fn write_features(path: &Path, features: &Matrix<f32>) -> Result<()> {
    let bytes = feature_bytes(features)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_features(path: &Path) -> Result<Matrix<f32>> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    parse_features(&bytes)
}

/// Everything a label line carries; features live in their own file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelRecord {
    pub id: String,
    pub phrase_true: bool,
    pub trigger_end_frame: usize,
    pub tokens: Vec<usize>,
}

/// One utterance per line: `id<TAB>label<TAB>trigger_end<TAB>tokens`,
/// tokens space-separated (empty for token-free rows).
pub fn labels_text(utterances: &[Utterance]) -> String {
    let mut out = String::new();
    for u in utterances {
        let tokens = u
            .tokens
            .iter()
            .map(|t| t.to_string())
            .collect::<Vec<_>>()
            .join(" ");
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            u.id,
            u.phrase_true as u8,
            u.trigger_end_frame,
            tokens
        ));
    }
    out
}

pub fn parse_labels(text: &str, vocab: usize) -> Result<Vec<LabelRecord>> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let line_no = idx + 1;
        let fields: Vec<&str> = raw.split('\t').collect();
        if fields.len() != 4 {
            return Err(Error::MalformedLine {
                line: line_no,
                detail: format!("expected 4 tab-separated fields, got {}", fields.len()),
            });
        }
        let phrase_true = match fields[1] {
            "0" => false,
            "1" => true,
            other => {
                return Err(Error::MalformedLine {
                    line: line_no,
                    detail: format!("phrase label must be 0 or 1, got {other:?}"),
                })
            }
        };
        let trigger_end_frame = fields[2].parse::<usize>().map_err(|e| Error::MalformedLine {
            line: line_no,
            detail: format!("trigger end frame: {e}"),
        })?;
        let mut tokens = Vec::new();
        for tok in fields[3].split_whitespace() {
            let t = tok.parse::<usize>().map_err(|e| Error::MalformedLine {
                line: line_no,
                detail: format!("token id: {e}"),
            })?;
            if t >= vocab {
                return Err(Error::MalformedLine {
                    line: line_no,
                    detail: format!("token id {t} outside vocabulary {vocab}"),
                });
            }
            tokens.push(t);
        }
        out.push(LabelRecord {
            id: fields[0].to_string(),
            phrase_true,
            trigger_end_frame,
            tokens,
        });
    }
    Ok(out)
}

pub fn write_labels(path: &Path, utterances: &[Utterance]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(labels_text(utterances).as_bytes())?;
    Ok(())
}

pub fn read_labels(path: &Path, vocab: usize) -> Result<Vec<LabelRecord>> {
    parse_labels(&fs::read_to_string(path)?, vocab)
}

/// Lay a corpus out on disk: `<dir>/{train,dev,test}.labels` plus
/// `<dir>/features/<id>.feat`.
pub fn write_corpus(dir: &Path, corpus: &Corpus) -> Result<()> {
    let feat_dir = dir.join("features");
    fs::create_dir_all(&feat_dir)?;
    for (name, utts) in corpus.splits() {
        write_labels(&dir.join(format!("{name}.labels")), utts)?;
        for u in utts {
            write_features(&feat_dir.join(format!("{}.feat", u.id)), &u.features)?;
        }
    }
    Ok(())
}

/// Read one split back; `vocab` bounds the token ids.
pub fn read_split(dir: &Path, split: &str, vocab: usize) -> Result<Vec<Utterance>> {
    let records = read_labels(&dir.join(format!("{split}.labels")), vocab)?;
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        let features = read_features(&dir.join("features").join(format!("{}.feat", r.id)))?;
        out.push(Utterance {
            id: r.id,
            features,
            tokens: r.tokens,
            phrase_true: r.phrase_true,
            trigger_end_frame: r.trigger_end_frame,
        });
    }
    Ok(out)
}

/// Logistic probe on mean features over `frames[..limit]`: the oracle that
/// certifies how much class information a frame window carries. Returns dev
/// accuracy after a fixed number of gradient steps.
pub fn logistic_probe_accuracy(
    train: &[(&Matrix<f32>, bool)],
    dev: &[(&Matrix<f32>, bool)],
    frame_limit: impl Fn(&Matrix<f32>) -> usize,
    steps: usize,
) -> f64 {
    let dim = train[0].0.cols();
    let summarize = |m: &Matrix<f32>, limit: usize| -> Vec<f64> {
        let take = limit.clamp(1, m.rows());
        let mut mean = vec![0.0f64; dim];
        for t in 0..take {
            for (c, acc) in mean.iter_mut().enumerate() {
                *acc += m.at(t, c) as f64;
            }
        }
        for v in mean.iter_mut() {
            *v /= take as f64;
        }
        mean
    };
    let mut w = vec![0.0f64; dim];
    let mut b = 0.0f64;
    let lr = 0.5;
    for _ in 0..steps {
        let mut gw = vec![0.0f64; dim];
        let mut gb = 0.0f64;
        for &(m, label) in train {
            let x = summarize(m, frame_limit(m));
            let z: f64 = w.iter().zip(&x).map(|(wi, xi)| wi * xi).sum::<f64>() + b;
            let p = 1.0 / (1.0 + (-z).exp());
            let err = p - label as u8 as f64;
            for (g, xi) in gw.iter_mut().zip(&x) {
                *g += err * xi;
            }
            gb += err;
        }
        let n = train.len() as f64;
        for (wi, g) in w.iter_mut().zip(&gw) {
            *wi -= lr * g / n;
        }
        b -= lr * gb / n;
    }
    let mut correct = 0usize;
    for &(m, label) in dev {
        let x = summarize(m, frame_limit(m));
        let z: f64 = w.iter().zip(&x).map(|(wi, xi)| wi * xi).sum::<f64>() + b;
        if (z > 0.0) == label {
            correct += 1;
        }
    }
    correct as f64 / dev.len() as f64
}
