//! Synthetic token world with an exactly computable notion of response
//! quality.
//!
//! The world assigns every (prompt, response) pair a hidden quality score:
//! a prompt-conditioned weighted sum of unigram and bigram matches plus a
//! length-regularity term, and optionally a brevity term when the prompt
//! carries a rule. Quality is rich enough that a policy has to learn
//! content, yet cheap enough that the best response can be found by
//! exhaustive enumeration at desk scale, which is what makes every
//! downstream claim checkable.
//!
//! Preferences between responses come from a Bradley-Terry annotator: the
//! probability that the first response is preferred is the sigmoid of the
//! quality gap divided by the annotator temperature. Temperature is the
//! label-noise knob; 1.0 is the default.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::binary_softmax;
use crate::seeds;

pub type Token = u16;

/// Token space: ids `0..content_size` are content tokens; the six reserved
/// ids follow, in this order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub content_size: usize,
}

impl Vocab {
    pub const RESERVED: usize = 6;

    pub fn new(content_size: usize) -> Result<Self> {
        if content_size < 2 {
            return Err(Error::contract(format!(
                "Vocab: need at least 2 content tokens, got {content_size}"
            )));
        }
        Ok(Vocab { content_size })
    }

    /// Total size including reserved ids.
    pub fn size(&self) -> usize {
        self.content_size + Self::RESERVED
    }

    pub fn separator(&self) -> Token {
        self.content_size as Token
    }

    pub fn rule_marker(&self) -> Token {
        (self.content_size + 1) as Token
    }

    pub fn mask(&self) -> Token {
        (self.content_size + 2) as Token
    }

    pub fn yes(&self) -> Token {
        (self.content_size + 3) as Token
    }

    pub fn no(&self) -> Token {
        (self.content_size + 4) as Token
    }

    pub fn eos(&self) -> Token {
        (self.content_size + 5) as Token
    }

    pub fn is_content(&self, t: Token) -> bool {
        (t as usize) < self.content_size
    }

    pub fn in_range(&self, t: Token) -> bool {
        (t as usize) < self.size()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Prompt {
    pub tokens: Vec<Token>,
    /// Optional rule tokens; empty means no rule. The only rule family is
    /// "prefer shorter responses", selected by any non-empty rule.
    pub rule: Vec<Token>,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Response {
    pub tokens: Vec<Token>,
}

impl Response {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Which side of a comparison the annotator preferred.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    First,
    Second,
}

impl Label {
    pub fn flipped(self) -> Self {
        match self {
            Label::First => Label::Second,
            Label::Second => Label::First,
        }
    }
}

/// Provenance of a comparison instance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceTag {
    /// Drawn from the annotator.
    Oracle,
    /// Produced by swap augmentation from an oracle instance.
    Flipped,
}

/// One labelled ordered pair of responses to a prompt.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonInstance {
    pub prompt: Prompt,
    pub first: Response,
    pub second: Response,
    pub label: Label,
    pub source: SourceTag,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    /// Number of content tokens. Default: 8.
    pub content_tokens: usize,
    /// Prompt length bounds, inclusive. Defaults: 4 and 8.
    pub min_prompt_len: usize,
    pub max_prompt_len: usize,
    /// Maximum response length. Default: 4.
    pub max_response_len: usize,
    /// Bradley-Terry annotator temperature (label-noise knob). Default: 1.0.
    pub annotator_temperature: f64,
    /// Fraction of sampled prompts carrying the brevity rule. Default: 0.0.
    pub rule_fraction: f64,
    /// Scale of the hidden unigram weights. Default: 1.0.
    pub unigram_scale: f64,
    /// Scale of the hidden bigram weights. Default: 0.6.
    pub bigram_scale: f64,
    /// Weight of the squared deviation from the preferred length. Default: 0.8.
    pub length_weight: f64,
    /// Per-token brevity penalty applied when a rule is present. Default: 1.0.
    pub rule_length_weight: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            content_tokens: 8,
            min_prompt_len: 4,
            max_prompt_len: 8,
            max_response_len: 4,
            annotator_temperature: 1.0,
            rule_fraction: 0.0,
            unigram_scale: 1.0,
            bigram_scale: 0.6,
            length_weight: 0.8,
            rule_length_weight: 1.0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.content_tokens < 2 {
            return Err(Error::config("world.content_tokens must be at least 2"));
        }
        if self.min_prompt_len == 0 || self.min_prompt_len > self.max_prompt_len {
            return Err(Error::config(
                "world prompt length bounds must satisfy 1 <= min <= max",
            ));
        }
        if self.max_response_len == 0 {
            return Err(Error::config("world.max_response_len must be positive"));
        }
        if !(self.annotator_temperature > 0.0) {
            return Err(Error::config(
                "world.annotator_temperature must be positive",
            ));
        }
        if !(0.0..=1.0).contains(&self.rule_fraction) {
            return Err(Error::config("world.rule_fraction must be in [0, 1]"));
        }
        Ok(())
    }
}

/// The synthetic world: vocabulary, hidden quality tables, and annotator.
///
/// All hidden state is drawn once from the construction seed; two worlds
/// built from the same config and seed are identical.
#[derive(Clone, Debug)]
pub struct SynthWorld {
    config: WorldConfig,
    seed: u64,
    vocab: Vocab,
    /// `unigram[bucket][token]`
    unigram: Vec<Vec<f64>>,
    /// `bigram[bucket][a * content + b]`
    bigram: Vec<Vec<f64>>,
    /// Preferred response length per bucket.
    target_len: Vec<usize>,
}

impl SynthWorld {
    pub fn new(config: WorldConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let vocab = Vocab::new(config.content_tokens)?;
        let c = config.content_tokens;
        let buckets = c;
        let mut rng = seeds::rng(seed, "world-quality");
        let mut normal = |scale: f64| -> f64 {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * scale
        };
        let unigram: Vec<Vec<f64>> = (0..buckets)
            .map(|_| (0..c).map(|_| normal(config.unigram_scale)).collect())
            .collect();
        let bigram: Vec<Vec<f64>> = (0..buckets)
            .map(|_| (0..c * c).map(|_| normal(config.bigram_scale)).collect())
            .collect();
        let lo = config.max_response_len.div_ceil(2);
        let hi = config.max_response_len;
        let target_len: Vec<usize> = (0..buckets)
            .map(|_| rng.gen_range(lo..=hi))
            .collect();
        Ok(SynthWorld {
            config,
            seed,
            vocab,
            unigram,
            bigram,
            target_len,
        })
    }

    pub fn config(&self) -> &WorldConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn vocab(&self) -> Vocab {
        self.vocab
    }

    pub fn max_response_len(&self) -> usize {
        self.config.max_response_len
    }

    pub fn annotator_temperature(&self) -> f64 {
        self.config.annotator_temperature
    }

    /// The quality bucket of a prompt: the most frequent content token,
    /// smallest id on ties. Deterministic and cheap, and recoverable from a
    /// pooled token representation, so small models can learn it.
    pub fn bucket(&self, prompt: &Prompt) -> usize {
        let mut counts = vec![0usize; self.config.content_tokens];
        for &t in &prompt.tokens {
            if self.vocab.is_content(t) {
                counts[t as usize] += 1;
            }
        }
        let mut best = 0;
        for (i, &c) in counts.iter().enumerate() {
            if c > counts[best] {
                best = i;
            }
        }
        best
    }

    fn check_response(&self, response: &Response) -> Result<()> {
        for &t in &response.tokens {
            if !self.vocab.is_content(t) {
                return Err(Error::contract(format!(
                    "hidden_quality: token {t} is not a content token (content size {})",
                    self.config.content_tokens
                )));
            }
        }
        if response.len() > self.config.max_response_len {
            return Err(Error::contract(format!(
                "hidden_quality: response length {} exceeds max {}",
                response.len(),
                self.config.max_response_len
            )));
        }
        Ok(())
    }

    /// Hidden quality of a response to a prompt. Pure in its inputs.
    pub fn hidden_quality(&self, prompt: &Prompt, response: &Response) -> Result<f64> {
        self.check_response(response)?;
        let b = self.bucket(prompt);
        let uni = &self.unigram[b];
        let big = &self.bigram[b];
        let c = self.config.content_tokens;
        let mut q = 0.0;
        for &t in &response.tokens {
            q += uni[t as usize];
        }
        for w in response.tokens.windows(2) {
            q += big[w[0] as usize * c + w[1] as usize];
        }
        let dl = response.len() as f64 - self.target_len[b] as f64;
        q -= self.config.length_weight * dl * dl;
        if !prompt.rule.is_empty() {
            q -= self.config.rule_length_weight * response.len() as f64;
        }
        Ok(q)
    }

    /// Probability that the annotator prefers `y1` over `y2`: the sigmoid of
    /// the quality gap over temperature. Complementary probabilities sum to
    /// 1 exactly.
    pub fn oracle_prefer_prob(&self, prompt: &Prompt, y1: &Response, y2: &Response) -> Result<f64> {
        let q1 = self.hidden_quality(prompt, y1)?;
        let q2 = self.hidden_quality(prompt, y2)?;
        let tau = self.config.annotator_temperature;
        let (p, _) = binary_softmax(q1 / tau, q2 / tau)?;
        Ok(p)
    }

    /// Draw a preference label between `y1` and `y2`.
    pub fn oracle_prefer(
        &self,
        prompt: &Prompt,
        y1: &Response,
        y2: &Response,
        rng: &mut ChaCha8Rng,
    ) -> Result<Label> {
        let p = self.oracle_prefer_prob(prompt, y1, y2)?;
        Ok(if rng.gen::<f64>() < p {
            Label::First
        } else {
            Label::Second
        })
    }

    /// Sample a prompt: uniform length within bounds, uniform content
    /// tokens, rule attached with probability `rule_fraction`.
    pub fn sample_prompt(&self, rng: &mut ChaCha8Rng) -> Prompt {
        let len = rng.gen_range(self.config.min_prompt_len..=self.config.max_prompt_len);
        let tokens = (0..len)
            .map(|_| rng.gen_range(0..self.config.content_tokens) as Token)
            .collect();
        let rule = if self.config.rule_fraction > 0.0 && rng.gen::<f64>() < self.config.rule_fraction
        {
            vec![0 as Token]
        } else {
            Vec::new()
        };
        Prompt { tokens, rule }
    }

    /// Sample a response uniformly: length uniform in `1..=max_response_len`,
    /// tokens uniform over content.
    pub fn sample_response_uniform(&self, rng: &mut ChaCha8Rng) -> Response {
        let len = rng.gen_range(1..=self.config.max_response_len);
        let tokens = (0..len)
            .map(|_| rng.gen_range(0..self.config.content_tokens) as Token)
            .collect();
        Response { tokens }
    }

    /// The highest-quality response of exactly `length` tokens, by
    /// exhaustive enumeration in lexicographic order (so ties resolve to the
    /// lexicographically smallest response). Refuses spaces above 10^7.
    pub fn exact_best_response(&self, prompt: &Prompt, length: usize) -> Result<Response> {
        if length == 0 || length > self.config.max_response_len {
            return Err(Error::contract(format!(
                "exact_best_response: length {length} outside 1..={}",
                self.config.max_response_len
            )));
        }
        let c = self.config.content_tokens;
        let space = (c as f64).powi(length as i32);
        if space > 1e7 {
            return Err(Error::TooLarge(format!(
                "exact_best_response: {c}^{length} = {space:.3e} responses exceeds 1e7"
            )));
        }
        let mut tokens = vec![0 as Token; length];
        let mut best = Response {
            tokens: tokens.clone(),
        };
        let mut best_q = self.hidden_quality(prompt, &best)?;
        loop {
            // odometer increment over base-c digits, most significant first
            let mut pos = length;
            loop {
                if pos == 0 {
                    return Ok(best);
                }
                pos -= 1;
                if (tokens[pos] as usize) + 1 < c {
                    tokens[pos] += 1;
                    for t in tokens.iter_mut().skip(pos + 1) {
                        *t = 0;
                    }
                    break;
                }
            }
            let cand = Response {
                tokens: tokens.clone(),
            };
            let q = self.hidden_quality(prompt, &cand)?;
            if q > best_q {
                best_q = q;
                best = cand;
            }
        }
    }
}

/// Generate `n` labelled comparison instances. Responses come from
/// `sampler`; pairs that collide are resampled a bounded number of times so
/// first and second differ unless the space is degenerate.
pub fn gen_comparison_dataset(
    world: &SynthWorld,
    n: usize,
    rng: &mut ChaCha8Rng,
    mut sampler: impl FnMut(&SynthWorld, &Prompt, &mut ChaCha8Rng) -> Response,
) -> Result<Vec<ComparisonInstance>> {
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let prompt = world.sample_prompt(rng);
        let first = sampler(world, &prompt, rng);
        let mut second = sampler(world, &prompt, rng);
        for _ in 0..100 {
            if second != first {
                break;
            }
            second = sampler(world, &prompt, rng);
        }
        let label = world.oracle_prefer(&prompt, &first, &second, rng)?;
        out.push(ComparisonInstance {
            prompt,
            first,
            second,
            label,
            source: SourceTag::Oracle,
        });
    }
    Ok(out)
}

/// The default response sampler for dataset generation: uniform random
/// responses.
pub fn uniform_sampler(world: &SynthWorld, _prompt: &Prompt, rng: &mut ChaCha8Rng) -> Response {
    world.sample_response_uniform(rng)
}
