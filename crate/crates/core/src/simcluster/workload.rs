//! Synthetic workload traces.
//!
//! Input and output lengths are log-normal with configurable shape,
//! rescaled so the distribution means hit the configured targets, and
//! resampled jointly until prompt+output stays under the cap. A
//! configurable fraction of requests draws its leading tokens from a
//! small shared-prefix pool. Every output token carries a Zipf-skewed
//! expert routing label. Fully determined by the seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const TOKEN_VOCAB: u32 = 1 << 20;
const RESAMPLE_GUARD: usize = 10_000;

/// Workload shape parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorkloadSpec {
    /// Target mean prompt length in tokens.
    pub mean_input: f64,
    /// Target mean output length in tokens.
    pub mean_output: f64,
    /// Log-normal shape for prompt lengths; 0 collapses to the mean.
    pub sigma_input: f64,
    /// Log-normal shape for output lengths; 0 collapses to the mean.
    pub sigma_output: f64,
    /// Prompt plus output must stay strictly below this many tokens.
    pub total_cap: usize,
    /// Fraction of requests that draw from the shared-prefix pool.
    pub shared_prefix_fraction: f64,
    /// Tokens per shared-prefix block.
    pub shared_prefix_len: usize,
    /// Number of distinct shared-prefix blocks.
    pub prefix_pool: usize,
    /// Zipf exponent for expert routing labels.
    pub expert_skew: f64,
    pub seed: u64,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        Self {
            mean_input: 3500.0,
            mean_output: 1000.0,
            sigma_input: 0.6,
            sigma_output: 0.6,
            total_cap: 16_384,
            shared_prefix_fraction: 0.3,
            shared_prefix_len: 1024,
            prefix_pool: 8,
            expert_skew: 1.2,
            seed: 42,
        }
    }
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<()> {
        if self.mean_input < 1.0 || self.mean_output < 1.0 {
            return Err(Error::InvalidConfig("mean lengths must be >= 1 token".into()));
        }
        if self.mean_input + self.mean_output >= self.total_cap as f64 {
            return Err(Error::InvalidConfig(format!(
                "mean lengths {} + {} cannot satisfy the {}-token cap",
                self.mean_input, self.mean_output, self.total_cap
            )));
        }
        if self.sigma_input < 0.0 || self.sigma_output < 0.0 {
            return Err(Error::InvalidConfig("sigmas must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.shared_prefix_fraction) {
            return Err(Error::InvalidConfig("shared_prefix_fraction outside [0, 1]".into()));
        }
        if self.shared_prefix_fraction > 0.0 && self.prefix_pool == 0 {
            return Err(Error::InvalidConfig("prefix_pool must be >= 1 when sharing".into()));
        }
        if self.expert_skew < 0.0 {
            return Err(Error::InvalidConfig("expert_skew must be >= 0".into()));
        }
        Ok(())
    }
}

/// One trace entry, ready to inject.
#[derive(Debug, Clone)]
pub struct TraceRequest {
    pub id: u64,
    pub prompt: Vec<u32>,
    pub output_len: usize,
    pub max_tokens: Option<usize>,
    /// Zipf-drawn routing label per output token.
    pub expert_labels: Vec<u16>,
    pub shared_prefix: bool,
}

/// Normalized Zipf mass over `n` ranks with exponent `s` (rank 1 is the
/// heaviest). Exponent 0 is uniform.
pub fn zipf_mass(n: usize, s: f64) -> Vec<f64> {
    let raw: Vec<f64> = (1..=n).map(|k| (k as f64).powf(-s)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

struct ZipfSampler {
    cumulative: Vec<f64>,
}

impl ZipfSampler {
    fn new(n: usize, s: f64) -> Self {
        let mass = zipf_mass(n, s);
        let mut cumulative = Vec::with_capacity(n);
        let mut acc = 0.0;
        for m in mass {
            acc += m;
            cumulative.push(acc);
        }
        Self { cumulative }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> u16 {
        let u: f64 = rng.random();
        self.cumulative.partition_point(|&c| c < u).min(self.cumulative.len() - 1) as u16
    }
}

enum LengthSampler {
    Fixed(usize),
    LogNormal(LogNormal<f64>),
}

impl LengthSampler {
    fn new(mean: f64, sigma: f64) -> Result<Self> {
        if sigma == 0.0 {
            return Ok(Self::Fixed(mean.round().max(1.0) as usize));
        }
        // E[lognormal(mu, sigma)] = exp(mu + sigma^2/2) = mean.
        let mu = mean.ln() - sigma * sigma / 2.0;
        LogNormal::new(mu, sigma)
            .map(Self::LogNormal)
            .map_err(|e| Error::InvalidConfig(format!("log-normal parameters: {e}")))
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> usize {
        match self {
            Self::Fixed(v) => *v,
            Self::LogNormal(d) => d.sample(rng).round().max(1.0) as usize,
        }
    }
}

/// Generate `n` requests. Identical `(spec, n, experts)` inputs always
/// produce an identical trace.
pub fn generate_workload(spec: &WorkloadSpec, n: usize, experts: usize) -> Result<Vec<TraceRequest>> {
    if n == 0 {
        return Err(Error::invalid("request count must be >= 1"));
    }
    if experts == 0 || experts > u16::MAX as usize {
        return Err(Error::invalid(format!("expert count {experts} out of range")));
    }
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let input_lens = LengthSampler::new(spec.mean_input, spec.sigma_input)?;
    let output_lens = LengthSampler::new(spec.mean_output, spec.sigma_output)?;
    let zipf = ZipfSampler::new(experts, spec.expert_skew);

    let pool: Vec<Vec<u32>> = (0..spec.prefix_pool)
        .map(|_| (0..spec.shared_prefix_len).map(|_| rng.random_range(0..TOKEN_VOCAB)).collect())
        .collect();

    let mut out = Vec::with_capacity(n);
    for id in 0..n {
        let (input_len, output_len) = {
            let mut attempts = 0;
            loop {
                let i = input_lens.sample(&mut rng);
                let o = output_lens.sample(&mut rng);
                if i + o < spec.total_cap {
                    break (i, o);
                }
                attempts += 1;
                if attempts >= RESAMPLE_GUARD {
                    return Err(Error::InvalidConfig(
                        "could not sample lengths under the cap; means too large".into(),
                    ));
                }
            }
        };
        let shared = spec.shared_prefix_fraction > 0.0
            && rng.random_bool(spec.shared_prefix_fraction);
        let mut prompt = Vec::with_capacity(input_len);
        if shared {
            let block = &pool[rng.random_range(0..pool.len())];
            prompt.extend_from_slice(&block[..spec.shared_prefix_len.min(input_len)]);
        }
        while prompt.len() < input_len {
            prompt.push(rng.random_range(0..TOKEN_VOCAB));
        }
        let expert_labels: Vec<u16> = (0..output_len).map(|_| zipf.sample(&mut rng)).collect();
        out.push(TraceRequest {
            id: id as u64,
            prompt,
            output_len,
            max_tokens: Some(output_len),
            expert_labels,
            shared_prefix: shared,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_variance_is_exact() {
        let spec = WorkloadSpec {
            sigma_input: 0.0,
            sigma_output: 0.0,
            shared_prefix_fraction: 0.0,
            ..WorkloadSpec::default()
        };
        let trace = generate_workload(&spec, 20, 8).unwrap();
        for r in &trace {
            assert_eq!(r.prompt.len(), 3500);
            assert_eq!(r.output_len, 1000);
        }
    }

    #[test]
    fn fixed_seed_reproduces_the_trace() {
        let spec = WorkloadSpec::default();
        let a = generate_workload(&spec, 50, 16).unwrap();
        let b = generate_workload(&spec, 50, 16).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.prompt, y.prompt);
            assert_eq!(x.output_len, y.output_len);
            assert_eq!(x.expert_labels, y.expert_labels);
        }
        let other = generate_workload(&WorkloadSpec { seed: 43, ..spec }, 50, 16).unwrap();
        assert!(a.iter().zip(&other).any(|(x, y)| x.prompt != y.prompt));
    }

    #[test]
    fn sample_means_land_near_targets_under_the_cap() {
        let spec = WorkloadSpec::default();
        let trace = generate_workload(&spec, 10_000, 16).unwrap();
        let mean_in: f64 =
            trace.iter().map(|r| r.prompt.len() as f64).sum::<f64>() / trace.len() as f64;
        let mean_out: f64 =
            trace.iter().map(|r| r.output_len as f64).sum::<f64>() / trace.len() as f64;
        assert!((mean_in - 3500.0).abs() / 3500.0 < 0.05, "mean input {mean_in}");
        assert!((mean_out - 1000.0).abs() / 1000.0 < 0.05, "mean output {mean_out}");
        assert!(trace.iter().all(|r| r.prompt.len() + r.output_len < 16_384));
    }

    #[test]
    fn shared_requests_share_leading_blocks() {
        let spec = WorkloadSpec {
            shared_prefix_fraction: 1.0,
            prefix_pool: 2,
            shared_prefix_len: 64,
            ..WorkloadSpec::default()
        };
        let trace = generate_workload(&spec, 40, 8).unwrap();
        // With a pool of 2, some pair must share its first 64 tokens.
        let mut found = false;
        for i in 0..trace.len() {
            for j in i + 1..trace.len() {
                if trace[i].prompt[..64] == trace[j].prompt[..64] {
                    found = true;
                }
            }
        }
        assert!(found);
        assert!(trace.iter().all(|r| r.shared_prefix));
    }

    #[test]
    fn zipf_labels_skew_toward_low_ranks() {
        let spec = WorkloadSpec { expert_skew: 1.2, ..WorkloadSpec::default() };
        let trace = generate_workload(&spec, 200, 16).unwrap();
        let mut counts = [0u64; 16];
        for r in &trace {
            for &l in &r.expert_labels {
                counts[l as usize] += 1;
            }
        }
        let total: u64 = counts.iter().sum();
        let expected = zipf_mass(16, 1.2);
        assert!(
            (counts[0] as f64 / total as f64 - expected[0]).abs() < 0.02,
            "rank-0 share {} vs expected {}",
            counts[0] as f64 / total as f64,
            expected[0]
        );
        assert!(counts[0] > counts[8], "skew missing");
    }

    #[test]
    fn impossible_cap_is_rejected() {
        let spec = WorkloadSpec {
            mean_input: 12_000.0,
            mean_output: 6_000.0,
            ..WorkloadSpec::default()
        };
        assert!(matches!(generate_workload(&spec, 2, 4), Err(Error::InvalidConfig(_))));
    }
}
