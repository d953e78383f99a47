//! Workload specifications: explicit request lists and seeded generators
//! for the three workload shapes used in evaluation (short-in/long-out,
//! short/short, long-in/short-out with shared prefixes, plus a mixture).

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// One request of a workload.
///
/// Prompt content is identified either by an explicit per-block hash
/// chain (`prompt_hash_chain`, one content id per prompt block) or by a
/// `prefix_group`: requests with the same group share the first
/// `prefix_len` tokens of their prompts. Without either, the prompt is
/// unique to the request.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkloadRequest {
    #[serde(default)]
    pub arrival_step: u64,
    pub prompt_len: usize,
    pub output_len: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_hash_chain: Option<Vec<u64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prefix_group: Option<u64>,
    #[serde(default)]
    pub prefix_len: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GeneratorKind {
    /// Short prompts, long outputs (math-contest style).
    AmcLike,
    /// Short prompts, short outputs.
    Gsm8kLike,
    /// 50/50 mixture of the two above.
    Mixed,
    /// Long prompts with shared prefixes, short outputs.
    LongbenchLike,
}

/// Inclusive integer range, drawn uniformly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LenRange {
    pub min: usize,
    pub max: usize,
}

impl LenRange {
    fn sample(&self, rng: &mut ChaCha8Rng) -> usize {
        rng.gen_range(self.min..=self.max)
    }
}

/// Seeded request generator; expansion is deterministic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub kind: GeneratorKind,
    pub count: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_len: Option<LenRange>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_len: Option<LenRange>,
    /// Arrival steps drawn uniformly from 0..=spread (0 = all at once).
    #[serde(default)]
    pub arrival_spread: u64,
    /// Number of shared-prefix groups (longbench-like only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prefix_groups: Option<usize>,
    /// Shared prefix length range (longbench-like only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prefix_len: Option<LenRange>,
}

/// A parsed workload: explicit requests plus optional generator output.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    #[serde(default)]
    pub requests: Vec<WorkloadRequest>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<GeneratorSpec>,
}

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("failed to read workload file: {0}")]
    Io(#[from] std::io::Error),
    #[error("workload schema error: {0}")]
    Schema(String),
}

impl GeneratorKind {
    fn default_prompt(&self) -> LenRange {
        match self {
            GeneratorKind::AmcLike => LenRange { min: 16, max: 48 },
            GeneratorKind::Gsm8kLike => LenRange { min: 16, max: 48 },
            GeneratorKind::Mixed => LenRange { min: 16, max: 48 },
            GeneratorKind::LongbenchLike => LenRange { min: 256, max: 512 },
        }
    }

    fn default_output(&self) -> LenRange {
        match self {
            GeneratorKind::AmcLike => LenRange { min: 300, max: 900 },
            GeneratorKind::Gsm8kLike => LenRange { min: 20, max: 80 },
            GeneratorKind::Mixed => LenRange { min: 20, max: 900 },
            GeneratorKind::LongbenchLike => LenRange { min: 20, max: 100 },
        }
    }
}

impl GeneratorSpec {
    /// Expands the generator into explicit requests, reproducibly.
    pub fn expand(&self) -> Result<Vec<WorkloadRequest>, WorkloadError> {
        if self.count == 0 {
            return Err(WorkloadError::Schema("generator.count must be positive".into()));
        }
        let prompt = self.prompt_len.unwrap_or_else(|| self.kind.default_prompt());
        let output = self.output_len.unwrap_or_else(|| self.kind.default_output());
        validate_range("generator.prompt_len", &prompt)?;
        validate_range("generator.output_len", &output)?;

        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut requests = Vec::with_capacity(self.count);
        match self.kind {
            GeneratorKind::AmcLike | GeneratorKind::Gsm8kLike => {
                for _ in 0..self.count {
                    requests.push(WorkloadRequest {
                        arrival_step: 0,
                        prompt_len: prompt.sample(&mut rng),
                        output_len: output.sample(&mut rng),
                        prompt_hash_chain: None,
                        prefix_group: None,
                        prefix_len: 0,
                    });
                }
            }
            GeneratorKind::Mixed => {
                let short = GeneratorKind::Gsm8kLike.default_output();
                let long = GeneratorKind::AmcLike.default_output();
                for _ in 0..self.count {
                    let out = if rng.gen_bool(0.5) { &short } else { &long };
                    requests.push(WorkloadRequest {
                        arrival_step: 0,
                        prompt_len: prompt.sample(&mut rng),
                        output_len: self.output_len.unwrap_or(*out).sample(&mut rng),
                        prompt_hash_chain: None,
                        prefix_group: None,
                        prefix_len: 0,
                    });
                }
            }
            GeneratorKind::LongbenchLike => {
                let groups = self.prefix_groups.unwrap_or(8).max(1);
                let prefix_range =
                    self.prefix_len.unwrap_or(LenRange { min: 192, max: 384 });
                validate_range("generator.prefix_len", &prefix_range)?;
                // One prefix length per group so members agree on it.
                let group_prefix: Vec<usize> =
                    (0..groups).map(|_| prefix_range.sample(&mut rng)).collect();
                for i in 0..self.count {
                    let group = i % groups;
                    let prefix_len = group_prefix[group];
                    let suffix = prompt.sample(&mut rng);
                    requests.push(WorkloadRequest {
                        arrival_step: 0,
                        prompt_len: prefix_len + suffix,
                        output_len: output.sample(&mut rng),
                        prompt_hash_chain: None,
                        prefix_group: Some(mix_group(self.seed, group as u64)),
                        prefix_len,
                    });
                }
            }
        }
        if self.arrival_spread > 0 {
            for r in &mut requests {
                r.arrival_step = rng.gen_range(0..=self.arrival_spread);
            }
            requests.sort_by_key(|r| r.arrival_step);
        }
        Ok(requests)
    }
}

fn mix_group(seed: u64, group: u64) -> u64 {
    crate::mix::mix(seed, &[0x6772_6f75_7070, group])
}

fn validate_range(field: &str, range: &LenRange) -> Result<(), WorkloadError> {
    if range.min == 0 || range.min > range.max {
        return Err(WorkloadError::Schema(format!(
            "{field}: range must satisfy 1 <= min <= max, got {}..={}",
            range.min, range.max
        )));
    }
    Ok(())
}

impl WorkloadSpec {
    /// All requests in arrival order: explicit requests first, then the
    /// expanded generator output.
    pub fn resolve(&self) -> Result<Vec<WorkloadRequest>, WorkloadError> {
        let mut requests = self.requests.clone();
        if let Some(generator) = &self.generator {
            requests.extend(generator.expand()?);
        }
        validate_requests(&requests)?;
        Ok(requests)
    }
}

fn validate_requests(requests: &[WorkloadRequest]) -> Result<(), WorkloadError> {
    let mut prev_arrival = 0;
    for (i, r) in requests.iter().enumerate() {
        if r.prompt_len == 0 {
            return Err(WorkloadError::Schema(format!("requests[{i}].prompt_len must be positive")));
        }
        if r.output_len == 0 {
            return Err(WorkloadError::Schema(format!("requests[{i}].output_len must be positive")));
        }
        if r.arrival_step < prev_arrival {
            return Err(WorkloadError::Schema(format!(
                "requests[{i}].arrival_step decreases ({} after {prev_arrival})",
                r.arrival_step
            )));
        }
        prev_arrival = r.arrival_step;
        if r.prefix_len > r.prompt_len {
            return Err(WorkloadError::Schema(format!(
                "requests[{i}].prefix_len {} exceeds prompt_len {}",
                r.prefix_len, r.prompt_len
            )));
        }
        if r.prefix_len > 0 && r.prefix_group.is_none() {
            return Err(WorkloadError::Schema(format!(
                "requests[{i}].prefix_len set without prefix_group"
            )));
        }
    }
    Ok(())
}

/// Parses and validates a workload file (JSON).
pub fn parse_workload(path: &Path) -> Result<WorkloadSpec, WorkloadError> {
    let text = std::fs::read_to_string(path)?;
    let spec: WorkloadSpec = serde_json::from_str(&text)
        .map_err(|e| WorkloadError::Schema(format!("{path:?}: {e}")))?;
    // Surface validation errors at parse time.
    spec.resolve()?;
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn explicit_requests_pass_through() {
        let json = r#"{"requests": [
            {"arrival_step": 0, "prompt_len": 10, "output_len": 5},
            {"arrival_step": 1, "prompt_len": 3, "output_len": 7},
            {"arrival_step": 4, "prompt_len": 8, "output_len": 2}
        ]}"#;
        let spec: WorkloadSpec = serde_json::from_str(json).unwrap();
        assert_eq!(spec.resolve().unwrap().len(), 3);
    }

    #[test]
    fn generator_expansion_is_reproducible() {
        let spec = GeneratorSpec {
            kind: GeneratorKind::AmcLike,
            count: 100,
            seed: 7,
            prompt_len: Some(LenRange { min: 20, max: 50 }),
            output_len: Some(LenRange { min: 500, max: 2000 }),
            arrival_spread: 0,
            prefix_groups: None,
            prefix_len: None,
        };
        let a = spec.expand().unwrap();
        let b = spec.expand().unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 100);
        assert!(a.iter().all(|r| (20..=50).contains(&r.prompt_len)));
        assert!(a.iter().all(|r| (500..=2000).contains(&r.output_len)));
    }

    #[test]
    fn different_seeds_differ() {
        let mut spec = GeneratorSpec {
            kind: GeneratorKind::Gsm8kLike,
            count: 10,
            seed: 1,
            prompt_len: None,
            output_len: None,
            arrival_spread: 0,
            prefix_groups: None,
            prefix_len: None,
        };
        let a = spec.expand().unwrap();
        spec.seed = 2;
        let b = spec.expand().unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn longbench_groups_share_prefixes() {
        let spec = GeneratorSpec {
            kind: GeneratorKind::LongbenchLike,
            count: 16,
            seed: 3,
            prompt_len: Some(LenRange { min: 32, max: 64 }),
            output_len: None,
            arrival_spread: 0,
            prefix_groups: Some(4),
            prefix_len: Some(LenRange { min: 64, max: 128 }),
        };
        let reqs = spec.expand().unwrap();
        // Same group => same prefix id and length.
        for i in 0..16 {
            let j = i % 4;
            assert_eq!(reqs[i].prefix_group, reqs[j].prefix_group);
            assert_eq!(reqs[i].prefix_len, reqs[j].prefix_len);
            assert!(reqs[i].prompt_len > reqs[i].prefix_len);
        }
        assert_ne!(reqs[0].prefix_group, reqs[1].prefix_group);
    }

    #[test]
    fn rejects_zero_lengths() {
        let json = r#"{"requests": [{"prompt_len": 0, "output_len": 5}]}"#;
        let spec: WorkloadSpec = serde_json::from_str(json).unwrap();
        let err = spec.resolve().unwrap_err();
        assert!(err.to_string().contains("prompt_len"), "{err}");
    }

    #[test]
    fn rejects_decreasing_arrivals() {
        let json = r#"{"requests": [
            {"arrival_step": 5, "prompt_len": 1, "output_len": 1},
            {"arrival_step": 2, "prompt_len": 1, "output_len": 1}
        ]}"#;
        let spec: WorkloadSpec = serde_json::from_str(json).unwrap();
        assert!(spec.resolve().is_err());
    }

    #[test]
    fn schema_error_names_field() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.json");
        std::fs::write(&path, r#"{"requests": [{"prompt_len": 3, "output_len": -2}]}"#).unwrap();
        let err = parse_workload(&path).unwrap_err();
        assert!(matches!(err, WorkloadError::Schema(_)));
        assert!(err.to_string().contains("output_len"), "{err}");
    }
}
