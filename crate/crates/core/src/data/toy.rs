//! Hidden-Markov toy corpus with a closed-form disease-frequency oracle.

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use super::{sample_categorical, EhrDataset, PatientRecord, Vocabulary};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, StreamRng};

const ROW_SUM_TOL: f64 = 1e-12;
const POWER_ITERATIONS: usize = 100_000;
const POWER_TOL: f64 = 1e-13;

/// Latent-state process: a Markov chain over `n_states` states started
/// uniformly, emitting each disease independently per state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyProcessSpec {
    pub n_states: usize,
    /// Row-stochastic, `n_states × n_states`.
    pub transition: Vec<Vec<f64>>,
    /// `n_states × d` emission probabilities.
    pub emission: Vec<Vec<f64>>,
    /// Probability of each length `1..=length_probs.len()`.
    pub length_probs: Vec<f64>,
    pub seed: u64,
}

/// Ground truth for a [`ToyProcessSpec`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleFrequencies {
    /// Probability that a random visit contains each disease.
    pub visit: Vec<f64>,
    /// Stationary distribution of the chain.
    pub stationary: Vec<f64>,
    /// State distribution of a random visit.
    pub occupancy: Vec<f64>,
}

impl OracleFrequencies {
    /// Expected diseases per visit.
    pub fn mean_visit_size(&self) -> f64 {
        self.visit.iter().sum()
    }
}

impl ToyProcessSpec {
    /// The desk-scale long-tail process: 30 diseases whose mean emission
    /// rates are log-spaced from 0.5 down to 0.005, 4 sticky states that
    /// reweight them, and lengths 1 to 5.
    pub fn canonical() -> Self {
        let d = 30;
        let k = 4;
        let transition = (0..k)
            .map(|a| (0..k).map(|b| if a == b { 0.7 } else { 0.1 }).collect())
            .collect();
        // the modulation has zero mean over the four states, and the uniform
        // start of a doubly stochastic chain keeps occupancy uniform
        let emission = (0..k)
            .map(|s| {
                (0..d)
                    .map(|i| {
                        let base = 0.5 * 0.01f64.powf(i as f64 / (d - 1) as f64);
                        let phase = std::f64::consts::TAU * (s as f64 / k as f64 + 0.37 * i as f64);
                        base * (1.0 + 0.6 * phase.sin())
                    })
                    .collect()
            })
            .collect();
        Self {
            n_states: k,
            transition,
            emission,
            length_probs: vec![0.3, 0.25, 0.2, 0.15, 0.1],
            seed: 7,
        }
    }

    pub fn num_diseases(&self) -> usize {
        self.emission.first().map_or(0, Vec::len)
    }

    pub fn max_len(&self) -> usize {
        self.length_probs.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let k = self.n_states;
        if k == 0 {
            return bad("toy spec needs at least one state".into());
        }
        if self.transition.len() != k || self.emission.len() != k {
            return bad(format!(
                "toy spec declares {k} states but has {} transition and {} emission rows",
                self.transition.len(),
                self.emission.len()
            ));
        }
        let d = self.num_diseases();
        if d == 0 {
            return bad("toy spec has no diseases".into());
        }
        let in_unit = |p: f64| (0.0..=1.0).contains(&p);
        for (s, row) in self.transition.iter().enumerate() {
            if row.len() != k || !row.iter().all(|p| in_unit(*p)) {
                return bad(format!("transition row {s} must hold {k} probabilities"));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return bad(format!("transition row {s} sums to {sum}"));
            }
        }
        for (s, row) in self.emission.iter().enumerate() {
            if row.len() != d || !row.iter().all(|p| in_unit(*p)) {
                return bad(format!("emission row {s} must hold {d} probabilities"));
            }
        }
        if self.length_probs.is_empty() || !self.length_probs.iter().all(|p| in_unit(*p)) {
            return bad("length_probs must be nonempty probabilities".into());
        }
        let sum: f64 = self.length_probs.iter().sum();
        if (sum - 1.0).abs() > ROW_SUM_TOL {
            return bad(format!("length_probs sums to {sum}"));
        }
        Ok(())
    }

    /// Most probable disease of a state; ties go to the lower index.
    fn mode(&self, state: usize) -> usize {
        let row = &self.emission[state];
        let mut best = 0;
        for (i, p) in row.iter().enumerate() {
            if *p > row[best] {
                best = i;
            }
        }
        best
    }

    fn draw_visit<R: Rng + ?Sized>(&self, state: usize, rng: &mut R) -> Vec<usize> {
        let row = &self.emission[state];
        for _ in 0..2 {
            let v: Vec<usize> = (0..row.len())
                .filter(|i| rng.random::<f64>() < row[*i])
                .collect();
            if !v.is_empty() {
                return v;
            }
        }
        vec![self.mode(state)]
    }
}

/// Samples `n_patients` sequences from the process, seeded by `spec.seed`.
pub fn generate_toy_corpus(spec: &ToyProcessSpec, n_patients: usize) -> Result<EhrDataset> {
    spec.validate()?;
    let mut rng = StreamRng::seed_from_u64(derive_seed(spec.seed, "toy", 0));
    let k = spec.n_states;
    let width = n_patients.saturating_sub(1).to_string().len().max(6);
    let patients = (0..n_patients)
        .map(|p| {
            let len = sample_categorical(&spec.length_probs, &mut rng).expect("validated") + 1;
            let mut state = rng.random_range(0..k);
            let mut visits = Vec::with_capacity(len);
            for t in 0..len {
                if t > 0 {
                    state = sample_categorical(&spec.transition[state], &mut rng).expect("validated");
                }
                visits.push(spec.draw_visit(state, &mut rng));
            }
            PatientRecord::new(format!("P{p:0width$}"), visits)
        })
        .collect();
    EhrDataset::new(Vocabulary::numbered(spec.num_diseases()), patients)
}

/// Exact visit-level disease frequencies of the process.
///
/// The state of a random visit is the length-weighted average of the chain's
/// marginals; within a state, the redraw-then-force rule for empty visits
/// gives `p(1 + e) + e²·[i is the mode]` with `e` the empty-visit
/// probability. The stationary distribution comes from power iteration,
/// which also serves as the irreducibility/aperiodicity check.
pub fn oracle_frequencies(spec: &ToyProcessSpec) -> Result<OracleFrequencies> {
    spec.validate()?;
    let k = spec.n_states;
    let d = spec.num_diseases();
    let step = |dist: &[f64]| -> Vec<f64> {
        (0..k)
            .map(|b| (0..k).map(|a| dist[a] * spec.transition[a][b]).sum())
            .collect()
    };

    // a point-mass start exposes periodic chains, which a uniform start
    // can miss when the chain is doubly stochastic
    let mut stationary = vec![0.0; k];
    stationary[0] = 1.0;
    let mut converged = false;
    for _ in 0..POWER_ITERATIONS {
        let next = step(&stationary);
        let diff = next
            .iter()
            .zip(&stationary)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        stationary = next;
        if diff < POWER_TOL {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NotConvergent);
    }

    // weight of visit position t is P(length ≥ t)
    let mut occupancy = vec![0.0; k];
    let mut marginal = vec![1.0 / k as f64; k];
    let mut total = 0.0;
    for t in 0..spec.max_len() {
        if t > 0 {
            marginal = step(&marginal);
        }
        let w: f64 = spec.length_probs[t..].iter().sum();
        total += w;
        for (o, m) in occupancy.iter_mut().zip(&marginal) {
            *o += w * m;
        }
    }
    occupancy.iter_mut().for_each(|o| *o /= total);

    let mut visit = vec![0.0; d];
    for (s, occ) in occupancy.iter().enumerate() {
        let row = &spec.emission[s];
        let empty: f64 = row.iter().map(|p| 1.0 - p).product();
        let mode = spec.mode(s);
        for (i, f) in visit.iter_mut().enumerate() {
            let forced = if i == mode { empty * empty } else { 0.0 };
            *f += occ * (row[i] * (1.0 + empty) + forced);
        }
    }
    Ok(OracleFrequencies {
        visit,
        stationary,
        occupancy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::ChaCha8Rng;

    fn random_spec(rng: &mut ChaCha8Rng, k: usize, d: usize, t_max: usize) -> ToyProcessSpec {
        let norm = |v: Vec<f64>| {
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect::<Vec<_>>()
        };
        ToyProcessSpec {
            n_states: k,
            transition: (0..k)
                .map(|_| norm((0..k).map(|_| rng.random_range(0.1..1.0)).collect()))
                .collect(),
            emission: (0..k)
                .map(|_| (0..d).map(|_| rng.random_range(0.0..0.6)).collect())
                .collect(),
            length_probs: norm((0..t_max).map(|_| rng.random_range(0.1..1.0)).collect()),
            seed: 1,
        }
    }

    /// Enumerates every state path and, per visit, every subset of
    /// diseases a single emission round can produce.
    fn brute_force(spec: &ToyProcessSpec) -> Vec<f64> {
        let k = spec.n_states;
        let d = spec.num_diseases();
        // per-state probability that the final visit contains each disease
        let per_state: Vec<Vec<f64>> = (0..k)
            .map(|s| {
                let row = &spec.emission[s];
                let subset_p = |mask: usize| -> f64 {
                    (0..d)
                        .map(|i| if mask >> i & 1 == 1 { row[i] } else { 1.0 - row[i] })
                        .product()
                };
                let empty = subset_p(0);
                let mode = (0..d).fold(0, |b, i| if row[i] > row[b] { i } else { b });
                let mut contains = vec![0.0; d];
                for mask in 1..(1usize << d) {
                    let p = subset_p(mask) * (1.0 + empty);
                    for (i, c) in contains.iter_mut().enumerate() {
                        if mask >> i & 1 == 1 {
                            *c += p;
                        }
                    }
                }
                contains[mode] += empty * empty;
                contains
            })
            .collect();
        let mut freq = vec![0.0; d];
        let mut expected_visits = 0.0;
        for (l_idx, pl) in spec.length_probs.iter().enumerate() {
            let len = l_idx + 1;
            expected_visits += pl * len as f64;
            let paths = k.pow(len as u32);
            for code in 0..paths {
                let mut states = Vec::with_capacity(len);
                let mut c = code;
                for _ in 0..len {
                    states.push(c % k);
                    c /= k;
                }
                let mut p = pl / k as f64;
                for w in states.windows(2) {
                    p *= spec.transition[w[0]][w[1]];
                }
                for s in &states {
                    for i in 0..d {
                        freq[i] += p * per_state[*s][i];
                    }
                }
            }
        }
        freq.into_iter().map(|f| f / expected_visits).collect()
    }

    #[test]
    fn oracle_matches_path_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..5 {
            let spec = random_spec(&mut rng, 3, 4, 4);
            let exact = oracle_frequencies(&spec).unwrap().visit;
            let brute = brute_force(&spec);
            for (a, b) in exact.iter().zip(&brute) {
                assert!((a - b).abs() < 1e-10, "{exact:?} vs {brute:?}");
            }
        }
    }

    #[test]
    fn single_state_frequencies_equal_emission() {
        let spec = ToyProcessSpec {
            n_states: 1,
            transition: vec![vec![1.0]],
            emission: vec![vec![1.0, 0.3, 0.2]],
            length_probs: vec![0.5, 0.5],
            seed: 0,
        };
        let o = oracle_frequencies(&spec).unwrap();
        assert_eq!(o.visit, vec![1.0, 0.3, 0.2]);
        assert_eq!(o.stationary, vec![1.0]);
    }

    #[test]
    fn symmetric_chain_averages_rows() {
        let spec = ToyProcessSpec {
            n_states: 2,
            transition: vec![vec![0.8, 0.2], vec![0.2, 0.8]],
            emission: vec![vec![1.0, 0.2, 0.6], vec![1.0, 0.6, 0.2]],
            length_probs: vec![0.2, 0.3, 0.5],
            seed: 0,
        };
        let o = oracle_frequencies(&spec).unwrap();
        for (f, want) in o.visit.iter().zip([1.0, 0.4, 0.4]) {
            assert!((f - want).abs() < 1e-15);
        }
    }

    #[test]
    fn periodic_chain_rejected() {
        let flip = ToyProcessSpec {
            n_states: 2,
            transition: vec![vec![0.0, 1.0], vec![1.0, 0.0]],
            emission: vec![vec![0.5], vec![0.5]],
            length_probs: vec![1.0],
            seed: 0,
        };
        assert!(matches!(oracle_frequencies(&flip), Err(Error::NotConvergent)));
        let lazy = ToyProcessSpec {
            transition: vec![vec![0.0, 1.0], vec![0.5, 0.5]],
            ..flip
        };
        let o = oracle_frequencies(&lazy).unwrap();
        assert!((o.stationary[0] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn invalid_spec_rejected() {
        let mut spec = ToyProcessSpec::canonical();
        spec.transition[0][0] += 1e-9;
        assert!(spec.validate().is_err());
        let mut spec = ToyProcessSpec::canonical();
        spec.emission[1][3] = 1.5;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn deterministic_emission() {
        let spec = ToyProcessSpec {
            n_states: 2,
            transition: vec![vec![0.5, 0.5], vec![0.5, 0.5]],
            emission: vec![vec![1.0, 0.0, 0.0]; 2],
            length_probs: vec![0.5, 0.5],
            seed: 3,
        };
        let ds = generate_toy_corpus(&spec, 50).unwrap();
        assert!(ds.patients().iter().flat_map(|p| &p.visits).all(|v| v == &[0]));
    }

    #[test]
    fn same_seed_same_corpus() {
        let spec = ToyProcessSpec::canonical();
        assert_eq!(
            generate_toy_corpus(&spec, 100).unwrap(),
            generate_toy_corpus(&spec, 100).unwrap()
        );
    }

    #[test]
    fn canonical_spec_shape() {
        let spec = ToyProcessSpec::canonical();
        spec.validate().unwrap();
        assert_eq!((spec.n_states, spec.num_diseases(), spec.max_len()), (4, 30, 5));
        let o = oracle_frequencies(&spec).unwrap();
        let lo = o.visit.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = o.visit.iter().cloned().fold(0.0, f64::max);
        assert!((0.004..0.006).contains(&lo), "{lo}");
        assert!((0.45..0.55).contains(&hi), "{hi}");
        for w in o.visit.windows(2) {
            assert!(w[0] > w[1]);
        }
    }

    #[test]
    fn empirical_frequencies_match_oracle() {
        let spec = ToyProcessSpec::canonical();
        let o = oracle_frequencies(&spec).unwrap();
        let ds = generate_toy_corpus(&spec, 100_000).unwrap();
        let n = ds.num_visits() as f64;
        let mut counts = vec![0.0; spec.num_diseases()];
        for v in ds.patients().iter().flat_map(|p| &p.visits) {
            assert!(!v.is_empty());
            for &i in v {
                counts[i] += 1.0;
            }
        }
        // visits of one patient are correlated through the state, so the
        // binomial sigma is inflated by the mean patient length
        let inflate = (spec.max_len() as f64).sqrt();
        for (i, (c, p)) in counts.iter().zip(&o.visit).enumerate() {
            let sigma = (p * (1.0 - p) / n).sqrt() * inflate;
            assert!((c / n - p).abs() < 3.0 * sigma, "disease {i}: {} vs {p}", c / n);
        }
    }
}
