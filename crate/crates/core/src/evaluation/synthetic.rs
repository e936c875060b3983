//! Planted-convergence corpus generator.
//!
//! Codes come in families; every patent draws its codes from one family and
//! its words from the clusters of those codes. For each planted pair the two
//! codes borrow words from each other's cluster with a probability that ramps
//! up over `drift_lead` years, then the pair starts co-occurring at its
//! planted year. Titles carry one keyword per assigned code.

use std::collections::BTreeMap;

use chrono::NaiveDate;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, PatentRecord, TechCode};

use super::EvalError;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedPair {
    pub a: TechCode,
    pub b: TechCode,
    /// Year of the first co-occurrence.
    pub year: i32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_families: usize,
    pub codes_per_family: usize,
    pub n_patents_per_year: usize,
    pub start_year: i32,
    pub n_years: usize,
    /// Context words owned by each code.
    pub cluster_size: usize,
    pub n_filler: usize,
    pub filler_prob: f64,
    pub abstract_len: usize,
    /// Cluster words in the title besides the keywords.
    pub title_words: usize,
    /// Probability of a patent carrying 1, 2, ... codes.
    pub code_count_probs: Vec<f64>,
    pub planted: Vec<PlantedPair>,
    /// Word-borrowing fraction reached the year before co-occurrence.
    pub drift_max: f64,
    /// Years over which the drift ramps up; 0 disables drift.
    pub drift_lead: usize,
    /// Patents per year carrying a planted pair from its planted year on.
    pub cooccur_per_year: usize,
    /// Probability of adding one code from another family.
    pub noise_prob: f64,
    pub max_citations: usize,
    pub seed: u64,
}

pub fn family_code(family: usize, member: usize) -> TechCode {
    let section = (b'A' + (family % 8) as u8) as char;
    format!("{section}{:02}K{}", 10 + family, member + 1)
        .parse()
        .expect("generated code is well formed")
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        let p = |fa, ma, fb, mb, year| PlantedPair {
            a: family_code(fa, ma),
            b: family_code(fb, mb),
            year,
        };
        SyntheticSpec {
            n_families: 10,
            codes_per_family: 4,
            n_patents_per_year: 300,
            start_year: 2000,
            n_years: 12,
            cluster_size: 10,
            n_filler: 20,
            filler_prob: 0.2,
            abstract_len: 16,
            title_words: 2,
            code_count_probs: vec![0.3, 0.45, 0.25],
            planted: vec![
                p(0, 0, 1, 0, 2007),
                p(2, 1, 3, 1, 2007),
                p(4, 2, 5, 2, 2008),
                p(6, 3, 7, 3, 2008),
                p(8, 0, 9, 1, 2009),
            ],
            drift_max: 0.8,
            drift_lead: 7,
            cooccur_per_year: 4,
            noise_prob: 0.0,
            max_citations: 2,
            seed: 0,
        }
    }
}

/// What the generator planted, for scoring.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTruth {
    pub planted: Vec<PlantedPair>,
    pub keywords: BTreeMap<TechCode, String>,
    pub families: Vec<Vec<TechCode>>,
}

#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    pub corpus: Corpus,
    pub truth: SyntheticTruth,
}

impl SyntheticSpec {
    pub fn codes(&self) -> Vec<TechCode> {
        (0..self.n_families)
            .flat_map(|f| (0..self.codes_per_family).map(move |m| family_code(f, m)))
            .collect()
    }

    pub fn end_year(&self) -> i32 {
        self.start_year + self.n_years as i32 - 1
    }

    /// Fraction of words a planted code borrows from its partner in `year`.
    pub fn drift_at(&self, pair: &PlantedPair, year: i32) -> f64 {
        if self.drift_lead == 0 {
            return 0.0;
        }
        let onset = pair.year - self.drift_lead as i32;
        let ramp = (year - onset + 1) as f64 / self.drift_lead as f64;
        self.drift_max * ramp.clamp(0.0, 1.0)
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        let bad = |m: String| Err(EvalError::InfeasibleSpec(m));
        if self.n_families < 2 || self.codes_per_family == 0 || self.n_families > 90 || self.codes_per_family > 9999 {
            return bad("need 2..=90 families with at least one code each".into());
        }
        if self.n_years == 0 || self.n_patents_per_year == 0 || self.cluster_size == 0 || self.abstract_len == 0 {
            return bad("years, patents per year, cluster size and abstract length must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.filler_prob) || (self.filler_prob > 0.0 && self.n_filler == 0) {
            return bad("filler_prob must lie in [0,1] and needs filler words".into());
        }
        if !(0.0..=1.0).contains(&self.drift_max) || !(0.0..=1.0).contains(&self.noise_prob) {
            return bad("drift_max and noise_prob must lie in [0,1]".into());
        }
        let counts = &self.code_count_probs;
        if counts.is_empty()
            || counts.len() > self.codes_per_family
            || counts.iter().any(|p| !(*p >= 0.0))
            || counts.iter().sum::<f64>() <= 0.0
        {
            return bad("code_count_probs must be non-negative weights for 1..=codes_per_family codes".into());
        }
        let family = |c: TechCode| self.codes().iter().position(|&x| x == c).map(|i| i / self.codes_per_family);
        let mut used = Vec::new();
        for p in &self.planted {
            let (Some(fa), Some(fb)) = (family(p.a), family(p.b)) else {
                return bad(format!("planted pair {}-{} uses unknown codes", p.a, p.b));
            };
            if fa == fb {
                return bad(format!("planted pair {}-{} lies within one family", p.a, p.b));
            }
            if used.contains(&p.a) || used.contains(&p.b) {
                return bad(format!("code of planted pair {}-{} is planted twice", p.a, p.b));
            }
            used.extend([p.a, p.b]);
            if p.year <= self.start_year || p.year > self.end_year() {
                return bad(format!("planted year {} outside the generated span", p.year));
            }
        }
        if self.cooccur_per_year > self.n_patents_per_year / 2 {
            return bad("cooccur_per_year exceeds half the patents of a year".into());
        }
        Ok(())
    }
}

fn cluster_word(code_index: usize, j: usize) -> String {
    format!("c{code_index:02}w{j}")
}

fn keyword(code_index: usize) -> String {
    format!("kw{code_index:02}")
}

fn filler_word(j: usize) -> String {
    format!("f{j}")
}

fn zipf(n: usize) -> WeightedIndex<f64> {
    WeightedIndex::new((0..n).map(|j| 1.0 / (j + 1) as f64)).expect("positive weights")
}

struct Sampler<'a> {
    spec: &'a SyntheticSpec,
    code_index: BTreeMap<TechCode, usize>,
    partner: BTreeMap<TechCode, &'a PlantedPair>,
    cluster: WeightedIndex<f64>,
    filler: Option<WeightedIndex<f64>>,
}

impl Sampler<'_> {
    /// A cluster word of `code`, borrowed from its planted partner with
    /// probability half the current drift.
    fn cluster_word<R: Rng>(&self, code: TechCode, year: i32, rng: &mut R) -> String {
        let mut source = code;
        if let Some(p) = self.partner.get(&code) {
            if rng.random::<f64>() < self.spec.drift_at(p, year) / 2.0 {
                source = if p.a == code { p.b } else { p.a };
            }
        }
        cluster_word(self.code_index[&source], self.cluster.sample(rng))
    }

    fn abstract_words<R: Rng>(&self, codes: &[TechCode], year: i32, rng: &mut R) -> Vec<String> {
        (0..self.spec.abstract_len)
            .map(|_| match &self.filler {
                Some(f) if rng.random::<f64>() < self.spec.filler_prob => filler_word(f.sample(rng)),
                _ => self.cluster_word(*codes.choose(rng).expect("patent has codes"), year, rng),
            })
            .collect()
    }

    fn title<R: Rng>(&self, codes: &[TechCode], primary: TechCode, year: i32, rng: &mut R) -> String {
        let mut words: Vec<String> = codes.iter().map(|c| keyword(self.code_index[c])).collect();
        words.extend((0..self.spec.title_words).map(|_| self.cluster_word(primary, year, rng)));
        words.join(" ")
    }
}

/// Generates the corpus described by `spec`; bit-reproducible from `spec.seed`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticCorpus, EvalError> {
    spec.validate()?;
    let codes = spec.codes();
    let families: Vec<Vec<TechCode>> = codes.chunks(spec.codes_per_family).map(|c| c.to_vec()).collect();
    let sampler = Sampler {
        spec,
        code_index: codes.iter().enumerate().map(|(i, &c)| (c, i)).collect(),
        partner: spec.planted.iter().flat_map(|p| [(p.a, p), (p.b, p)]).collect(),
        cluster: zipf(spec.cluster_size),
        filler: (spec.n_filler > 0).then(|| zipf(spec.n_filler)),
    };
    let count_dist = WeightedIndex::new(&spec.code_count_probs).expect("validated weights");
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut records = Vec::with_capacity(spec.n_years * spec.n_patents_per_year);
    let mut by_primary: BTreeMap<TechCode, Vec<String>> = BTreeMap::new();

    for year in spec.start_year..=spec.end_year() {
        let active: Vec<&PlantedPair> = spec.planted.iter().filter(|p| year >= p.year).collect();
        let mut slots: Vec<usize> = (0..spec.n_patents_per_year).collect();
        slots.shuffle(&mut rng);
        let mut planted_slot = BTreeMap::new();
        for (k, p) in active.iter().enumerate() {
            for &s in &slots[k * spec.cooccur_per_year..(k + 1) * spec.cooccur_per_year] {
                planted_slot.insert(s, *p);
            }
        }
        let mut new_ids = Vec::with_capacity(spec.n_patents_per_year);
        for i in 0..spec.n_patents_per_year {
            let (mut patent_codes, primary) = match planted_slot.get(&i) {
                Some(p) => (vec![p.a, p.b], p.a),
                None => {
                    let family = &families[rng.random_range(0..families.len())];
                    let k = count_dist.sample(&mut rng) + 1;
                    let chosen: Vec<TechCode> = family.choose_multiple(&mut rng, k).copied().collect();
                    (chosen.clone(), chosen[0])
                }
            };
            if rng.random::<f64>() < spec.noise_prob {
                let extra = codes[rng.random_range(0..codes.len())];
                let clashes = patent_codes.iter().any(|&c| {
                    c == extra
                        || sampler.partner.get(&c).is_some_and(|p| (p.a == extra || p.b == extra) && year < p.year)
                });
                if !clashes {
                    patent_codes.push(extra);
                }
            }
            patent_codes.sort_unstable();
            let title = sampler.title(&patent_codes, primary, year, &mut rng);
            let abstract_text = sampler.abstract_words(&patent_codes, year, &mut rng).join(" ");
            let id = format!("S{year}-{i:05}");
            let citations = match by_primary.get(&primary) {
                Some(prior) if spec.max_citations > 0 => {
                    let n = rng.random_range(0..=spec.max_citations).min(prior.len());
                    let mut c: Vec<String> = prior.choose_multiple(&mut rng, n).cloned().collect();
                    c.sort();
                    c
                }
                _ => vec![],
            };
            let pub_date = NaiveDate::from_ymd_opt(year, rng.random_range(1..=12), rng.random_range(1..=28))
                .expect("valid calendar date");
            new_ids.push((primary, id.clone()));
            records.push(PatentRecord {
                id,
                pub_date,
                title,
                abstract_text,
                codes: patent_codes,
                citations,
            });
        }
        for (primary, id) in new_ids {
            by_primary.entry(primary).or_default().push(id);
        }
    }
    let corpus = Corpus::from_records(records).map_err(|e| EvalError::InfeasibleSpec(e.to_string()))?;
    let truth = SyntheticTruth {
        planted: spec.planted.clone(),
        keywords: codes.iter().enumerate().map(|(i, &c)| (c, keyword(i))).collect(),
        families,
    };
    Ok(SyntheticCorpus { corpus, truth })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nullmodel::{cooccurrence_counts, CodePair};

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            n_patents_per_year: 60,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn reproducible_from_seed() {
        let a = generate_synthetic(&small()).unwrap().corpus;
        let b = generate_synthetic(&small()).unwrap().corpus;
        assert_eq!(a.records(), b.records());
        let c = generate_synthetic(&SyntheticSpec { seed: 1, ..small() }).unwrap().corpus;
        assert_ne!(a.records(), c.records());
    }

    #[test]
    fn planted_pairs_first_cooccur_at_planted_year() {
        let spec = small();
        let corpus = generate_synthetic(&spec).unwrap().corpus;
        for p in &spec.planted {
            let years: Vec<i32> = corpus
                .records()
                .iter()
                .filter(|r| r.has_code(p.a) && r.has_code(p.b))
                .map(|r| r.pub_year())
                .collect();
            assert_eq!(years.iter().min(), Some(&p.year));
        }
    }

    #[test]
    fn only_planted_pairs_cross_families() {
        let spec = small();
        let out = generate_synthetic(&spec).unwrap();
        let family: BTreeMap<TechCode, usize> = out
            .truth
            .families
            .iter()
            .enumerate()
            .flat_map(|(f, cs)| cs.iter().map(move |&c| (c, f)))
            .collect();
        let planted: Vec<CodePair> = spec.planted.iter().map(|p| CodePair::new(p.a, p.b).unwrap()).collect();
        for pair in cooccurrence_counts(&out.corpus).keys() {
            assert!(family[&pair.a] == family[&pair.b] || planted.contains(pair), "{pair}");
        }
    }

    #[test]
    fn titles_carry_keywords_of_all_codes() {
        let out = generate_synthetic(&small()).unwrap();
        for r in out.corpus.records().iter().take(50) {
            for c in &r.codes {
                assert!(r.title.split(' ').any(|w| w == out.truth.keywords[c]));
            }
        }
    }

    #[test]
    fn drift_ramps_and_holds() {
        let spec = SyntheticSpec::default();
        let p = spec.planted[0];
        let series: Vec<f64> = (spec.start_year..=spec.end_year()).map(|y| spec.drift_at(&p, y)).collect();
        assert!(series.windows(2).all(|w| w[0] <= w[1]));
        assert!((spec.drift_at(&p, p.year - 1) - spec.drift_max).abs() < 1e-12);
        assert_eq!(spec.drift_at(&p, p.year - spec.drift_lead as i32 - 1), 0.0);
        let off = SyntheticSpec { drift_lead: 0, ..spec.clone() };
        assert_eq!(off.drift_at(&p, p.year), 0.0);
    }

    #[test]
    fn citations_point_backwards() {
        let corpus = generate_synthetic(&small()).unwrap().corpus;
        for r in corpus.records() {
            for c in &r.citations {
                let cited = corpus.get(c).unwrap();
                assert!(cited.pub_year() < r.pub_year());
            }
        }
    }

    #[test]
    fn rejects_infeasible_specs() {
        let same_family = SyntheticSpec {
            planted: vec![PlantedPair { a: family_code(0, 0), b: family_code(0, 1), year: 2005 }],
            ..small()
        };
        assert!(matches!(generate_synthetic(&same_family), Err(EvalError::InfeasibleSpec(_))));
        let late = SyntheticSpec {
            planted: vec![PlantedPair { a: family_code(0, 0), b: family_code(1, 1), year: 2030 }],
            ..small()
        };
        assert!(generate_synthetic(&late).is_err());
        let drift = SyntheticSpec { drift_max: 1.5, ..small() };
        assert!(generate_synthetic(&drift).is_err());
    }
}
