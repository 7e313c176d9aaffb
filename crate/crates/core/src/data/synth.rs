//! Synthetic chained-fact cloze tasks.
//!
//! Every example hides a chain `e0 r1 e1, e1 r2 e2, …` among distractor
//! facts. The query names `e0` and a composite relation token for the whole
//! chain; the answer is the last entity. Facts render as `s r o .`.

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::encoder::Document;
use crate::error::{Error, Result};
use crate::support::Example;
use crate::vocab::{self, Vocab};

pub const FACT_END: &str = ".";
/// Joins the relations of a composite query token.
pub const COMPOSE: char = '>';
/// Marks a relation step read object-to-subject.
pub const INVERSE: char = '~';

const MAX_CHAIN: usize = 3;
const DISTRACTOR_ATTEMPTS: usize = 200;
const EXAMPLE_ATTEMPTS: usize = 200;

/// How the last step of the chain is rendered.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChainPattern {
    /// `e_{L-1} r_L e_L`: every step is read left to right.
    #[default]
    Forward,
    /// `e_L r_L e_{L-1}`: the answer is the subject of a fact sharing the
    /// bridge entity, as in "X played against U, G played against U".
    Bridge,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_entities: usize,
    pub n_relations: usize,
    pub chain_length: usize,
    pub n_distractor_facts: usize,
    pub n_examples: usize,
    pub seed: u64,
    pub pattern: ChainPattern,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_entities: 20,
            n_relations: 4,
            chain_length: 1,
            n_distractor_facts: 3,
            n_examples: 2000,
            seed: 0,
            pattern: ChainPattern::Forward,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let l = self.chain_length;
        if !(1..=MAX_CHAIN).contains(&l) {
            return Err(Error::Config(format!(
                "chain_length must be in 1..={MAX_CHAIN}, got {l}"
            )));
        }
        if self.n_entities < 2 * l + 2 {
            return Err(Error::Config(format!(
                "n_entities >= 2*chain_length+2 is required ({} < {})",
                self.n_entities,
                2 * l + 2
            )));
        }
        if self.n_relations == 0 {
            return Err(Error::Config("n_relations must be positive".into()));
        }
        if self.n_examples == 0 {
            return Err(Error::Config("n_examples must be positive".into()));
        }
        Ok(())
    }

    pub fn entity_token(&self, i: usize) -> String {
        let width = digits(self.n_entities.saturating_sub(1)).max(2);
        format!("ent{i:0width$}")
    }

    pub fn relation_token(&self, r: usize) -> String {
        format!("rel{r}")
    }

    /// Query-side token naming a whole chain of relations.
    pub fn query_relation_token(&self, rels: &[usize]) -> String {
        let last = rels.len() - 1;
        rels.iter()
            .enumerate()
            .map(|(i, &r)| {
                let name = self.relation_token(r);
                if i == last && self.pattern == ChainPattern::Bridge {
                    format!("{INVERSE}{name}")
                } else {
                    name
                }
            })
            .collect::<Vec<_>>()
            .join(&COMPOSE.to_string())
    }

    /// Every token the generator can emit, in a fixed order. Splits built
    /// from the same config therefore share ids.
    pub fn vocab(&self) -> Vocab {
        let mut v = Vocab::new();
        v.insert(FACT_END);
        for e in 0..self.n_entities {
            v.insert(&self.entity_token(e));
        }
        for r in 0..self.n_relations {
            v.insert(&self.relation_token(r));
        }
        let l = self.chain_length;
        let total = self.n_relations.pow(l as u32);
        for code in 0..total {
            let mut rels = vec![0; l];
            let mut c = code;
            for slot in rels.iter_mut().rev() {
                *slot = c % self.n_relations;
                c /= self.n_relations;
            }
            v.insert(&self.query_relation_token(&rels));
        }
        v
    }
}

fn digits(mut n: usize) -> usize {
    let mut d = 1;
    while n >= 10 {
        n /= 10;
        d += 1;
    }
    d
}

/// `(subject, relation, object)` over entity and relation indices.
pub type Fact = (usize, usize, usize);

/// One generated instance before tokenization.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Instance {
    /// `e0 … eL`
    pub entities: Vec<usize>,
    /// `r1 … rL`
    pub relations: Vec<usize>,
    /// Chain and distractor facts in document order.
    pub facts: Vec<Fact>,
}

impl Instance {
    pub fn answer(&self) -> usize {
        *self.entities.last().expect("chain is non-empty")
    }
}

/// Follows the chain from `e0` through `facts`. `None` unless every step
/// matches exactly one fact.
pub fn follow_chain(pattern: ChainPattern, start: usize, relations: &[usize], facts: &[Fact]) -> Option<usize> {
    let mut cur = start;
    let last = relations.len() - 1;
    for (i, &r) in relations.iter().enumerate() {
        let inverse = i == last && pattern == ChainPattern::Bridge;
        let mut hits = facts.iter().filter_map(|&(s, rel, o)| match (rel == r, inverse) {
            (true, false) if s == cur => Some(o),
            (true, true) if o == cur => Some(s),
            _ => None,
        });
        let next = hits.next()?;
        if hits.next().is_some() {
            return None;
        }
        cur = next;
    }
    Some(cur)
}

fn sample_instance(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Option<Instance> {
    let l = cfg.chain_length;
    let mut pool: Vec<usize> = (0..cfg.n_entities).collect();
    pool.shuffle(rng);
    let entities = pool[..=l].to_vec();
    let relations: Vec<usize> = (0..l).map(|_| rng.gen_range(0..cfg.n_relations)).collect();
    let bridge = cfg.pattern == ChainPattern::Bridge;

    let mut facts: Vec<Fact> = (0..l)
        .map(|i| {
            if bridge && i == l - 1 {
                (entities[i + 1], relations[i], entities[i])
            } else {
                (entities[i], relations[i], entities[i + 1])
            }
        })
        .collect();

    for k in 0..cfg.n_distractor_facts {
        let mut placed = false;
        for _ in 0..DISTRACTOR_ATTEMPTS {
            let candidate = if k == 0 {
                // Decoy reusing the final relation away from the chain, so the
                // relation alone does not identify the answer.
                let r = relations[l - 1];
                let (a, b) = (rng.gen_range(0..cfg.n_entities), rng.gen_range(0..cfg.n_entities));
                let anchor = entities[l - 1];
                if a == anchor {
                    continue;
                }
                if bridge {
                    (b, r, a)
                } else {
                    (a, r, b)
                }
            } else {
                let r = if rng.gen_bool(0.5) {
                    relations[rng.gen_range(0..l)]
                } else {
                    rng.gen_range(0..cfg.n_relations)
                };
                (rng.gen_range(0..cfg.n_entities), r, rng.gen_range(0..cfg.n_entities))
            };
            if candidate.0 == candidate.2 || facts.contains(&candidate) {
                continue;
            }
            facts.push(candidate);
            if follow_chain(cfg.pattern, entities[0], &relations, &facts) == Some(entities[l]) {
                placed = true;
                break;
            }
            facts.pop();
        }
        if !placed {
            return None;
        }
    }
    facts.shuffle(rng);
    Some(Instance {
        entities,
        relations,
        facts,
    })
}

/// Renders an instance as a validated example over `vocab`.
pub fn render(cfg: &SynthConfig, inst: &Instance, vocab: &Vocab) -> Result<Example> {
    let ent = |e: usize| cfg.entity_token(e);
    let mut doc_tokens = Vec::with_capacity(inst.facts.len() * 4);
    for &(s, r, o) in &inst.facts {
        doc_tokens.extend([ent(s), cfg.relation_token(r), ent(o), FACT_END.to_string()]);
    }
    let query_tokens = vec![
        ent(inst.entities[0]),
        cfg.query_relation_token(&inst.relations),
        vocab::BLANK_TOKEN.to_string(),
        FACT_END.to_string(),
    ];
    let mut mentioned: Vec<usize> = inst.facts.iter().flat_map(|&(s, _, o)| [s, o]).collect();
    mentioned.sort_unstable();
    mentioned.dedup();

    let ids = |toks: &[String]| -> Result<Vec<usize>> {
        toks.iter()
            .map(|t| {
                vocab
                    .get(t)
                    .ok_or_else(|| Error::Data(format!("token `{t}` missing from generator vocab")))
            })
            .collect()
    };
    let document = Document::new(ids(&doc_tokens)?, doc_tokens)?;
    let query = Document::new(ids(&query_tokens)?, query_tokens)?;
    let candidates = mentioned
        .iter()
        .map(|&e| vocab.get(&ent(e)).expect("entity tokens are in the vocab"))
        .collect();
    let gold = vocab.get(&ent(inst.answer())).expect("entity tokens are in the vocab");
    Example::new(document, query, candidates, gold)
}

/// Samples `cfg.n_examples` instances from `cfg.seed`.
pub fn gen_instances(cfg: &SynthConfig) -> Result<Vec<Instance>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    (0..cfg.n_examples)
        .map(|i| {
            (0..EXAMPLE_ATTEMPTS)
                .find_map(|_| sample_instance(cfg, &mut rng))
                .ok_or_else(|| {
                    Error::Config(format!(
                        "could not place {} distractor facts without a second chain (example {i}); \
                         lower n_distractor_facts or raise n_entities",
                        cfg.n_distractor_facts
                    ))
                })
        })
        .collect()
}

pub fn gen_synthetic(cfg: &SynthConfig) -> Result<Dataset> {
    gen_split(cfg, "synthetic")
}

fn gen_split(cfg: &SynthConfig, split: &str) -> Result<Dataset> {
    let vocab = cfg.vocab();
    let examples = gen_instances(cfg)?
        .iter()
        .map(|inst| render(cfg, inst, &vocab))
        .collect::<Result<_>>()?;
    Ok(Dataset {
        split: split.to_string(),
        vocab,
        examples,
    })
}

/// Seed for the `index`-th split derived from a base seed.
pub fn split_seed(seed: u64, index: usize) -> u64 {
    seed ^ 0x9E37_79B9_7F4A_7C15u64.wrapping_mul(index as u64 + 1)
}

/// Generates named splits with independent seeds and one shared vocab.
pub fn gen_splits(cfg: &SynthConfig, sizes: &[(&str, usize)]) -> Result<Vec<Dataset>> {
    sizes
        .iter()
        .enumerate()
        .map(|(i, &(name, n))| {
            let split_cfg = SynthConfig {
                n_examples: n,
                seed: split_seed(cfg.seed, i),
                ..cfg.clone()
            };
            gen_split(&split_cfg, name)
        })
        .collect()
}
