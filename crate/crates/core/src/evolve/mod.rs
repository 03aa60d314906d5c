//! Budgeted (μ+λ) genetic search over merge recipes.
//!
//! Generation `g` draws all of its randomness from a ChaCha8 stream keyed by
//! `(seed, g)`, so a search resumed from a generation boundary replays the
//! uninterrupted run exactly. Fitness is looked up by genome identity, which
//! keeps proposals independent of evaluation order.

pub mod evaluator;

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::recipe::{genome_to_recipe, recipe_to_genome, Gene, Genome, MergeRecipe, RecipeError};
pub use evaluator::{
    parse_score_document, EvalError, Evaluator, ExternalCommand, SyntheticTarget, MODEL_PLACEHOLDER, TMPDIR_ENV,
};

pub const FORMAT_VERSION: u32 = 1;
pub const TOURNAMENT_SIZE: usize = 3;
pub const CROSSOVER_RATE: f64 = 0.5;
pub const MUTATION_RATE: f64 = 0.3;
/// Mutation σ as a fraction of each gene's range.
pub const MUTATION_SCALE: f64 = 0.1;
/// Generations in a row that may propose nothing new before the search gives up.
pub const MAX_STALE_GENERATIONS: u32 = 64;

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("budget {budget} is smaller than the population size {population}")]
    BudgetTooSmall { budget: usize, population: usize },
    #[error("population size must be at least 1")]
    EmptyPopulation,
    #[error("template: {0}")]
    Template(#[from] RecipeError),
    #[error("gene {0:?} does not exist for this template")]
    UnknownGene(String),
    #[error("state file {path}: {message}")]
    State { path: String, message: String },
    #[error("state was created for a different search: {0}")]
    StateMismatch(String),
}

/// Parameters fixed for the lifetime of a search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub budget: usize,
    pub population_size: usize,
    pub seed: u64,
    /// Genes held at a fixed value, as `(name, value)`; names as accepted by [`Gene`]'s parser.
    #[serde(default)]
    pub pins: Vec<(String, f64)>,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            budget: 500,
            population_size: 20,
            seed: 0,
            pins: Vec::new(),
        }
    }
}

impl SearchConfig {
    fn resolved_pins(&self, experts: usize) -> Result<Vec<(Gene, f64)>, SearchError> {
        self.pins
            .iter()
            .map(|(name, v)| {
                let gene: Gene = name.parse().map_err(|_| SearchError::UnknownGene(name.clone()))?;
                if let Gene::Weight(i) = gene {
                    if i >= experts {
                        return Err(SearchError::UnknownGene(name.clone()));
                    }
                }
                Ok((gene, *v))
            })
            .collect()
    }
}

/// Serializes −∞ (failed evaluation) as the string `"-inf"`.
mod fitness_repr {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            Repr::Num(*v)
        } else if *v == f64::NEG_INFINITY {
            Repr::Text("-inf".into())
        } else if *v == f64::INFINITY {
            Repr::Text("inf".into())
        } else {
            Repr::Text("nan".into())
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => match t.as_str() {
                "-inf" => Ok(f64::NEG_INFINITY),
                "inf" => Ok(f64::INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(serde::de::Error::custom(format!("bad fitness {other:?}"))),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Individual {
    pub genome: Genome,
    #[serde(with = "fitness_repr")]
    pub fitness: f64,
}

/// One evaluator call, in the order calls were issued.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub generation: u64,
    pub genome: Genome,
    #[serde(with = "fitness_repr")]
    pub fitness: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CacheEntry {
    key: String,
    #[serde(with = "fitness_repr")]
    fitness: f64,
}

/// Everything needed to continue a search at a generation boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchState {
    pub format_version: u32,
    pub config: SearchConfig,
    /// Number of completed generations; generation 0 is the initial population.
    pub generation: u64,
    pub population: Vec<Individual>,
    pub evaluations_used: usize,
    pub best: Option<Individual>,
    pub history: Vec<HistoryEntry>,
    pub stale_generations: u32,
    pub finished: bool,
    #[serde(rename = "cache")]
    cache_entries: Vec<CacheEntry>,
}

impl SearchState {
    pub fn cached_fitness(&self, genome: &Genome) -> Option<f64> {
        let key = genome.cache_key();
        self.cache_entries.iter().find(|e| e.key == key).map(|e| e.fitness)
    }
}

/// Maps an evaluation outcome to a fitness; failures become −∞.
pub fn evaluate_config(genome: &Genome, template: &MergeRecipe, evaluator: &dyn Evaluator) -> f64 {
    let outcome = genome_to_recipe(genome, template)
        .map_err(|e| e.to_string())
        .and_then(|recipe| evaluator.evaluate(&recipe).map_err(|e| e.to_string()));
    match outcome {
        Ok(f) if !f.is_nan() => f,
        Ok(_) => {
            log::warn!("evaluation of {} returned NaN; scoring -inf", genome.cache_key());
            f64::NEG_INFINITY
        }
        Err(e) => {
            log::warn!("evaluation of {} failed: {e}; scoring -inf", genome.cache_key());
            f64::NEG_INFINITY
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchOutcome {
    pub best_recipe: MergeRecipe,
    pub best_fitness: f64,
    pub history: Vec<HistoryEntry>,
}

/// A search in progress: the template plus its [`SearchState`].
pub struct Search {
    template: MergeRecipe,
    template_genome: Genome,
    pins: Vec<(Gene, f64)>,
    state: SearchState,
    cache: BTreeMap<String, f64>,
}

impl Search {
    pub fn new(template: MergeRecipe, config: SearchConfig) -> Result<Self, SearchError> {
        if config.population_size == 0 {
            return Err(SearchError::EmptyPopulation);
        }
        if config.budget < config.population_size {
            return Err(SearchError::BudgetTooSmall {
                budget: config.budget,
                population: config.population_size,
            });
        }
        let state = SearchState {
            format_version: FORMAT_VERSION,
            config,
            generation: 0,
            population: Vec::new(),
            evaluations_used: 0,
            best: None,
            history: Vec::new(),
            stale_generations: 0,
            finished: false,
            cache_entries: Vec::new(),
        };
        Self::from_state(template, state)
    }

    /// Continues from a saved state. The template must encode to a genome of the same shape.
    pub fn from_state(template: MergeRecipe, state: SearchState) -> Result<Self, SearchError> {
        if state.format_version != FORMAT_VERSION {
            return Err(SearchError::StateMismatch(format!(
                "format_version {} is not supported",
                state.format_version
            )));
        }
        let template_genome = recipe_to_genome(&template)?.clamped();
        let pins = state.config.resolved_pins(template_genome.num_experts())?;
        if let Some(ind) = state.population.first() {
            if ind.genome.num_experts() != template_genome.num_experts() {
                return Err(SearchError::StateMismatch(format!(
                    "state genomes have {} weights, template has {} experts",
                    ind.genome.num_experts(),
                    template_genome.num_experts()
                )));
            }
        }
        let cache = state.cache_entries.iter().map(|e| (e.key.clone(), e.fitness)).collect();
        Ok(Search {
            template,
            template_genome,
            pins,
            state,
            cache,
        })
    }

    pub fn state(&self) -> &SearchState {
        &self.state
    }

    pub fn template(&self) -> &MergeRecipe {
        &self.template
    }

    pub fn is_finished(&self) -> bool {
        self.state.finished
    }

    fn pin(&self, mut g: Genome) -> Genome {
        for &(gene, v) in &self.pins {
            g.set(gene, v);
        }
        g.clamped()
    }

    fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.state.config.seed);
        rng.set_stream(self.state.generation);
        rng
    }

    fn random_genome(&self, rng: &mut ChaCha8Rng) -> Genome {
        let mut g = self.template_genome.clone();
        g.method_gene = rng.random_range(0..Gene::Method.bounds().1 as u8 + 1);
        for gene in Gene::continuous(g.num_experts()) {
            let (lo, hi) = gene.bounds();
            g.set(gene, rng.random_range(lo..=hi));
        }
        g
    }

    /// Index of the fittest of [`TOURNAMENT_SIZE`] uniform draws; ties keep the earliest draw.
    fn tournament(&self, rng: &mut ChaCha8Rng) -> usize {
        let pop = &self.state.population;
        let mut winner = rng.random_range(0..pop.len());
        for _ in 1..TOURNAMENT_SIZE {
            let c = rng.random_range(0..pop.len());
            if pop[c].fitness > pop[winner].fitness {
                winner = c;
            }
        }
        winner
    }

    fn offspring(&self, rng: &mut ChaCha8Rng) -> Genome {
        let a = &self.state.population[self.tournament(rng)].genome;
        let b = &self.state.population[self.tournament(rng)].genome;
        let mut child = a.clone();
        if rng.random_bool(CROSSOVER_RATE) {
            child.method_gene = b.method_gene;
        }
        let genes = Gene::continuous(child.num_experts());
        for &gene in &genes {
            if rng.random_bool(CROSSOVER_RATE) {
                child.set(gene, b.get(gene));
            }
        }
        if rng.random_bool(MUTATION_RATE) {
            child.method_gene = rng.random_range(0..Gene::Method.bounds().1 as u8 + 1);
        }
        for &gene in &genes {
            if rng.random_bool(MUTATION_RATE) {
                let (lo, hi) = gene.bounds();
                let noise = Normal::new(0.0, MUTATION_SCALE * (hi - lo)).expect("positive sigma");
                let v = child.get(gene) + noise.sample(rng);
                child.set(gene, v.clamp(lo, hi));
            }
        }
        child
    }

    /// Scores `proposals`, spending budget only on genomes never evaluated before.
    /// Returns the genomes that received a fitness, in proposal order.
    fn score(&mut self, proposals: Vec<Genome>, evaluator: &dyn Evaluator) -> Vec<Individual> {
        let mut fresh: Vec<Genome> = Vec::new();
        let mut fresh_keys = HashSet::new();
        let mut scored_keys = Vec::new();
        for g in &proposals {
            let key = g.cache_key();
            if self.cache.contains_key(&key) || fresh_keys.contains(&key) {
                scored_keys.push(Some(key));
            } else if self.state.evaluations_used + fresh.len() < self.state.config.budget {
                fresh_keys.insert(key.clone());
                fresh.push(g.clone());
                scored_keys.push(Some(key));
            } else {
                scored_keys.push(None);
            }
        }

        let template = &self.template;
        let width = evaluator.parallel_evals().max(1);
        let mut fitness = Vec::with_capacity(fresh.len());
        for batch in fresh.chunks(width) {
            if batch.len() == 1 {
                fitness.push(evaluate_config(&batch[0], template, evaluator));
                continue;
            }
            std::thread::scope(|s| {
                let handles: Vec<_> = batch
                    .iter()
                    .map(|g| s.spawn(move || evaluate_config(g, template, evaluator)))
                    .collect();
                fitness.extend(handles.into_iter().map(|h| h.join().unwrap_or(f64::NEG_INFINITY)));
            });
        }

        for (g, f) in fresh.into_iter().zip(fitness) {
            let key = g.cache_key();
            self.cache.insert(key.clone(), f);
            self.state.cache_entries.push(CacheEntry { key, fitness: f });
            self.state.evaluations_used += 1;
            self.state.history.push(HistoryEntry {
                generation: self.state.generation,
                genome: g.clone(),
                fitness: f,
            });
            let improves = self.state.best.as_ref().is_none_or(|b| f > b.fitness);
            if improves {
                self.state.best = Some(Individual { genome: g, fitness: f });
            }
        }

        proposals
            .into_iter()
            .zip(scored_keys)
            .filter_map(|(genome, key)| {
                key.map(|k| Individual {
                    fitness: self.cache[&k],
                    genome,
                })
            })
            .collect()
    }

    /// Runs one generation. Returns `false` once the search has finished.
    pub fn step(&mut self, evaluator: &dyn Evaluator) -> bool {
        if self.state.finished {
            return false;
        }
        let mut rng = self.rng();
        let mu = self.state.config.population_size;
        let used_before = self.state.evaluations_used;

        let proposals: Vec<Genome> = if self.state.generation == 0 {
            let mut init = vec![self.pin(self.template_genome.clone())];
            while init.len() < mu {
                let g = self.random_genome(&mut rng);
                init.push(self.pin(g));
            }
            init
        } else {
            (0..mu).map(|_| self.offspring(&mut rng)).map(|g| self.pin(g)).collect()
        };
        let children = self.score(proposals, evaluator);

        // (μ+λ) survival: parents first so equal fitness favours incumbents.
        let mut pool: Vec<Individual> = std::mem::take(&mut self.state.population);
        pool.extend(children);
        let mut seen = HashSet::new();
        pool.retain(|ind| seen.insert(ind.genome.cache_key()));
        pool.sort_by(|a, b| b.fitness.total_cmp(&a.fitness));
        pool.truncate(mu);
        self.state.population = pool;

        if self.state.evaluations_used == used_before {
            self.state.stale_generations += 1;
        } else {
            self.state.stale_generations = 0;
        }
        self.state.generation += 1;
        if self.state.evaluations_used >= self.state.config.budget {
            self.state.finished = true;
        } else if self.state.stale_generations >= MAX_STALE_GENERATIONS {
            log::warn!(
                "no new genomes for {MAX_STALE_GENERATIONS} generations; stopping with {} of {} evaluations used",
                self.state.evaluations_used,
                self.state.config.budget
            );
            self.state.finished = true;
        }
        !self.state.finished
    }

    /// Runs to completion, saving the state after every generation when `checkpoint` is set.
    pub fn run(&mut self, evaluator: &dyn Evaluator, checkpoint: Option<&Path>) -> Result<SearchOutcome, SearchError> {
        while !self.state.finished {
            self.step(evaluator);
            if let Some(path) = checkpoint {
                checkpoint_search(&self.state, path)?;
            }
            log::info!(
                "generation {}: {} evaluations, best {:?}",
                self.state.generation,
                self.state.evaluations_used,
                self.state.best.as_ref().map(|b| b.fitness)
            );
        }
        self.outcome()
    }

    pub fn outcome(&self) -> Result<SearchOutcome, SearchError> {
        let best = self
            .state
            .best
            .clone()
            .unwrap_or_else(|| Individual {
                genome: self.template_genome.clone(),
                fitness: f64::NEG_INFINITY,
            });
        Ok(SearchOutcome {
            best_recipe: genome_to_recipe(&best.genome, &self.template)?,
            best_fitness: best.fitness,
            history: self.state.history.clone(),
        })
    }
}

pub fn run_search(
    template: &MergeRecipe,
    evaluator: &dyn Evaluator,
    config: SearchConfig,
) -> Result<SearchOutcome, SearchError> {
    Search::new(template.clone(), config)?.run(evaluator, None)
}

/// Writes the state atomically (temporary file, then rename).
pub fn checkpoint_search(state: &SearchState, path: &Path) -> Result<(), SearchError> {
    let err = |message: String| SearchError::State {
        path: path.display().to_string(),
        message,
    };
    let text = serde_json::to_string_pretty(state).map_err(|e| err(e.to_string()))?;
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| err(e.to_string()))?;
    std::io::Write::write_all(&mut tmp, text.as_bytes()).map_err(|e| err(e.to_string()))?;
    tmp.persist(path).map_err(|e| err(e.to_string()))?;
    Ok(())
}

pub fn resume_search(path: &Path) -> Result<SearchState, SearchError> {
    let err = |message: String| SearchError::State {
        path: path.display().to_string(),
        message,
    };
    let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
    let state: SearchState = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
    if state.format_version != FORMAT_VERSION {
        return Err(err(format!("unsupported format_version {}", state.format_version)));
    }
    Ok(state)
}
