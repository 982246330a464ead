//! Fixtures shared by the criterion benchmarks in `benches/`.

use gcdlab_core::autodiff::Graph;
use gcdlab_core::config::RunConfig;
use gcdlab_core::data::{batches, mix_seed, synth_gen};
use gcdlab_core::losses::{batch_objective, BatchInputs};
use gcdlab_core::model::ModelNodes;
use gcdlab_core::train::init_model;
use gcdlab_core::{GcdDataset, ModelState, Result, Tensor, ViewPair};

/// The easy benchmark's data, a fresh model and one full-size batch.
pub struct TrainingFixture {
    pub cfg: RunConfig,
    pub dataset: GcdDataset,
    pub model: ModelState,
    pub batch: ViewPair,
}

impl TrainingFixture {
    pub fn easy() -> Result<Self> {
        let cfg = RunConfig::preset("easy")?;
        let dataset = synth_gen(&cfg.data)?;
        let model = init_model(&cfg, &dataset)?;
        let batch = batches(&dataset, cfg.train.batch_size, mix_seed(0, 0), cfg.data.aug_sigma)?.swap_remove(0);
        Ok(TrainingFixture {
            cfg,
            dataset,
            model,
            batch,
        })
    }

    /// Forward and backward through the full objective for one batch.
    pub fn objective_step(&self) -> Result<f64> {
        let mut g = Graph::new();
        let bind = self.model.params.bind(&mut g);
        let nodes = ModelNodes::new(&bind)?;
        let b = &self.batch;
        let inputs = BatchInputs {
            view1: &b.view1,
            view2: &b.view2,
            labels: &b.labels,
            labeled: &b.labeled,
        };
        let obj = batch_objective(&mut g, &nodes, &self.model.config, &self.cfg.loss, inputs, 0.07, None)?;
        let grads = g.backward(obj.loss)?;
        Ok(grads.get(bind.get("head.prototypes")?).map_or(0.0, Tensor::max_abs))
    }
}

/// Deterministic pseudo-random `n × n` cost matrix with many ties.
pub fn cost_matrix(n: usize, seed: u64) -> Tensor {
    let data = (0..n * n)
        .map(|i| (mix_seed(seed, i as u64) % 17) as f64)
        .collect();
    Tensor::new(vec![n, n], data).expect("square")
}
