use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{ModelConfig, PyramidMixer, RESERVED_ROWS};
use crate::data::{Batch, Sample};
use crate::error::Result;
use crate::tensor::Graph;
use crate::train::compute_loss;

/// Largest relative error seen in one parameter group.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GroupError {
    pub group: String,
    pub checked: usize,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub seeds: Vec<u64>,
    pub tolerance: f64,
    pub groups: Vec<GroupError>,
    pub max_rel_err: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

pub const GRADCHECK_TOLERANCE: f64 = 1e-3;
const STEP: f64 = 1e-5;
/// Denominator floor so that gradients that are both ~0 compare as equal.
const REL_FLOOR: f64 = 1e-6;

/// Parameter group of a tensor name: `layer2.feature.w1` → `layer2.feature`.
fn group_of(name: &str) -> &str {
    name.rsplit_once('.').map_or(name, |(g, _)| g)
}

/// A random left-padded batch valid for `config`.
pub fn random_batch(config: &ModelConfig, size: usize, rng: &mut impl Rng) -> Batch {
    let (len, fields) = (config.max_len, config.num_fields());
    let mut indices = vec![0; size * len * fields];
    let mut mask = vec![false; size * len];
    for b in 0..size {
        let real = rng.random_range(1..=len);
        for t in len - real..len {
            mask[b * len + t] = true;
            for (f, spec) in config.fields.iter().enumerate() {
                indices[(b * len + t) * fields + f] = rng.random_range(RESERVED_ROWS..spec.vocab);
            }
        }
    }
    let item_vocab = config.fields[0].vocab;
    Batch {
        size,
        len,
        fields,
        indices,
        mask,
        targets: (0..size).map(|_| rng.random_range(RESERVED_ROWS..item_vocab)).collect(),
        samples: (0..size).map(|seq| Sample { seq, end: len }).collect(),
    }
}

/// Compares backprop against central differences for every scalar of every
/// parameter, in `f64`, on one random model and batch per seed.
pub fn gradcheck(config: &ModelConfig, seeds: &[u64]) -> Result<GradcheckReport> {
    let mut groups: Vec<GroupError> = Vec::new();
    for &seed in seeds {
        let mut model = PyramidMixer::<f64>::init(config.clone(), seed)?;
        // Random non-trivial values everywhere (fresh biases are zero, gains one).
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
        for (name, t) in model.params_mut().iter_mut() {
            let pad_row = if name.starts_with("embed.") { t.last_dim() } else { 0 };
            for x in &mut t.data_mut()[pad_row..] {
                *x += rng.random_range(-0.3..0.3);
            }
        }
        let batch = random_batch(config, 3, &mut rng);
        let loss_of = |m: &PyramidMixer<f64>| -> Result<f64> {
            let mut g = Graph::new();
            let bound = m.bind(&mut g, false);
            let out = m.forward(&mut g, &bound, &batch)?;
            let loss = compute_loss(&mut g, out.scores, &batch.targets, &vec![true; batch.size])?;
            Ok(g.value(loss).item())
        };

        let mut g = Graph::new();
        let bound = model.bind(&mut g, true);
        let out = model.forward(&mut g, &bound, &batch)?;
        let loss = compute_loss(&mut g, out.scores, &batch.targets, &vec![true; batch.size])?;
        g.backward(loss)?;
        let analytic: Vec<(String, Vec<f64>)> = bound
            .iter()
            .map(|(name, v)| (name.to_string(), g.grad_tensor(v).into_data()))
            .collect();

        for (name, grad) in analytic {
            let group = group_of(&name).to_string();
            let mut worst = 0.0f64;
            for (i, &a) in grad.iter().enumerate() {
                let orig = model.params().get(&name).unwrap().data()[i];
                model.params_mut().get_mut(&name).unwrap().data_mut()[i] = orig + STEP;
                let up = loss_of(&model)?;
                model.params_mut().get_mut(&name).unwrap().data_mut()[i] = orig - STEP;
                let down = loss_of(&model)?;
                model.params_mut().get_mut(&name).unwrap().data_mut()[i] = orig;
                let n = (up - down) / (2.0 * STEP);
                let rel = (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR);
                worst = worst.max(rel);
            }
            match groups.iter_mut().find(|e| e.group == group) {
                Some(e) => {
                    e.checked += grad.len();
                    e.max_rel_err = e.max_rel_err.max(worst);
                }
                None => groups.push(GroupError {
                    group,
                    checked: grad.len(),
                    max_rel_err: worst,
                }),
            }
        }
    }
    let max_rel_err = groups.iter().map(|e| e.max_rel_err).fold(0.0, f64::max);
    Ok(GradcheckReport {
        seeds: seeds.to_vec(),
        tolerance: GRADCHECK_TOLERANCE,
        groups,
        max_rel_err,
    })
}
