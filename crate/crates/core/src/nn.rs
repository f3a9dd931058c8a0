//! Small building blocks shared by the tokenizer and the world model.

use crate::error::{Error, Result};
use crate::formats::Checkpoint;
use crate::numerics::{Graph, OptimizerState, ParamStore, Real, Rng, RngState, Tensor, Var};

/// Adds `name.w [din, dout]` and `name.b [dout]`.
pub fn add_linear<F: Real>(store: &mut ParamStore<F>, rng: &mut Rng, name: &str, din: usize, dout: usize, std: f64) {
    if std == 0.0 {
        store.zeros(&format!("{name}.w"), &[din, dout]);
    } else {
        store.normal(&format!("{name}.w"), &[din, dout], std, rng);
    }
    store.zeros(&format!("{name}.b"), &[dout]);
}

pub fn add_layer_norm<F: Real>(store: &mut ParamStore<F>, name: &str, d: usize) {
    store.filled(&format!("{name}.g"), &[d], 1.0);
    store.zeros(&format!("{name}.b"), &[d]);
}

pub fn linear<F: Real>(g: &mut Graph<F>, store: &ParamStore<F>, name: &str, x: Var) -> Result<Var> {
    let w = g.param_by_name(store, &format!("{name}.w"));
    let b = g.param_by_name(store, &format!("{name}.b"));
    g.linear(x, w, Some(b))
}

pub fn layer_norm<F: Real>(g: &mut Graph<F>, store: &ParamStore<F>, name: &str, x: Var) -> Result<Var> {
    let gm = g.param_by_name(store, &format!("{name}.g"));
    let bt = g.param_by_name(store, &format!("{name}.b"));
    g.layer_norm(x, gm, bt)
}

/// Mean squared difference.
pub fn mse<F: Real>(g: &mut Graph<F>, a: Var, b: Var) -> Result<Var> {
    let d = g.sub(a, b)?;
    let sq = g.mul(d, d)?;
    Ok(g.mean(sq))
}

/// Optimizer, RNG and step counter of a resumable training run.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub step: u64,
    pub rng: Rng,
    pub opt: OptimizerState<f32>,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct TrainStateJson {
    step: u64,
    rng: RngState,
    opt_step: u64,
}

impl TrainState {
    pub fn new(store: &ParamStore<f32>, rng: Rng) -> Self {
        Self { step: 0, rng, opt: OptimizerState::new(store) }
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(TrainStateJson { step: self.step, rng: self.rng.state(), opt_step: self.opt.step_count })
            .expect("train state serializes")
    }

    /// Stores the optimizer moments as `opt.m.<prefix><name>` / `opt.v.<prefix><name>`.
    pub fn push_moments(&self, ck: &mut Checkpoint, prefix: &str, store: &ParamStore<f32>) {
        for id in 0..store.len() {
            let shape = store.get(id).shape().to_vec();
            let name = store.name(id);
            ck.push(
                format!("opt.m.{prefix}{name}"),
                Tensor::new(shape.clone(), self.opt.first_moment[id].clone()).unwrap(),
            );
            ck.push(format!("opt.v.{prefix}{name}"), Tensor::new(shape, self.opt.second_moment[id].clone()).unwrap());
        }
    }

    /// Restores a state written by [`TrainState::to_json`] and
    /// [`TrainState::push_moments`]. Returns `None` when the checkpoint holds no
    /// training state.
    pub fn restore(
        json: Option<&serde_json::Value>,
        ck: &Checkpoint,
        prefix: &str,
        store: &ParamStore<f32>,
    ) -> Result<Option<Self>> {
        let Some(json) = json else { return Ok(None) };
        let js: TrainStateJson = serde_json::from_value(json.clone())?;
        let mut opt = OptimizerState::new(store);
        opt.step_count = js.opt_step;
        for id in 0..store.len() {
            let name = store.name(id);
            for (kind, dst) in [("m", &mut opt.first_moment[id]), ("v", &mut opt.second_moment[id])] {
                let key = format!("opt.{kind}.{prefix}{name}");
                let t = ck
                    .get(&key)
                    .ok_or_else(|| Error::Format { format: "DWCK", msg: format!("missing optimizer tensor {key}") })?;
                if t.numel() != dst.len() {
                    return Err(Error::Format {
                        format: "DWCK",
                        msg: format!("optimizer tensor {key} has wrong size"),
                    });
                }
                dst.copy_from_slice(t.data());
            }
        }
        Ok(Some(Self { step: js.step, rng: Rng::from_state(js.rng), opt }))
    }
}
