//! Browser bindings for the vehicle demo page. Every export returns a JSON
//! string so the page needs no generated type definitions.

use armpc::features::{extract_features, FeatureLayout};
use armpc::mpc::{interpolation_weights, sample_steps};
use armpc::plant::{Plant, PlantConfig, ReferenceKind};
use armpc::runtime::{run_loop_observed, Controller, RunConfig};
use nalgebra::DVector;
use serde::Serialize;
use wasm_bindgen::prelude::*;

fn js_err(e: impl std::fmt::Display) -> JsValue {
    JsValue::from_str(&e.to_string())
}

fn to_json<T: Serialize>(v: &T) -> Result<String, JsValue> {
    serde_json::to_string(v).map_err(js_err)
}

fn vehicle() -> Plant {
    Plant::new(PlantConfig::vehicle_default()).expect("default config is valid")
}

fn kind(name: &str) -> Result<ReferenceKind, JsValue> {
    name.parse()
        .map_err(|_| js_err(format!("unknown reference kind {name:?}")))
}

#[derive(Serialize)]
struct Weights {
    samples: Vec<usize>,
    /// Per step: previous sample, next sample, weight on the next one.
    steps: Vec<(usize, usize, f64)>,
}

/// How the `p` optimized samples spread over a `t`-step horizon.
#[wasm_bindgen]
pub fn weights(t: usize, p: usize) -> Result<String, JsValue> {
    let w = interpolation_weights(t, p).map_err(js_err)?;
    to_json(&Weights {
        samples: sample_steps(t, p),
        steps: w.iter().map(|x| (x.k_p, x.k_n, x.w)).collect(),
    })
}

#[derive(Serialize)]
struct StateFeatures {
    name: String,
    window: Vec<f64>,
    curvature: f64,
    wavelet: Vec<f64>,
    error: f64,
}

/// Features of the first 40-step window of a synthesized reference, seen
/// from a state displaced by `offset` in lateral position.
#[wasm_bindgen]
pub fn features(kind_name: &str, seed: u64, offset: f64) -> Result<String, JsValue> {
    let plant = vehicle();
    let t_l = plant.config.t_max;
    let refs = plant
        .synthesize(kind(kind_name)?, t_l, seed)
        .map_err(js_err)?
        .states;
    let layout = FeatureLayout::new(plant.state_names(), t_l, 3).map_err(js_err)?;
    let mut x: DVector<f64> = refs.row(0).transpose();
    x[3] += offset;
    let f = extract_features(&layout, &refs, &x).map_err(js_err)?;
    let out: Vec<StateFeatures> = (0..plant.state_dim())
        .map(|s| StateFeatures {
            name: layout.state_names[s].clone(),
            window: refs.column(s).iter().copied().collect(),
            curvature: f[layout.curvature_index(s)],
            wavelet: f[layout.wavelet_range(s)].to_vec(),
            error: f[layout.error_index(s)],
        })
        .collect();
    to_json(&out)
}

#[derive(Serialize)]
struct Trace {
    reference: Vec<f64>,
    actual: Vec<f64>,
    cost: f64,
    sigma: f64,
    mean_solve_ms: f64,
}

/// Closed-loop MPC(t, p) tracking of a synthesized reference on the
/// noise-free plant; returns the lateral position trace.
#[wasm_bindgen]
pub fn closed_loop(
    kind_name: &str,
    seed: u64,
    cycles: usize,
    t: usize,
    p: usize,
) -> Result<String, JsValue> {
    let plant = vehicle();
    let refs = plant
        .synthesize(kind(kind_name)?, cycles + plant.config.t_max, seed)
        .map_err(js_err)?
        .states;
    let cfg = RunConfig {
        cycles,
        seed,
        noise: false,
        ..Default::default()
    };
    let lat = 3;
    let mut actual = Vec::with_capacity(cycles);
    let report = run_loop_observed(
        &plant,
        &Controller::Fixed { t, p },
        &cfg,
        &refs,
        &mut |_, x, _| actual.push(x[lat]),
    )
    .map_err(js_err)?;
    to_json(&Trace {
        reference: refs.column(lat).iter().take(cycles).copied().collect(),
        actual,
        cost: report.summary.e,
        sigma: report.summary.sigma,
        mean_solve_ms: report.summary.mean_solve_time * 1e3,
    })
}
