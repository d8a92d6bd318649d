//! WebAssembly bindings for the browser demo in `www/`.
//!
//! Every exported function takes and returns JSON text. The pure versions
//! live in [`demo`] so they can be tested natively.

use wasm_bindgen::prelude::*;

pub mod demo;

fn js(r: Result<String, demo::DemoError>) -> Result<String, JsValue> {
    r.map_err(|e| JsValue::from_str(&e.to_string()))
}

/// Clusters a pasted metric table and projects it to 2-D.
#[wasm_bindgen]
pub fn cluster(table_csv: &str, request_json: &str) -> Result<String, JsValue> {
    js(demo::cluster(table_csv, request_json))
}

/// Scores a range of cluster counts with the selection criteria.
#[wasm_bindgen(js_name = selectK)]
pub fn select_k(table_csv: &str, request_json: &str) -> Result<String, JsValue> {
    js(demo::select_k(table_csv, request_json))
}

/// Nearest neighbours of one kernel in standardized space.
#[wasm_bindgen]
pub fn neighbors(table_csv: &str, request_json: &str) -> Result<String, JsValue> {
    js(demo::neighbors(table_csv, request_json))
}

#[wasm_bindgen(js_name = sampleTable)]
pub fn sample_table() -> String {
    demo::SAMPLE_TABLE.to_string()
}
