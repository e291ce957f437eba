//! Traces on disk reuse the checkpoint container: a JSON header with the
//! layout and target, then `layer<l>.attention` and `layer<l>.gradient`
//! arrays of shape `[heads, n, n]` stored as f64.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AttentionTrace, Layout, LayerTrace, RelevancyError};
use crate::train::{read_file_as, write_file};

#[derive(Serialize, Deserialize)]
struct TraceHeader {
    kind: String,
    n: usize,
    layers: usize,
    layout: Layout,
    target_row: usize,
    target_token: usize,
    generated_position: usize,
    generated: Vec<usize>,
}

const KIND: &str = "attention-trace";

pub fn save_trace(trace: &AttentionTrace, path: &Path) -> Result<(), RelevancyError> {
    trace.validate()?;
    let header = TraceHeader {
        kind: KIND.into(),
        n: trace.n,
        layers: trace.layers.len(),
        layout: trace.layout.clone(),
        target_row: trace.target_row,
        target_token: trace.target_token,
        generated_position: trace.generated_position,
        generated: trace.generated.clone(),
    };
    let n = trace.n;
    let mut arrays = Vec::new();
    for (l, layer) in trace.layers.iter().enumerate() {
        arrays.push((format!("layer{l}.attention"), layer.attention.as_slice(), vec![layer.heads, n, n]));
        arrays.push((format!("layer{l}.gradient"), layer.gradient.as_slice(), vec![layer.heads, n, n]));
    }
    write_file(path, &header, &arrays)?;
    Ok(())
}

pub fn load_trace(path: &Path) -> Result<AttentionTrace, RelevancyError> {
    let (header, arrays) = read_file_as::<TraceHeader, f64>(path)?;
    if header.kind != KIND {
        return Err(RelevancyError::Input(format!("{} holds a {:?}, not an attention trace", path.display(), header.kind)));
    }
    let mut layers = Vec::with_capacity(header.layers);
    let mut arrays = arrays.into_iter();
    for l in 0..header.layers {
        let mut next = |what: &str| {
            let (name, t) = arrays
                .next()
                .ok_or_else(|| RelevancyError::Input(format!("trace is missing layer{l}.{what}")))?;
            if name != format!("layer{l}.{what}") || t.shape().len() != 3 {
                return Err(RelevancyError::Input(format!("unexpected array {name} where layer{l}.{what} belongs")));
            }
            Ok(t)
        };
        let a = next("attention")?;
        let g = next("gradient")?;
        layers.push(LayerTrace { heads: a.shape()[0], attention: a.into_data(), gradient: g.into_data() });
    }
    let trace = AttentionTrace {
        n: header.n,
        layers,
        layout: header.layout,
        target_row: header.target_row,
        target_token: header.target_token,
        generated_position: header.generated_position,
        generated: header.generated,
    };
    trace.validate()?;
    Ok(trace)
}
