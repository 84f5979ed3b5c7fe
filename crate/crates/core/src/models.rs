//! Small reference networks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{GraphBuilder, TensorGraph};

pub const REFERENCE_MODELS: [&str; 4] = ["mlp2", "lenet5", "convnet-mini", "mobilenet-mini"];

/// Input shape and class count a model is built for.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelInput {
    pub shape: Vec<usize>,
    pub classes: usize,
}

/// Default input of each reference model.
pub fn default_input(name: &str) -> Result<ModelInput> {
    let (shape, classes) = match name {
        "mlp2" => (vec![784], 10),
        "lenet5" => (vec![1, 28, 28], 10),
        "convnet-mini" | "mobilenet-mini" => (vec![3, 16, 16], 10),
        _ => return Err(unknown(name)),
    };
    Ok(ModelInput { shape, classes })
}

fn unknown(name: &str) -> Error {
    Error::InvalidArgument(format!("unknown model `{name}` (expected one of {})", REFERENCE_MODELS.join(", ")))
}

/// Builds a reference model with its default input.
pub fn build_reference_model(name: &str, seed: u64) -> Result<TensorGraph> {
    build_reference_model_for(name, &default_input(name)?, seed)
}

/// Builds a reference model for a custom input shape / class count.
///
/// * `mlp2`: FC(in→64), ReLU, FC(64→classes); `in` is the flattened input.
/// * `lenet5`: conv5x5(6, pad 2), pool, conv5x5(16), pool, FC 120, 84, classes.
/// * `convnet-mini`: 3×3, 1×1, 5×5 and 3×3 convolutions with a residual add, then FC.
/// * `mobilenet-mini`: stem 3×3 conv, depthwise-separable blocks with a residual add, then FC.
pub fn build_reference_model_for(name: &str, input: &ModelInput, seed: u64) -> Result<TensorGraph> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = input.classes;
    let mut b = GraphBuilder::new(&input.shape);
    let x = b.input();
    match name {
        "mlp2" => {
            let features: usize = input.shape.iter().product();
            let mut h = x;
            if input.shape.len() > 1 {
                h = b.flatten("flatten", h);
            }
            let h = b.fc("fc1", h, features, 64);
            let h = b.relu("relu1", h);
            let h = b.fc("fc2", h, 64, k);
            b.loss(h);
        }
        "lenet5" => {
            let [c, hh, ww] = chw(input)?;
            let h = b.conv("conv1", x, c, 6, 5, 1, 2);
            let h = b.relu("relu1", h);
            let h = b.max_pool("pool1", h, 2, 2);
            let h = b.conv("conv2", h, 6, 16, 5, 1, 0);
            let h = b.relu("relu2", h);
            let h = b.max_pool("pool2", h, 2, 2);
            let flat = 16 * ((hh / 2 - 4) / 2) * ((ww / 2 - 4) / 2);
            let h = b.flatten("flatten", h);
            let h = b.fc("fc1", h, flat, 120);
            let h = b.relu("relu3", h);
            let h = b.fc("fc2", h, 120, 84);
            let h = b.relu("relu4", h);
            let h = b.fc("fc3", h, 84, k);
            b.loss(h);
        }
        "convnet-mini" => {
            let [c, hh, ww] = chw(input)?;
            let h = b.conv("conv1", x, c, 16, 3, 1, 1);
            let h = b.relu("relu1", h);
            let h = b.conv("conv2", h, 16, 32, 1, 1, 0);
            let h = b.relu("relu2", h);
            let h = b.max_pool("pool1", h, 2, 2);
            let a = b.conv("conv3", h, 32, 32, 5, 1, 2);
            let a = b.relu("relu3", a);
            let r = b.conv("conv4", a, 32, 32, 3, 1, 1);
            let r = b.add("add1", r, a);
            let r = b.relu("relu4", r);
            let r = b.avg_pool("pool2", r, 2, 2);
            let h = b.flatten("flatten", r);
            let h = b.fc("fc1", h, 32 * (hh / 4) * (ww / 4), k);
            b.loss(h);
        }
        "mobilenet-mini" => {
            let [c, hh, ww] = chw(input)?;
            let h = b.conv("conv1", x, c, 16, 3, 1, 1);
            let h = b.relu("relu1", h);
            let h = b.depthwise("dw1", h, 16, 3, 1, 1);
            let h = b.relu("relu2", h);
            let h = b.conv("pw1", h, 16, 32, 1, 1, 0);
            let h = b.relu("relu3", h);
            let h = b.depthwise("dw2", h, 32, 3, 2, 1);
            let h = b.relu("relu4", h);
            let a = b.conv("pw2", h, 32, 64, 1, 1, 0);
            let a = b.relu("relu5", a);
            let h = b.depthwise("dw3", a, 64, 3, 1, 1);
            let h = b.relu("relu6", h);
            let h = b.conv("pw3", h, 64, 64, 1, 1, 0);
            let h = b.add("add1", h, a);
            let h = b.relu("relu7", h);
            let (ho, wo) = (hh.div_ceil(2), ww.div_ceil(2));
            let h = b.avg_pool("pool", h, ho.min(wo), ho.min(wo));
            let h = b.flatten("flatten", h);
            let h = b.fc("fc1", h, 64 * (ho / ho.min(wo)) * (wo / ho.min(wo)), k);
            b.loss(h);
        }
        _ => return Err(unknown(name)),
    }
    b.build(&mut rng)
}

fn chw(input: &ModelInput) -> Result<[usize; 3]> {
    match input.shape.as_slice() {
        &[c, h, w] => Ok([c, h, w]),
        other => Err(Error::Shape(format!("expected a C×H×W input, got {other:?}"))),
    }
}
