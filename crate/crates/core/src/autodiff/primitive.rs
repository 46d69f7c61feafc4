use std::collections::BTreeMap;
use std::sync::Arc;

use crate::autodiff::graph::{Graph, Mask, Var};
use crate::error::{Error, Result};

/// Attribute value for [`apply_primitive`].
#[derive(Clone, Debug)]
pub enum Attr {
    Int(usize),
    Float(f64),
    Ints(Vec<usize>),
    Mask(Arc<Mask>),
}

pub type Attrs = BTreeMap<String, Attr>;

fn int(attrs: &Attrs, op: &'static str, key: &str) -> Result<usize> {
    match attrs.get(key) {
        Some(Attr::Int(v)) => Ok(*v),
        _ => Err(Error::contract(op, format!("missing integer attribute `{key}`"))),
    }
}

fn float(attrs: &Attrs, op: &'static str, key: &str) -> Result<f64> {
    match attrs.get(key) {
        Some(Attr::Float(v)) => Ok(*v),
        _ => Err(Error::contract(op, format!("missing float attribute `{key}`"))),
    }
}

fn ints<'a>(attrs: &'a Attrs, op: &'static str, key: &str) -> Result<&'a [usize]> {
    match attrs.get(key) {
        Some(Attr::Ints(v)) => Ok(v),
        _ => Err(Error::contract(op, format!("missing list attribute `{key}`"))),
    }
}

fn arity<const N: usize>(op: &'static str, inputs: &[Var]) -> Result<[Var; N]> {
    inputs
        .try_into()
        .map_err(|_| Error::contract(op, format!("expected {N} inputs, got {}", inputs.len())))
}

/// Applies a primitive by name. Thin string-keyed front end over the typed
/// [`Graph`] methods, for callers that assemble graphs from descriptions.
pub fn apply_primitive(g: &mut Graph, name: &str, inputs: &[Var], attrs: &Attrs) -> Result<Var> {
    match name {
        "add" => {
            let [a, b] = arity("add", inputs)?;
            g.add(a, b)
        }
        "sub" => {
            let [a, b] = arity("sub", inputs)?;
            g.sub(a, b)
        }
        "mul" => {
            let [a, b] = arity("mul", inputs)?;
            g.mul(a, b)
        }
        "add_bias" => {
            let [a, b] = arity("add_bias", inputs)?;
            g.add_bias(a, b)
        }
        "mul_bcast" => {
            let [a, b] = arity("mul_bcast", inputs)?;
            g.mul_bcast(a, b)
        }
        "scale" => {
            let [a] = arity("scale", inputs)?;
            Ok(g.scale(a, float(attrs, "scale", "factor")?))
        }
        "matmul" => {
            let [a, b] = arity("matmul", inputs)?;
            g.matmul(a, b)
        }
        "bmm" => {
            let [a, b] = arity("bmm", inputs)?;
            g.bmm(a, b)
        }
        "bmm_nt" => {
            let [a, b] = arity("bmm_nt", inputs)?;
            g.bmm_nt(a, b)
        }
        "permute" => {
            let [a] = arity("permute", inputs)?;
            g.permute(a, ints(attrs, "permute", "axes")?)
        }
        "reshape" => {
            let [a] = arity("reshape", inputs)?;
            g.reshape(a, ints(attrs, "reshape", "shape")?)
        }
        "concat" => g.concat_last(inputs),
        "sigmoid" => Ok(g.sigmoid(arity::<1>("sigmoid", inputs)?[0])),
        "gelu" => Ok(g.gelu(arity::<1>("gelu", inputs)?[0])),
        "silu" => Ok(g.silu(arity::<1>("silu", inputs)?[0])),
        "log1p" => g.log1p(arity::<1>("log1p", inputs)?[0]),
        "log_softmax" => g.log_softmax(arity::<1>("log_softmax", inputs)?[0]),
        "softmax" => {
            let [a] = arity("softmax", inputs)?;
            let mask = match attrs.get("mask") {
                Some(Attr::Mask(m)) => Some(m),
                _ => None,
            };
            g.softmax(a, mask)
        }
        "layer_norm" => {
            let [x, gamma, beta] = arity("layer_norm", inputs)?;
            g.layer_norm(x, gamma, beta, float(attrs, "layer_norm", "eps")?)
        }
        "rms_norm" => {
            let [x, s] = arity("rms_norm", inputs)?;
            g.rms_norm(x, s, float(attrs, "rms_norm", "eps")?)
        }
        "group_norm" => {
            let [x, gamma, beta] = arity("group_norm", inputs)?;
            g.group_norm(
                x,
                gamma,
                beta,
                int(attrs, "group_norm", "groups")?,
                float(attrs, "group_norm", "eps")?,
            )
        }
        "conv1d" => {
            let [x, w, b] = arity("conv1d", inputs)?;
            g.conv1d(x, w, b, int(attrs, "conv1d", "stride")?, int(attrs, "conv1d", "padding")?)
        }
        "channel_dwconv" => {
            let [x, w, b] = arity("channel_dwconv", inputs)?;
            g.channel_dwconv(x, w, b)
        }
        "masked_magnitude" => {
            let [re, im, mre, mim] = arity("masked_magnitude", inputs)?;
            g.masked_magnitude(re, im, mre, mim)
        }
        "rope" => {
            let [x] = arity("rope", inputs)?;
            g.rope(x, float(attrs, "rope", "base")?)
        }
        "sum_axis" => {
            let [x] = arity("sum_axis", inputs)?;
            g.sum_axis(x, int(attrs, "sum_axis", "axis")?)
        }
        "mean_axis" => {
            let [x] = arity("mean_axis", inputs)?;
            g.mean_axis(x, int(attrs, "mean_axis", "axis")?)
        }
        "sum" => Ok(g.sum(arity::<1>("sum", inputs)?[0])),
        "mean" => Ok(g.mean(arity::<1>("mean", inputs)?[0])),
        "gather_rows" => {
            let [x] = arity("gather_rows", inputs)?;
            g.gather_rows(x, ints(attrs, "gather_rows", "indices")?)
        }
        "scatter_add_rows" => {
            let [x] = arity("scatter_add_rows", inputs)?;
            g.scatter_add_rows(
                x,
                ints(attrs, "scatter_add_rows", "indices")?,
                int(attrs, "scatter_add_rows", "rows")?,
            )
        }
        "mul_rows" => {
            let [x, s] = arity("mul_rows", inputs)?;
            g.mul_rows(x, s)
        }
        "gather" => {
            let [x] = arity("gather", inputs)?;
            g.gather(x, ints(attrs, "gather", "indices")?)
        }
        "topk_softmax" => {
            let [x] = arity("topk_softmax", inputs)?;
            g.topk_softmax(x, int(attrs, "topk_softmax", "k")?)
        }
        "huber_mean" => {
            let [r] = arity("huber_mean", inputs)?;
            g.huber_mean(r, float(attrs, "huber_mean", "delta")?)
        }
        other => Err(Error::contract("apply_primitive", format!("unknown primitive `{other}`"))),
    }
}
