use crate::error::{Error, Result};
use crate::network::{LayerKind, NetworkGraph, Node, WeightSet, WeightTensor};

/// Merges every BatchNorm into the convolution feeding it.
///
/// Weights of output channel `c` are scaled by `g = gamma / sqrt(var + eps)`
/// and the bias becomes `g * (bias - mean) + beta`. BN nodes disappear and
/// their consumers read the convolution directly; the remaining nodes keep
/// their relative order.
pub fn fold_batchnorm(graph: &NetworkGraph, weights: &WeightSet) -> Result<(NetworkGraph, WeightSet)> {
    fold_mapped(graph, weights).map(|(g, w, _)| (g, w))
}

/// Like [`fold_batchnorm`], also returning for every new node the id of the
/// old node whose value it now produces.
pub(crate) fn fold_mapped(
    graph: &NetworkGraph,
    weights: &WeightSet,
) -> Result<(NetworkGraph, WeightSet, Vec<usize>)> {
    graph.validate()?;
    let consumers = graph.consumers();
    let mut folded = weights.clone();
    // old id -> id of the node that now produces its value
    let mut alias: Vec<usize> = (0..graph.len()).collect();
    let mut is_bn = vec![false; graph.len()];

    for (i, node) in graph.nodes.iter().enumerate() {
        let LayerKind::BatchNorm { channels, eps } = node.kind else {
            continue;
        };
        let p = node.inputs[0];
        let prev = &graph.nodes[p];
        let LayerKind::Conv2d {
            in_ch,
            out_ch,
            kernel,
            bias,
            ..
        } = prev.kind
        else {
            return Err(Error::Graph(format!(
                "batch norm `{}` does not follow a convolution",
                node.name
            )));
        };
        if consumers[p].len() != 1 {
            return Err(Error::Graph(format!(
                "convolution `{}` feeds batch norm `{}` and other layers",
                prev.name, node.name
            )));
        }
        let g = weights.expect(&node.name, "gamma", &[channels])?;
        let beta = weights.expect(&node.name, "beta", &[channels])?;
        let mean = weights.expect(&node.name, "mean", &[channels])?;
        let var = weights.expect(&node.name, "var", &[channels])?;
        let w = weights.expect(&prev.name, "weight", &[out_ch, in_ch, kernel, kernel])?;
        let old_bias = if bias {
            weights.expect(&prev.name, "bias", &[out_ch])?.to_vec()
        } else {
            vec![0.0; out_ch]
        };

        let per = in_ch * kernel * kernel;
        let mut new_w = w.to_vec();
        let mut new_b = vec![0.0; out_ch];
        for c in 0..out_ch {
            let s = g[c] / (var[c] + eps).sqrt();
            new_w[c * per..(c + 1) * per].iter_mut().for_each(|v| *v *= s);
            new_b[c] = s * (old_bias[c] - mean[c]) + beta[c];
        }
        folded.insert(
            format!("{}.weight", prev.name),
            WeightTensor::new(vec![out_ch, in_ch, kernel, kernel], new_w)?,
        );
        folded.insert(format!("{}.bias", prev.name), WeightTensor::new(vec![out_ch], new_b)?);
        for param in ["gamma", "beta", "mean", "var"] {
            folded.tensors.remove(&format!("{}.{param}", node.name));
        }
        alias[i] = alias[p];
        is_bn[i] = true;
    }

    let mut new_id = vec![usize::MAX; graph.len()];
    let mut nodes = Vec::new();
    for (i, node) in graph.nodes.iter().enumerate() {
        if is_bn[i] {
            continue;
        }
        new_id[i] = nodes.len();
        let mut kind = node.kind.clone();
        if is_bn.iter().enumerate().any(|(j, &b)| b && graph.nodes[j].inputs[0] == i) {
            if let LayerKind::Conv2d { bias, .. } = &mut kind {
                *bias = true;
            }
        }
        nodes.push(Node {
            name: node.name.clone(),
            kind,
            inputs: node.inputs.iter().map(|&p| new_id[alias[p]]).collect(),
        });
    }
    let mut origin = vec![0; nodes.len()];
    for i in 0..graph.len() {
        origin[new_id[alias[i]]] = i;
    }
    let out = NetworkGraph {
        nodes,
        output: new_id[alias[graph.output]],
    };
    out.validate()?;
    Ok((out, folded, origin))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{build_network, forward_float, init_weights, Architecture, BuildOptions};
    use crate::tensor::{FloatTensor, Shape};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn conv_bn() -> NetworkGraph {
        let mut g = NetworkGraph::new();
        let x = g.push("x", LayerKind::Input { dims: Shape::new(2, 5, 5) }, &[]);
        let c = g.push(
            "conv",
            LayerKind::Conv2d {
                in_ch: 2,
                out_ch: 3,
                kernel: 3,
                stride: 1,
                pad: 1,
                bias: false,
            },
            &[x],
        );
        g.push("bn", LayerKind::BatchNorm { channels: 3, eps: 0.0 }, &[c]);
        g
    }

    fn identity_bn(g: &NetworkGraph, gamma: f64) -> WeightSet {
        let mut ws = init_weights(g, 1);
        ws.insert("bn.gamma", WeightTensor::filled(vec![3], gamma));
        ws.insert("bn.beta", WeightTensor::filled(vec![3], 0.0));
        ws.insert("bn.mean", WeightTensor::filled(vec![3], 0.0));
        ws.insert("bn.var", WeightTensor::filled(vec![3], 1.0));
        ws
    }

    #[test]
    fn identity_bn_leaves_weights() {
        let g = conv_bn();
        let ws = identity_bn(&g, 1.0);
        let (fg, fw) = fold_batchnorm(&g, &ws).unwrap();
        assert_eq!(fg.len(), 2);
        assert_eq!(fw.get("conv", "weight").unwrap(), ws.get("conv", "weight").unwrap());
        assert!(fw.get("conv", "bias").unwrap().data.iter().all(|&b| b == 0.0));
        assert!(fw.get("bn", "gamma").is_err());
    }

    #[test]
    fn gamma_two_doubles_weights() {
        let g = conv_bn();
        let ws = identity_bn(&g, 2.0);
        let (_, fw) = fold_batchnorm(&g, &ws).unwrap();
        let a = &ws.get("conv", "weight").unwrap().data;
        let b = &fw.get("conv", "weight").unwrap().data;
        assert!(a.iter().zip(b).all(|(x, y)| (2.0 * x - y).abs() < 1e-15));
    }

    #[test]
    fn bn_without_conv_is_rejected() {
        let mut g = NetworkGraph::new();
        let x = g.push("x", LayerKind::Input { dims: Shape::new(2, 4, 4) }, &[]);
        g.push("bn", LayerKind::BatchNorm { channels: 2, eps: 1e-5 }, &[x]);
        let ws = init_weights(&g, 0);
        assert!(matches!(fold_batchnorm(&g, &ws), Err(Error::Graph(_))));
    }

    #[test]
    fn folded_resnet_matches_float() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for arch in [Architecture::Resnet20Rgb, Architecture::Resnet20Dct] {
            let dims = if arch.is_dct() {
                Shape::new(48, 8, 8)
            } else {
                Shape::new(3, 16, 16)
            };
            let g = build_network(arch, dims, &BuildOptions::default()).unwrap();
            let ws = init_weights(&g, 5);
            let (fg, fw) = fold_batchnorm(&g, &ws).unwrap();
            assert_eq!(fg.count_kind(|k| matches!(k, LayerKind::BatchNorm { .. })), 0);
            let x = FloatTensor::from_vec(dims, (0..dims.len()).map(|_| rng.random_range(-1.0..1.0)).collect())
                .unwrap();
            let a = forward_float(&g, &ws, &x).unwrap();
            let b = forward_float(&fg, &fw, &x).unwrap();
            let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            for (u, v) in a.iter().zip(&b) {
                assert!((u - v).abs() <= 1e-9 * scale.max(1.0));
            }
        }
    }
}
