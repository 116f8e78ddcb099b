//! JSON persistence for networks.
//!
//! Parameters are stored row-major with explicit shapes. Floats are written
//! in shortest round-trip decimal form and parsed with correct rounding, so a
//! save/load cycle reproduces every bit.

use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::{ArchSpec, Dense, Network};
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
struct LayerDoc {
    shape: [usize; 2],
    weights: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
pub(crate) struct NetworkDoc {
    arch: ArchSpec,
    init_seed: u64,
    layers: Vec<LayerDoc>,
}

impl From<&Network> for NetworkDoc {
    fn from(net: &Network) -> Self {
        NetworkDoc {
            arch: net.arch.clone(),
            init_seed: net.init_seed,
            layers: net
                .layers
                .iter()
                .map(|l| LayerDoc {
                    shape: [l.weights.nrows(), l.weights.ncols()],
                    weights: l.weights.iter().copied().collect(),
                    bias: l.bias.to_vec(),
                })
                .collect(),
        }
    }
}

impl TryFrom<NetworkDoc> for Network {
    type Error = Error;

    fn try_from(doc: NetworkDoc) -> Result<Self> {
        doc.arch.validate()?;
        let shapes = doc.arch.layer_shapes();
        if shapes.len() != doc.layers.len() {
            return Err(Error::InvalidArgument(format!(
                "architecture has {} layers, document has {}",
                shapes.len(),
                doc.layers.len()
            )));
        }
        let layers = doc
            .layers
            .into_iter()
            .zip(shapes)
            .map(|(l, (fan_in, fan_out))| {
                if l.shape != [fan_in, fan_out] || l.bias.len() != fan_out {
                    return Err(Error::InvalidArgument(format!(
                        "layer shape {:?} does not chain with architecture ({fan_in}, {fan_out})",
                        l.shape
                    )));
                }
                let weights = Array2::from_shape_vec((fan_in, fan_out), l.weights)
                    .map_err(|e| Error::InvalidArgument(e.to_string()))?;
                Ok(Dense {
                    weights,
                    bias: Array1::from(l.bias),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let net = Network {
            arch: doc.arch,
            init_seed: doc.init_seed,
            layers,
        };
        if !net.params_finite() {
            return Err(Error::NonFiniteInput);
        }
        Ok(net)
    }
}

impl Serialize for Network {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        NetworkDoc::from(self).serialize(s)
    }
}

impl<'de> Deserialize<'de> for Network {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let doc = NetworkDoc::deserialize(d)?;
        Network::try_from(doc).map_err(serde::de::Error::custom)
    }
}

pub fn network_to_json(net: &Network) -> Result<String> {
    Ok(serde_json::to_string(net)?)
}

pub fn network_from_json(json: &str) -> Result<Network> {
    Ok(serde_json::from_str(json)?)
}

pub fn save_network(net: &Network, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, network_to_json(net)?).map_err(|e| Error::io(path, e))
}

pub fn load_network(path: impl AsRef<Path>) -> Result<Network> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    network_from_json(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_network, sample_architecture};
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn json_round_trip_is_bit_exact(arch_seed: u64, init_seed: u64, scale in -300i32..300) {
            let mut arch = sample_architecture(arch_seed, 3);
            arch.hidden_layers.iter_mut().for_each(|w| *w = (*w).min(24));
            let mut net = init_network(&arch, init_seed).unwrap();
            // exercise extreme exponents too
            net.layers[0].weights.mapv_inplace(|w| w * 2f64.powi(scale));
            let back = network_from_json(&network_to_json(&net).unwrap()).unwrap();
            for (a, b) in net.layers.iter().zip(&back.layers) {
                for (x, y) in a.weights.iter().zip(b.weights.iter()) {
                    prop_assert_eq!(x.to_bits(), y.to_bits());
                }
            }
            prop_assert_eq!(back, net);
        }
    }

    #[test]
    fn rejects_inconsistent_shapes() {
        let net = init_network(&crate::nn::ArchSpec::new(2, vec![4]), 0).unwrap();
        let json = network_to_json(&net).unwrap().replace("\"shape\":[2,4]", "\"shape\":[4,2]");
        assert!(network_from_json(&json).is_err());
    }

    #[test]
    fn file_round_trip() {
        let net = init_network(&crate::nn::ArchSpec::new(2, vec![4, 3]), 9).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        save_network(&net, f.path()).unwrap();
        assert_eq!(load_network(f.path()).unwrap(), net);
    }
}
