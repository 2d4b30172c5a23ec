//! Model architecture, flat parameter vectors and per-client update records.
//!
//! Parameters are laid out layer-major: for each consecutive pair of widths
//! `(in, out)` the `out × in` weight matrix comes first in row-major order
//! (row = output unit), followed by the `out` biases.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{DecodeError, Reader, Writer};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParamsError {
    #[error("a model needs at least 2 layers, got {0}")]
    TooFewLayers(usize),
    #[error("layer {index} has zero width")]
    ZeroWidth { index: usize },
    #[error("parameter {index} is not finite ({value})")]
    NonFinite { index: usize, value: f64 },
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("sample count must be at least 1")]
    ZeroSamples,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
        }
    }

    /// Derivative expressed in terms of the activation output `y = f(x)`.
    pub fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
        }
    }

    fn tag(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Sigmoid => 1,
        }
    }

    fn from_tag(tag: u8) -> Result<Self, DecodeError> {
        match tag {
            0 => Ok(Activation::Relu),
            1 => Ok(Activation::Sigmoid),
            t => Err(DecodeError::invalid("activation", format!("unknown tag {t}"))),
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "relu" => Ok(Activation::Relu),
            "sigmoid" => Ok(Activation::Sigmoid),
            other => Err(format!("unknown activation `{other}`")),
        }
    }
}

/// Dense feed-forward architecture. Hidden layers use `activation`; the output
/// layer is always a softmax over its logits.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    layer_sizes: Vec<usize>,
    activation: Activation,
    seed: u64,
}

impl ModelConfig {
    pub fn new(layer_sizes: Vec<usize>, activation: Activation, seed: u64) -> Result<Self, ParamsError> {
        if layer_sizes.len() < 2 {
            return Err(ParamsError::TooFewLayers(layer_sizes.len()));
        }
        if let Some(index) = layer_sizes.iter().position(|&w| w == 0) {
            return Err(ParamsError::ZeroWidth { index });
        }
        Ok(ModelConfig {
            layer_sizes,
            activation,
            seed,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().expect("validated non-empty")
    }

    pub fn param_count(&self) -> usize {
        self.layer_sizes.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
    }

    /// `(in, out, offset)` for each layer, where `offset` is the index of the
    /// first weight of that layer in the flat vector.
    pub fn layers(&self) -> impl Iterator<Item = LayerShape> + '_ {
        let mut offset = 0;
        self.layer_sizes.windows(2).map(move |w| {
            let shape = LayerShape {
                inputs: w[0],
                outputs: w[1],
                offset,
            };
            offset += (w[0] + 1) * w[1];
            shape
        })
    }

    pub(crate) fn encode(&self, w: &mut Writer) {
        w.u32(self.layer_sizes.len() as u32);
        for &s in &self.layer_sizes {
            w.u32(s as u32);
        }
        w.u8(self.activation.tag());
        w.u64(self.seed);
    }

    pub(crate) fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let n = r.u32()? as usize;
        // Every width costs 4 bytes; refuse counts the buffer cannot hold.
        if n > r.remaining() / 4 {
            return Err(DecodeError::invalid("layer_sizes", "count exceeds buffer"));
        }
        let mut sizes = Vec::with_capacity(n);
        for _ in 0..n {
            let width = r.u32()?;
            if width > MAX_DECODED_WIDTH {
                return Err(DecodeError::invalid("layer_sizes", format!("width {width} too large")));
            }
            sizes.push(width as usize);
        }
        let activation = Activation::from_tag(r.u8()?)?;
        let seed = r.u64()?;
        ModelConfig::new(sizes, activation, seed).map_err(|e| DecodeError::invalid("model_config", e.to_string()))
    }
}

/// Widest layer accepted from untrusted bytes; keeps `param_count` far from overflow.
const MAX_DECODED_WIDTH: u32 = 1 << 16;

pub fn param_count(config: &ModelConfig) -> usize {
    config.param_count()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerShape {
    pub inputs: usize,
    pub outputs: usize,
    pub offset: usize,
}

impl LayerShape {
    pub fn weight_count(&self) -> usize {
        self.inputs * self.outputs
    }

    pub fn bias_offset(&self) -> usize {
        self.offset + self.weight_count()
    }

    pub fn end(&self) -> usize {
        self.bias_offset() + self.outputs
    }
}

/// Flat vector of finite model weights.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ParameterVector(Vec<f64>);

impl ParameterVector {
    pub fn new(values: Vec<f64>) -> Result<Self, ParamsError> {
        if let Some((index, &value)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(ParamsError::NonFinite { index, value });
        }
        Ok(ParameterVector(values))
    }

    pub fn zeros(dim: usize) -> Self {
        ParameterVector(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// 4-byte little-endian dimension followed by IEEE-754 doubles.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::with_capacity(4 + 8 * self.0.len());
        self.encode(&mut w);
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(bytes);
        let p = Self::decode(&mut r)?;
        r.finish()?;
        Ok(p)
    }

    pub(crate) fn encode(&self, w: &mut Writer) {
        w.u32(self.0.len() as u32);
        for &v in &self.0 {
            w.f64(v);
        }
    }

    pub(crate) fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let dim = r.u32()? as usize;
        if dim > r.remaining() / 8 {
            return Err(DecodeError::Short {
                offset: r.position(),
                needed: dim * 8 - r.remaining(),
            });
        }
        let mut values = Vec::with_capacity(dim);
        for _ in 0..dim {
            values.push(r.f64()?);
        }
        ParameterVector::new(values).map_err(|e| DecodeError::invalid("params", e.to_string()))
    }
}

impl TryFrom<Vec<f64>> for ParameterVector {
    type Error = ParamsError;

    fn try_from(values: Vec<f64>) -> Result<Self, Self::Error> {
        ParameterVector::new(values)
    }
}

impl From<ParameterVector> for Vec<f64> {
    fn from(p: ParameterVector) -> Self {
        p.0
    }
}

/// Serialize a parameter vector; only finite vectors can be constructed, so
/// this never fails.
pub fn serialize_params(p: &ParameterVector) -> Vec<u8> {
    p.to_bytes()
}

pub fn deserialize_params(bytes: &[u8]) -> Result<ParameterVector, DecodeError> {
    ParameterVector::from_bytes(bytes)
}

/// 20-byte contributor address.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Address(pub [u8; 20]);

impl Address {
    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Display for Address {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for Address {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Address({})", self.to_hex())
    }
}

impl TryFrom<&[u8]> for Address {
    type Error = ParamsError;

    fn try_from(bytes: &[u8]) -> Result<Self, Self::Error> {
        let arr: [u8; 20] = bytes.try_into().map_err(|_| ParamsError::DimensionMismatch {
            expected: 20,
            actual: bytes.len(),
        })?;
        Ok(Address(arr))
    }
}

/// One client's post-training weights and the number of samples behind them.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelUpdate {
    pub client_id: Address,
    pub sample_count: u64,
    pub params: ParameterVector,
    /// Chain height of the global model the client trained from.
    pub round: u64,
}

impl ModelUpdate {
    pub fn new(
        client_id: Address,
        sample_count: u64,
        params: ParameterVector,
        round: u64,
    ) -> Result<Self, ParamsError> {
        if sample_count == 0 {
            return Err(ParamsError::ZeroSamples);
        }
        Ok(ModelUpdate {
            client_id,
            sample_count,
            params,
            round,
        })
    }

    /// `client_id ∥ sample_count ∥ round ∥ params`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::with_capacity(40 + 8 * self.params.dim());
        self.encode(&mut w);
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(bytes);
        let u = Self::decode(&mut r)?;
        r.finish()?;
        Ok(u)
    }

    pub(crate) fn encode(&self, w: &mut Writer) {
        w.bytes(&self.client_id.0);
        w.u64(self.sample_count);
        w.u64(self.round);
        self.params.encode(w);
    }

    pub(crate) fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let client_id = Address(r.array()?);
        let sample_count = r.u64()?;
        let round = r.u64()?;
        let params = ParameterVector::decode(r)?;
        ModelUpdate::new(client_id, sample_count, params, round)
            .map_err(|e| DecodeError::invalid("update", e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg(sizes: &[usize]) -> ModelConfig {
        ModelConfig::new(sizes.to_vec(), Activation::Relu, 0).unwrap()
    }

    #[test]
    fn param_counts() {
        assert_eq!(param_count(&cfg(&[2, 1])), 3);
        assert_eq!(param_count(&cfg(&[4, 8, 3])), 67);
        assert_eq!(param_count(&cfg(&[1, 1, 1, 1])), 6);
    }

    #[test]
    fn config_validation() {
        assert_eq!(
            ModelConfig::new(vec![3], Activation::Relu, 0),
            Err(ParamsError::TooFewLayers(1))
        );
        assert_eq!(
            ModelConfig::new(vec![3, 0, 2], Activation::Relu, 0),
            Err(ParamsError::ZeroWidth { index: 1 })
        );
    }

    #[test]
    fn layer_offsets_tile_the_vector() {
        let c = cfg(&[4, 8, 3]);
        let shapes: Vec<_> = c.layers().collect();
        assert_eq!(shapes[0].offset, 0);
        assert_eq!(shapes[0].end(), 40);
        assert_eq!(shapes[1].offset, 40);
        assert_eq!(shapes[1].end(), c.param_count());
    }

    #[test]
    fn empty_vector_encodes_to_four_zero_bytes() {
        assert_eq!(serialize_params(&ParameterVector::zeros(0)), vec![0, 0, 0, 0]);
    }

    #[test]
    fn single_value_encoding() {
        let bytes = serialize_params(&ParameterVector::new(vec![1.0]).unwrap());
        let mut expected = vec![1, 0, 0, 0];
        expected.extend_from_slice(&[0, 0, 0, 0, 0, 0, 0xf0, 0x3f]);
        assert_eq!(bytes, expected);
    }

    #[test]
    fn non_finite_rejected() {
        assert!(matches!(
            ParameterVector::new(vec![0.0, f64::NAN]),
            Err(ParamsError::NonFinite { index: 1, .. })
        ));
        assert!(ParameterVector::new(vec![f64::INFINITY]).is_err());
        // Decoding a NaN bit pattern is rejected too.
        let mut bytes = vec![1, 0, 0, 0];
        bytes.extend_from_slice(&f64::NAN.to_le_bytes());
        assert!(deserialize_params(&bytes).is_err());
    }

    #[test]
    fn oversized_dim_does_not_allocate() {
        let bytes = [0xff, 0xff, 0xff, 0xff, 1, 2];
        assert!(matches!(deserialize_params(&bytes), Err(DecodeError::Short { .. })));
    }

    #[test]
    fn update_requires_samples() {
        let p = ParameterVector::zeros(2);
        assert_eq!(
            ModelUpdate::new(Address::default(), 0, p, 0),
            Err(ParamsError::ZeroSamples)
        );
    }

    #[test]
    fn address_from_slice_checks_length() {
        assert!(Address::try_from(&[0u8; 19][..]).is_err());
        assert!(Address::try_from(&[0u8; 20][..]).is_ok());
    }

    proptest! {
        #[test]
        fn params_round_trip_bit_exact(values in prop::collection::vec(
            any::<f64>().prop_filter("finite", |v| v.is_finite()), 0..64)) {
            let p = ParameterVector::new(values).unwrap();
            let back = deserialize_params(&serialize_params(&p)).unwrap();
            let a: Vec<u64> = p.as_slice().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = back.as_slice().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn update_round_trip(id in any::<[u8; 20]>(), n in 1u64.., round in any::<u64>(),
                             values in prop::collection::vec(-1e6f64..1e6, 0..32)) {
            let u = ModelUpdate::new(Address(id), n, ParameterVector::new(values).unwrap(), round).unwrap();
            prop_assert_eq!(ModelUpdate::from_bytes(&u.to_bytes()).unwrap(), u);
        }
    }
}
