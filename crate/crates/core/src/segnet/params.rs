use rand_distr::{Distribution, StandardNormal};

use super::config::UNetConfig;
use crate::error::{Error, Result};
use crate::rng::seeded_rng;
use crate::scalar::Scalar;

pub const BN_EPS: f64 = 1e-5;
/// Weight of the newest batch in the running-statistics average.
pub const BN_MOMENTUM: f64 = 0.1;

/// One convolution of the network, in execution order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub norm: bool,
    pub relu: bool,
}

impl ConvSpec {
    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn learnable(&self) -> usize {
        let norm = if self.norm { 2 * self.out_channels } else { 0 };
        self.out_channels * self.fan_in() + self.out_channels + norm
    }
}

/// Every convolution of the architecture, in forward execution order.
pub fn conv_specs(config: &UNetConfig) -> Vec<ConvSpec> {
    let norm = config.norm_enabled;
    let unit = |name: String, cin: usize, cout: usize| ConvSpec {
        name,
        in_channels: cin,
        out_channels: cout,
        kernel: 3,
        norm,
        relu: true,
    };
    let mut specs = Vec::new();
    let mut cin = config.in_channels;
    for level in 0..=config.depth {
        let w = config.width(level);
        specs.push(unit(format!("enc{level}.conv1"), cin, w));
        specs.push(unit(format!("enc{level}.conv2"), w, w));
        cin = w;
    }
    for level in (0..config.depth).rev() {
        let w = config.width(level);
        specs.push(unit(format!("up{level}.conv"), config.width(level + 1), w));
        specs.push(unit(format!("dec{level}.conv1"), 2 * w, w));
        specs.push(unit(format!("dec{level}.conv2"), w, w));
    }
    specs.push(ConvSpec {
        name: "head".into(),
        in_channels: config.width(0),
        out_channels: 1,
        kernel: 1,
        norm: false,
        relu: false,
    });
    specs
}

/// Exact number of learnable scalars.
pub fn count_params(config: &UNetConfig) -> usize {
    conv_specs(config).iter().map(ConvSpec::learnable).sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor<T> {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<T>,
}

impl<T> NamedTensor<T> {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvSlots {
    pub weight: usize,
    pub bias: usize,
    /// Indices of gamma/beta in `tensors` and mean/var in `running`.
    pub norm: Option<(usize, usize, usize, usize)>,
}

/// Learnable tensors plus running normalization statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterSet<T> {
    config: UNetConfig,
    specs: Vec<ConvSpec>,
    slots: Vec<ConvSlots>,
    pub tensors: Vec<NamedTensor<T>>,
    pub running: Vec<NamedTensor<T>>,
}

/// Per-convolution batch mean and unbiased variance from a training pass.
pub type BatchStats = Vec<Option<(Vec<f64>, Vec<f64>)>>;

impl<T: Scalar> ParameterSet<T> {
    /// All-zero parameters with unit running variance and unit gamma.
    pub fn zeros(config: UNetConfig) -> Result<Self> {
        config.validate()?;
        let specs = conv_specs(&config);
        let mut tensors = Vec::new();
        let mut running = Vec::new();
        let mut slots = Vec::new();
        let push = |list: &mut Vec<NamedTensor<T>>, name: String, dims: Vec<usize>, v: T| {
            let len = dims.iter().product();
            list.push(NamedTensor {
                name,
                dims,
                data: vec![v; len],
            });
            list.len() - 1
        };
        for s in &specs {
            let (co, ci, k) = (s.out_channels, s.in_channels, s.kernel);
            let weight = push(&mut tensors, format!("{}.weight", s.name), vec![co, ci, k, k], T::zero());
            let bias = push(&mut tensors, format!("{}.bias", s.name), vec![co], T::zero());
            let norm = s.norm.then(|| {
                (
                    push(&mut tensors, format!("{}.gamma", s.name), vec![co], T::one()),
                    push(&mut tensors, format!("{}.beta", s.name), vec![co], T::zero()),
                    push(&mut running, format!("{}.running_mean", s.name), vec![co], T::zero()),
                    push(&mut running, format!("{}.running_var", s.name), vec![co], T::one()),
                )
            });
            slots.push(ConvSlots { weight, bias, norm });
        }
        Ok(ParameterSet {
            config,
            specs,
            slots,
            tensors,
            running,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    /// Change the dropout rate used by later passes; no tensor depends on it.
    pub fn set_dropout_rate(&mut self, rate: f64) -> Result<()> {
        let config = UNetConfig {
            dropout_rate: rate,
            ..self.config
        };
        config.validate()?;
        self.config = config;
        Ok(())
    }

    pub fn specs(&self) -> &[ConvSpec] {
        &self.specs
    }

    pub(crate) fn slots(&self, conv: usize) -> ConvSlots {
        self.slots[conv]
    }

    pub fn tensor(&self, name: &str) -> Option<&NamedTensor<T>> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut NamedTensor<T>> {
        self.tensors.iter_mut().find(|t| t.name == name)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(NamedTensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors
            .iter()
            .chain(&self.running)
            .all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// Blend batch statistics from a training pass into the running averages.
    pub fn update_running(&mut self, stats: &BatchStats) {
        let m = BN_MOMENTUM;
        for (conv, stat) in stats.iter().enumerate() {
            let (Some((mean, var)), Some((_, _, rm, rv))) = (stat, self.slots[conv].norm) else {
                continue;
            };
            for (r, &b) in self.running[rm].data.iter_mut().zip(mean) {
                *r = T::from_f64_lossy((1.0 - m) * r.as_f64() + m * b);
            }
            for (r, &b) in self.running[rv].data.iter_mut().zip(var) {
                *r = T::from_f64_lossy((1.0 - m) * r.as_f64() + m * b);
            }
        }
    }

    /// Same parameters in another precision.
    pub fn cast<U: Scalar>(&self) -> ParameterSet<U> {
        let conv = |list: &[NamedTensor<T>]| {
            list.iter()
                .map(|t| NamedTensor {
                    name: t.name.clone(),
                    dims: t.dims.clone(),
                    data: t.data.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect(),
                })
                .collect()
        };
        ParameterSet {
            config: self.config,
            specs: self.specs.clone(),
            slots: self.slots.clone(),
            tensors: conv(&self.tensors),
            running: conv(&self.running),
        }
    }

    /// Replace tensor contents from `(name, dims, data)` records, checking
    /// that names and shapes match the architecture exactly.
    pub(crate) fn load_records(
        &mut self,
        tensors: Vec<NamedTensor<T>>,
        running: Vec<NamedTensor<T>>,
    ) -> Result<()> {
        fn check<T>(want: &[NamedTensor<T>], got: &[NamedTensor<T>]) -> Result<()> {
            if want.len() != got.len() {
                return Err(Error::DimensionMismatch(format!(
                    "expected {} tensors, found {}",
                    want.len(),
                    got.len()
                )));
            }
            for (w, g) in want.iter().zip(got) {
                if w.name != g.name || w.dims != g.dims {
                    return Err(Error::DimensionMismatch(format!(
                        "tensor {} {:?} does not match expected {} {:?}",
                        g.name, g.dims, w.name, w.dims
                    )));
                }
            }
            Ok(())
        }
        check(&self.tensors, &tensors)?;
        check(&self.running, &running)?;
        self.tensors = tensors;
        self.running = running;
        Ok(())
    }
}

/// He-normal kernels (variance `2 / fan_in`), zero biases, unit gamma,
/// zero beta. Kernels are drawn in architecture order from one stream.
pub fn init_params<T: Scalar>(config: &UNetConfig, seed: u64) -> Result<ParameterSet<T>> {
    let mut params = ParameterSet::zeros(*config)?;
    let mut rng = seeded_rng(seed);
    for conv in 0..params.specs.len() {
        let std = (2.0 / params.specs[conv].fan_in() as f64).sqrt();
        let w = params.slots[conv].weight;
        for v in params.tensors[w].data.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v = T::from_f64_lossy(std * z);
        }
    }
    Ok(params)
}

/// Gradients aligned with [`ParameterSet::tensors`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    pub tensors: Vec<Vec<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros_like(params: &ParameterSet<T>) -> Self {
        Gradients {
            tensors: params
                .tensors
                .iter()
                .map(|t| vec![T::zero(); t.len()])
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().flatten().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> UNetConfig {
        UNetConfig {
            in_channels: 1,
            base_width: 1,
            depth: 1,
            dropout_rate: 0.2,
            norm_enabled: false,
        }
    }

    #[test]
    fn tiny_count_by_hand() {
        // enc0: 1->1 (9+1), 1->1 (9+1); enc1: 1->2 (18+2), 2->2 (36+2);
        // up0: 2->1 (18+1); dec0: 2->1 (18+1), 1->1 (9+1); head 1->1 (1+1)
        let by_hand = 10 + 10 + 20 + 38 + 19 + 19 + 10 + 2;
        assert_eq!(count_params(&tiny()), by_hand);
        let p: ParameterSet<f64> = init_params(&tiny(), 0).unwrap();
        assert_eq!(p.num_scalars(), by_hand);
    }

    #[test]
    fn norm_adds_two_per_channel() {
        let with_norm = UNetConfig {
            norm_enabled: true,
            ..tiny()
        };
        // 1+1+2+2+1+1+1 normalized output channels
        assert_eq!(count_params(&with_norm), count_params(&tiny()) + 2 * 9);
    }

    #[test]
    fn default_count_matches_independent_enumeration() {
        // Independent per-layer sum: (cin*9 + 1 + 2) * cout for 3x3 units.
        let c = UNetConfig::default();
        let unit = |cin: usize, cout: usize| (cin * 9 + 3) * cout;
        let mut total = 0;
        total += unit(64, 32) + unit(32, 32);
        total += unit(32, 64) + unit(64, 64);
        total += unit(64, 128) + unit(128, 128);
        total += unit(128, 256) + unit(256, 256);
        total += unit(256, 128) + unit(256, 128) + unit(128, 128);
        total += unit(128, 64) + unit(128, 64) + unit(64, 64);
        total += unit(64, 32) + unit(64, 32) + unit(32, 32);
        total += 32 + 1;
        assert_eq!(count_params(&c), total);
        assert_eq!(total, 2_161_473);
    }

    #[test]
    fn count_grows_with_width() {
        for b in 1..6 {
            let small = UNetConfig {
                base_width: b,
                ..Default::default()
            };
            let big = UNetConfig {
                base_width: 2 * b,
                ..Default::default()
            };
            assert!(count_params(&big) > count_params(&small));
        }
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let c = UNetConfig::default();
        let a: ParameterSet<f32> = init_params(&c, 42).unwrap();
        let b: ParameterSet<f32> = init_params(&c, 42).unwrap();
        assert_eq!(a, b);
        for t in a.tensors.iter().filter(|t| t.name.ends_with(".bias")) {
            assert!(t.data.iter().all(|&v| v == 0.0), "{}", t.name);
        }
        for t in a.tensors.iter().filter(|t| t.name.ends_with(".gamma")) {
            assert!(t.data.iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn first_kernel_variance_is_he() {
        let p: ParameterSet<f64> = init_params(&UNetConfig::default(), 3).unwrap();
        let w = &p.tensor("enc0.conv1.weight").unwrap().data;
        let n = w.len() as f64;
        let mean = w.iter().sum::<f64>() / n;
        let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let want = 2.0 / (64.0 * 9.0);
        assert!((var / want - 1.0).abs() < 0.2, "{var} vs {want}");
    }
}
