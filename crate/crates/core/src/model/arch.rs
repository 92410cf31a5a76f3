use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, TernError};
use crate::model::graph::{
    BatchNormLayer, Layer, ModelGraph, Policy, ResidualBlock, Shortcut, WeightLayer,
};
use crate::ops::{ConvGeometry, PoolGeometry, RunningStats};
use crate::optim::Param;
use crate::rel::LayerKind;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arch {
    /// Two conv blocks and two dense layers; `width` is the first conv's channel count.
    LeNet {
        width: usize,
    },
    ResNet20,
    ResNet32,
    ResNet44,
    ResNet56,
    ResNet18,
}

impl Arch {
    pub fn name(&self) -> &'static str {
        match self {
            Arch::LeNet { .. } => "lenet",
            Arch::ResNet20 => "resnet20",
            Arch::ResNet32 => "resnet32",
            Arch::ResNet44 => "resnet44",
            Arch::ResNet56 => "resnet56",
            Arch::ResNet18 => "resnet18",
        }
    }

    /// Builds the network with freshly initialised weights, all layers FP.
    pub fn build<T: Scalar>(
        &self,
        input: [usize; 3],
        classes: usize,
        seed: u64,
    ) -> Result<ModelGraph<T>> {
        if classes == 0 || input.contains(&0) {
            return Err(TernError::Config(format!(
                "invalid input {input:?} or class count {classes}"
            )));
        }
        let mut b = Builder::new(seed);
        let layers = match *self {
            Arch::LeNet { width } => b.lenet(input, classes, width)?,
            Arch::ResNet20 => b.resnet_cifar(input[0], classes, 3),
            Arch::ResNet32 => b.resnet_cifar(input[0], classes, 5),
            Arch::ResNet44 => b.resnet_cifar(input[0], classes, 7),
            Arch::ResNet56 => b.resnet_cifar(input[0], classes, 9),
            Arch::ResNet18 => b.resnet18(input, classes),
        };
        Ok(ModelGraph::new(
            self.name(),
            input,
            classes,
            layers,
            b.params,
        ))
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arch {
    type Err = TernError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "lenet" => Arch::LeNet { width: 16 },
            "resnet20" => Arch::ResNet20,
            "resnet32" => Arch::ResNet32,
            "resnet44" => Arch::ResNet44,
            "resnet56" => Arch::ResNet56,
            "resnet18" => Arch::ResNet18,
            other => return Err(TernError::Config(format!("unknown architecture {other:?}"))),
        })
    }
}

struct Builder<T> {
    params: Vec<Param<T>>,
    rng: ChaCha8Rng,
}

impl<T: Scalar> Builder<T> {
    fn new(seed: u64) -> Self {
        Builder {
            params: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn param(&mut self, name: String, value: Tensor<T>) -> usize {
        self.params.push(Param::new(name, value));
        self.params.len() - 1
    }

    fn conv(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Layer<T> {
        let w = Tensor::kaiming(&[cout, cin, k, k], cin * k * k, &mut self.rng);
        let weight = self.param(format!("{name}.weight"), w);
        Layer::Weight(WeightLayer {
            name: name.into(),
            kind: LayerKind::Conv(ConvGeometry::new(stride, pad)),
            weight,
            bias: None,
            policy: Policy::Fp,
        })
    }

    fn dense(&mut self, name: &str, fin: usize, fout: usize, bias: bool) -> Layer<T> {
        let w = Tensor::kaiming(&[fin, fout], fin, &mut self.rng);
        let weight = self.param(format!("{name}.weight"), w);
        let bias = bias.then(|| self.param(format!("{name}.bias"), Tensor::zeros(&[fout])));
        Layer::Weight(WeightLayer {
            name: name.into(),
            kind: LayerKind::Dense,
            weight,
            bias,
            policy: Policy::Fp,
        })
    }

    fn bn(&mut self, name: &str, c: usize) -> Layer<T> {
        let gamma = self.param(format!("{name}.gamma"), Tensor::full(&[c], T::one()));
        let beta = self.param(format!("{name}.beta"), Tensor::zeros(&[c]));
        Layer::BatchNorm(BatchNormLayer {
            name: name.into(),
            gamma,
            beta,
            stats: RunningStats::new(c),
            eps: T::of(BN_EPS),
        })
    }

    fn lenet(
        &mut self,
        [c, h, w]: [usize; 3],
        classes: usize,
        width: usize,
    ) -> Result<Vec<Layer<T>>> {
        if h < 4 || w < 4 || width == 0 {
            return Err(TernError::Config(format!(
                "lenet needs inputs of at least 4×4 and width ≥ 1, got {h}×{w}"
            )));
        }
        let pool = PoolGeometry {
            kernel: 2,
            stride: 2,
            pad: 0,
        };
        let flat = 2 * width * (h / 4) * (w / 4);
        Ok(vec![
            self.conv("conv1", c, width, 3, 1, 1),
            self.bn("bn1", width),
            Layer::Relu,
            Layer::MaxPool(pool),
            self.conv("conv2", width, 2 * width, 3, 1, 1),
            self.bn("bn2", 2 * width),
            Layer::Relu,
            Layer::MaxPool(pool),
            Layer::Flatten,
            self.dense("fc1", flat, 4 * width, false),
            self.bn("bn3", 4 * width),
            Layer::Relu,
            self.dense("fc2", 4 * width, classes, true),
        ])
    }

    fn basic_block(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        projection: bool,
    ) -> Layer<T> {
        let body = vec![
            self.conv(&format!("{name}.conv1"), cin, cout, 3, stride, 1),
            self.bn(&format!("{name}.bn1"), cout),
            Layer::Relu,
            self.conv(&format!("{name}.conv2"), cout, cout, 3, 1, 1),
            self.bn(&format!("{name}.bn2"), cout),
        ];
        let shortcut = if stride == 1 && cin == cout {
            Shortcut::Identity
        } else if projection {
            Shortcut::Projection(vec![
                self.conv(&format!("{name}.shortcut.conv"), cin, cout, 1, stride, 0),
                self.bn(&format!("{name}.shortcut.bn"), cout),
            ])
        } else {
            Shortcut::Pad {
                stride,
                out_channels: cout,
            }
        };
        Layer::Residual(ResidualBlock {
            name: name.into(),
            body,
            shortcut,
        })
    }

    /// `6n + 2` layers over three stages of 16, 32 and 64 channels.
    fn resnet_cifar(&mut self, c: usize, classes: usize, n: usize) -> Vec<Layer<T>> {
        let mut layers = vec![
            self.conv("conv1", c, 16, 3, 1, 1),
            self.bn("bn1", 16),
            Layer::Relu,
        ];
        let mut cin = 16;
        for stage in 0..3 {
            let cout = 16 << stage;
            for i in 0..n {
                let stride = if stage > 0 && i == 0 { 2 } else { 1 };
                layers.push(self.basic_block(
                    &format!("layer{}.{i}", stage + 1),
                    cin,
                    cout,
                    stride,
                    false,
                ));
                cin = cout;
            }
        }
        layers.extend([
            Layer::GlobalAvgPool,
            Layer::Flatten,
            self.dense("fc", 64, classes, true),
        ]);
        layers
    }

    fn resnet18(&mut self, [c, h, _]: [usize; 3], classes: usize) -> Vec<Layer<T>> {
        let mut layers = if h >= 64 {
            vec![
                self.conv("conv1", c, 64, 7, 2, 3),
                self.bn("bn1", 64),
                Layer::Relu,
                Layer::MaxPool(PoolGeometry {
                    kernel: 3,
                    stride: 2,
                    pad: 1,
                }),
            ]
        } else {
            vec![
                self.conv("conv1", c, 64, 3, 1, 1),
                self.bn("bn1", 64),
                Layer::Relu,
            ]
        };
        let mut cin = 64;
        for stage in 0..4 {
            let cout = 64 << stage;
            for i in 0..2 {
                let stride = if stage > 0 && i == 0 { 2 } else { 1 };
                layers.push(self.basic_block(
                    &format!("layer{}.{i}", stage + 1),
                    cin,
                    cout,
                    stride,
                    true,
                ));
                cin = cout;
            }
        }
        layers.extend([
            Layer::GlobalAvgPool,
            Layer::Flatten,
            self.dense("fc", 512, classes, true),
        ]);
        layers
    }
}
