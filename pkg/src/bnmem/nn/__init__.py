"""From-scratch MLP engine with batch normalization."""

from dataclasses import dataclass

from ..rng import derive_seed
from .layers import (
    BatchNorm,
    BatchNormState,
    BNCache,
    Dense,
    ReLU,
    SoftmaxCrossEntropyHead,
    bn_backward,
    bn_forward,
)
from .network import EVAL, TRAIN, Network, backward_per_sample, forward
from .optim import SGD, Adam
from .train import EpochStats, TrainConfig, TrainResult, evaluate, train


@dataclass(frozen=True)
class Architecture:
    """MLP layer widths plus the BN switch; ``build`` derives the init seed."""

    sizes: tuple = (784, 256, 128, 10)
    batch_norm: bool = True
    eps: float = 1e-5
    momentum: float = 0.1

    def build(self, seed):
        return Network.mlp(list(self.sizes), self.batch_norm, derive_seed(seed, "init"), self.eps, self.momentum)

    def with_bn(self, flag):
        return Architecture(self.sizes, flag, self.eps, self.momentum)

    def describe(self):
        return {"sizes": list(self.sizes), "batch_norm": self.batch_norm, "eps": self.eps, "momentum": self.momentum}


__all__ = [
    "Adam", "Architecture", "BatchNorm", "BatchNormState", "BNCache", "Dense", "EVAL", "EpochStats",
    "Network", "ReLU", "SGD", "SoftmaxCrossEntropyHead", "TRAIN", "TrainConfig", "TrainResult",
    "backward_per_sample", "bn_backward", "bn_forward", "evaluate", "forward", "train",
]
