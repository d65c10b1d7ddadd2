"""Elementary feedforward blocks and the shared-affine bank normalization.

Each block is a small dense network reading one lagged window and emitting
a single scalar feature. The bank normalizer standardizes every block's
output column and then rescales all of them with one shared (gamma, beta)
pair, so the relative scales across blocks stay identifiable.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError, DimensionError


class MLPBlock:
    """Dense feedforward net with weights (fan_out, fan_in) per layer.

    Hidden layers apply the activation; the output layer is linear.
    """

    def __init__(self, weights: list[Tensor], biases: list[Tensor], activation: str):
        if activation not in ad.ACTIVATIONS:
            raise ConfigError(f"unknown activation {activation!r}; choose from {ad.ACTIVATIONS}")
        if len(weights) != len(biases) or not weights:
            raise ConfigError("weights and biases must be non-empty and aligned")
        for l in range(1, len(weights)):
            if weights[l].shape[1] != weights[l - 1].shape[0]:
                raise ConfigError(
                    f"layer {l} input dim {weights[l].shape[1]} does not chain with "
                    f"layer {l - 1} output dim {weights[l - 1].shape[0]}"
                )
        self.weights = weights
        self.biases = biases
        self.activation = activation

    @property
    def layer_dims(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    def parameters(self) -> list[Tensor]:
        params: list[Tensor] = []
        for w, b in zip(self.weights, self.biases):
            params.append(w)
            params.append(b)
        return params

    def n_params(self) -> int:
        return sum(p.size for p in self.parameters())


def init_block(layer_dims: list[int], activation: str, seed: int) -> MLPBlock:
    """Build a block with uniform fan-in scaled weights and zero biases.

    Weights are drawn from U(-r, r) with r = sqrt(1/fan_in); the draw is a
    pure function of ``seed``.
    """
    if len(layer_dims) < 2:
        raise ConfigError(f"need at least input and output dims, got {layer_dims}")
    if any(d <= 0 for d in layer_dims):
        raise ConfigError(f"non-positive layer dimension in {layer_dims}")
    if layer_dims[-1] != 1:
        raise ConfigError(f"blocks emit a single scalar; output dim is {layer_dims[-1]}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
        bound = np.sqrt(1.0 / fan_in)
        weights.append(Tensor(rng.uniform(-bound, bound, (fan_out, fan_in))))
        biases.append(Tensor(np.zeros(fan_out)))
    return MLPBlock(weights, biases, activation)


def block_forward(block: MLPBlock, window) -> Tensor:
    """Run a (batch, width) window through the block -> (batch, 1)."""
    window = ad.as_tensor(window)
    if window.ndim != 2 or window.shape[1] != block.input_dim:
        raise DimensionError(
            f"window shape {window.shape} does not match block input dim {block.input_dim}"
        )
    act = ad.ELEMENTWISE[block.activation]
    h = window
    for w, b in zip(block.weights[:-1], block.biases[:-1]):
        h = act(ad.linear(h, w, b))
    return ad.linear(h, block.weights[-1], block.biases[-1])


def so_penalty(block: MLPBlock) -> Tensor:
    """Sum over layers of ||W^T W - I||_F^2; biases are not penalized."""
    total = None
    for w in block.weights:
        gram = ad.matmul(ad.transpose(w), w)
        gap = ad.sub(gram, Tensor(np.eye(w.shape[1])))
        term = ad.square(gap).sum()
        total = term if total is None else ad.add(total, term)
    return total


@dataclass
class BlockBankNormState:
    """Running statistics plus the shared trainable affine pair.

    gamma and beta are single scalars shared by every block column; the
    running mean/variance are per column, updated with momentum ``rho``
    (new = (1-rho)*old + rho*batch) using the biased batch variance.
    """

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    rho: float = 0.1
    eps: float = 1e-5

    @classmethod
    def create(cls, n_columns: int, rho: float = 0.1, eps: float = 1e-5) -> "BlockBankNormState":
        if not 0.0 < rho < 1.0:
            raise ConfigError(f"momentum must lie in (0,1), got {rho}")
        if eps <= 0.0:
            raise ConfigError(f"eps must be positive, got {eps}")
        return cls(
            gamma=Tensor(np.asarray(1.0)),
            beta=Tensor(np.asarray(0.0)),
            running_mean=np.zeros(n_columns),
            running_var=np.ones(n_columns),
            rho=rho,
            eps=eps,
        )

    @property
    def n_columns(self) -> int:
        return self.running_mean.shape[0]

    def parameters(self) -> list[Tensor]:
        return [self.gamma, self.beta]


def _tile_rows(row: Tensor, batch: int) -> Tensor:
    """(k,) -> (batch, k) by an outer product with a constant ones column."""
    ones = Tensor(np.ones((batch, 1)))
    return ad.matmul(ones, row.reshape((1, row.size)))


def normalize_bank(raw, state: BlockBankNormState, mode: str) -> Tensor:
    """Standardize each block column, then apply the shared affine map.

    Train mode uses the current batch statistics and folds them into the
    running averages; eval mode is a pure function of the running stats.
    """
    raw = ad.as_tensor(raw)
    if raw.ndim != 2 or raw.shape[1] != state.n_columns:
        raise DimensionError(
            f"bank shape {raw.shape} does not match {state.n_columns} tracked columns"
        )
    if mode == "train":
        batch = raw.shape[0]
        if batch < 2:
            raise ContractError("train-mode normalization needs batch size >= 2")
        mean = raw.mean(axis=0)
        centered = ad.sub(raw, _tile_rows(mean, batch))
        var = ad.square(centered).mean(axis=0)
        # 1/sqrt(v + eps) as exp(-log/2): keeps within the engine's op set
        inv_std = ad.exp(ad.mul(ad.log(ad.add(var, state.eps)), -0.5))
        normalized = ad.mul(centered, _tile_rows(inv_std, batch))
        state.running_mean = (1.0 - state.rho) * state.running_mean + state.rho * mean.values
        state.running_var = (1.0 - state.rho) * state.running_var + state.rho * var.values
    elif mode == "eval":
        batch = raw.shape[0]
        mean = np.broadcast_to(state.running_mean, raw.shape)
        scale = np.broadcast_to(1.0 / np.sqrt(state.running_var + state.eps), raw.shape)
        normalized = ad.mul(ad.sub(raw, Tensor(mean.copy())), Tensor(scale.copy()))
    else:
        raise ContractError(f"mode must be 'train' or 'eval', got {mode!r}")
    return ad.add(ad.mul(normalized, state.gamma), state.beta)
