"""Dense ReLU encoder mapping flattened log-mel windows to embeddings."""
from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterVector, Tensor


class Encoder:
    """Fully connected stack ``sizes[0] -> ... -> sizes[-1]``.

    ReLU follows every hidden layer; the bottleneck layer is linear.  Inputs
    are standardised per mel bin with fixed (non-trainable) statistics before
    flattening; those live in :attr:`input_mean` / :attr:`input_scale`.
    """

    BOTTLENECK_GAIN = 0.1

    def __init__(self, sizes: Sequence[int], n_mels: int | None = None):
        sizes = [int(s) for s in sizes]
        if len(sizes) < 2 or min(sizes) < 1:
            raise ValueError(f"encoder sizes must list >= 2 positive widths, got {sizes}")
        self.sizes = sizes
        self.n_mels = n_mels
        self.input_mean: np.ndarray | None = None
        self.input_scale: np.ndarray | None = None

    @property
    def embedding_dim(self) -> int:
        return self.sizes[-1]

    def init_params(self, seed: int) -> ParameterVector:
        """He-uniform weights, zero biases; deterministic in ``seed``.

        The bottleneck layer is scaled by :attr:`BOTTLENECK_GAIN` so initial
        prototype distances are O(1) and the distance softmax is not saturated.
        """
        rng = np.random.default_rng(seed)
        entries = []
        last = len(self.sizes) - 2
        for i, (fan_in, fan_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            bound = np.sqrt(6.0 / fan_in) * (self.BOTTLENECK_GAIN if i == last else 1.0)
            entries.append((f"layer{i}.weight", rng.uniform(-bound, bound, size=(fan_in, fan_out))))
            entries.append((f"layer{i}.bias", np.zeros(fan_out)))
        return ParameterVector(entries)

    def fit_normalizer(self, windows: np.ndarray) -> None:
        """Per-mel-bin mean/std over a stack of (n, frames, mels) windows."""
        w = np.asarray(windows, dtype=np.float64)
        flat = w.reshape(-1, w.shape[-1])
        self.input_mean = flat.mean(axis=0)
        std = flat.std(axis=0)
        self.input_scale = 1.0 / np.maximum(std, 1e-6)
        self.n_mels = w.shape[-1]

    def buffers(self) -> dict[str, np.ndarray]:
        if self.input_mean is None:
            return {}
        return {"input.mean": self.input_mean, "input.scale": self.input_scale}

    def set_buffers(self, buffers: Mapping[str, np.ndarray]) -> None:
        if "input.mean" in buffers:
            self.input_mean = np.asarray(buffers["input.mean"], dtype=np.float64)
            self.input_scale = np.asarray(buffers["input.scale"], dtype=np.float64)
            self.n_mels = self.input_mean.shape[0]

    def prepare(self, windows) -> np.ndarray:
        """Standardise and flatten windows to an (n, sizes[0]) float64 matrix."""
        x = np.asarray(windows, dtype=np.float64)
        if x.ndim == 2 and x.shape[1] == self.sizes[0]:
            return x
        if self.input_mean is not None:
            x = np.subtract(x, self.input_mean)
            x *= self.input_scale
        x = x.reshape(x.shape[0], -1)
        if x.shape[1] != self.sizes[0]:
            raise ad.ShapeError("encoder input", (self.sizes[0],), x.shape)
        return x

    def forward(self, leaves: Mapping[str, Tensor], windows) -> Tensor:
        h = Tensor(self.prepare(windows))
        n_layers = len(self.sizes) - 1
        for i in range(n_layers):
            h = ad.affine(h, leaves[f"layer{i}.weight"], leaves[f"layer{i}.bias"])
            if i < n_layers - 1:
                h = ad.relu(h)
        return h

    def embed(self, params: ParameterVector, windows, batch: int = 2048) -> np.ndarray:
        """Gradient-free forward pass in plain numpy."""
        x = self.prepare(windows)
        out = []
        n_layers = len(self.sizes) - 1
        for start in range(0, x.shape[0], batch):
            h = x[start:start + batch]
            for i in range(n_layers):
                h = h @ params[f"layer{i}.weight"] + params[f"layer{i}.bias"]
                if i < n_layers - 1:
                    h = np.maximum(h, 0.0)
            out.append(h)
        return np.concatenate(out) if out else np.zeros((0, self.embedding_dim))

    def __call__(self, leaves, windows) -> Tensor:
        return self.forward(leaves, windows)


class IdentityEncoder:
    """Embedding equals the flattened input; used for hand-checkable cases."""

    def __init__(self, dim: int):
        self.sizes = [dim, dim]

    @property
    def embedding_dim(self) -> int:
        return self.sizes[-1]

    def prepare(self, windows) -> np.ndarray:
        x = np.asarray(windows, dtype=np.float64)
        return x.reshape(x.shape[0], -1)

    def forward(self, leaves, windows) -> Tensor:
        return Tensor(self.prepare(windows))

    def embed(self, params, windows) -> np.ndarray:
        return self.prepare(windows)

    __call__ = forward
