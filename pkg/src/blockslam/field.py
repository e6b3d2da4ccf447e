"""SDF + color decoders and the multi-block field query.

A query point is encoded twice: one-blob on its world coordinates, and the
hash grids of every block containing it (feature vectors averaged when it
falls in more than one). The geometry decoder maps (one-blob, hash features)
to an SDF value and a latent feature g; the color decoder maps (one-blob, g)
to RGB in [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterStore, Tensor
from .encoders import HashGrid, hash_encode, oneblob_encode
from .errors import ContractViolation


@dataclass(frozen=True)
class MlpSpec:
    """Widths and head of one decoder network.

    ``n_layers`` counts affine layers; hidden activations are rectifiers.
    The head is either 'linear' (raw SDF in meters) or 'logistic'
    (squashes into (0, 1), used for color).
    """

    in_dim: int
    hidden_width: int
    n_layers: int
    out_dim: int
    head: str = "linear"

    def __post_init__(self):
        if self.n_layers < 1:
            raise ContractViolation("an MLP needs at least one affine layer")
        if self.head not in ("linear", "logistic"):
            raise ContractViolation(f"unknown head '{self.head}'")

    def layer_dims(self) -> list[tuple[int, int]]:
        dims = [self.in_dim] + [self.hidden_width] * (self.n_layers - 1) + [self.out_dim]
        return list(zip(dims[:-1], dims[1:]))


def init_mlp_params(spec: MlpSpec, rng: np.random.Generator) -> list[np.ndarray]:
    """Kaiming-style fan-in init for weights, zero biases."""
    arrays = []
    for fan_in, fan_out in spec.layer_dims():
        arrays.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out)))
        arrays.append(np.zeros(fan_out))
    return arrays


class Mlp:
    """A small fully connected network over tape tensors."""

    def __init__(self, spec: MlpSpec, params: list[Tensor]):
        if len(params) != 2 * spec.n_layers:
            raise ContractViolation("parameter count does not match spec")
        self.spec = spec
        self.params = params
        self._frozen = None

    @staticmethod
    def create(spec: MlpSpec, store: ParameterStore, group: str, prefix: str,
               rng: np.random.Generator) -> "Mlp":
        arrays = init_mlp_params(spec, rng)
        params = []
        for i in range(spec.n_layers):
            params.append(store.register(group, f"{prefix}/w{i}", arrays[2 * i]))
            params.append(store.register(group, f"{prefix}/b{i}", arrays[2 * i + 1]))
        return Mlp(spec, params)

    def _live_params(self, train: bool) -> list[Tensor]:
        if train:
            return self.params
        if self._frozen is None:
            self._frozen = [
                p.constant() if hasattr(p, "constant") else p for p in self.params
            ]
        return self._frozen

    def forward(self, x: Tensor, train: bool = True) -> Tensor:
        if x.data.shape[-1] != self.spec.in_dim:
            raise ContractViolation(
                f"input width {x.data.shape[-1]} != spec {self.spec.in_dim}"
            )
        return self._body(x, None, self._live_params(train))

    def forward_pair(self, a: Tensor, b: Tensor, train: bool = True) -> Tensor:
        """Forward on the implicit concatenation of two feature blocks."""
        if a.data.shape[-1] + b.data.shape[-1] != self.spec.in_dim:
            raise ContractViolation(
                f"input widths {a.data.shape[-1]}+{b.data.shape[-1]} "
                f"!= spec {self.spec.in_dim}"
            )
        return self._body(a, b, self._live_params(train))

    def _body(self, x: Tensor, x2: Tensor | None, params: list[Tensor]) -> Tensor:
        if x2 is not None:
            h = ad.affine_pair(x, x2, params[0], params[1])
        else:
            h = ad.matmul(x, params[0]) + params[1]
        for i in range(1, self.spec.n_layers):
            h = ad.relu(h)
            h = ad.matmul(h, params[2 * i]) + params[2 * i + 1]
        if self.spec.head == "logistic":
            h = ad.sigmoid(h)
        return h


def decode_geometry(mlp: Mlp, alpha: Tensor, beta: Tensor, train: bool = True):
    """(one-blob, hash features) -> (sdf (n,), g (n, g_dim))."""
    out = mlp.forward_pair(alpha, beta, train=train)
    return out[:, 0], out[:, 1:]


def decode_color(mlp: Mlp, alpha: Tensor, g: Tensor, train: bool = True) -> Tensor:
    """(one-blob, geometric feature) -> RGB in [0, 1], shape (n, 3)."""
    return mlp.forward_pair(alpha, g, train=train)


@dataclass
class FieldSample:
    """Query result for a single point. Coverage 0 means discarded."""

    sdf: float | None
    color: np.ndarray | None
    coverage: int


class NeuralField:
    """The decoders plus en/decoding configuration shared by all blocks."""

    def __init__(self, geo_mlp: Mlp, col_mlp: Mlp, oneblob_bins: int,
                 block_size: float, g_dim: int):
        self.geo_mlp = geo_mlp
        self.col_mlp = col_mlp
        self.oneblob_bins = oneblob_bins
        self.block_size = block_size
        self.g_dim = g_dim

    @staticmethod
    def create(store: ParameterStore, *, encode_dim: int, oneblob_bins: int,
               block_size: float, g_dim: int, hidden_width: int, n_layers: int,
               rng: np.random.Generator) -> "NeuralField":
        alpha_dim = 3 * oneblob_bins
        geo_spec = MlpSpec(alpha_dim + encode_dim, hidden_width, n_layers,
                           1 + g_dim, head="linear")
        col_spec = MlpSpec(alpha_dim + g_dim, hidden_width, n_layers, 3,
                           head="logistic")
        geo = Mlp.create(geo_spec, store, "decoders", "geo", rng)
        col = Mlp.create(col_spec, store, "decoders", "col", rng)
        return NeuralField(geo, col, oneblob_bins, block_size, g_dim)


def blend_features(x: Tensor, blocks, train_field: bool = True):
    """Average the hash features of every block containing each point.

    Returns (beta (n, L*F) Tensor, coverage (n,) int array). Rows with
    coverage 0 are zero. Containment masks are computed on values and carry
    no gradient; the feature path does.
    """
    n = x.data.shape[0]
    if not blocks:
        raise ContractViolation("blend_features needs at least one block")
    dim = blocks[0].grid.out_dim
    half = blocks[0].grid.config.block_size / 2.0
    coverage = np.zeros(n, dtype=np.int64)
    acc = None
    for block in blocks:
        inside = np.all(np.abs(x.data - block.center) <= half, axis=1)
        if not inside.any():
            continue
        grid = block.grid if train_field else block.frozen_grid()
        shift = ad.constant(block.center - half)
        if inside.all():
            coverage += 1
            part = hash_encode(grid, x - shift)
        else:
            rows = np.nonzero(inside)[0]
            coverage[rows] += 1
            part = ad.put_rows(n, rows, hash_encode(grid, x[rows] - shift))
        acc = part if acc is None else acc + part
    if acc is None:
        acc = ad.constant(np.zeros((n, dim)))
    denom = np.maximum(coverage, 1).astype(np.float64)
    beta = acc * ad.constant(1.0 / denom[:, None])
    return beta, coverage


def query_points(x, blocks, field: NeuralField, train_field: bool = True):
    """Batched field query.

    ``x`` is a Tensor or array of world points (n, 3). Returns
    (sdf (n,), color (n, 3), coverage (n,)); sdf and color entries for
    coverage-0 points are meaningless and must be masked by the caller.
    """
    xt = x if isinstance(x, Tensor) else ad.constant(x)
    beta, coverage = blend_features(xt, blocks, train_field=train_field)
    alpha = oneblob_encode(xt, field.oneblob_bins, field.block_size)
    sdf, g = decode_geometry(field.geo_mlp, alpha, beta, train=train_field)
    color = decode_color(field.col_mlp, alpha, g, train=train_field)
    return sdf, color, coverage


def query_point(x_world, candidate_blocks, field: NeuralField) -> FieldSample:
    """Single-point query; coverage 0 yields a discarded sample."""
    x = np.asarray(x_world, dtype=np.float64).reshape(1, 3)
    containing = [
        b for b in candidate_blocks
        if np.all(np.abs(x[0] - b.center) <= b.grid.config.block_size / 2.0)
    ]
    if not containing:
        return FieldSample(sdf=None, color=None, coverage=0)
    sdf, color, cov = query_points(x, containing, field, train_field=False)
    return FieldSample(
        sdf=float(sdf.data[0]), color=color.data[0].copy(), coverage=int(cov[0])
    )
