"""Gated DeepFM scorer.

One parameter set serves both siamese call sites: a first-order linear
term over bucket indices, a second-order factorization-machine term over
per-field embeddings with one polarization gate per unordered field pair,
and an MLP over the concatenated gated embeddings with one gate per field.
Pruning consumes the gates: masked pairs drop out of the FM sum, masked
fields lose their MLP input rows structurally.

Scoring is batch-size invariant down to the bit: reductions run along
fixed per-row axes only, never across the batch, so scoring one item or
ten thousand gives identical doubles. Training uses a faster BLAS path
where only run-to-run determinism is needed.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np
from numpy.typing import NDArray

from .artifacts import read_json, write_json
from .errors import ArtifactError, ValidationError
from .features import FeatureSchema

DEFAULT_EMBEDDING_DIM = 3
DEFAULT_HIDDEN = (128, 64, 32, 16)
DEFAULT_BETA = 0.01

# raw gate value at init: g(1.0) = 1/(1+beta) > 0.99 for beta = 0.01
_GATE_INIT = 1.0

# rows per chunk are sized to bound the elementwise-product workspace of
# the batch-invariant matmul
_EXACT_KERNEL_BUDGET = 4_000_000


# largest double below 1: keeps the gate range half-open even where
# x*x + beta rounds to x*x
_BELOW_ONE = np.nextafter(1.0, 0.0)


def polarize(x, beta: float):
    """Gate function g(x) = x^2 / (x^2 + beta), in [0, 1)."""
    if beta <= 0:
        raise ValidationError(f"beta must be positive, got {beta}")
    x = np.asarray(x, dtype=np.float64)
    out = np.minimum(x * x / (x * x + beta), _BELOW_ONE)
    return float(out) if out.ndim == 0 else out


def polarize_grad(x, beta: float):
    """Derivative of the gate: 2*x*beta / (x^2 + beta)^2.

    Evaluated as 2*g*(1-g)/x, which is the same expression with the
    square factored through g. The complement 1-g is taken by direct
    subtraction below the half-open point and as beta/(x^2+beta) above
    it, so neither branch cancels; the subtraction branch also keeps the
    reference value grad(0.1, 0.01) = 5.0 exact, where the naive
    ordering loses the last bit.
    """
    if beta <= 0:
        raise ValidationError(f"beta must be positive, got {beta}")
    x = np.asarray(x, dtype=np.float64)
    safe = np.where(x == 0.0, 1.0, x)
    denom = safe * safe + beta
    g = safe * safe / denom
    comp = np.where(g <= 0.5, 1.0 - g, beta / denom)
    out = np.where(x == 0.0, 0.0, 2.0 * g * comp / safe)
    return float(out) if out.ndim == 0 else out


def _elu(z: NDArray) -> NDArray:
    return np.where(z > 0.0, z, np.expm1(z))


def _elu_grad_from_output(z: NDArray, h: NDArray) -> NDArray:
    # derivative is 1 for z > 0 and exp(z) = h + 1 below
    return np.where(z > 0.0, 1.0, h + 1.0)


def _tree_sum(a: NDArray) -> NDArray:
    """Sum over the last axis with a fixed association tree.

    ndarray.sum lets the memory layout pick the accumulation order, so
    the same row can reduce differently inside different batch shapes.
    Here adjacent elements fold pairwise level by level (odd tail carried
    whole), an order determined only by the reduced length. Every
    reduction on the exact scoring path goes through this.
    """
    out = a
    while out.shape[-1] > 1:
        m = out.shape[-1] // 2
        folded = out[..., 0 : 2 * m : 2] + out[..., 1 : 2 * m : 2]
        if out.shape[-1] % 2:
            folded = np.concatenate([folded, out[..., -1:]], axis=-1)
        out = folded
    return out[..., 0]


def _rowwise_matmul(x: NDArray, w: NDArray) -> NDArray:
    """x @ w computed with per-row reductions only.

    BLAS gemm picks different instruction paths for different batch
    shapes, so its per-row results are not batch-size invariant. This
    kernel reduces along the shared axis per output element; the reduction
    order depends only on the input width, never on the batch size.
    """
    n, d_in = x.shape
    d_out = w.shape[1]
    out = np.empty((n, d_out), dtype=np.float64)
    wt = np.ascontiguousarray(w.T)[None, :, :]
    chunk = max(1, _EXACT_KERNEL_BUDGET // max(1, d_in * d_out))
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        out[start:stop] = _tree_sum(x[start:stop, None, :] * wt)
    return out


def _pair_index(num_fields: int) -> NDArray[np.int64]:
    pairs = [
        (i, j) for i in range(num_fields) for j in range(i + 1, num_fields)
    ]
    return np.asarray(pairs, dtype=np.int64).reshape(-1, 2)


@dataclass
class DeepFmModel:
    """Parameters plus structural state. ``params`` maps names to float64
    arrays; masks and ``field_slots`` describe what pruning removed."""

    schema_hash: str
    num_fields: int
    buckets_per_field: int
    embedding_dim: int
    hidden: tuple[int, ...]
    beta: float
    params: dict[str, NDArray[np.float64]]
    pair_mask: NDArray[np.bool_]
    field_mask: NDArray[np.bool_]
    field_slots: NDArray[np.int64]
    hardened: bool = False
    pairs: NDArray[np.int64] = dc_field(init=False)

    def __post_init__(self):
        self.pairs = _pair_index(self.num_fields)
        if len(self.pair_mask) != len(self.pairs):
            raise ValidationError("pair mask length does not match field count")
        if len(self.field_mask) != self.num_fields:
            raise ValidationError("field mask length does not match field count")
        expected_w1 = len(self.field_slots) * self.embedding_dim
        if self.params["W1"].shape[0] != expected_w1:
            raise ValidationError(
                f"first MLP layer expects {expected_w1} inputs, weight matrix "
                f"has {self.params['W1'].shape[0]} rows"
            )
        onehot_i = np.zeros((self.num_pairs, self.num_fields))
        onehot_j = np.zeros((self.num_pairs, self.num_fields))
        onehot_i[np.arange(self.num_pairs), self.pairs[:, 0]] = 1.0
        onehot_j[np.arange(self.num_pairs), self.pairs[:, 1]] = 1.0
        self._pair_onehot_i = onehot_i
        self._pair_onehot_j = onehot_j

    @property
    def num_pairs(self) -> int:
        return len(self.pairs)

    @property
    def num_gates(self) -> int:
        return self.num_pairs + self.num_fields

    # ---------------------------------------------------------------- gates

    def pair_gate_values(self) -> NDArray[np.float64]:
        """Effective FM gate factors: polarized raw values while soft,
        exact {0,1} once hardened."""
        if self.hardened:
            return self.pair_mask.astype(np.float64)
        return polarize(self.params["fm_gate"], self.beta) * self.pair_mask

    def deep_gate_values(self) -> NDArray[np.float64]:
        if self.hardened:
            return self.field_mask.astype(np.float64)
        return polarize(self.params["deep_gate"], self.beta) * self.field_mask

    # -------------------------------------------------------------- scoring

    def _check_buckets(self, buckets: NDArray) -> NDArray[np.int64]:
        b = np.asarray(buckets, dtype=np.int64)
        if b.ndim != 2 or b.shape[1] != self.num_fields:
            raise ValidationError(
                f"bucket matrix shape {b.shape} does not match "
                f"{self.num_fields} fields"
            )
        if b.size and (b.min() < 0 or b.max() >= self.buckets_per_field):
            raise ValidationError(
                "bucket index outside embedding table: model and schema "
                "do not match"
            )
        return b

    def _forward(self, buckets: NDArray, exact: bool) -> tuple[NDArray, dict]:
        """Score a batch; the cache carries everything backward needs."""
        b = self._check_buckets(buckets)
        n = b.shape[0]
        fidx = np.arange(self.num_fields)[None, :]

        red = _tree_sum if exact else (lambda a: a.sum(axis=-1))

        lin_vals = self.params["linear"][fidx, b]
        linear_sum = red(lin_vals)

        e = self.params["emb"][fidx, b]  # (n, F, k)
        ei = e[:, self.pairs[:, 0], :]
        ej = e[:, self.pairs[:, 1], :]
        terms = red(ei * ej)  # (n, P)
        pair_g = self.pair_gate_values()
        fm_sum = red(terms * pair_g[None, :])

        slots = self.field_slots
        deep_g = self.deep_gate_values()[slots]
        x = (e[:, slots, :] * deep_g[None, :, None]).reshape(n, -1)

        mm = _rowwise_matmul if exact else (lambda a, w: a @ w)
        hs: list[NDArray] = [x]
        zs: list[NDArray] = []
        h = x
        num_layers = len(self.hidden) + 1
        for layer in range(1, num_layers + 1):
            z = mm(h, self.params[f"W{layer}"]) + self.params[f"b{layer}"]
            zs.append(z)
            h = _elu(z) if layer < num_layers else z
            hs.append(h)
        mlp_out = h[:, 0]

        scores = self.params["bias"][0] + linear_sum + fm_sum + mlp_out
        cache = {
            "b": b,
            "e": e,
            "terms": terms,
            "pair_g": pair_g,
            "deep_g": deep_g,
            "hs": hs,
            "zs": zs,
        }
        return scores, cache

    def score_batch(self, buckets: NDArray) -> NDArray[np.float64]:
        """Scores for an (n, F) bucket matrix. Bitwise equal to scoring
        each row alone."""
        scores, _ = self._forward(buckets, exact=True)
        return scores

    def score(self, bucket_vector) -> float:
        """Score one discretized item."""
        row = np.asarray(bucket_vector, dtype=np.int64)[None, :]
        return float(self.score_batch(row)[0])

    # ------------------------------------------------------------- backward

    def backward(
        self, cache: dict, dscore: NDArray[np.float64]
    ) -> dict[str, NDArray[np.float64]]:
        """Gradients of sum(dscore * score) w.r.t. every parameter.

        Gate gradients flow through the polarization derivative; on a
        hardened model gate gradients are zero (gates are structural).
        """
        b = cache["b"]
        e = cache["e"]
        n = b.shape[0]
        k = self.embedding_dim
        grads: dict[str, NDArray] = {}

        grads["bias"] = np.asarray([dscore.sum()])

        # bucket scatter-adds go through bincount on flattened
        # (field, bucket) indices: deterministic and much faster than
        # element-at accumulation
        flat_idx = (
            np.arange(self.num_fields)[None, :] * self.buckets_per_field + b
        ).ravel()
        table_size = self.num_fields * self.buckets_per_field
        lin_w = np.broadcast_to(dscore[:, None], b.shape).ravel()
        grads["linear"] = np.bincount(
            flat_idx, weights=lin_w, minlength=table_size
        ).reshape(self.num_fields, self.buckets_per_field)

        # FM term. Pair-to-field scatters are folded into one BLAS matmul
        # against the one-hot pair/field incidence instead of an einsum:
        # same contraction, an order of magnitude faster.
        pair_g = cache["pair_g"]
        d_terms = dscore[:, None] * pair_g[None, :]
        I, J = self.pairs[:, 0], self.pairs[:, 1]

        def scatter_pairs(partner: NDArray, onehot: NDArray) -> NDArray:
            flat = (d_terms[:, :, None] * partner).transpose(0, 2, 1)
            out = flat.reshape(n * k, -1) @ onehot
            return out.reshape(n, k, self.num_fields).transpose(0, 2, 1)

        d_e = scatter_pairs(e[:, J, :], self._pair_onehot_i)
        d_e += scatter_pairs(e[:, I, :], self._pair_onehot_j)
        if self.hardened:
            grads["fm_gate"] = np.zeros_like(self.params["fm_gate"])
        else:
            d_pair_g = (cache["terms"] * dscore[:, None]).sum(axis=0)
            grads["fm_gate"] = (
                d_pair_g
                * polarize_grad(self.params["fm_gate"], self.beta)
                * self.pair_mask
            )

        # MLP
        hs, zs = cache["hs"], cache["zs"]
        num_layers = len(self.hidden) + 1
        d_h = dscore[:, None]
        for layer in range(num_layers, 0, -1):
            z = zs[layer - 1]
            d_z = (
                d_h
                if layer == num_layers
                else d_h * _elu_grad_from_output(z, hs[layer])
            )
            grads[f"W{layer}"] = hs[layer - 1].T @ d_z
            grads[f"b{layer}"] = d_z.sum(axis=0)
            d_h = d_z @ self.params[f"W{layer}"].T
        d_x = d_h.reshape(n, len(self.field_slots), k)

        slots = self.field_slots
        deep_g = cache["deep_g"]
        d_e[:, slots, :] += d_x * deep_g[None, :, None]
        grads["deep_gate"] = np.zeros_like(self.params["deep_gate"])
        if not self.hardened:
            d_deep_g = (d_x * e[:, slots, :]).sum(axis=(0, 2))
            grads["deep_gate"][slots] = (
                d_deep_g
                * polarize_grad(self.params["deep_gate"][slots], self.beta)
                * self.field_mask[slots]
            )

        emb_grad = np.empty((table_size, k))
        for dim in range(k):
            emb_grad[:, dim] = np.bincount(
                flat_idx, weights=d_e[:, :, dim].ravel(), minlength=table_size
            )
        grads["emb"] = emb_grad.reshape(
            self.num_fields, self.buckets_per_field, k
        )
        return grads

    def forward_batch(self, buckets: NDArray) -> tuple[NDArray, dict]:
        """Training-path forward (fast matmul, run-to-run deterministic)."""
        return self._forward(buckets, exact=False)

    # ---------------------------------------------------------------- cost

    def multiply_count(self) -> int:
        """Structural multiply count: k per surviving FM pair plus the MLP
        matrix sizes."""
        pairs_active = int(self.pair_mask.sum())
        total = pairs_active * self.embedding_dim
        num_layers = len(self.hidden) + 1
        for layer in range(1, num_layers + 1):
            w = self.params[f"W{layer}"]
            total += w.shape[0] * w.shape[1]
        return total

    # ------------------------------------------------------------ lifecycle

    def copy(self) -> "DeepFmModel":
        return DeepFmModel(
            schema_hash=self.schema_hash,
            num_fields=self.num_fields,
            buckets_per_field=self.buckets_per_field,
            embedding_dim=self.embedding_dim,
            hidden=self.hidden,
            beta=self.beta,
            params={k: v.copy() for k, v in self.params.items()},
            pair_mask=self.pair_mask.copy(),
            field_mask=self.field_mask.copy(),
            field_slots=self.field_slots.copy(),
            hardened=self.hardened,
        )

    def to_dict(self) -> dict:
        return {
            "kind": "model",
            "version": 1,
            "model_kind": "deepfm",
            "schema_hash": self.schema_hash,
            "num_fields": self.num_fields,
            "buckets_per_field": self.buckets_per_field,
            "embedding_dim": self.embedding_dim,
            "hidden": list(self.hidden),
            "beta": self.beta,
            "hardened": self.hardened,
            "pair_mask": [int(m) for m in self.pair_mask],
            "field_mask": [int(m) for m in self.field_mask],
            "field_slots": [int(s) for s in self.field_slots],
            "params": {k: v.tolist() for k, v in self.params.items()},
        }

    def save(self, path: str) -> None:
        write_json(path, self.to_dict())

    @classmethod
    def from_dict(cls, rec: dict) -> "DeepFmModel":
        if rec.get("model_kind") != "deepfm":
            raise ArtifactError(
                f"expected a deepfm model, found {rec.get('model_kind')!r}"
            )
        params = {
            k: np.asarray(v, dtype=np.float64) for k, v in rec["params"].items()
        }
        model = cls(
            schema_hash=rec["schema_hash"],
            num_fields=int(rec["num_fields"]),
            buckets_per_field=int(rec["buckets_per_field"]),
            embedding_dim=int(rec["embedding_dim"]),
            hidden=tuple(int(h) for h in rec["hidden"]),
            beta=float(rec["beta"]),
            params=params,
            pair_mask=np.asarray(rec["pair_mask"], dtype=bool),
            field_mask=np.asarray(rec["field_mask"], dtype=bool),
            field_slots=np.asarray(rec["field_slots"], dtype=np.int64),
            hardened=bool(rec["hardened"]),
        )
        for name, arr in model.params.items():
            if not np.isfinite(arr).all():
                raise ValidationError(f"model parameter {name} is not finite")
        return model

    @classmethod
    def load(
        cls, path: str, expected_schema_hash: str | None = None
    ) -> "DeepFmModel":
        model = cls.from_dict(read_json(path, expected_kind="model"))
        if (
            expected_schema_hash is not None
            and model.schema_hash != expected_schema_hash
        ):
            raise ArtifactError(
                f"model at {path} was trained against schema "
                f"{model.schema_hash[:12]}..., expected "
                f"{expected_schema_hash[:12]}..."
            )
        return model


def init_model(
    schema: FeatureSchema,
    embedding_dim: int = DEFAULT_EMBEDDING_DIM,
    seed: int = 0,
    hidden: tuple[int, ...] = DEFAULT_HIDDEN,
    beta: float = DEFAULT_BETA,
) -> DeepFmModel:
    """Fresh model for a fitted schema: fan-in scaled zero-mean embeddings
    and MLP weights, zero linear weights, gates fully open."""
    if embedding_dim < 1:
        raise ValidationError("embedding_dim must be at least 1")
    if beta <= 0:
        raise ValidationError("beta must be positive")
    num_fields = schema.num_fields
    buckets = schema.buckets_per_field
    rng = np.random.default_rng(np.random.SeedSequence([seed, 17]))

    params: dict[str, NDArray] = {
        "bias": np.zeros(1),
        "linear": np.zeros((num_fields, buckets)),
        "emb": rng.normal(
            0.0,
            0.2 / np.sqrt(embedding_dim),
            size=(num_fields, buckets, embedding_dim),
        ),
        "fm_gate": np.full(num_fields * (num_fields - 1) // 2, _GATE_INIT),
        "deep_gate": np.full(num_fields, _GATE_INIT),
    }
    widths = [num_fields * embedding_dim, *hidden, 1]
    for layer, (fan_in, fan_out) in enumerate(zip(widths, widths[1:]), start=1):
        params[f"W{layer}"] = rng.normal(
            0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out)
        )
        params[f"b{layer}"] = np.zeros(fan_out)

    return DeepFmModel(
        schema_hash=schema.content_hash(),
        num_fields=num_fields,
        buckets_per_field=buckets,
        embedding_dim=embedding_dim,
        hidden=tuple(hidden),
        beta=beta,
        params=params,
        pair_mask=np.ones(num_fields * (num_fields - 1) // 2, dtype=bool),
        field_mask=np.ones(num_fields, dtype=bool),
        field_slots=np.arange(num_fields, dtype=np.int64),
        hardened=False,
    )


def fm_reference(model: DeepFmModel, buckets: NDArray) -> NDArray[np.float64]:
    """Classic folded FM identity 0.5*sum_d[(sum_f e)^2 - sum_f e^2],
    valid only with every gate open at exactly 1. Kept as a test oracle for
    the gated pairwise sum."""
    b = np.asarray(buckets, dtype=np.int64)
    fidx = np.arange(model.num_fields)[None, :]
    e = model.params["emb"][fidx, b]
    s = e.sum(axis=1)
    sq = (e * e).sum(axis=1)
    return 0.5 * (s * s - sq).sum(axis=1)
