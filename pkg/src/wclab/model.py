"""Classifier architectures and parameter-space metrics.

Networks are stacks of convolutional and fully-connected layers with ReLU
between them (1-Lipschitz, nonexpansive). The metrics side turns a
convolution kernel into its explicit operator matrix, estimates spectral
norms by power iteration, and measures the layerwise operator-norm
distance between two parameter snapshots.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import seeding
from .errors import FormatError, NumericError, PowerIterationError, ShapeError

SNAPSHOT_MAGIC = "wclab-snapshot-v1"


@dataclass
class DenseLayer:
    weight: ad.Tensor          # (n_in, n_out)
    bias: ad.Tensor            # (n_out,)

    kind = "dense"

    def param_count(self):
        return self.weight.size + self.bias.size


@dataclass
class ConvLayer:
    kernel: ad.Tensor          # (c_out, c_in, k, k)
    bias: ad.Tensor            # (c_out,)
    padding: int
    input_hw: tuple            # spatial size this layer sees, fixed by the architecture

    kind = "conv"

    def param_count(self):
        return self.kernel.size + self.bias.size


class Network:
    """Layered classifier: zero or more conv layers, then dense layers.

    Input is (B, d) for pure MLPs or (B, C, H, W) when conv layers are
    present; the first dense layer consumes the flattened conv output.
    """

    def __init__(self, layers, n_c, input_shape):
        if not layers:
            raise ShapeError("network needs at least one layer")
        self.layers = list(layers)
        self.n_c = int(n_c)
        self.input_shape = tuple(int(s) for s in input_shape)
        last = self.layers[-1]
        if not isinstance(last, DenseLayer) or last.weight.shape[1] != self.n_c:
            raise ShapeError("last layer must be dense with n_c outputs")

    # -- construction -------------------------------------------------------

    @classmethod
    def mlp(cls, dims, seed=0):
        """Fully-connected ReLU net; dims = (d_in, hidden..., n_c)."""
        rng = seeding.derive_rng(seed, seeding.TAG_INIT)
        layers = []
        for n_in, n_out in zip(dims[:-1], dims[1:]):
            scale = np.sqrt(2.0 / n_in)
            w = ad.Tensor(rng.standard_normal((n_in, n_out)) * scale, requires_grad=True)
            b = ad.Tensor(np.zeros(n_out), requires_grad=True)
            layers.append(DenseLayer(w, b))
        return cls(layers, n_c=dims[-1], input_shape=(dims[0],))

    @classmethod
    def conv_net(cls, input_shape, n_c, filters=8, kernel=3, hidden=64, seed=0):
        """One conv layer (same-size padding) plus two dense layers."""
        c, h, w = input_shape
        rng = seeding.derive_rng(seed, seeding.TAG_INIT)
        pad = kernel // 2
        fan_in = c * kernel * kernel
        k = ad.Tensor(rng.standard_normal((filters, c, kernel, kernel)) * np.sqrt(2.0 / fan_in),
                      requires_grad=True)
        kb = ad.Tensor(np.zeros(filters), requires_grad=True)
        flat = filters * h * w
        w1 = ad.Tensor(rng.standard_normal((flat, hidden)) * np.sqrt(2.0 / flat), requires_grad=True)
        b1 = ad.Tensor(np.zeros(hidden), requires_grad=True)
        w2 = ad.Tensor(rng.standard_normal((hidden, n_c)) * np.sqrt(2.0 / hidden), requires_grad=True)
        b2 = ad.Tensor(np.zeros(n_c), requires_grad=True)
        layers = [ConvLayer(k, kb, padding=pad, input_hw=(h, w)),
                  DenseLayer(w1, b1), DenseLayer(w2, b2)]
        return cls(layers, n_c=n_c, input_shape=input_shape)

    # -- forward ------------------------------------------------------------

    def forward(self, x) -> ad.Tensor:
        """Scores (B, n_c). Row argmax is the predicted label."""
        t = x if isinstance(x, ad.Tensor) else ad.Tensor(np.asarray(x, dtype=np.float64))
        if t.data.shape[1:] != self.input_shape:
            raise ShapeError(
                f"forward: input {t.data.shape[1:]} does not match network input {self.input_shape}"
            )
        flattened = t.data.ndim == 2
        for layer in self.layers:
            if isinstance(layer, ConvLayer):
                t = ad.conv2d(t, layer.kernel, padding=layer.padding)
                t = ad.add(t, ad.Tensor(layer.bias.data.reshape(-1, 1, 1)))
                t = ad.relu(t)
            else:
                if not flattened:
                    t = ad.flatten(t)
                    flattened = True
                t = ad.add(ad.matmul(t, layer.weight), layer.bias)
                if layer is not self.layers[-1]:
                    t = ad.relu(t)
        return t

    def predict(self, x) -> np.ndarray:
        with ad.no_grad():
            scores = self.forward(x)
        scores.require_finite("network scores")
        return scores.data.argmax(axis=1)

    # -- parameters ---------------------------------------------------------

    def parameters(self):
        out = []
        for layer in self.layers:
            if isinstance(layer, ConvLayer):
                out.extend([layer.kernel, layer.bias])
            else:
                out.extend([layer.weight, layer.bias])
        return out

    def weight_tensors(self):
        """Kernels and dense weights only (no biases)."""
        return [layer.kernel if isinstance(layer, ConvLayer) else layer.weight
                for layer in self.layers]

    @property
    def param_count(self) -> int:
        return sum(layer.param_count() for layer in self.layers)

    @property
    def param_count_single_output(self) -> int:
        """Parameter count with the last layer replaced by a 1-output head."""
        last = self.layers[-1]
        n_in = last.weight.shape[0]
        return self.param_count - (n_in * self.n_c + self.n_c) + (n_in + 1)

    def zero_grads(self):
        for p in self.parameters():
            p.zero_grad()

    def snapshot(self) -> "ParamSnapshot":
        return ParamSnapshot.from_network(self)

    def load_snapshot(self, snap: "ParamSnapshot"):
        own = self.snapshot()
        if own.layer_specs != snap.layer_specs:
            raise ShapeError("snapshot architecture does not match network")
        for tensor, arr in zip(self.parameters(), snap.arrays):
            tensor.data = arr.copy()
            tensor.zero_grad()

    def clone(self) -> "Network":
        return Network.from_snapshot(self.snapshot())

    @classmethod
    def from_snapshot(cls, snap: "ParamSnapshot") -> "Network":
        layers = []
        arrays = iter(snap.arrays)
        for spec in snap.layer_specs:
            if spec["kind"] == "conv":
                kernel = ad.Tensor(next(arrays).copy(), requires_grad=True)
                bias = ad.Tensor(next(arrays).copy(), requires_grad=True)
                layers.append(ConvLayer(kernel, bias, padding=spec["padding"],
                                        input_hw=tuple(spec["input_hw"])))
            else:
                weight = ad.Tensor(next(arrays).copy(), requires_grad=True)
                bias = ad.Tensor(next(arrays).copy(), requires_grad=True)
                layers.append(DenseLayer(weight, bias))
        return cls(layers, n_c=snap.n_c, input_shape=snap.input_shape)


class ParamSnapshot:
    """Flat copy of all parameters with the layer structure preserved."""

    def __init__(self, layer_specs, arrays, n_c, input_shape):
        self.layer_specs = layer_specs
        self.arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
        self.n_c = int(n_c)
        self.input_shape = tuple(int(s) for s in input_shape)

    @classmethod
    def from_network(cls, net: Network) -> "ParamSnapshot":
        specs, arrays = [], []
        for layer in net.layers:
            if isinstance(layer, ConvLayer):
                specs.append({"kind": "conv", "shape": list(layer.kernel.shape),
                              "padding": layer.padding, "input_hw": list(layer.input_hw)})
                arrays.extend([layer.kernel.data.copy(), layer.bias.data.copy()])
            else:
                specs.append({"kind": "dense", "shape": list(layer.weight.shape)})
                arrays.extend([layer.weight.data.copy(), layer.bias.data.copy()])
        return cls(specs, arrays, net.n_c, net.input_shape)

    def save(self, path):
        header = {
            "magic": SNAPSHOT_MAGIC,
            "n_c": self.n_c,
            "input_shape": list(self.input_shape),
            "layers": self.layer_specs,
            "array_shapes": [list(a.shape) for a in self.arrays],
        }
        with open(path, "wb") as fh:
            fh.write(json.dumps(header).encode("utf-8"))
            fh.write(b"\n")
            for arr in self.arrays:
                fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path) -> "ParamSnapshot":
        with open(path, "rb") as fh:
            header_line = fh.readline()
            try:
                header = json.loads(header_line.decode("utf-8"))
            except (UnicodeDecodeError, json.JSONDecodeError) as exc:
                raise FormatError(f"{path}: snapshot header is not valid JSON") from exc
            if header.get("magic") != SNAPSHOT_MAGIC:
                raise FormatError(f"{path}: bad snapshot magic {header.get('magic')!r}")
            arrays = []
            for shape in header["array_shapes"]:
                count = int(np.prod(shape)) if shape else 1
                raw = fh.read(count * 8)
                if len(raw) != count * 8:
                    raise FormatError(f"{path}: truncated snapshot payload")
                arrays.append(np.frombuffer(raw, dtype="<f8").reshape(shape).copy())
        return cls(header["layers"], arrays, header["n_c"], header["input_shape"])

    def weight_arrays(self):
        """(spec, array) pairs for the weight/kernel of each layer, biases skipped."""
        out = []
        idx = 0
        for spec in self.layer_specs:
            out.append((spec, self.arrays[idx]))
            idx += 2
        return out


# ---------------------------------------------------------------------------
# operator matrices and norms

def conv_operator_matrix(kernel, input_shape, padding=0) -> np.ndarray:
    """Matrix M with M @ vec(x) == vec(conv2d(x, kernel)) for every x.

    vec() is row-major over (C, H, W). Construction is by index arithmetic,
    independent of the conv2d forward path.
    """
    kernel = np.asarray(kernel, dtype=np.float64)
    c_out, c_in, k, k2 = kernel.shape
    if k != k2:
        raise ShapeError(f"operator matrix: kernel must be square, got {k}x{k2}")
    ci, h, w = input_shape
    if ci != c_in:
        raise ShapeError(f"operator matrix: input channels {ci} vs kernel channels {c_in}")
    if h + 2 * padding - k + 1 <= 0 or w + 2 * padding - k + 1 <= 0:
        raise ShapeError(
            f"operator matrix: kernel {k}x{k} exceeds padded input "
            f"{h + 2 * padding}x{w + 2 * padding}"
        )
    h_out = h + 2 * padding - k + 1
    w_out = w + 2 * padding - k + 1
    m = np.zeros((c_out * h_out * w_out, c_in * h * w))
    out_rows = np.repeat(np.arange(h_out), w_out)
    out_cols = np.tile(np.arange(w_out), h_out)
    for co in range(c_out):
        out_base = co * h_out * w_out + np.arange(h_out * w_out)
        for cin in range(c_in):
            for u in range(k):
                src_r = out_rows + u - padding
                for v in range(k):
                    src_c = out_cols + v - padding
                    valid = (src_r >= 0) & (src_r < h) & (src_c >= 0) & (src_c < w)
                    in_idx = cin * h * w + src_r[valid] * w + src_c[valid]
                    m[out_base[valid], in_idx] += kernel[co, cin, u, v]
    return m


def spectral_norm(matrix, max_iter=1000, tol=1e-10, seed=0) -> float:
    """Largest singular value by alternating power iteration.

    Deterministic: the start vector comes from a fixed-seed generator.
    Raises PowerIterationError (carrying the last estimate) if the
    estimate has not stabilized to ``tol`` after ``max_iter`` rounds.
    """
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"spectral_norm expects a matrix, got shape {m.shape}")
    if m.size == 0:
        return 0.0
    if not np.all(np.isfinite(m)):
        raise NumericError("spectral_norm: matrix has non-finite entries")
    rng = seeding.derive_rng(seed, seeding.TAG_PROX_START)
    v = rng.standard_normal(m.shape[1])
    v /= np.linalg.norm(v)
    sigma_prev = -1.0
    for _ in range(max_iter):
        u = m @ v
        un = np.linalg.norm(u)
        if un == 0.0:
            return 0.0
        u /= un
        v = m.T @ u
        sigma = np.linalg.norm(v)
        if sigma == 0.0:
            return 0.0
        v /= sigma
        if abs(sigma - sigma_prev) <= tol * max(1.0, sigma):
            return float(sigma)
        sigma_prev = sigma
    raise PowerIterationError(
        f"power iteration did not converge in {max_iter} rounds", last_estimate=float(sigma_prev)
    )


def _layer_operator(spec, array):
    if spec["kind"] == "conv":
        return conv_operator_matrix(array, (array.shape[1], *spec["input_hw"]),
                                    padding=spec["padding"])
    return array


def network_distance(a: ParamSnapshot, b: ParamSnapshot) -> float:
    """Sum over layers of the operator-norm difference. Biases excluded.

    Conv kernels are compared through their operator matrices; the
    operator of a kernel difference equals the difference of operators,
    so only one matrix per layer is built.
    """
    if a.layer_specs != b.layer_specs:
        raise ShapeError("network_distance: snapshots have different architectures")
    total = 0.0
    for (spec, wa), (_, wb) in zip(a.weight_arrays(), b.weight_arrays()):
        total += spectral_norm(_layer_operator(spec, wa - wb))
    return total


def operator_norms(snap: ParamSnapshot):
    """Operator norm of each layer's weight (conv layers via op matrices)."""
    return [spectral_norm(_layer_operator(spec, arr)) for spec, arr in snap.weight_arrays()]
