"""Small dense networks with analytic derivatives, no framework.

A NeuralEquivalence maps (x_ex, z) -> dx_ex/dt through a fully connected
network.  Inputs are the boundary state x_ex concatenated with the feature
vector z named by ``feature_spec``; both input and output pass through
affine normalization layers frozen at training time.  The recurrent flavor
feeds the previous first-hidden-layer activation back into the first layer
pre-activation; the returned hidden state is treated as an exogenous input
by all derivative computations, so gradients do not propagate through time.

Parameters live in one flat vector ``theta`` packed as
[W1, b1, W2, b2, ..., WL, bL, R?] with W row-major (out, in) and R the
(h1, h1) recurrent matrix appended only in the recurrent flavor.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from neudye.errors import ValidationError

ACTIVATIONS = ("tanh", "relu")


def _act(name: str, a: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return np.tanh(a)
    if name == "relu":
        return np.maximum(a, 0.0)
    return a


def _act_grad(name: str, a: np.ndarray, h: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return 1.0 - h * h
    if name == "relu":
        return (a > 0.0).astype(a.dtype)
    return np.ones_like(a)


@dataclass
class NeuralEquivalence:
    """Feedforward (optionally recurrent) surrogate of the boundary dynamics."""

    layer_sizes: list[int]
    activation: str
    feature_spec: list[str]
    theta: np.ndarray
    recurrent: bool = False
    input_shift: np.ndarray | None = None
    input_scale: np.ndarray | None = None
    output_shift: np.ndarray | None = None
    output_scale: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if len(self.layer_sizes) < 2:
            raise ValidationError("layer_sizes needs at least input and output")
        if self.activation not in ACTIVATIONS:
            raise ValidationError(f"unknown activation {self.activation!r}")
        if self.recurrent and len(self.layer_sizes) < 3:
            raise ValidationError("recurrent flavor needs a hidden layer")
        if self.n_ex < 0:
            raise ValidationError("feature_spec longer than the input layer")
        self.theta = np.asarray(self.theta, dtype=float).ravel()
        if self.theta.size != self.n_params:
            raise ValidationError(
                f"theta has {self.theta.size} entries, expected {self.n_params}"
            )
        n_in, n_out = self.layer_sizes[0], self.layer_sizes[-1]
        if self.input_shift is None:
            self.input_shift = np.zeros(n_in)
        if self.input_scale is None:
            self.input_scale = np.ones(n_in)
        if self.output_shift is None:
            self.output_shift = np.zeros(n_out)
        if self.output_scale is None:
            self.output_scale = np.ones(n_out)
        for arr, n in (
            (self.input_shift, n_in),
            (self.input_scale, n_in),
            (self.output_shift, n_out),
            (self.output_scale, n_out),
        ):
            if np.asarray(arr).shape != (n,):
                raise ValidationError("normalization vector shape mismatch")
        if np.any(np.asarray(self.input_scale) <= 0) or np.any(
            np.asarray(self.output_scale) <= 0
        ):
            raise ValidationError("normalization scales must be positive")

    # -- layout ----------------------------------------------------------

    @property
    def n_ex(self) -> int:
        return self.layer_sizes[0] - len(self.feature_spec)

    @property
    def n_hidden(self) -> int:
        return self.layer_sizes[1] if len(self.layer_sizes) > 2 else 0

    @property
    def n_layers(self) -> int:
        return len(self.layer_sizes) - 1

    @property
    def n_params(self) -> int:
        n = 0
        for l in range(1, len(self.layer_sizes)):
            n += self.layer_sizes[l] * (self.layer_sizes[l - 1] + 1)
        if self.recurrent:
            n += self.layer_sizes[1] ** 2
        return n

    def _slices(self, theta: np.ndarray):
        """Yield (W_l, b_l) views over a flat vector, then R if recurrent."""
        out = []
        ofs = 0
        for l in range(1, len(self.layer_sizes)):
            no, ni = self.layer_sizes[l], self.layer_sizes[l - 1]
            w = theta[ofs: ofs + no * ni].reshape(no, ni)
            ofs += no * ni
            b = theta[ofs: ofs + no]
            ofs += no
            out.append((w, b))
        r = None
        if self.recurrent:
            h = self.layer_sizes[1]
            r = theta[ofs: ofs + h * h].reshape(h, h)
        return out, r

    # -- serialization -----------------------------------------------------

    def to_json_dict(self) -> dict:
        layers, r = self._slices(self.theta)
        return {
            "layer_sizes": list(self.layer_sizes),
            "activation": self.activation,
            "theta": [float(t) for t in self.theta],
            "recurrent": None if not self.recurrent else [
                [float(x) for x in row] for row in r
            ],
            "input_norm": [
                [float(sh), float(sc)]
                for sh, sc in zip(self.input_shift, self.input_scale)
            ],
            "output_norm": [
                [float(sh), float(sc)]
                for sh, sc in zip(self.output_shift, self.output_scale)
            ],
            "feature_spec": list(self.feature_spec),
            "meta": self.meta,
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "NeuralEquivalence":
        try:
            rec = doc["recurrent"]
            model = cls(
                layer_sizes=[int(s) for s in doc["layer_sizes"]],
                activation=str(doc["activation"]),
                feature_spec=[str(c) for c in doc["feature_spec"]],
                theta=np.asarray(doc["theta"], dtype=float),
                recurrent=rec is not None,
                input_shift=np.asarray([p[0] for p in doc["input_norm"]], dtype=float),
                input_scale=np.asarray([p[1] for p in doc["input_norm"]], dtype=float),
                output_shift=np.asarray([p[0] for p in doc["output_norm"]], dtype=float),
                output_scale=np.asarray([p[1] for p in doc["output_norm"]], dtype=float),
                meta=dict(doc.get("meta", {})),
            )
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"malformed model document: {exc}") from exc
        if rec is not None:
            _, r = model._slices(model.theta)
            if not np.allclose(np.asarray(rec, dtype=float), r, atol=1e-12, rtol=0):
                raise ValidationError(
                    "recurrent matrix does not match the theta tail block"
                )
        return model

    def save(self, path: str) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path: str) -> "NeuralEquivalence":
        with open(path) as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}: invalid JSON: {exc}") from exc
        return cls.from_json_dict(doc)


def init_params(
    layer_sizes: list[int], recurrent: bool = False, seed: int = 0
) -> np.ndarray:
    """Glorot-uniform weights, zero biases, flat packing."""
    rng = np.random.default_rng(seed)
    parts = []
    for l in range(1, len(layer_sizes)):
        no, ni = layer_sizes[l], layer_sizes[l - 1]
        bound = np.sqrt(6.0 / (ni + no))
        parts.append(rng.uniform(-bound, bound, size=no * ni))
        parts.append(np.zeros(no))
    if recurrent:
        h = layer_sizes[1]
        bound = np.sqrt(6.0 / (h + h))
        parts.append(rng.uniform(-bound, bound, size=h * h))
    return np.concatenate(parts)


def forward_cached(
    model: NeuralEquivalence,
    x_ex: np.ndarray,
    z: np.ndarray,
    hidden: np.ndarray | None = None,
    theta: np.ndarray | None = None,
):
    """Forward pass keeping activations for a later vector-jacobian product.

    Returns (y, hidden_new, cache).  Inputs broadcast over leading axes.
    """
    th = model.theta if theta is None else theta
    layers, r = model._slices(th)
    p, s = model.n_ex, len(model.feature_spec)
    if x_ex.shape[-1] != p or z.shape[-1] != s:
        raise ValidationError(
            f"input split mismatch: got ({x_ex.shape[-1]}, {z.shape[-1]}), "
            f"expected ({p}, {s})"
        )
    if hidden is not None and not model.recurrent:
        raise ValidationError("hidden state passed to a non-recurrent model")
    lead = np.broadcast_shapes(x_ex.shape[:-1], z.shape[:-1])
    u = np.concatenate(
        [np.broadcast_to(x_ex, lead + (p,)), np.broadcast_to(z, lead + (s,))],
        axis=-1,
    )
    un = (u - model.input_shift) / model.input_scale
    acts = [un]
    pres = []
    h = un
    hidden_new = None
    for l, (w, b) in enumerate(layers):
        a = h @ w.T + b
        if l == 0 and model.recurrent:
            if hidden is None:
                hidden = np.zeros(h.shape[:-1] + (model.n_hidden,))
            a = a + hidden @ r.T
        if l < len(layers) - 1:
            h = _act(model.activation, a)
            if l == 0 and model.recurrent:
                hidden_new = h
        else:
            h = a
        pres.append(a)
        acts.append(h)
    y = h * model.output_scale + model.output_shift
    cache = (acts, pres, hidden, th)
    if model.recurrent:
        return y, hidden_new, cache
    return y, None, cache


def forward(
    model: NeuralEquivalence,
    x_ex: np.ndarray,
    z: np.ndarray,
    hidden: np.ndarray | None = None,
    theta: np.ndarray | None = None,
):
    """Network output and new hidden state (None for the dense flavor)."""
    y, hidden_new, _ = forward_cached(model, x_ex, z, hidden, theta)
    return y, hidden_new


def vjp(model: NeuralEquivalence, cache, wbar: np.ndarray):
    """Pull a cotangent of the output back to inputs and parameters.

    Returns (g_xex, g_z, g_theta) where g_theta is flat and summed over any
    leading batch axes; g_xex and g_z keep the batch shape.
    """
    acts, pres, hidden, th = cache
    layers, r = model._slices(th)
    grads_w = [None] * len(layers)
    grads_b = [None] * len(layers)
    g_r = None
    g = wbar * model.output_scale
    for l in range(len(layers) - 1, -1, -1):
        w, _ = layers[l]
        if l < len(layers) - 1:
            g = g * _act_grad(model.activation, pres[l], acts[l + 1])
        hin = acts[l]
        flat_g = g.reshape(-1, g.shape[-1])
        flat_h = hin.reshape(-1, hin.shape[-1])
        grads_w[l] = flat_g.T @ flat_h
        grads_b[l] = flat_g.sum(axis=0)
        if l == 0 and model.recurrent:
            # hidden enters as a constant input; only R picks up a gradient
            flat_hid = hidden.reshape(-1, hidden.shape[-1])
            g_r = flat_g.T @ flat_hid
        g = g @ w
    gu = g / model.input_scale
    p = model.n_ex
    parts = []
    for gw, gb in zip(grads_w, grads_b):
        parts.append(gw.ravel())
        parts.append(gb)
    if model.recurrent:
        parts.append(g_r.ravel())
    return gu[..., :p], gu[..., p:], np.concatenate(parts)


def jacobians(
    model: NeuralEquivalence,
    x_ex: np.ndarray,
    z: np.ndarray,
    hidden: np.ndarray | None = None,
    theta: np.ndarray | None = None,
):
    """Exact jacobians (dy/dx_ex, dy/dz, dy/dtheta) at one input point."""
    if x_ex.ndim != 1 or z.ndim != 1:
        raise ValidationError("jacobians expects single unbatched inputs")
    y, _, cache = forward_cached(model, x_ex, z, hidden, theta)
    n_out = model.layer_sizes[-1]
    jx = np.zeros((n_out, model.n_ex))
    jz = np.zeros((n_out, len(model.feature_spec)))
    jt = np.zeros((n_out, model.n_params))
    for i in range(n_out):
        e = np.zeros(n_out)
        e[i] = 1.0
        gx, gz, gt = vjp(model, cache, e)
        jx[i], jz[i], jt[i] = gx, gz, gt
    return jx, jz, jt


def select_features(traj, feature_spec: list[str]) -> np.ndarray:
    """Project trajectory columns onto the named channels, in order."""
    missing = [c for c in feature_spec if c not in traj.channels]
    if missing:
        raise ValidationError(f"trajectory lacks channels: {missing}")
    idx = [traj.channels.index(c) for c in feature_spec]
    return np.asarray(traj.data)[:, idx]


def normalize_from_data(model: NeuralEquivalence, inputs: np.ndarray,
                        targets: np.ndarray, floor: float = 1.0e-8) -> None:
    """Freeze input/output normalization from sample matrices (rows = samples)."""
    n_in, n_out = model.layer_sizes[0], model.layer_sizes[-1]
    if inputs.shape[1] != n_in or targets.shape[1] != n_out:
        raise ValidationError("normalization sample width mismatch")
    model.input_shift = inputs.mean(axis=0)
    model.input_scale = np.maximum(inputs.std(axis=0), floor)
    model.output_shift = targets.mean(axis=0)
    model.output_scale = np.maximum(targets.std(axis=0), floor)
