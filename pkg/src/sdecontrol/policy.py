"""Feed-forward control policy with exact, hand-rolled vector-Jacobian products.

The network is a fixed stack of affine layers with an elementwise hidden
activation and an output activation (softplus by default, which keeps control
rates strictly positive so cumulative trade processes are nondecreasing).
Reverse mode is written out per layer instead of using a tape: the
architecture is small and fixed-depth, and every VJP is tested against
finite differences.

All methods broadcast over leading batch axes of the input.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigurationError

__all__ = ["Activation", "MlpPolicy", "init_params", "save_policy", "load_policy"]


def _sigmoid(x):
    x = np.asarray(x, dtype=float)
    t = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + t), t / (1.0 + t))


class Activation:
    """Scalar nonlinearity identified by tag, with value and derivative."""

    _TABLE = {
        "softplus": (lambda x: np.logaddexp(0.0, x), lambda x: _sigmoid(np.asarray(x, dtype=float))),
        "tanh": (np.tanh, lambda x: 1.0 - np.tanh(x) ** 2),
        "identity": (lambda x: np.asarray(x, dtype=float), lambda x: np.ones_like(np.asarray(x, dtype=float))),
    }

    def __init__(self, tag: str):
        if tag not in self._TABLE:
            raise ConfigurationError(f"unknown activation {tag!r}")
        self.tag = tag
        self.value, self.deriv = self._TABLE[tag]

    def __repr__(self):
        return f"Activation({self.tag!r})"


class MlpPolicy:
    """MLP control map u(x); parameters live in weight/bias arrays.

    The flattened parameter vector concatenates, layer by layer, the weight
    matrix in row-major order followed by the bias.
    """

    def __init__(
        self,
        weights,
        biases,
        hidden_activation="tanh",
        output_activation="softplus",
        with_time=False,
        seed=None,
    ):
        if len(weights) != len(biases) or not weights:
            raise ConfigurationError("weights and biases must be non-empty and aligned")
        for k, (w, b) in enumerate(zip(weights, biases)):
            if w.shape[0] != b.shape[0]:
                raise ConfigurationError(f"layer {k}: weight rows != bias length")
            if k and w.shape[1] != weights[k - 1].shape[0]:
                raise ConfigurationError(f"layer {k}: input width mismatch")
        self.weights = [np.array(w, dtype=float) for w in weights]
        self.biases = [np.array(b, dtype=float) for b in biases]
        self.hidden = Activation(hidden_activation)
        self.output = Activation(output_activation)
        self.with_time = bool(with_time)
        self.seed = seed

    # -- shape / parameter plumbing -------------------------------------

    @property
    def layer_dims(self):
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def n_in(self):
        return self.weights[0].shape[1]

    @property
    def n_out(self):
        return self.weights[-1].shape[0]

    @property
    def n_params(self):
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def get_params(self) -> np.ndarray:
        return np.concatenate(
            [np.concatenate([w.ravel(), b]) for w, b in zip(self.weights, self.biases)]
        )

    def set_params(self, theta) -> None:
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.n_params,):
            raise ConfigurationError(
                f"parameter vector has length {theta.shape}, expected ({self.n_params},)"
            )
        off = 0
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            self.weights[k] = theta[off : off + w.size].reshape(w.shape).copy()
            off += w.size
            self.biases[k] = theta[off : off + b.size].copy()
            off += b.size

    def flatten_layer_grads(self, grads) -> np.ndarray:
        """Flatten per-layer (dW, db) pairs in parameter order; batch axes kept."""
        batch = grads[0][1].shape[:-1]
        parts = []
        for gw, gb in grads:
            parts.append(gw.reshape(batch + (-1,)))
            parts.append(gb)
        return np.concatenate(parts, axis=-1)

    # -- evaluation and derivatives -------------------------------------

    def _forward(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.n_in:
            raise ConfigurationError(
                f"input has width {x.shape[-1]}, network expects {self.n_in}"
            )
        acts = [x]
        pres = []
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = acts[-1] @ w.T + b
            pres.append(z)
            phi = self.output if k == last else self.hidden
            acts.append(phi.value(z))
        return acts, pres

    def eval(self, x) -> np.ndarray:
        """Network output for input of shape (..., n_in)."""
        acts, _ = self._forward(x)
        return acts[-1]

    def control(self, t, x) -> np.ndarray:
        """Feedback control at (t, x); time is appended to the input only when
        the policy was built with with_time=True."""
        if self.with_time:
            x = np.asarray(x, dtype=float)
            tcol = np.broadcast_to(float(t), x.shape[:-1] + (1,))
            x = np.concatenate([x, tcol], axis=-1)
        return self.eval(x)

    def _backward(self, acts, pres, cotangent, want_params):
        last = len(self.weights) - 1
        delta = np.asarray(cotangent, dtype=float) * self.output.deriv(pres[last])
        grads = [None] * len(self.weights)
        for k in range(last, -1, -1):
            if want_params:
                gw = np.einsum("...o,...i->...oi", delta, acts[k])
                grads[k] = (gw, delta)
            if k:
                delta = (delta @ self.weights[k]) * self.hidden.deriv(pres[k - 1])
            else:
                delta = delta @ self.weights[0]
        return delta, grads

    def vjp_input(self, x, cotangent) -> np.ndarray:
        """cotangent^T @ d eval/d input, shape (..., n_in)."""
        acts, pres = self._forward(x)
        dx, _ = self._backward(acts, pres, cotangent, want_params=False)
        return dx

    def vjp_params_layers(self, x, cotangent):
        """Per-layer (dW, db) cotangent products; cheaper than flattening."""
        acts, pres = self._forward(x)
        _, grads = self._backward(acts, pres, cotangent, want_params=True)
        return grads

    def vjp_params(self, x, cotangent) -> np.ndarray:
        """cotangent^T @ d eval/d theta in flattened parameter order."""
        return self.flatten_layer_grads(self.vjp_params_layers(x, cotangent))

    def _jacobian(self, x, which):
        x = np.asarray(x, dtype=float)
        batch_ndim = x.ndim - 1
        eye = np.eye(self.n_out)
        cot = eye.reshape((self.n_out,) + (1,) * batch_ndim + (self.n_out,))
        acts, pres = self._forward(x)
        if which == "input":
            out, _ = self._backward(acts, pres, cot, want_params=False)
        else:
            _, grads = self._backward(acts, pres, cot, want_params=True)
            out = self.flatten_layer_grads(grads)
        return np.moveaxis(out, 0, -2)  # (..., n_out, n_in|n_theta)

    def jacobian_input(self, x) -> np.ndarray:
        return self._jacobian(x, "input")

    def jacobian_params(self, x) -> np.ndarray:
        return self._jacobian(x, "params")


def init_params(
    layer_dims,
    seed,
    hidden_activation="tanh",
    output_activation="softplus",
    with_time=False,
) -> MlpPolicy:
    """Fresh policy: weights uniform in +-1/sqrt(fan_in), biases zero.

    Deterministic in `seed` (Philox counter-based generator).
    """
    if len(layer_dims) < 2 or any(d < 1 for d in layer_dims):
        raise ConfigurationError(f"invalid layer_dims {layer_dims}")
    rng = np.random.Generator(np.random.Philox(key=seed))
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
        scale = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-scale, scale, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MlpPolicy(
        weights,
        biases,
        hidden_activation=hidden_activation,
        output_activation=output_activation,
        with_time=with_time,
        seed=seed,
    )


CHECKPOINT_MAGIC = "sdecontrol-policy-v1"


def save_policy(policy: MlpPolicy, path) -> None:
    """Text checkpoint: header (architecture, activations, seed) then one
    parameter per line at 17 significant digits."""
    theta = policy.get_params()
    with open(path, "w") as fh:
        fh.write(f"# {CHECKPOINT_MAGIC}\n")
        fh.write("layer_dims: " + ",".join(str(d) for d in policy.layer_dims) + "\n")
        fh.write(f"hidden_activation: {policy.hidden.tag}\n")
        fh.write(f"output_activation: {policy.output.tag}\n")
        fh.write(f"with_time: {int(policy.with_time)}\n")
        fh.write(f"seed: {policy.seed if policy.seed is not None else -1}\n")
        fh.write(f"n_params: {policy.n_params}\n")
        for v in theta:
            fh.write(f"{v:.17g}\n")


def load_policy(path) -> MlpPolicy:
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    if not lines or lines[0] != f"# {CHECKPOINT_MAGIC}":
        raise ConfigurationError(f"{path} is not a policy checkpoint")
    header = {}
    idx = 1
    while idx < len(lines) and ":" in lines[idx]:
        key, _, val = lines[idx].partition(":")
        header[key.strip()] = val.strip()
        idx += 1
        if key.strip() == "n_params":
            break
    try:
        layer_dims = [int(d) for d in header["layer_dims"].split(",")]
        n_params = int(header["n_params"])
        seed = int(header["seed"])
    except (KeyError, ValueError) as exc:
        raise ConfigurationError(f"malformed checkpoint header in {path}") from exc
    theta = np.array([float(v) for v in lines[idx : idx + n_params]])
    if theta.size != n_params:
        raise ConfigurationError(f"checkpoint {path} truncated")
    policy = init_params(
        layer_dims,
        seed=max(seed, 0),
        hidden_activation=header["hidden_activation"],
        output_activation=header["output_activation"],
        with_time=bool(int(header["with_time"])),
    )
    policy.seed = None if seed < 0 else seed
    policy.set_params(theta)
    return policy
