"""Multi-scale lattice segmentation network.

An architecture string like "C32-B64-B128-B256-C128-Cx" describes a stack of
1x1 point convolutions (C<width>) and bilateral convolution layers
(B<width>). The t-th BCL (t = 0, 1, ...) filters on a lattice built from the
cloud's lattice features at scale lambda0 / 2^t, so receptive fields double
at every BCL. After the last BCL, the responses of all BCLs are concatenated
and fed to the remaining 1x1 convolutions; a trailing "Cx" takes its width
from num_classes. Every parameterized layer except the final convolution is
followed by batch normalization (over the point dimension) and ReLU, and
class probabilities come from a row-wise softmax.

forward() returns probabilities plus a tape. In training mode the tape holds
everything backward() needs for exact parameter and input gradients; batch
norm uses batch statistics and stages running-statistic updates on the tape,
which commit_running_stats() folds into the parameters (so probing forwards,
e.g. finite differences, leave no trace). Inference mode uses the stored
running statistics and keeps no backward state.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from . import bcl
from .errors import ConfigError, InvalidInput, ParseError, ShapeError, StateError
from .lattice import LatticeConfig

BN_EPS = 1e-5
BN_MOMENTUM = 0.9  # running = momentum * running + (1 - momentum) * batch


@dataclass(frozen=True)
class Conv1x1Spec:
    width: int
    final: bool = False


@dataclass(frozen=True)
class BCLSpec:
    width: int
    level: int  # lattice scale is lambda0 / 2**level
    normalize: bool = True


@dataclass(frozen=True)
class BatchNormSpec:
    pass


@dataclass(frozen=True)
class ReLUSpec:
    pass


@dataclass(frozen=True)
class ConcatSpec:
    sources: tuple[int, ...]  # layer indices of the BCL block outputs


@dataclass(frozen=True)
class SoftmaxSpec:
    pass


@dataclass(frozen=True)
class NetworkSpec:
    arch: str
    layers: tuple
    lattice: LatticeConfig  # base config; BCL level t divides scale by 2^t
    num_classes: int
    num_bcl: int

    def bcl_config(self, level: int) -> LatticeConfig:
        return self.lattice.scaled_by(0.5**level)


_TOKEN = re.compile(r"^([CB])(\d+|x)$")


def parse_arch(
    text: str,
    lattice: LatticeConfig,
    num_classes: int | None = None,
    normalize: bool = True,
) -> NetworkSpec:
    """Parse an architecture string into a NetworkSpec.

    Requires at least one B token and a final C token; "x" is only legal as
    the final C width and resolves to num_classes. A literal final width must
    agree with num_classes when both are given.
    """
    tokens = text.split("-")
    parsed = []
    for pos, tok in enumerate(tokens):
        m = _TOKEN.match(tok)
        if m is None:
            raise ParseError(f"bad architecture token {tok!r} at position {pos} in {text!r}")
        kind, width = m.group(1), m.group(2)
        if width == "x" and (kind != "C" or pos != len(tokens) - 1):
            raise ParseError(f"token {tok!r} at position {pos}: 'x' is only legal as the final C width")
        parsed.append((pos, kind, width))
    if not any(kind == "B" for _, kind, _ in parsed):
        raise ParseError(f"architecture {text!r} has no B layer")
    if parsed[-1][1] != "C":
        raise ParseError(f"architecture {text!r} must end with a C layer")

    final_width = parsed[-1][2]
    if final_width == "x":
        if num_classes is None:
            raise ParseError("architecture ends in 'Cx' but num_classes was not given")
        final_width = int(num_classes)
    else:
        final_width = int(final_width)
        if num_classes is not None and num_classes != final_width:
            raise ParseError(
                f"final layer width {final_width} disagrees with num_classes {num_classes}"
            )
    if final_width < 1:
        raise ParseError("output layer needs at least one class")

    last_b = max(pos for pos, kind, _ in parsed if kind == "B")
    layers: list = []
    bcl_outputs: list[int] = []
    level = 0
    concat_placed = False
    for pos, kind, width in parsed:
        if kind == "B":
            layers.append(BCLSpec(width=int(width), level=level, normalize=normalize))
            layers.append(BatchNormSpec())
            layers.append(ReLUSpec())
            bcl_outputs.append(len(layers) - 1)
            level += 1
            continue
        if pos > last_b and not concat_placed:
            layers.append(ConcatSpec(sources=tuple(bcl_outputs)))
            concat_placed = True
        if pos == len(parsed) - 1:
            layers.append(Conv1x1Spec(width=final_width, final=True))
        else:
            layers.append(Conv1x1Spec(width=int(width)))
            layers.append(BatchNormSpec())
            layers.append(ReLUSpec())
    layers.append(SoftmaxSpec())

    return NetworkSpec(
        arch=text,
        layers=tuple(layers),
        lattice=lattice,
        num_classes=final_width,
        num_bcl=level,
    )


def resolved_arch(spec: NetworkSpec) -> str:
    """Architecture string with a trailing 'x' replaced by the class count."""
    tokens = spec.arch.split("-")
    if tokens[-1] == "Cx":
        tokens[-1] = f"C{spec.num_classes}"
    return "-".join(tokens)


def _layer_widths(spec: NetworkSpec, input_dim: int) -> list[int]:
    """Output width of every layer given the input feature width."""
    widths: list[int] = []
    cur = input_dim
    for layer in spec.layers:
        if isinstance(layer, (Conv1x1Spec, BCLSpec)):
            cur = layer.width
        elif isinstance(layer, ConcatSpec):
            cur = sum(widths[s] for s in layer.sources)
        widths.append(cur)
    return widths


def init_parameters(spec: NetworkSpec, input_dim: int, rng: np.random.Generator) -> list[dict]:
    """Fresh parameters: zero-mean uniform weights with variance 2 / fan_in.

    fan_in is C_in for 1x1 convolutions and K * C_in for BCLs. Biases start
    at zero, batch-norm gains at one.
    """
    if input_dim < 1:
        raise InvalidInput(f"input_dim must be >= 1, got {input_dim}")
    taps = 2 ** (spec.lattice.dim + 1) - 1
    params: list[dict] = []
    cur = input_dim
    widths = _layer_widths(spec, input_dim)
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, Conv1x1Spec):
            bound = np.sqrt(6.0 / cur)
            params.append(
                {
                    "weight": rng.uniform(-bound, bound, size=(cur, layer.width)),
                    "bias": np.zeros(layer.width),
                }
            )
        elif isinstance(layer, BCLSpec):
            bound = np.sqrt(6.0 / (taps * cur))
            params.append(
                {
                    "weight": rng.uniform(-bound, bound, size=(taps, cur, layer.width)),
                    "bias": np.zeros(layer.width),
                }
            )
        elif isinstance(layer, BatchNormSpec):
            params.append(
                {
                    "gamma": np.ones(cur),
                    "beta": np.zeros(cur),
                    "running_mean": np.zeros(cur),
                    "running_var": np.ones(cur),
                }
            )
        else:
            params.append({})
        cur = widths[i]
    return params


# Keys that the optimizer updates; running stats are excluded.
_TRAINABLE = ("weight", "bias", "gamma", "beta")


def named_parameters(params: list[dict]):
    """Yield (layer_index, key, array) for every trainable tensor, in order."""
    for i, tensors in enumerate(params):
        for key in _TRAINABLE:
            if key in tensors:
                yield i, key, tensors[key]


def zero_like_parameters(params: list[dict]) -> list[dict]:
    return [
        {k: np.zeros_like(v) for k, v in tensors.items() if k in _TRAINABLE}
        for tensors in params
    ]


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_grad(grad_probs: np.ndarray, probs: np.ndarray) -> np.ndarray:
    """Cotangent at the logits given one at the probabilities."""
    inner = np.sum(grad_probs * probs, axis=1, keepdims=True)
    return probs * (grad_probs - inner)


def prepare_descriptors(spec: NetworkSpec, lattice_features: np.ndarray) -> list[bcl.BCLDescriptor]:
    """Build the per-BCL lattices and descriptors for one cloud.

    One descriptor per BCL layer, in layer order. Reusable across any number
    of forward/backward passes on the same cloud.
    """
    descs = []
    for layer in spec.layers:
        if isinstance(layer, BCLSpec):
            descs.append(
                bcl.make_descriptor(
                    lattice_features, None, spec.bcl_config(layer.level), normalize=layer.normalize
                )
            )
    return descs


@dataclass
class Tape:
    """Per-forward record binding activations to the spec that produced them."""

    spec: NetworkSpec
    training: bool
    num_points: int
    saved: list  # per-layer backward state (None in inference mode)
    outputs: list  # per-layer output arrays
    descriptors: list  # per-BCL descriptors, in layer order
    pending_running: dict = field(default_factory=dict)  # bn layer idx -> (mean, var)


def forward(
    spec: NetworkSpec,
    params: list[dict],
    features: np.ndarray,
    lattice_features: np.ndarray,
    training: bool = False,
    descriptors: list | None = None,
) -> tuple[np.ndarray, Tape]:
    """Run the network on one cloud; returns (probabilities, tape).

    features: (n, d_f) input channels. lattice_features: (n, d_l) channels the
    lattices are built from. Pass descriptors from prepare_descriptors to
    reuse lattices across calls on the same cloud.
    """
    features = np.asarray(features, dtype=np.float64)
    lattice_features = np.asarray(lattice_features, dtype=np.float64)
    if features.ndim != 2:
        raise ShapeError(f"features must be 2-d, got shape {features.shape}")
    if lattice_features.shape != (features.shape[0], spec.lattice.dim):
        raise ShapeError(
            f"lattice features must be ({features.shape[0]}, {spec.lattice.dim}), "
            f"got {lattice_features.shape}"
        )
    if len(params) != len(spec.layers):
        raise ConfigError("parameter list does not match the architecture")
    first = next(i for i, l in enumerate(spec.layers) if isinstance(l, (Conv1x1Spec, BCLSpec)))
    expected = params[first]["weight"].shape[-2]
    if features.shape[1] != expected:
        raise ConfigError(
            f"network expects {expected} input channels, features have {features.shape[1]}"
        )

    if descriptors is None:
        descriptors = prepare_descriptors(spec, lattice_features)
    if len(descriptors) != spec.num_bcl:
        raise ConfigError(f"expected {spec.num_bcl} descriptors, got {len(descriptors)}")

    n = features.shape[0]
    tape = Tape(
        spec=spec,
        training=training,
        num_points=n,
        saved=[None] * len(spec.layers),
        outputs=[None] * len(spec.layers),
        descriptors=descriptors,
    )
    x = features
    bcl_seen = 0
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, Conv1x1Spec):
            if training:
                tape.saved[i] = x
            x = x @ params[i]["weight"] + params[i]["bias"]
        elif isinstance(layer, BCLSpec):
            bank = bcl.FilterBank(params[i]["weight"], params[i]["bias"])
            x, state = bcl.bcl_forward(x, descriptors[bcl_seen], bank)
            bcl_seen += 1
            if training:
                tape.saved[i] = state
            else:
                state.release()
        elif isinstance(layer, BatchNormSpec):
            p = params[i]
            if training:
                mean = x.mean(axis=0)
                var = x.var(axis=0)
                inv = 1.0 / np.sqrt(var + BN_EPS)
                xhat = (x - mean) * inv
                tape.saved[i] = (xhat, inv)
                tape.pending_running[i] = (
                    BN_MOMENTUM * p["running_mean"] + (1.0 - BN_MOMENTUM) * mean,
                    BN_MOMENTUM * p["running_var"] + (1.0 - BN_MOMENTUM) * var,
                )
            else:
                inv = 1.0 / np.sqrt(p["running_var"] + BN_EPS)
                xhat = (x - p["running_mean"]) * inv
            x = p["gamma"] * xhat + p["beta"]
        elif isinstance(layer, ReLUSpec):
            if training:
                tape.saved[i] = x > 0
            x = np.maximum(x, 0.0)
        elif isinstance(layer, ConcatSpec):
            x = np.concatenate([tape.outputs[s] for s in layer.sources], axis=1)
        elif isinstance(layer, SoftmaxSpec):
            x = softmax(x)
            tape.saved[i] = x if training else None
        tape.outputs[i] = x
    return x, tape


def backward(
    tape: Tape, params: list[dict], grad_probs: np.ndarray
) -> tuple[list[dict], np.ndarray]:
    """Exact gradients for every trainable tensor plus the input features.

    grad_probs is the cotangent at the probabilities. Layers whose outputs
    feed several consumers (BCL responses feeding both the next layer and the
    concat) have their gradients accumulated. Raises StateError on an
    inference tape.
    """
    if not tape.training:
        raise StateError("backward requires a tape recorded in training mode")
    spec = tape.spec
    grad_probs = np.asarray(grad_probs, dtype=np.float64)
    if grad_probs.shape != tape.outputs[-1].shape:
        raise ShapeError(
            f"grad_probs shape {grad_probs.shape} != probabilities shape {tape.outputs[-1].shape}"
        )

    grads = zero_like_parameters(params)
    # pending[i] is the cotangent at layer i's output; index -1 is the input.
    pending: dict[int, np.ndarray] = {len(spec.layers) - 1: grad_probs}

    def send(idx: int, g: np.ndarray) -> None:
        if idx in pending:
            pending[idx] = pending[idx] + g
        else:
            pending[idx] = g

    for i in range(len(spec.layers) - 1, -1, -1):
        if i not in pending:
            continue
        g = pending.pop(i)
        layer = spec.layers[i]
        if isinstance(layer, Conv1x1Spec):
            x = tape.saved[i]
            grads[i]["weight"][...] = x.T @ g
            grads[i]["bias"][...] = g.sum(axis=0)
            send(i - 1, g @ params[i]["weight"].T)
        elif isinstance(layer, BCLSpec):
            pair = bcl.bcl_backward(tape.saved[i], g)
            grads[i]["weight"][...] = pair.grad_weights
            grads[i]["bias"][...] = pair.grad_bias
            send(i - 1, pair.grad_input)
        elif isinstance(layer, BatchNormSpec):
            xhat, inv = tape.saved[i]
            n = xhat.shape[0]
            gamma = params[i]["gamma"]
            grads[i]["gamma"][...] = np.sum(g * xhat, axis=0)
            grads[i]["beta"][...] = g.sum(axis=0)
            gx = g * gamma
            gxm = gx.mean(axis=0)
            gxxm = np.mean(gx * xhat, axis=0)
            send(i - 1, inv * (gx - gxm - xhat * gxxm))
        elif isinstance(layer, ReLUSpec):
            send(i - 1, g * tape.saved[i])
        elif isinstance(layer, ConcatSpec):
            offset = 0
            for s in layer.sources:
                width = tape.outputs[s].shape[1]
                send(s, g[:, offset : offset + width])
                offset += width
        elif isinstance(layer, SoftmaxSpec):
            send(i - 1, softmax_grad(g, tape.saved[i]))
    grad_input = pending.pop(-1, np.zeros_like(tape.outputs[0], shape=(tape.num_points, 0)))
    return grads, grad_input


def commit_running_stats(tape: Tape, params: list[dict]) -> None:
    """Fold the tape's staged batch-norm running-stat updates into params."""
    for i, (mean, var) in tape.pending_running.items():
        params[i]["running_mean"][...] = mean
        params[i]["running_var"][...] = var
    tape.pending_running.clear()


def predict(probabilities: np.ndarray) -> np.ndarray:
    """Per-point class labels; ties resolve to the lowest class index."""
    probabilities = np.asarray(probabilities)
    if probabilities.ndim != 2:
        raise ShapeError(f"probabilities must be 2-d, got shape {probabilities.shape}")
    return np.argmax(probabilities, axis=1).astype(np.int64)
