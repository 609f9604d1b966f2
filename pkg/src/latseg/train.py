"""Cross-entropy training: Adam, geometric augmentation, resumable loops.

Every random draw in the loop comes from a stream seeded by a pure function
of (base seed, stream tag, iteration, batch slot). Nothing carries hidden
RNG state between iterations, so a run resumed from a saved state at
iteration k replays iterations k, k+1, ... exactly as the original run
would have executed them.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import network
from .checkpoint import load_train_state, save_checkpoint, save_train_state
from .errors import (
    ConfigError,
    DegenerateBatch,
    EmptyInput,
    InvalidInput,
    NonFiniteGradient,
    ShapeError,
)

_AXIS_INDEX = {"x": 0, "y": 1, "z": 2}

PROB_FLOOR = 1e-12

# stream tags for SeedSequence spawn keys
_STREAM_ORDER = 0
_STREAM_CROP = 1
_STREAM_AUGMENT = 2
_STREAM_INIT = 3


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer, batching, and augmentation settings.

    learning_rate accepts 0 so a frozen run can be used as a no-op baseline.
    batch_size counts clouds accumulated per optimizer step.
    """

    learning_rate: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    batch_size: int = 1
    max_iterations: int = 100
    rotate: bool = False
    rotate_full_sphere: bool = False
    translate: bool = False
    scale: bool = False
    color_jitter: bool = False
    translate_magnitude: float = 0.1
    scale_low: float = 0.9
    scale_high: float = 1.1
    color_jitter_magnitude: float = 0.05
    sample_size: int | None = None
    seed: int = 0
    ignore_label: int | None = None
    gravity_axis: str = "y"
    log_every: int = 1
    checkpoint_every: int = 0
    patience: int | None = None

    def __post_init__(self):
        if self.learning_rate < 0:
            raise InvalidInput("learning_rate must be >= 0")
        for name in ("adam_beta1", "adam_beta2"):
            b = getattr(self, name)
            if not 0.0 <= b < 1.0:
                raise InvalidInput(f"{name} must lie in [0, 1), got {b!r}")
        if self.adam_epsilon <= 0:
            raise InvalidInput("adam_epsilon must be positive")
        if self.batch_size < 1:
            raise InvalidInput("batch_size must be >= 1")
        if self.max_iterations < 0:
            raise InvalidInput("max_iterations must be >= 0")
        if self.sample_size is not None and self.sample_size < 1:
            raise InvalidInput("sample_size must be >= 1 when given")
        if not 0 < self.scale_low <= self.scale_high:
            raise InvalidInput("need 0 < scale_low <= scale_high")
        if self.translate_magnitude < 0 or self.color_jitter_magnitude < 0:
            raise InvalidInput("augmentation magnitudes must be >= 0")
        if self.gravity_axis not in _AXIS_INDEX:
            raise InvalidInput(f"gravity_axis must be one of x/y/z, got {self.gravity_axis!r}")
        if not 0 <= self.seed < 2 ** 64:
            raise InvalidInput("seed must be a 64-bit unsigned integer")
        if self.log_every < 1:
            raise InvalidInput("log_every must be >= 1")
        if self.checkpoint_every < 0:
            raise InvalidInput("checkpoint_every must be >= 0")
        if self.patience is not None and self.patience < 1:
            raise InvalidInput("patience must be >= 1 when given")


def _stream(seed, *key):
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=key))


# -------------------------------------------------------------------- loss


def cross_entropy_loss(probabilities, labels, ignore_label=None):
    """Mean negative log probability of the true class.

    Probabilities are floored at 1e-12 inside the log; rows whose label
    equals ignore_label contribute nothing, including to the gradient.
    Returns (loss, gradient w.r.t. probabilities).
    """
    probs = np.asarray(probabilities, dtype=np.float64)
    labels = np.asarray(labels).reshape(-1)
    if probs.ndim != 2:
        raise ShapeError(f"probabilities must be 2-D, got shape {probs.shape}")
    n, c = probs.shape
    if labels.shape[0] != n:
        raise ShapeError(f"{labels.shape[0]} labels for {n} probability rows")
    if ignore_label is None:
        mask = np.ones(n, dtype=bool)
    else:
        mask = labels != ignore_label
    live = labels[mask]
    if live.size and (live.min() < 0 or live.max() >= c):
        raise InvalidInput(f"labels must lie in [0, {c}) or equal the ignore label")
    m = int(mask.sum())
    if m == 0:
        raise DegenerateBatch("every point in the batch is ignored")
    rows = np.nonzero(mask)[0]
    picked = probs[rows, live]
    floored = np.maximum(picked, PROB_FLOOR)
    loss = float(-np.log(floored).mean())
    grad = np.zeros_like(probs)
    # below the floor the loss is flat, so those entries keep gradient zero
    active = picked >= PROB_FLOOR
    grad[rows[active], live[active]] = -1.0 / (m * picked[active])
    return loss, grad


# -------------------------------------------------------------------- adam


@dataclass
class OptimizerState:
    first_moment: list[dict]
    second_moment: list[dict]
    step: int = 0


def init_optimizer(params):
    return OptimizerState(
        first_moment=network.zero_like_parameters(params),
        second_moment=network.zero_like_parameters(params),
        step=0,
    )


def adam_step(params, grads, state, config):
    """One bias-corrected Adam update, in place.

    The whole step is refused (nothing mutated, counter untouched) if any
    gradient entry is not finite.
    """
    for i, key, g in network.named_parameters(grads):
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"gradient for layer {i} {key!r} is not finite")
    t = state.step + 1
    b1, b2 = config.adam_beta1, config.adam_beta2
    lr, eps = config.learning_rate, config.adam_epsilon
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for i, key, g in network.named_parameters(grads):
        m = state.first_moment[i][key]
        v = state.second_moment[i][key]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        params[i][key] -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    state.step = t


# ------------------------------------------------------------ augmentation


def _gravity_rotation(axis_index, angle):
    c, s = np.cos(angle), np.sin(angle)
    i, j = [k for k in range(3) if k != axis_index]
    rot = np.eye(3)
    rot[i, i] = c
    rot[i, j] = -s
    rot[j, i] = s
    rot[j, j] = c
    return rot


def _random_rotation(rng):
    # uniform over SO(3) via a normalized random quaternion
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def augment(cloud, config, rng):
    """Random rotation, translation, isotropic scale, and color jitter.

    Applied in that fixed order; normals rotate with positions but are
    untouched by translation and scale; labels never change. With every
    switch off the input cloud is returned as is.
    """
    if config.color_jitter and cloud.rgb is None:
        raise ConfigError("color_jitter requested but the cloud has no rgb channel")
    if not (config.rotate or config.translate or config.scale or config.color_jitter):
        return cloud
    positions = cloud.positions
    normals = cloud.normals
    rgb = cloud.rgb
    if config.rotate:
        if config.rotate_full_sphere:
            rot = _random_rotation(rng)
        else:
            angle = rng.uniform(0.0, 2.0 * np.pi)
            rot = _gravity_rotation(_AXIS_INDEX[config.gravity_axis], angle)
        positions = positions @ rot.T
        if normals is not None:
            normals = normals @ rot.T
    if config.translate:
        mag = config.translate_magnitude
        positions = positions + rng.uniform(-mag, mag, size=3)
    if config.scale:
        positions = positions * rng.uniform(config.scale_low, config.scale_high)
    if config.color_jitter:
        mag = config.color_jitter_magnitude
        rgb = np.clip(rgb + rng.uniform(-mag, mag, size=rgb.shape), 0.0, 1.0)
    return cloud.replace(positions=positions, normals=normals, rgb=rgb)


# -------------------------------------------------------------------- loop


@dataclass
class TrainResult:
    params: list[dict]
    optimizer: OptimizerState
    iterations: int
    history: list[tuple] = field(default_factory=list)
    stopped_early: bool = False


def _cloud_tensors(cloud, feature_channels, lattice_channels, gravity_axis):
    features = cloud.channel_matrix(feature_channels, gravity_axis)
    lattice_feats = cloud.channel_matrix(lattice_channels, gravity_axis)
    return features, lattice_feats


def evaluate(spec, params, dataset, feature_channels=("xyz",),
             lattice_channels=("xyz",), ignore_label=None, gravity_axis="y"):
    """(mean loss, pooled accuracy) of inference-mode predictions."""
    if not dataset:
        raise EmptyInput("nothing to evaluate")
    losses, correct, total = [], 0, 0
    for cloud in dataset:
        features, lattice_feats = _cloud_tensors(
            cloud, feature_channels, lattice_channels, gravity_axis
        )
        probs, _ = network.forward(spec, params, features, lattice_feats)
        loss, _ = cross_entropy_loss(probs, cloud.labels, ignore_label)
        losses.append(loss)
        pred = network.predict(probs)
        mask = np.ones(cloud.num_points, bool) if ignore_label is None \
            else cloud.labels != ignore_label
        correct += int((pred[mask] == cloud.labels[mask]).sum())
        total += int(mask.sum())
    return float(np.mean(losses)), correct / max(total, 1)


def train_loop(spec, dataset, config, *,
               feature_channels=("xyz",),
               lattice_channels=("xyz",),
               params=None,
               opt_state=None,
               start_iteration=0,
               resume_from=None,
               metrics_path=None,
               checkpoint_path=None,
               state_path=None,
               val_dataset=None):
    """Run (or resume) optimization; returns a TrainResult.

    One iteration = one optimizer step over batch_size clouds processed in
    slot order with averaged gradients. Cloud order walks a per-epoch
    permutation. The metrics file is append-only CSV with the header
    iteration,loss,accuracy,wall_seconds.
    """
    if not dataset:
        raise EmptyInput("training dataset is empty")
    for i, cloud in enumerate(dataset):
        if cloud.labels is None:
            raise ConfigError(f"dataset cloud {i} has no labels")
    if resume_from is not None:
        _, params, m1, m2, step, start_iteration, _, _ = load_train_state(resume_from)
        opt_state = OptimizerState(m1, m2, step)
    if params is None:
        features0 = dataset[0].channel_matrix(feature_channels, config.gravity_axis)
        params = network.init_parameters(
            spec, features0.shape[1], _stream(config.seed, _STREAM_INIT)
        )
    if opt_state is None:
        opt_state = init_optimizer(params)

    num_clouds = len(dataset)
    perm_epoch, perm = -1, None
    history = []
    stopped_early = False
    best_val = np.inf
    stale = 0
    start_time = time.perf_counter()

    metrics_fh = None
    if metrics_path is not None:
        metrics_fh = open(metrics_path, "a", encoding="ascii")
        if metrics_fh.tell() == 0:
            metrics_fh.write("iteration,loss,accuracy,wall_seconds\n")

    def _save_artifacts(iteration):
        if checkpoint_path is not None:
            save_checkpoint(checkpoint_path, spec, params,
                            feature_channels, lattice_channels)
        if state_path is not None:
            save_train_state(state_path, spec, params,
                             opt_state.first_moment, opt_state.second_moment,
                             opt_state.step, iteration,
                             feature_channels, lattice_channels)

    iteration = start_iteration
    try:
        for iteration in range(start_iteration, config.max_iterations):
            grad_sum = network.zero_like_parameters(params)
            loss_sum, correct, total = 0.0, 0, 0
            for slot in range(config.batch_size):
                sample = iteration * config.batch_size + slot
                epoch, pos = divmod(sample, num_clouds)
                if epoch != perm_epoch:
                    perm_epoch = epoch
                    perm = _stream(config.seed, _STREAM_ORDER, epoch).permutation(num_clouds)
                cloud = dataset[perm[pos]]
                if config.sample_size is not None and cloud.num_points > config.sample_size:
                    crop_rng = _stream(config.seed, _STREAM_CROP, iteration, slot)
                    cloud = cloud.take(
                        crop_rng.choice(cloud.num_points, config.sample_size, replace=False)
                    )
                cloud = augment(
                    cloud, config, _stream(config.seed, _STREAM_AUGMENT, iteration, slot)
                )
                features, lattice_feats = _cloud_tensors(
                    cloud, feature_channels, lattice_channels, config.gravity_axis
                )
                probs, tape = network.forward(
                    spec, params, features, lattice_feats, training=True
                )
                loss, grad_probs = cross_entropy_loss(
                    probs, cloud.labels, config.ignore_label
                )
                grads, _ = network.backward(tape, params, grad_probs)
                network.commit_running_stats(tape, params)
                for li, key, g in network.named_parameters(grads):
                    grad_sum[li][key] += g
                loss_sum += loss
                pred = network.predict(probs)
                mask = np.ones(cloud.num_points, bool) if config.ignore_label is None \
                    else cloud.labels != config.ignore_label
                correct += int((pred[mask] == cloud.labels[mask]).sum())
                total += int(mask.sum())
            if config.batch_size > 1:
                for li, key, g in network.named_parameters(grad_sum):
                    g /= config.batch_size
            try:
                adam_step(params, grad_sum, opt_state, config)
            except NonFiniteGradient as exc:
                raise NonFiniteGradient(f"iteration {iteration}: {exc}") from exc

            done = iteration + 1
            if done % config.log_every == 0 or done == config.max_iterations:
                row = (iteration, loss_sum / config.batch_size,
                       correct / max(total, 1),
                       time.perf_counter() - start_time)
                history.append(row)
                if metrics_fh is not None:
                    metrics_fh.write(
                        f"{row[0]},{row[1]!r},{row[2]!r},{row[3]!r}\n"
                    )
                    metrics_fh.flush()
                if val_dataset is not None and config.patience is not None:
                    val_loss, _ = evaluate(
                        spec, params, val_dataset, feature_channels,
                        lattice_channels, config.ignore_label, config.gravity_axis
                    )
                    if val_loss < best_val - 1e-12:
                        best_val, stale = val_loss, 0
                    else:
                        stale += 1
                        if stale >= config.patience:
                            stopped_early = True
            if config.checkpoint_every and done % config.checkpoint_every == 0:
                _save_artifacts(done)
            if stopped_early:
                iteration += 1
                break
        else:
            iteration = config.max_iterations
        _save_artifacts(iteration)
    finally:
        if metrics_fh is not None:
            metrics_fh.close()
    return TrainResult(params, opt_state, iteration, history, stopped_early)
