"""Meta-training: inner-loop SGD adaptation, outer-loop Adam on query losses.

The outer update uses the sum of per-task query gradients in fixed task
order, so runs are bit-reproducible under a fixed seed.  Second-order mode
propagates query gradients back through the inner steps with a central
finite-difference Hessian-vector product of the support loss, which is exact
when that loss is quadratic in the parameters.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .channel import ChannelConfig, apply_channel_graph
from .data import TaskSpec, as_batch, nmse, sample_task
from .errors import ConfigError, DivergenceError
from .model import Model, ModelConfig, build_model
from .ops import mse_loss
from .tensor import ParameterSet, Tensor

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

ORDERS = ("first-order", "second-order")


@dataclass(frozen=True)
class MetaConfig:
    inner_lr: float = 1e-3
    outer_lr: float = 5e-4
    inner_steps: int = 1
    meta_batch: int = 8
    max_iters: int = 1000
    patience: int = 50
    val_every: int = 10
    val_tasks: int = 4
    k_support: int = 100
    k_query: int = 64
    order: str = "first-order"
    channel: ChannelConfig = field(default_factory=ChannelConfig)

    def __post_init__(self):
        if self.inner_lr <= 0 or self.outer_lr <= 0:
            raise ConfigError(f"learning rates must be > 0, got {self.inner_lr}/{self.outer_lr}")
        # inner_steps=0 is the degenerate mode used by the plain-Adam equivalence tests
        if self.inner_steps < 0:
            raise ConfigError(f"inner_steps must be >= 0, got {self.inner_steps}")
        if self.meta_batch < 1:
            raise ConfigError(f"meta_batch must be >= 1, got {self.meta_batch}")
        if self.max_iters < 0:
            raise ConfigError(f"max_iters must be >= 0, got {self.max_iters}")
        if self.patience < 1 or self.val_every < 1 or self.val_tasks < 1:
            raise ConfigError("patience, val_every and val_tasks must be >= 1")
        if self.k_support < 1 or self.k_query < 1:
            raise ConfigError("k_support and k_query must be >= 1")
        if self.order not in ORDERS:
            raise ConfigError(f"order must be one of {ORDERS}, got {self.order!r}")
        if self.order == "second-order" and self.channel.mode != "ideal":
            # finite-difference HVPs need a deterministic support loss
            raise ConfigError("second-order mode requires the ideal in-loop channel")


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

class AdamState:
    """Bias-corrected Adam accumulators, keyed by parameter name."""

    def __init__(self, m: dict, v: dict, t: int = 0):
        self.m = m
        self.v = v
        self.t = t

    @classmethod
    def from_params(cls, params: ParameterSet) -> "AdamState":
        return cls(
            m={name: np.zeros_like(p.data) for name, p in params.items()},
            v={name: np.zeros_like(p.data) for name, p in params.items()},
        )


def adam_update(state: AdamState, params: ParameterSet, grads: dict, lr: float):
    """One in-place Adam step; returns (params, state) for chaining."""
    state.t += 1
    c1 = 1.0 - ADAM_BETA1 ** state.t
    c2 = 1.0 - ADAM_BETA2 ** state.t
    for name, p in params.items():
        g = grads[name]
        m = state.m[name] = ADAM_BETA1 * state.m[name] + (1.0 - ADAM_BETA1) * g
        v = state.v[name] = ADAM_BETA2 * state.v[name] + (1.0 - ADAM_BETA2) * np.square(g)
        step = lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
        p.data = np.asarray(p.data - step)
    return params, state


# ---------------------------------------------------------------------------
# losses and adaptation
# ---------------------------------------------------------------------------

def task_loss(model: Model, batch, params: ParameterSet | None = None,
              channel: ChannelConfig | None = None, rng=None) -> Tensor:
    """Mean reconstruction MSE with the channel between encoder and decoder.

    `batch` is either a (batch, hw, 1) array or a sequence of samples.
    """
    if not isinstance(batch, np.ndarray):
        batch = as_batch(batch, model.dtype)
    x = Tensor(np.asarray(batch, dtype=model.dtype))
    z = model.encode(x, params)
    if channel is not None:
        z = apply_channel_graph(z, channel, rng)
    x_hat = model.decode(z, params)
    return mse_loss(x_hat, x)


def _grads_of(params: ParameterSet, loss: Tensor) -> dict:
    params.zero_grad()
    loss.backward()
    return {name: p.grad.copy() for name, p in params.items()}


def _adapt(params: ParameterSet, loss_fn, alpha: float, steps: int, keep_trajectory: bool):
    adapted = params.clone()
    trajectory = []
    last_finite = math.nan
    for step in range(steps):
        if keep_trajectory:
            trajectory.append(adapted.clone())
        loss = loss_fn(adapted)
        value = float(loss.data)
        if not math.isfinite(value):
            raise DivergenceError(step, last_finite)
        last_finite = value
        grads = _grads_of(adapted, loss)
        for name, p in adapted.items():
            p.data = np.asarray(p.data - alpha * grads[name])
    return adapted, trajectory


def inner_adapt(params: ParameterSet, loss_fn, alpha: float, steps: int) -> ParameterSet:
    """`steps` plain gradient-descent steps at rate alpha; the input is untouched.

    loss_fn maps a ParameterSet to a scalar loss Tensor.
    """
    adapted, _ = _adapt(params, loss_fn, alpha, steps, keep_trajectory=False)
    return adapted


def _hvp_fd(loss_fn, params: ParameterSet, vec: dict) -> dict:
    """Hessian-vector product of loss_fn at params along vec, by central differences.

    Exact (up to rounding) whenever the loss gradient is affine in the
    parameters, which covers the quadratic toy models used as oracles.
    """
    sq = sum(float(np.sum(np.square(v))) for v in vec.values())
    if sq == 0.0:
        return {name: np.zeros_like(v) for name, v in vec.items()}
    scale = sum(float(np.sum(np.square(p.data))) for p in params.values())
    r = math.sqrt(np.finfo(np.float64).eps) * (1.0 + math.sqrt(scale)) / math.sqrt(sq)

    def shifted(sign):
        moved = params.clone()
        for name, p in moved.items():
            p.data = np.asarray(p.data + sign * r * vec[name])
        return _grads_of(moved, loss_fn(moved))

    plus = shifted(+1.0)
    minus = shifted(-1.0)
    return {name: (plus[name] - minus[name]) / (2.0 * r) for name in vec}


def _meta_gradient(theta: ParameterSet, support_loss_fn, query_loss_fn,
                   cfg: MetaConfig):
    """Query loss at the adapted parameters and its gradient w.r.t. theta."""
    second = cfg.order == "second-order"
    adapted, trajectory = _adapt(theta, support_loss_fn, cfg.inner_lr,
                                 cfg.inner_steps, keep_trajectory=second)
    loss = query_loss_fn(adapted)
    grads = _grads_of(adapted, loss)
    if second:
        for point in reversed(trajectory):
            hv = _hvp_fd(support_loss_fn, point, grads)
            grads = {name: grads[name] - cfg.inner_lr * hv[name] for name in grads}
    return float(loss.data), grads


def meta_step(model: Model, tasks, cfg: MetaConfig, adam: AdamState,
              rng=None, iteration: int = 0, last_finite: float = math.nan) -> float:
    """One outer update from a batch of tasks; returns the mean query loss."""
    if len(tasks) != cfg.meta_batch:
        raise ConfigError(f"meta_step: got {len(tasks)} tasks, config says {cfg.meta_batch}")
    theta = model.params
    total = {name: np.zeros_like(p.data) for name, p in theta.items()}
    loss_sum = 0.0
    for task in tasks:
        support = as_batch(task.support, model.dtype)
        query = as_batch(task.query, model.dtype)

        def support_loss(p):
            return task_loss(model, support, params=p, channel=cfg.channel, rng=rng)

        def query_loss(p):
            return task_loss(model, query, params=p, channel=cfg.channel, rng=rng)

        value, grads = _meta_gradient(theta, support_loss, query_loss, cfg)
        loss_sum += value
        for name in total:
            total[name] += grads[name]
    mean_loss = loss_sum / len(tasks)
    if not math.isfinite(mean_loss):
        raise DivergenceError(iteration, last_finite)
    adam_update(adam, theta, total, cfg.outer_lr)
    return mean_loss


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------

@dataclass
class TrainReport:
    """One row per completed outer iteration, plus how the run ended."""

    rows: list  # (iteration, meta_loss, val_loss or None, wall_ms)
    stop_reason: str
    best_iter: int  # -1 when validation never ran

    CSV_HEADER = "iter,meta_loss,val_loss,wall_ms"

    def write_csv(self, fh, preamble=()) -> None:
        for line in preamble:
            fh.write(f"# {line}\n")
        fh.write(self.CSV_HEADER + "\n")
        for it, loss, val, wall in self.rows:
            val_text = "" if val is None else repr(val)
            fh.write(f"{it},{loss!r},{val_text},{wall:.3f}\n")


def _spawn_streams(seed):
    model_ss, train_ss, val_ss = np.random.SeedSequence(seed).spawn(3)
    model_seed = int(model_ss.generate_state(1, np.uint64)[0])
    return model_seed, train_ss, val_ss


def _validation_tasks(val_ss, meta_cfg: MetaConfig, task_spec: TaskSpec):
    task_ss, chan_ss = val_ss.spawn(2)
    task_rng = np.random.default_rng(task_ss)
    seeds = task_rng.integers(0, 2 ** 63, size=meta_cfg.val_tasks)
    tasks = [sample_task(task_spec, meta_cfg.k_support, meta_cfg.k_query, seed=int(s))
             for s in seeds]
    return tasks, np.random.default_rng(chan_ss)


def _validation_loss(model: Model, tasks, cfg: MetaConfig, rng, adapt: bool) -> float:
    total = 0.0
    for task in tasks:
        params = model.params
        if adapt and cfg.inner_steps > 0:
            support = as_batch(task.support, model.dtype)
            params = inner_adapt(
                model.params,
                lambda p: task_loss(model, support, params=p, channel=cfg.channel, rng=rng),
                cfg.inner_lr, cfg.inner_steps,
            )
        loss = task_loss(model, as_batch(task.query, model.dtype),
                         params=params, channel=cfg.channel, rng=rng)
        total += float(loss.data)
    return total / len(tasks)


def _run_outer_loop(model: Model, meta_cfg: MetaConfig, task_spec: TaskSpec,
                    train_ss, val_ss, step_fn) -> tuple[ParameterSet, TrainReport]:
    """Shared outer loop: sampling, validation cadence, early stopping."""
    train_rng = np.random.default_rng(train_ss)
    val_tasks, val_rng = _validation_tasks(val_ss, meta_cfg, task_spec)
    adapt_in_val = step_fn.adaptive

    rows = []
    best_val = math.inf
    best_params = None
    best_iter = -1
    stale = 0
    stop_reason = "max-iters"
    last_finite = math.nan
    for it in range(1, meta_cfg.max_iters + 1):
        t0 = time.perf_counter()
        seeds = train_rng.integers(0, 2 ** 63, size=meta_cfg.meta_batch)
        tasks = [sample_task(task_spec, meta_cfg.k_support, meta_cfg.k_query, seed=int(s))
                 for s in seeds]
        loss = step_fn(tasks, train_rng, it, last_finite)
        last_finite = loss
        val = None
        if it % meta_cfg.val_every == 0:
            val = _validation_loss(model, val_tasks, meta_cfg, val_rng, adapt_in_val)
            if not math.isfinite(val):
                raise DivergenceError(it, last_finite)
        wall_ms = (time.perf_counter() - t0) * 1000.0
        rows.append((it, loss, val, wall_ms))
        if val is not None:
            if val < best_val:
                best_val, best_iter, stale = val, it, 0
                best_params = model.params.clone()
            else:
                stale += 1
                if stale >= meta_cfg.patience:
                    stop_reason = "early-stop"
                    break
    final = best_params if best_params is not None else model.params
    return final, TrainReport(rows=rows, stop_reason=stop_reason, best_iter=best_iter)


def meta_train(model_cfg: ModelConfig, meta_cfg: MetaConfig, task_spec: TaskSpec,
               seed) -> tuple[Model, TrainReport]:
    """Full meta-training run; returns the best-validation model and its report."""
    if task_spec.hw != model_cfg.hw:
        raise ConfigError(f"task hw {task_spec.hw} does not match model hw {model_cfg.hw}")
    model_seed, train_ss, val_ss = _spawn_streams(seed)
    model = build_model(model_cfg, model_seed)
    adam = AdamState.from_params(model.params)

    def step(tasks, rng, iteration, last_finite):
        return meta_step(model, tasks, meta_cfg, adam, rng=rng,
                         iteration=iteration, last_finite=last_finite)

    step.adaptive = True
    params, report = _run_outer_loop(model, meta_cfg, task_spec, train_ss, val_ss, step)
    return Model(model_cfg, params), report


def joint_train(model_cfg: ModelConfig, meta_cfg: MetaConfig, task_spec: TaskSpec,
                seed) -> tuple[Model, TrainReport]:
    """Non-meta baseline: plain Adam on the pooled query samples of each batch.

    Shares the stream layout of meta_train, so with meta_batch=1 and
    inner_steps=0 under the ideal channel the two runs coincide bit for bit.
    """
    if task_spec.hw != model_cfg.hw:
        raise ConfigError(f"task hw {task_spec.hw} does not match model hw {model_cfg.hw}")
    model_seed, train_ss, val_ss = _spawn_streams(seed)
    model = build_model(model_cfg, model_seed)
    adam = AdamState.from_params(model.params)

    def step(tasks, rng, iteration, last_finite):
        pooled = np.concatenate([as_batch(t.query, model.dtype) for t in tasks])
        loss = task_loss(model, pooled, channel=meta_cfg.channel, rng=rng)
        value = float(loss.data)
        if not math.isfinite(value):
            raise DivergenceError(iteration, last_finite)
        grads = _grads_of(model.params, loss)
        adam_update(adam, model.params, grads, meta_cfg.outer_lr)
        return value

    step.adaptive = False
    params, report = _run_outer_loop(model, meta_cfg, task_spec, train_ss, val_ss, step)
    return Model(model_cfg, params), report


# ---------------------------------------------------------------------------
# evaluation and small utilities
# ---------------------------------------------------------------------------

def evaluate_adaptation(model: Model, task, alpha: float, steps: int,
                        channel: ChannelConfig | None = None, rng=None) -> dict:
    """Query NMSE before and after adapting on the task's support set."""
    query = as_batch(task.query, model.dtype)
    support = as_batch(task.support, model.dtype)

    def reconstruct(params):
        z = model.encode(Tensor(query), params)
        if channel is not None:
            z = apply_channel_graph(z, channel, rng)
        return model.decode(z, params).data

    pre = nmse(reconstruct(model.params), query)
    adapted = inner_adapt(
        model.params,
        lambda p: task_loss(model, support, params=p, channel=channel, rng=rng),
        alpha, steps,
    )
    post = nmse(reconstruct(adapted), query)
    return {"nmse_pre": pre, "nmse_post": post}


def fit_batch(model: Model, batch, steps: int, lr: float = 1e-3) -> list:
    """Plain Adam on one fixed batch; returns the loss after each step."""
    adam = AdamState.from_params(model.params)
    losses = []
    last_finite = math.nan
    for step in range(1, steps + 1):
        loss = task_loss(model, batch)
        value = float(loss.data)
        if not math.isfinite(value):
            raise DivergenceError(step, last_finite)
        last_finite = value
        grads = _grads_of(model.params, loss)
        adam_update(adam, model.params, grads, lr)
        losses.append(value)
    return losses
