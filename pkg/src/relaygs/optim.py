"""Parameter registry, Adam, learning-rate schedules, densification, gradcheck."""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, Mapping, Optional, Sequence, Tuple, Union

import torch

from .scene import BACKGROUND, GaussianCloud, quaternion_to_matrix

GROUPS = ("bg-gaussians", "fg-gaussians", "relay-gaussians", "mask-logits", "gamma",
          "hexplane", "mlp-bg", "mlp-fg", "camera-color")

Rate = Union[float, torch.Tensor]


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, name: str, index: int, value: float):
        super().__init__(f"non-finite gradient {value} in {name!r} at flat index {index}")
        self.name = name
        self.index = index


class ParameterStore:
    """Named leaf tensors with their gradient buffers.

    Each entry belongs to one of :data:`GROUPS`; Gaussian attribute tensors
    mix rows of several Gaussian groups, which is why learning rates may be
    given per row (see :func:`adam_step`).
    """

    def __init__(self):
        self.params: "OrderedDict[str, torch.Tensor]" = OrderedDict()
        self.group_of: Dict[str, str] = {}

    def add(self, name: str, tensor: torch.Tensor, group: str) -> torch.Tensor:
        if group not in GROUPS:
            raise ValueError(f"unknown parameter group {group!r}")
        if not tensor.is_leaf:
            tensor = tensor.detach()
        tensor.requires_grad_(True)
        self.params[name] = tensor
        self.group_of[name] = group
        return tensor

    def add_module(self, prefix: str, module: torch.nn.Module, group: str) -> None:
        for pname, p in module.named_parameters():
            self.add(f"{prefix}.{pname}", p, group)

    def __getitem__(self, name: str) -> torch.Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def items(self):
        return self.params.items()

    def names(self, group: Optional[str] = None):
        return [k for k in self.params if group is None or self.group_of[k] == group]

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def grad(self, name: str) -> torch.Tensor:
        p = self.params[name]
        return torch.zeros_like(p) if p.grad is None else p.grad

    def flat(self, group: str) -> torch.Tensor:
        names = self.names(group)
        if not names:
            return torch.zeros(0, dtype=torch.float64)
        return torch.cat([self.params[k].detach().reshape(-1) for k in names])

    def flat_grad(self, group: str) -> torch.Tensor:
        names = self.names(group)
        if not names:
            return torch.zeros(0, dtype=torch.float64)
        return torch.cat([self.grad(k).reshape(-1) for k in names])

    def numel(self) -> int:
        return sum(p.numel() for p in self.params.values())


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-15
    # per-group second-moment decay, keyed by the name prefix before "."
    group_beta2: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        self.exp_avg: Dict[str, torch.Tensor] = {}
        self.exp_avg_sq: Dict[str, torch.Tensor] = {}
        self.steps: Dict[str, int] = {}

    def reindex(self, name: str, source: torch.Tensor, fresh: torch.Tensor) -> None:
        """Carry moments across a row reshuffle; ``fresh`` rows restart at zero."""
        if name not in self.exp_avg:
            return
        for buf in (self.exp_avg, self.exp_avg_sq):
            old = buf[name]
            new = old[source.clamp(min=0)].clone()
            new[fresh] = 0.0
            buf[name] = new

    def state_dict(self) -> dict:
        return {"exp_avg": self.exp_avg, "exp_avg_sq": self.exp_avg_sq, "steps": self.steps}

    def load_state_dict(self, d: Mapping) -> None:
        self.exp_avg = dict(d["exp_avg"])
        self.exp_avg_sq = dict(d["exp_avg_sq"])
        self.steps = {k: int(v) for k, v in d["steps"].items()}


def adam_step(store: ParameterStore, state: AdamState, rates: Mapping[str, Rate]) -> None:
    """One bias-corrected Adam update for every entry named in ``rates``.

    A rate may be a float or a tensor broadcastable against the parameter
    (per-row rates for mixed Gaussian groups). All gradients are validated
    before anything is written; afterwards gradients are cleared.
    """
    for name in rates:
        g = store.grad(name)
        bad = ~torch.isfinite(g)
        if bool(bad.any()):
            idx = int(torch.nonzero(bad.reshape(-1))[0])
            raise NonFiniteGradientError(name, idx, float(g.reshape(-1)[idx]))

    with torch.no_grad():
        for name, lr in rates.items():
            p = store[name]
            g = store.grad(name)
            if name not in state.exp_avg or state.exp_avg[name].shape != p.shape:
                state.exp_avg[name] = torch.zeros_like(p)
                state.exp_avg_sq[name] = torch.zeros_like(p)
                state.steps.setdefault(name, 0)
            m, v = state.exp_avg[name], state.exp_avg_sq[name]
            t = state.steps.get(name, 0) + 1
            state.steps[name] = t
            b2 = state.group_beta2.get(name.split(".")[0], state.beta2)
            m.mul_(state.beta1).add_(g, alpha=1.0 - state.beta1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            bc1 = 1.0 - state.beta1 ** t
            bc2 = 1.0 - b2 ** t
            denom = (v / bc2).sqrt_().add_(state.eps)
            if isinstance(lr, torch.Tensor):
                p.sub_(lr.to(p.dtype) * (m / bc1) / denom)
            elif lr:
                p.sub_(lr * (m / bc1) / denom)
    store.zero_grad()


@dataclass(frozen=True)
class LRSchedule:
    """Log-linear decay from ``initial`` to ``final`` over ``total`` steps."""

    initial: float
    final: float
    total: int

    def __post_init__(self):
        if self.initial <= 0 or self.final <= 0:
            raise ValueError("learning rates must be positive")

    def __call__(self, step: int) -> float:
        if self.total <= 0:
            return self.final
        s = min(max(step / self.total, 0.0), 1.0)
        return math.exp((1.0 - s) * math.log(self.initial) + s * math.log(self.final))


@dataclass
class DensifyConfig:
    grad_threshold_bg: float = 2e-4
    grad_threshold_fg: float = 1e-4
    scale_split_threshold_bg: float = 1e-2
    scale_split_threshold_fg: float = 1e-3
    opacity_prune_threshold: float = 0.005
    interval: int = 100
    stop_fraction: float = 0.5
    split_divisor: float = 1.6
    max_gaussians: int = 4000
    opacity_reset: bool = False

    def thresholds(self, group: int) -> Tuple[float, float]:
        if group == BACKGROUND:
            return self.grad_threshold_bg, self.scale_split_threshold_bg
        return self.grad_threshold_fg, self.scale_split_threshold_fg

    def active(self, step: int, total_steps: int) -> bool:
        """Densify after step ``step`` (0-based) of a ``total_steps`` run?"""
        return (self.interval > 0 and (step + 1) % self.interval == 0
                and step + 1 <= self.stop_fraction * total_steps)


@dataclass
class GradStats:
    """Running per-Gaussian screen-space gradient norms and world directions."""

    norm_sum: torch.Tensor
    count: torch.Tensor
    direction: torch.Tensor

    @classmethod
    def zeros(cls, n: int) -> "GradStats":
        return cls(torch.zeros(n, dtype=torch.float64), torch.zeros(n, dtype=torch.float64),
                   torch.zeros(n, 3, dtype=torch.float64))

    def add(self, rows: torch.Tensor, norms: torch.Tensor, world_grad: Optional[torch.Tensor] = None):
        self.norm_sum.index_add_(0, rows, norms.detach().to(torch.float64))
        self.count.index_add_(0, rows, torch.ones(rows.shape[0], dtype=torch.float64))
        if world_grad is not None:
            self.direction += world_grad.detach().to(torch.float64)

    def mean(self) -> torch.Tensor:
        return torch.where(self.count > 0, self.norm_sum / self.count.clamp(min=1), torch.zeros_like(self.count))


@dataclass
class DensifyResult:
    cloud: GaussianCloud
    source: torch.Tensor  # old row feeding each new row
    fresh: torch.Tensor  # rows created this round
    n_pruned: int
    n_cloned: int
    n_split: int


def densify_and_prune(cloud: GaussianCloud, grad_stats, cfg: DensifyConfig, *,
                      scene_extent: float = 1.0, groups: Optional[Iterable[int]] = None,
                      directions: Optional[torch.Tensor] = None,
                      generator: Optional[torch.Generator] = None) -> DensifyResult:
    """Clone small high-gradient Gaussians, split large ones, drop transparent ones.

    Only rows whose group is in ``groups`` (default: all) are touched.
    Thresholds depend on each row's group; split thresholds are scaled by
    ``scene_extent``. Pruned rows are never densified, so the row count
    becomes old - pruned + cloned + 2 * split - split.
    """
    n = len(cloud)
    grads = torch.as_tensor(grad_stats, dtype=torch.float64).reshape(n)
    if groups is None:
        eligible = torch.ones(n, dtype=torch.bool)
    else:
        eligible = torch.zeros(n, dtype=torch.bool)
        for g in groups:
            eligible |= cloud.group == g

    with torch.no_grad():
        opacity = torch.sigmoid(cloud.opacity_logit.detach().double())
        max_scale = torch.exp(cloud.log_scale.detach().double()).max(dim=-1).values
        g_thr = torch.tensor([cfg.thresholds(int(g))[0] for g in cloud.group], dtype=torch.float64)
        s_thr = torch.tensor([cfg.thresholds(int(g))[1] for g in cloud.group], dtype=torch.float64) * scene_extent

        prune = eligible & (opacity < cfg.opacity_prune_threshold)
        hot = eligible & ~prune & (grads > g_thr)
        clone = hot & (max_scale < s_thr)
        split = hot & (max_scale >= s_thr)
        room = cfg.max_gaussians - (n - int(prune.sum()))
        if int(clone.sum()) + int(split.sum()) > max(room, 0):
            # keep the strongest candidates within the budget
            cand = torch.nonzero(clone | split).squeeze(-1)
            keep = cand[torch.argsort(grads[cand], descending=True, stable=True)[:max(room, 0)]]
            allowed = torch.zeros(n, dtype=torch.bool)
            allowed[keep] = True
            clone &= allowed
            split &= allowed

        survivors = torch.nonzero(~prune & ~split).squeeze(-1)
        clone_idx = torch.nonzero(clone).squeeze(-1)
        split_idx = torch.nonzero(split).squeeze(-1)

        base = cloud.select(survivors)
        parts = [base]
        sources = [survivors]
        fresh = [torch.zeros(len(survivors), dtype=torch.bool)]

        if len(clone_idx):
            c = cloud.select(clone_idx)
            if directions is not None:
                d = directions[clone_idx].to(c.position.dtype)
                norm = d.norm(dim=-1, keepdim=True)
                step = torch.where(norm > 0, d / norm.clamp(min=1e-300), torch.zeros_like(d))
                c.position = c.position - step * torch.exp(c.log_scale).max(dim=-1, keepdim=True).values
            parts.append(c)
            sources.append(clone_idx)
            fresh.append(torch.ones(len(clone_idx), dtype=torch.bool))

        if len(split_idx):
            for _ in range(2):
                c = cloud.select(split_idx)
                scale = torch.exp(c.log_scale)
                noise = torch.randn(len(split_idx), 3, generator=generator, dtype=torch.float64).to(c.position.dtype)
                rot = quaternion_to_matrix(c.rotation)
                c.position = c.position + (rot @ (noise * scale).unsqueeze(-1)).squeeze(-1)
                c.log_scale = c.log_scale - math.log(cfg.split_divisor)
                parts.append(c)
                sources.append(split_idx)
                fresh.append(torch.ones(len(split_idx), dtype=torch.bool))

        out = GaussianCloud.concat(parts)
        out.generation = cloud.generation + 1
    return DensifyResult(out, torch.cat(sources), torch.cat(fresh), int(prune.sum()),
                         len(clone_idx), len(split_idx))


@dataclass
class GradCheckResult:
    max_rel_error: float
    per_param: Dict[str, float]
    worst: Tuple[str, int, float, float]


def finite_diff_check(loss_fn: Callable[[], torch.Tensor], store: ParameterStore, h: float = 1e-4,
                      names: Optional[Sequence[str]] = None,
                      indices: Optional[Mapping[str, Sequence[int]]] = None,
                      analytic: Optional[Mapping[str, torch.Tensor]] = None,
                      perturb: Optional[Callable[[str, int, float], None]] = None) -> GradCheckResult:
    """Central differences vs reverse-mode gradients.

    ``loss_fn`` rebuilds the loss from the store's current tensors. Relative
    error uses max(|analytic|, |numeric|, 1e-8) as the denominator.
    ``indices`` restricts the flat entries checked per parameter;
    ``analytic`` supplies precomputed gradients (otherwise backward runs once);
    ``perturb(name, flat_index, delta)`` overrides how a coordinate is moved.
    """
    names = list(names) if names is not None else list(store)
    if analytic is None:
        store.zero_grad()
        loss = loss_fn()
        if not torch.isfinite(loss):
            raise FloatingPointError("loss is not finite")
        loss.backward()
        analytic = {k: store.grad(k).detach().clone() for k in names}
        store.zero_grad()

    def move(name, i, delta):
        if perturb is not None:
            perturb(name, i, delta)
        else:
            with torch.no_grad():
                store[name].view(-1)[i] += delta

    def evaluate():
        with torch.no_grad():
            val = loss_fn()
        if not torch.isfinite(val):
            raise FloatingPointError("loss is not finite")
        return float(val)

    per_param: Dict[str, float] = {}
    worst = ("", -1, 0.0, 0.0)
    worst_err = 0.0
    for name in names:
        flat_analytic = analytic[name].reshape(-1)
        idx = indices[name] if indices is not None and name in indices else range(flat_analytic.numel())
        err_max = 0.0
        for i in idx:
            i = int(i)
            orig = float(store[name].detach().view(-1)[i])
            move(name, i, h)
            up = evaluate()
            move(name, i, -2 * h)
            down = evaluate()
            move(name, i, h)
            with torch.no_grad():
                store[name].view(-1)[i] = orig
            numeric = (up - down) / (2 * h)
            a = float(flat_analytic[i])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            if err > err_max:
                err_max = err
            if err > worst_err:
                worst_err = err
                worst = (name, i, a, numeric)
        per_param[name] = err_max
    return GradCheckResult(max(per_param.values(), default=0.0), per_param, worst)
