"""Joint optimization of the supervised and adversarial-contrastive losses.

Each epoch encodes the graph, draws the augmented view and the two
gradient-crafted adversarial views (all treated as constants for the
parameter gradient), and takes one full-batch Adam step on

    total = beta * supervised + (1 - beta) * contrastive + mu * ||params||^2.

All randomness is derived from (seed, epoch), so training can resume from a
checkpoint bit-compatibly. Checkpoints use a small self-describing binary
format: magic ``EUPAS1``, a length-prefixed config digest, then named
float64 tensors as (name length, name, rank, dims, little-endian payload).
"""

from __future__ import annotations

import dataclasses
import hashlib
import struct
from pathlib import Path

import numpy as np
import torch

from eupas import contrast, fusion
from eupas.augment import AugmentConfig, perturb_augment
from eupas.contrast import AdvConfig, ProjectionHeads, init_projection_heads
from eupas.data import RegionGraph
from eupas.encoder import EncoderParams, EmbeddingState, encode, init_params
from eupas.fusion import FusionParams, FusedEmbedding, init_fusion_params

CHECKPOINT_MAGIC = b"EUPAS1"
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
DIVERGENCE_LIMIT = 1e6


class CheckpointError(ValueError):
    """Unreadable checkpoint or one that does not match the current config."""


class NonFiniteLossError(RuntimeError):
    """A loss component turned non-finite; the message carries the breakdown."""


class DivergenceError(RuntimeError):
    """Training diverged; ``checkpoint`` holds the last healthy state."""

    def __init__(self, message: str, checkpoint: "Checkpoint"):
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclasses.dataclass(frozen=True)
class AblationFlags:
    no_augment: bool = False
    no_supervised: bool = False
    no_selfsupervised: bool = False
    no_trickster: bool = False
    no_devcopy: bool = False


@dataclasses.dataclass(frozen=True)
class TrainingConfig:
    dim: int = 96
    layers: int = 3
    lr: float = 0.001
    beta: float = 0.15  # supervised share of the total loss
    mu: float = 1e-4  # L2 regularization strength
    epochs: int = 200
    seed: int = 0
    top_k: int = 10
    augment: AugmentConfig = dataclasses.field(default_factory=AugmentConfig)
    adv: AdvConfig = dataclasses.field(default_factory=AdvConfig)
    ablations: AblationFlags = dataclasses.field(default_factory=AblationFlags)

    def __post_init__(self):
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError("beta must lie in [0, 1]")
        if self.mu < 0:
            raise ValueError("mu must be >= 0")
        if self.dim < 1 or self.layers < 1 or self.epochs < 0:
            raise ValueError("dim/layers must be >= 1 and epochs >= 0")

    def canonical_items(self) -> list[tuple[str, str]]:
        # epochs is excluded: run length is not part of the model identity,
        # and including it would block resuming a checkpoint to more epochs
        items = []
        for field in ("dim", "layers", "lr", "beta", "mu", "seed", "top_k"):
            items.append((field, repr(getattr(self, field))))
        for name, sub in (("augment", self.augment), ("adv", self.adv), ("ablations", self.ablations)):
            for f in dataclasses.fields(sub):
                items.append((f"{name}.{f.name}", repr(getattr(sub, f.name))))
        return sorted(items)

    def digest(self) -> str:
        text = "\n".join(f"{k}={v}" for k, v in self.canonical_items())
        return hashlib.sha256(text.encode("utf-8")).hexdigest()


@dataclasses.dataclass
class ModelParams:
    encoder: EncoderParams
    fusion: FusionParams
    heads: ProjectionHeads

    def named_tensors(self):
        yield from self.encoder.named_tensors()
        yield from self.fusion.named_tensors()
        yield from self.heads.named_tensors()


@dataclasses.dataclass
class StepViews:
    """Per-epoch generated samples, all constants for the parameter gradient."""

    x_aug: list[torch.Tensor]
    x_pos: list[torch.Tensor] | None
    x_neg: list[torch.Tensor] | None
    triplets: tuple[np.ndarray, np.ndarray, np.ndarray]


@dataclasses.dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray]
    adam_v: dict[str, np.ndarray]
    epoch: int
    step: int
    seed: int
    config_digest: str


def _child_seed(parts: list[int]) -> int:
    return int(np.random.SeedSequence(parts).generate_state(1)[0])


def init_model(n_regions: int, n_relations: int, config: TrainingConfig) -> ModelParams:
    enc_seed = _child_seed([config.seed, 0])
    fus_seed = _child_seed([config.seed, 1])
    head_seed = _child_seed([config.seed, 2])
    return ModelParams(
        encoder=init_params(n_regions, n_relations, config.dim, config.layers, enc_seed),
        fusion=init_fusion_params(config.dim, n_relations, fus_seed),
        heads=init_projection_heads(config.dim, head_seed),
    )


def make_views(
    state: EmbeddingState, graph: RegionGraph, config: TrainingConfig, epoch: int
) -> StepViews:
    """Draw the augmented view and generate the adversarial samples for one epoch.

    Every random stream is an independent child of (seed, epoch), so ablation
    flags never shift the randomness of the surviving components.
    """
    flags = config.ablations
    anchors = [a.detach() for a in state.anchors]
    sims = [graph.similarity[name] for name in graph.relations]

    x_aug = []
    for k, anchor in enumerate(anchors):
        if flags.no_augment:
            x_aug.append(anchor)
        else:
            gen = torch.Generator().manual_seed(_child_seed([config.seed, 1 + epoch, k]))
            x_aug.append(perturb_augment(anchor, config.augment, gen))

    x_neg = None
    if not (flags.no_trickster or flags.no_selfsupervised):
        x_neg = [contrast.trickster(a, s, config.adv) for a, s in zip(anchors, sims)]

    x_pos = None
    if not (flags.no_devcopy or flags.no_selfsupervised):
        x_pos = [
            contrast.devcopy(a, v, a, sims, config.adv) for a, v in zip(anchors, x_aug)
        ]

    triplet_rng = np.random.default_rng(
        _child_seed([config.seed, 1 + epoch, len(anchors)])
    )
    triplets = fusion.sample_geo_triplets(graph, triplet_rng)
    return StepViews(x_aug=x_aug, x_pos=x_pos, x_neg=x_neg, triplets=triplets)


def loss_components(
    model: ModelParams,
    state: EmbeddingState,
    graph: RegionGraph,
    config: TrainingConfig,
    views: StepViews,
) -> dict[str, torch.Tensor]:
    """All loss terms for one step; ablation flags zero out their term exactly."""
    flags = config.ablations
    zero = torch.zeros((), dtype=torch.float64)

    l_asl = zero
    if not flags.no_supervised:
        l_asl = fusion.attentive_supervised_loss(state, graph, model.fusion, views.triplets)

    l_pos, l_neg = zero, zero
    if not flags.no_selfsupervised:
        for k, anchor in enumerate(state.anchors):
            extra = None
            if views.x_neg is not None:
                extra = model.heads.project_neg(views.x_neg[k])
            if views.x_pos is not None:
                proj_pos = model.heads.project_pos(views.x_pos[k])
                l_pos = l_pos + contrast.infonce_pos(
                    anchor, proj_pos, anchor, config.adv.tau, extra_negatives=extra
                )
            l_neg = l_neg + contrast.infonce_neg(
                anchor, views.x_aug[k], anchor, config.adv.tau, extra_negatives=extra
            )
    l_acl = contrast.acl_loss(l_neg, l_pos, config.adv.alpha)

    reg = zero
    if config.mu > 0:
        reg = config.mu * sum((t**2).sum() for _, t in model.named_tensors())

    total = config.beta * l_asl + (1.0 - config.beta) * l_acl + reg
    return {
        "l_asl": l_asl,
        "l_cl_pos": l_pos,
        "l_cl_neg": l_neg,
        "l_acl": l_acl,
        "reg": reg,
        "total": total,
    }


def total_loss(
    model: ModelParams,
    state: EmbeddingState,
    graph: RegionGraph,
    config: TrainingConfig,
    views: StepViews,
) -> torch.Tensor:
    """Weighted total; raises with a component breakdown on non-finite values."""
    comps = loss_components(model, state, graph, config, views)
    if not torch.isfinite(comps["total"]):
        detail = ", ".join(f"{k}={float(v):.6g}" for k, v in comps.items())
        raise NonFiniteLossError(f"non-finite training loss ({detail})")
    return comps["total"]


class _Adam:
    def __init__(self, names: list[str], lr: float):
        self.lr = lr
        self.step_count = 0
        self.m = {n: None for n in names}
        self.v = {n: None for n in names}

    def step(self, named_params: list[tuple[str, torch.Tensor]], grads: list[torch.Tensor]):
        self.step_count += 1
        c1 = 1.0 - ADAM_BETA1**self.step_count
        c2 = 1.0 - ADAM_BETA2**self.step_count
        with torch.no_grad():
            for (name, p), g in zip(named_params, grads):
                if self.m[name] is None:
                    self.m[name] = torch.zeros_like(p)
                    self.v[name] = torch.zeros_like(p)
                self.m[name].mul_(ADAM_BETA1).add_(g, alpha=1.0 - ADAM_BETA1)
                self.v[name].mul_(ADAM_BETA2).addcmul_(g, g, value=1.0 - ADAM_BETA2)
                m_hat = self.m[name] / c1
                v_hat = self.v[name] / c2
                p.sub_(self.lr * m_hat / (v_hat.sqrt() + ADAM_EPS))


def train(
    graph: RegionGraph,
    config: TrainingConfig,
    start: Checkpoint | None = None,
) -> tuple[Checkpoint, FusedEmbedding, list[dict[str, float]]]:
    """Run the joint optimization; deterministic given (config, graph).

    Pass ``start`` to resume: the continuation reproduces an uninterrupted
    run bit-for-bit. Raises :class:`DivergenceError` (carrying the last
    healthy checkpoint) if the loss exceeds 1e6 or turns non-finite.
    """
    n_relations = len(graph.relations)
    if start is not None:
        if start.config_digest != config.digest():
            raise CheckpointError(
                "checkpoint config digest does not match the current config"
            )
        model = init_model(graph.n_regions, n_relations, config)
        _load_into_model(model, start.params)
        start_epoch = start.epoch
    else:
        model = init_model(graph.n_regions, n_relations, config)
        start_epoch = 0

    named = list(model.named_tensors())
    for _, t in named:
        t.requires_grad_(True)
    adam = _Adam([n for n, _ in named], config.lr)
    if start is not None:
        adam.step_count = start.step
        for name, _ in named:
            adam.m[name] = torch.from_numpy(start.adam_m[name].copy())
            adam.v[name] = torch.from_numpy(start.adam_v[name].copy())

    history: list[dict[str, float]] = []
    for epoch in range(start_epoch, config.epochs):
        state = encode(graph, model.encoder)
        views = make_views(state, graph, config, epoch)
        comps = loss_components(model, state, graph, config, views)
        total = comps["total"]
        total_value = float(total.detach())
        if not np.isfinite(total_value) or total_value > DIVERGENCE_LIMIT:
            raise DivergenceError(
                f"training diverged at epoch {epoch}: total={total_value:.6g}",
                _snapshot(model, adam, epoch, config),
            )
        grads = torch.autograd.grad(
            total, [t for _, t in named], allow_unused=True
        )
        grads = [
            g if g is not None else torch.zeros_like(t)
            for g, (_, t) in zip(grads, named)
        ]
        adam.step(named, grads)
        history.append({k: float(v.detach()) for k, v in comps.items()})

    checkpoint = _snapshot(model, adam, max(config.epochs, start_epoch), config)
    with torch.no_grad():
        state = encode(graph, model.encoder)
        fused = fusion.fused_embedding(state, model.fusion)
    return checkpoint, fused, history


def _snapshot(
    model: ModelParams, adam: _Adam, epoch: int, config: TrainingConfig
) -> Checkpoint:
    params = {n: t.detach().numpy().copy() for n, t in model.named_tensors()}
    adam_m = {
        n: (adam.m[n].numpy().copy() if adam.m[n] is not None else np.zeros_like(p))
        for n, p in params.items()
    }
    adam_v = {
        n: (adam.v[n].numpy().copy() if adam.v[n] is not None else np.zeros_like(p))
        for n, p in params.items()
    }
    return Checkpoint(
        params=params,
        adam_m=adam_m,
        adam_v=adam_v,
        epoch=epoch,
        step=adam.step_count,
        seed=config.seed,
        config_digest=config.digest(),
    )


def _load_into_model(model: ModelParams, params: dict[str, np.ndarray]):
    for name, tensor in model.named_tensors():
        if name not in params:
            raise CheckpointError(f"checkpoint is missing tensor {name!r}")
        stored = params[name]
        if tuple(stored.shape) != tuple(tensor.shape):
            raise CheckpointError(
                f"tensor {name!r} has shape {stored.shape}, expected {tuple(tensor.shape)}"
            )
        with torch.no_grad():
            tensor.copy_(torch.from_numpy(stored.copy()))


def rebuild_model(
    checkpoint: Checkpoint, graph: RegionGraph, config: TrainingConfig
) -> ModelParams:
    """Materialize the trained parameters for inference."""
    model = init_model(graph.n_regions, len(graph.relations), config)
    _load_into_model(model, checkpoint.params)
    return model


def embeddings_from_checkpoint(
    checkpoint: Checkpoint, graph: RegionGraph, config: TrainingConfig
) -> FusedEmbedding:
    model = rebuild_model(checkpoint, graph, config)
    with torch.no_grad():
        state = encode(graph, model.encoder)
        return fusion.fused_embedding(state, model.fusion)


def save_checkpoint(checkpoint: Checkpoint, path: str | Path):
    """Serialize to the binary format; byte-stable across identical saves."""
    tensors: dict[str, np.ndarray] = {}
    for name, arr in checkpoint.params.items():
        tensors[f"param.{name}"] = arr
    for name, arr in checkpoint.adam_m.items():
        tensors[f"adam.m.{name}"] = arr
    for name, arr in checkpoint.adam_v.items():
        tensors[f"adam.v.{name}"] = arr
    tensors["meta.epoch"] = np.array([float(checkpoint.epoch)])
    tensors["meta.step"] = np.array([float(checkpoint.step)])
    tensors["meta.seed"] = np.array([float(checkpoint.seed)])

    digest = checkpoint.config_digest.encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", len(digest)), digest]
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f8")
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path: str | Path) -> Checkpoint:
    blob = Path(path).read_bytes()
    if blob[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes, not a checkpoint file")
    offset = len(CHECKPOINT_MAGIC)

    def take(n: int) -> bytes:
        nonlocal offset
        if offset + n > len(blob):
            raise CheckpointError(f"{path}: truncated checkpoint")
        chunk = blob[offset : offset + n]
        offset += n
        return chunk

    (digest_len,) = struct.unpack("<I", take(4))
    digest = take(digest_len).decode("utf-8")
    tensors: dict[str, np.ndarray] = {}
    while offset < len(blob):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank)) if rank else ()
        count = int(np.prod(dims)) if dims else 1
        data = np.frombuffer(take(8 * count), dtype="<f8").reshape(dims)
        tensors[name] = data.astype(np.float64)

    params, adam_m, adam_v = {}, {}, {}
    for name, arr in tensors.items():
        if name.startswith("param."):
            params[name[len("param.") :]] = arr
        elif name.startswith("adam.m."):
            adam_m[name[len("adam.m.") :]] = arr
        elif name.startswith("adam.v."):
            adam_v[name[len("adam.v.") :]] = arr
    for key in ("meta.epoch", "meta.step", "meta.seed"):
        if key not in tensors:
            raise CheckpointError(f"{path}: missing {key}")
    return Checkpoint(
        params=params,
        adam_m=adam_m,
        adam_v=adam_v,
        epoch=int(tensors["meta.epoch"][0]),
        step=int(tensors["meta.step"][0]),
        seed=int(tensors["meta.seed"][0]),
        config_digest=digest,
    )


def history_to_csv(history: list[dict[str, float]]) -> str:
    """Loss history as ``epoch,L_asl,L_cl_pos,L_cl_neg,L_total`` lines."""
    lines = ["epoch,L_asl,L_cl_pos,L_cl_neg,L_total"]
    for epoch, row in enumerate(history, start=1):
        lines.append(
            f"{epoch},{row['l_asl']!r},{row['l_cl_pos']!r},"
            f"{row['l_cl_neg']!r},{row['total']!r}"
        )
    return "\n".join(lines) + "\n"
