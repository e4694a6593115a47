"""Semi-supervised training loop with prototype alignment losses.

Every iteration draws a labeled and an unlabeled batch (with replacement),
runs all forward passes, assembles the supervised + alignment losses under
the ramp weight, and applies one clipped Adam update. Runs are bitwise
reproducible for a fixed (seed, config, data): per-iteration randomness
comes from a counter-based generator seeded with (seed, t), so resuming
from a checkpoint continues the exact same stream.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import net
from .data import Sample, SplitSpec, augment, load_pair_dir, split
from .losses import (
    LossBundle,
    LossToggles,
    RampSchedule,
    lpa_loss,
    ramp_weight,
    spa_loss,
    supervised_ce,
    total_loss,
    upa_loss,
)
from .proto import (
    aggregate_probability,
    average_prototypes,
    extract_prototypes,
    labeled_prototypes,
    pair_similarity,
    regional_prototype,
)
from .pseudo import REGION_INDICES, fuse_votes, prototype_vote
from .tensor import Tensor, add, argmax_channels, backward, scale

GRAD_CLIP_NORM = 5.0
CHECKPOINT_MAGIC = b"MSPA"
CHECKPOINT_VERSION = 1
MAX_SEED = 2**24  # seeds are checkpointed as float32 scalars, so stay exact


class CheckpointError(RuntimeError):
    """A checkpoint file is unreadable, truncated, or incompatible."""


class TrainingDiverged(RuntimeError):
    """The total loss became non-finite."""

    def __init__(self, iteration: int, fields: dict):
        super().__init__(f"non-finite total loss at iteration {iteration}: {fields}")
        self.iteration = iteration
        self.fields = fields


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters of one training run."""

    n_prototypes: int = 4
    labeled_batch: int = 4
    unlabeled_batch: int = 4
    lr: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    w_max: float = 0.1
    t_max: int = 2000
    seed: int = 0
    labeled_fraction: float = 0.2
    augment: bool = False
    checkpoint_every: int = 0  # 0 = final checkpoint only
    val_every: int = 200  # 0 = no validation during training
    toggles: LossToggles = LossToggles()
    descriptor: net.NetDescriptor = net.NetDescriptor()

    def __post_init__(self):
        if self.labeled_batch != self.n_prototypes:
            raise ValueError(
                f"labeled_batch must equal n_prototypes (one prototype pair per labeled "
                f"image), got {self.labeled_batch} vs {self.n_prototypes}"
            )
        for name in ("n_prototypes", "labeled_batch", "unlabeled_batch", "t_max"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0 <= self.seed < MAX_SEED:
            raise ValueError(f"seed must be in [0, {MAX_SEED}), got {self.seed}")
        if not 0.0 < self.labeled_fraction <= 1.0:
            raise ValueError(f"labeled_fraction must be in (0, 1], got {self.labeled_fraction}")
        if self.checkpoint_every < 0 or self.val_every < 0:
            raise ValueError("checkpoint_every and val_every must be nonnegative")

    @property
    def schedule(self) -> RampSchedule:
        return RampSchedule(w_max=self.w_max, t_max=self.t_max)


def config_to_dict(config: TrainConfig) -> dict:
    return {
        "n_prototypes": config.n_prototypes,
        "labeled_batch": config.labeled_batch,
        "unlabeled_batch": config.unlabeled_batch,
        "lr": config.lr,
        "adam_beta1": config.adam_beta1,
        "adam_beta2": config.adam_beta2,
        "adam_eps": config.adam_eps,
        "w_max": config.w_max,
        "t_max": config.t_max,
        "seed": config.seed,
        "labeled_fraction": config.labeled_fraction,
        "augment": config.augment,
        "checkpoint_every": config.checkpoint_every,
        "val_every": config.val_every,
        "toggles": {"lpa": config.toggles.lpa, "upa": config.toggles.upa, "spa": config.toggles.spa},
        "descriptor": {
            "widths": list(config.descriptor.widths),
            "feature_dim": config.descriptor.feature_dim,
        },
    }


def config_from_dict(doc: dict) -> TrainConfig:
    """Build a TrainConfig from a JSON-style dict, rejecting unknown keys."""
    defaults = config_to_dict(TrainConfig())

    def check_keys(given: dict, known: dict, where: str):
        for key in given:
            if key not in known:
                raise ValueError(f"unknown config key {where}{key!r}")

    check_keys(doc, defaults, "")
    merged = dict(defaults)
    merged.update(doc)
    toggles_doc = merged["toggles"]
    check_keys(toggles_doc, defaults["toggles"], "toggles.")
    toggles = LossToggles(**{**defaults["toggles"], **toggles_doc})
    desc_doc = merged["descriptor"]
    check_keys(desc_doc, defaults["descriptor"], "descriptor.")
    desc_merged = {**defaults["descriptor"], **desc_doc}
    descriptor = net.NetDescriptor(
        widths=tuple(desc_merged["widths"]), feature_dim=desc_merged["feature_dim"]
    )
    plain = {k: v for k, v in merged.items() if k not in ("toggles", "descriptor")}
    return TrainConfig(toggles=toggles, descriptor=descriptor, **plain)


def config_hash_limbs(config: TrainConfig) -> list[int]:
    """md5 of the canonical config JSON, as eight 16-bit limbs."""
    canon = json.dumps(config_to_dict(config), sort_keys=True).encode()
    digest = hashlib.md5(canon).digest()
    return [int.from_bytes(digest[i : i + 2], "little") for i in range(0, 16, 2)]


# ---------------------------------------------------------------------------
# optimizer


class AdamState:
    """First/second moment estimates plus the shared step counter."""

    def __init__(self, params: net.SegNetParams):
        self.step = 0
        self.m = {name: np.zeros_like(t.data) for name, t in params.items()}
        self.v = {name: np.zeros_like(t.data) for name, t in params.items()}


def clip_gradients(params: net.SegNetParams, max_norm: float = GRAD_CLIP_NORM) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm."""
    total = 0.0
    for _, p in params.items():
        if p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    norm = math.sqrt(total)
    if norm > max_norm:
        factor = np.float32(max_norm / norm)
        for _, p in params.items():
            if p.grad is not None:
                p.grad *= factor
    return norm


def adam_update(params: net.SegNetParams, state: AdamState, config: TrainConfig) -> None:
    """One bias-corrected Adam step over every parameter, in place."""
    state.step += 1
    b1, b2 = config.adam_beta1, config.adam_beta2
    bc1 = np.float32(1.0 - b1**state.step)
    bc2 = np.float32(1.0 - b2**state.step)
    lr = np.float32(config.lr)
    eps = np.float32(config.adam_eps)
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= np.float32(b1)
        m += np.float32(1.0 - b1) * g
        v *= np.float32(b2)
        v += np.float32(1.0 - b2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)


# ---------------------------------------------------------------------------
# checkpoint format: magic, version u32, then {name_len u32, name bytes,
# rank u32, dims u32[rank], payload little-endian f32} records


def _write_record(f, name: str, array: np.ndarray) -> None:
    payload = np.ascontiguousarray(array, dtype="<f4")
    encoded = name.encode("utf-8")
    f.write(struct.pack("<I", len(encoded)))
    f.write(encoded)
    f.write(struct.pack("<I", payload.ndim))
    for dim in payload.shape:
        f.write(struct.pack("<I", dim))
    f.write(payload.tobytes())


def _read_exact(f, n: int, path) -> bytes:
    raw = f.read(n)
    if len(raw) != n:
        raise CheckpointError(f"{path}: truncated checkpoint")
    return raw


def _read_records(f, path) -> dict[str, np.ndarray]:
    records = {}
    while True:
        head = f.read(4)
        if not head:
            return records
        if len(head) != 4:
            raise CheckpointError(f"{path}: truncated checkpoint")
        (name_len,) = struct.unpack("<I", head)
        name = _read_exact(f, name_len, path).decode("utf-8")
        (rank,) = struct.unpack("<I", _read_exact(f, 4, path))
        dims = [struct.unpack("<I", _read_exact(f, 4, path))[0] for _ in range(rank)]
        count = int(np.prod(dims)) if dims else 1
        payload = _read_exact(f, 4 * count, path)
        records[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
    return records


def save_checkpoint(
    path, params: net.SegNetParams, iteration: int, config: TrainConfig, adam: AdamState
) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        for name, p in params.items():
            _write_record(f, f"param/{name}", p.data)
        for name in params.tensors:
            _write_record(f, f"adam/m/{name}", adam.m[name])
        for name in params.tensors:
            _write_record(f, f"adam/v/{name}", adam.v[name])
        _write_record(f, "meta/iteration", np.float32(iteration))
        _write_record(f, "meta/adam_step", np.float32(adam.step))
        _write_record(f, "meta/seed", np.float32(config.seed))
        desc = config.descriptor
        _write_record(
            f, "meta/descriptor", np.array([*desc.widths, desc.feature_dim], dtype=np.float32)
        )
        _write_record(f, "meta/config_hash", np.array(config_hash_limbs(config), dtype=np.float32))
    tmp.replace(path)


@dataclass
class CheckpointData:
    params: net.SegNetParams
    iteration: int
    adam_step: int
    adam_m: dict[str, np.ndarray]
    adam_v: dict[str, np.ndarray]
    seed: int
    config_hash: list[int]


def load_checkpoint(path) -> CheckpointData:
    path = Path(path)
    try:
        f = path.open("rb")
    except OSError as e:
        raise CheckpointError(f"{path}: cannot open ({e})") from e
    with f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: bad checkpoint magic {magic!r}")
        version_raw = f.read(4)
        if len(version_raw) != 4:
            raise CheckpointError(f"{path}: truncated checkpoint")
        (version,) = struct.unpack("<I", version_raw)
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        records = _read_records(f, path)
    for key in ("meta/iteration", "meta/adam_step", "meta/seed", "meta/descriptor", "meta/config_hash"):
        if key not in records:
            raise CheckpointError(f"{path}: missing record {key}")
    desc_vals = [int(v) for v in records["meta/descriptor"]]
    descriptor = net.NetDescriptor(widths=tuple(desc_vals[:3]), feature_dim=desc_vals[3])
    tensors = {}
    adam_m = {}
    adam_v = {}
    for name, _ in net._layer_shapes(descriptor):
        for part in ("kernel", "bias"):
            full = f"{name}.{part}"
            for prefix, dest in (("param/", tensors), ("adam/m/", adam_m), ("adam/v/", adam_v)):
                key = prefix + full
                if key not in records:
                    raise CheckpointError(f"{path}: missing record {key}")
                dest[full] = records[key]
    params = net.SegNetParams(
        descriptor, {name: Tensor(arr, requires_grad=True) for name, arr in tensors.items()}
    )
    return CheckpointData(
        params=params,
        iteration=int(records["meta/iteration"].item()),
        adam_step=int(records["meta/adam_step"].item()),
        adam_m=adam_m,
        adam_v=adam_v,
        seed=int(records["meta/seed"].item()),
        config_hash=[int(v) for v in records["meta/config_hash"]],
    )


# ---------------------------------------------------------------------------
# the training step


def _mean_scalar(terms: list[Tensor]) -> Tensor:
    total = terms[0]
    for term in terms[1:]:
        total = add(total, term)
    return scale(total, 1.0 / len(terms))


def _alignment_losses(
    lab_outs: list[net.NetOutput],
    labeled_batch: list[Sample],
    unl_outs: list[net.NetOutput],
    toggles: LossToggles,
) -> tuple[Tensor | None, Tensor | None, Tensor | None]:
    """LPA, UPA, and SPA for one batch; None where absent or toggled off."""
    if not unl_outs or not (toggles.lpa or toggles.upa or toggles.spa):
        return None, None, None

    pairs = [
        labeled_prototypes(out.feature, argmax_channels(out.probs), s.mask, source_id=s.id)
        for out, s in zip(lab_outs, labeled_batch)
    ]
    valid_pairs = [p for p in pairs if p.both_valid]
    sims_per_image = [[pair_similarity(out.feature, p) for p in valid_pairs] for out in unl_outs]

    l_lpa = None
    if toggles.lpa:
        terms = [
            lpa_loss(out.probs, aggregate_probability(sims))
            for out, sims in zip(unl_outs, sims_per_image)
            if sims
        ]
        l_lpa = _mean_scalar(terms) if terms else None

    l_upa = None
    l_spa = None
    if toggles.upa or toggles.spa:
        vote_states = []
        for out, sims in zip(unl_outs, sims_per_image):
            votes = [prototype_vote(g0, g1) for g0, g1 in sims]
            votes.append(argmax_channels(out.probs))
            vote_states.append(fuse_votes(votes))

        if toggles.upa:
            unl_pairs = [
                extract_prototypes(out.feature, state.pseudo_label)
                for out, state in zip(unl_outs, vote_states)
            ]
            averaged = average_prototypes(unl_pairs)
            if averaged.both_valid:
                terms = [
                    upa_loss(aggregate_probability([pair_similarity(out.feature, averaged)]), s.mask)
                    for out, s in zip(lab_outs, labeled_batch)
                ]
                l_upa = _mean_scalar(terms)

        if toggles.spa:
            terms = []
            for out, state in zip(unl_outs, vote_states):
                if state.n_valid != 4:
                    continue
                regional = {
                    k: regional_prototype(out.feature, out.probs, state.vote_sum, k, 0 if k <= 2 else 1)
                    for k in REGION_INDICES
                }
                term = spa_loss(regional)
                if term is not None:
                    terms.append(term)
            l_spa = _mean_scalar(terms) if terms else None

    return l_lpa, l_upa, l_spa


def train_step(
    params: net.SegNetParams,
    labeled_batch: list[Sample],
    unlabeled_batch: list[Sample],
    t: int,
    config: TrainConfig,
    adam: AdamState,
) -> tuple[net.SegNetParams, LossBundle]:
    """One optimization step; mutates params/adam in place and returns the losses."""
    for s in labeled_batch:
        if s.mask is None:
            raise ValueError(f"labeled sample {s.id} has no mask")
    for _, p in params.items():
        p.grad = None

    toggles = config.toggles
    lab_outs = [net.forward(params, Tensor(s.image)) for s in labeled_batch]
    # unlabeled forward passes only matter to the alignment losses
    needs_unlabeled = toggles.lpa or toggles.upa or toggles.spa
    unl_outs = (
        [net.forward(params, Tensor(s.image)) for s in unlabeled_batch] if needs_unlabeled else []
    )

    l_s = _mean_scalar([supervised_ce(out.probs, s.mask) for out, s in zip(lab_outs, labeled_batch)])
    l_lpa, l_upa, l_spa = _alignment_losses(lab_outs, labeled_batch, unl_outs, config.toggles)
    lambda_t = ramp_weight(config.schedule, t)
    bundle = total_loss(l_s, l_lpa, l_upa, l_spa, config.toggles, lambda_t)

    if not np.isfinite(bundle.total.data):
        raise TrainingDiverged(t, bundle.log_fields())

    backward(bundle.total)
    clip_gradients(params)
    adam_update(params, adam, config)
    return params, bundle


# ---------------------------------------------------------------------------
# the full run


@dataclass
class RunResult:
    final_checkpoint: Path
    metrics: dict
    params: net.SegNetParams = field(repr=False, default=None)


def _draw_batch(
    rng: np.random.Generator,
    labeled: list[Sample],
    unlabeled: list[Sample],
    config: TrainConfig,
) -> tuple[list[Sample], list[Sample]]:
    lab_idx = rng.integers(0, len(labeled), size=config.labeled_batch)
    unl_idx = (
        rng.integers(0, len(unlabeled), size=config.unlabeled_batch) if unlabeled else []
    )
    lab = [labeled[i] for i in lab_idx]
    unl = [unlabeled[i] for i in unl_idx]
    if config.augment:
        lab = [augment(s, rng) for s in lab]
        unl = [augment(s, rng) for s in unl]
    return lab, unl


def run(config: TrainConfig, data_dir, out_dir, resume_from=None) -> RunResult:
    """Train for t_max iterations; write log.jsonl, checkpoints, metrics.json.

    With resume_from set, training continues from that checkpoint and the
    log is appended; the final state is bitwise identical to an
    uninterrupted run of the same config.
    """
    from .evaluate import evaluate_params  # deferred: evaluate imports this module

    data_dir = Path(data_dir)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    train_samples = load_pair_dir(data_dir / "train")
    labeled, unlabeled = split(
        train_samples,
        SplitSpec(labeled_fraction=config.labeled_fraction, seed=config.seed),
        min_labeled=config.n_prototypes,
    )

    def load_eval_split(name: str) -> list[Sample]:
        directory = data_dir / name
        if not (directory / "images").is_dir():
            return []
        return [s for s in load_pair_dir(directory) if s.labeled]

    val_samples = load_eval_split("val")

    if resume_from is not None:
        ckpt = load_checkpoint(resume_from)
        if ckpt.config_hash != config_hash_limbs(config):
            raise CheckpointError(f"{resume_from}: checkpoint was written by a different config")
        params = ckpt.params
        adam = AdamState(params)
        adam.step = ckpt.adam_step
        for name in adam.m:
            adam.m[name] = ckpt.adam_m[name].copy()
            adam.v[name] = ckpt.adam_v[name].copy()
        t_start = ckpt.iteration
        log_mode = "a"
    else:
        params = net.init_params(config.descriptor, config.seed)
        adam = AdamState(params)
        t_start = 0
        log_mode = "w"

    log_path = out_dir / "log.jsonl"
    try:
        with log_path.open(log_mode) as log:
            for t in range(t_start, config.t_max):
                started = time.perf_counter()
                rng = np.random.default_rng((config.seed, t))
                lab_batch, unl_batch = _draw_batch(rng, labeled, unlabeled, config)
                params, bundle = train_step(params, lab_batch, unl_batch, t, config, adam)
                record = {"t": t, **bundle.log_fields()}
                val_due = config.val_every > 0 and (
                    (t + 1) % config.val_every == 0 or t == config.t_max - 1
                )
                if val_due and val_samples:
                    record["val_dsc"] = evaluate_params(params, val_samples).dsc
                record["wall_ms"] = (time.perf_counter() - started) * 1000.0
                log.write(json.dumps(record) + "\n")
                if config.checkpoint_every and (t + 1) % config.checkpoint_every == 0:
                    save_checkpoint(out_dir / f"ckpt_{t + 1:06d}.ckpt", params, t + 1, config, adam)
    except TrainingDiverged as bad:
        (out_dir / "diverged.json").write_text(
            json.dumps({"t": bad.iteration, **bad.fields}, indent=2) + "\n"
        )
        raise

    final_path = out_dir / "final.ckpt"
    save_checkpoint(final_path, params, config.t_max, config, adam)

    metrics: dict = {"n_labeled": len(labeled), "n_unlabeled": len(unlabeled)}
    if val_samples:
        metrics["val"] = evaluate_params(params, val_samples).summary()
    test_samples = load_eval_split("test")
    if test_samples:
        metrics["test"] = evaluate_params(params, test_samples).summary()
    (out_dir / "metrics.json").write_text(json.dumps(metrics, indent=2) + "\n")
    return RunResult(final_checkpoint=final_path, metrics=metrics, params=params)
