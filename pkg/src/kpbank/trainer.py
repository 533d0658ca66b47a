"""Alternating optimization: extractor steps against fixed banks, then bank updates."""

from __future__ import annotations

import json
import logging
import pickle
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .banks import ClutterBank, KeypointBank, init_clutter_bank, init_keypoint_bank
from .errors import CheckpointError, ContractError, DataIOError, NumericError
from .evaluation import evaluate, records_from_predictions
from .extractor import DEFAULT_LAYERS, ExtractorConfig, FeatureExtractor, to_batch
from .inference import feature_maps, predict_batch
from .losses import LossBreakdown, LossConfig, aggregate, total_loss
from .oracle import epoch_average_prototypes
from .sampler import gather, keypoint_cells, sample_clutter

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "kpbank-checkpoint"
CHECKPOINT_VERSION = 1

CLUTTER_MODES = ("bank", "image", "none")
PROTOTYPE_UPDATES = ("momentum", "average")


@dataclass
class TrainConfig:
    batch_size: int = 8
    epochs: int = 30
    learning_rate: float = 0.01
    momentum: float = 0.9
    max_grad_norm: float = 1.0  # 0 disables clipping
    alpha: float = 0.9
    temperature: float = 0.1
    clutter_loss_weight: float = 0.05
    aggregation: str = "mean"
    group_size: int = 20
    num_groups: int = 256
    clutter_radius: int = 2
    clutter_mode: str = "bank"
    prototype_update: str = "momentum"
    average_interval: int = 10  # epochs between full-dataset prototype recomputation
    prototype_init: str = "mean"  # or "random"
    dim: int = 32
    layers: tuple = DEFAULT_LAYERS
    val_fraction: float = 0.1
    seed: int = 0
    checkpoint_interval: int = 5
    dtype: str = "float32"

    def __post_init__(self):
        self.layers = tuple(tuple(int(v) for v in layer) for layer in self.layers)
        for name in ("batch_size", "group_size", "dim", "average_interval", "checkpoint_interval"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be positive")
        if self.epochs < 0 or self.learning_rate < 0 or not 0 <= self.momentum < 1:
            raise ContractError("epochs, learning_rate must be >= 0 and momentum in [0, 1)")
        if self.clutter_mode not in CLUTTER_MODES:
            raise ContractError(f"clutter_mode must be one of {CLUTTER_MODES}")
        if self.prototype_update not in PROTOTYPE_UPDATES:
            raise ContractError(f"prototype_update must be one of {PROTOTYPE_UPDATES}")
        if self.prototype_init not in ("mean", "random"):
            raise ContractError("prototype_init must be 'mean' or 'random'")
        if not 0 <= self.val_fraction < 1:
            raise ContractError("val_fraction must lie in [0, 1)")

    def loss_config(self) -> LossConfig:
        weight = 0.0 if self.clutter_mode == "none" else self.clutter_loss_weight
        return LossConfig(self.temperature, weight, self.aggregation)

    def extractor_config(self) -> ExtractorConfig:
        return ExtractorConfig(self.layers, self.dim, 3, self.seed)

    @property
    def torch_dtype(self) -> torch.dtype:
        return getattr(torch, self.dtype)


@dataclass
class TrainState:
    model: FeatureExtractor
    kp_bank: KeypointBank
    clutter_bank: ClutterBank
    buffers: dict = field(default_factory=dict)  # momentum buffers by parameter name
    epoch: int = 0  # completed epochs
    step: int = 0


def optimizer_step(params: dict, grads: dict, lr: float, buffers: dict, momentum: float = 0.9) -> dict:
    """Classic momentum SGD: ``buf = mu * buf + grad; param -= lr * buf``. Updates in place."""
    with torch.no_grad():
        for name, p in params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ContractError(f"gradient shape {tuple(g.shape)} != parameter shape {tuple(p.shape)} for {name}")
            buf = buffers.get(name)
            if buf is None:
                buf = torch.zeros_like(p)
            elif buf.shape != p.shape:
                raise ContractError(f"momentum buffer shape mismatch for {name}")
            buf = momentum * buf + g
            buffers[name] = buf
            p -= lr * buf
    return params


def clip_gradients(grads: dict, max_norm: float) -> float:
    """Rescale ``grads`` in place so their joint L2 norm is at most ``max_norm``; returns the original norm."""
    total = float(torch.sqrt(sum((g.double() ** 2).sum() for g in grads.values())))
    if total > max_norm:
        for g in grads.values():
            g.mul_(max_norm / total)
    return total


def _group_by_keypoint(batch_cells, batch_feats, num_keypoints: int) -> dict[int, np.ndarray]:
    grouped = {k: [] for k in range(num_keypoints)}
    for cells, feats in zip(batch_cells, batch_feats):
        for k, f in zip(sorted(cells), feats):
            grouped[k].append(f)
    return {k: np.array(v, dtype=np.float64) for k, v in grouped.items() if v}


def _sample_cells(scene, spec, config: TrainConfig, rng):
    kp = keypoint_cells(scene.annotations, spec)
    clutter = [] if config.clutter_mode == "none" else sample_clutter(
        scene.annotations, spec, config.group_size, config.clutter_radius, rng)
    return kp, clutter


def train_step(state: TrainState, batch, config: TrainConfig, rng: np.random.Generator,
               batch_id: str = "") -> LossBreakdown:
    """One extractor update with banks held fixed, followed by the bank updates.

    Returns the batch-aggregated breakdown (terms concatenated over images).
    """
    model = state.model
    loss_config = config.loss_config()
    images = to_batch([s.image for s in batch], config.torch_dtype)
    spec = model.config.grid_spec(images.shape[2], images.shape[3])
    cells = [_sample_cells(s, spec, config, rng) for s in batch]

    fmaps = model(images).permute(0, 2, 3, 1)
    if config.clutter_mode == "bank":
        bank_negatives = torch.as_tensor(state.clutter_bank.vectors(), dtype=fmaps.dtype)
    breakdowns = []
    for fmap, (kp, clutter) in zip(fmaps, cells):
        if config.clutter_mode == "bank":
            negatives = bank_negatives
        elif config.clutter_mode == "image":
            negatives = gather(fmap, clutter).detach()
        else:
            negatives = None
        breakdowns.append(total_loss(fmap, kp, clutter, state.kp_bank, negatives, loss_config))
    loss = aggregate(breakdowns, loss_config)
    if not torch.isfinite(loss):
        raise NumericError(f"non-finite loss {loss.item()} at step {state.step} (batch {batch_id})")

    params = dict(model.named_parameters())
    grads = torch.autograd.grad(loss, list(params.values()), allow_unused=True)
    grads = {n: torch.zeros_like(p) if g is None else g for (n, p), g in zip(params.items(), grads)}
    if config.max_grad_norm > 0:
        clip_gradients(grads, config.max_grad_norm)
    optimizer_step(params, grads, config.learning_rate, state.buffers, config.momentum)

    # bank updates use the features computed before the parameter step
    feats = fmaps.detach().numpy().astype(np.float64)
    if config.prototype_update == "momentum":
        kp_feats = [gather(f, [kp[k] for k in sorted(kp)]) for f, (kp, _) in zip(feats, cells)]
        state.kp_bank.update(_group_by_keypoint([kp for kp, _ in cells], kp_feats, state.kp_bank.num_keypoints))
    if config.clutter_mode == "bank":
        for f, (_, clutter) in zip(feats, cells):
            state.clutter_bank.insert(gather(f, clutter))
    state.step += 1

    return LossBreakdown(
        loss.detach(),
        torch.cat([b.keypoint_terms.detach() for b in breakdowns]),
        torch.cat([b.clutter_terms.detach() for b in breakdowns]),
    )


def collect_features(model: FeatureExtractor, scenes, config: TrainConfig, rng=None):
    """Keypoint features per id and one clutter group per scene, from a no-grad pass."""
    fmaps = feature_maps([s.image for s in scenes], model)
    h, w = scenes[0].image.shape[:2]
    spec = model.config.grid_spec(h, w)
    rng = rng if rng is not None else np.random.default_rng([config.seed, 10_000])
    per_kp = [[] for _ in range(len(scenes[0].annotations))]
    groups = []
    for scene, fmap in zip(scenes, fmaps):
        fmap = fmap.astype(np.float64)
        for k, cell in keypoint_cells(scene.annotations, spec).items():
            per_kp[k].append(gather(fmap, [cell])[0])
        groups.append(gather(fmap, sample_clutter(scene.annotations, spec, config.group_size,
                                                  config.clutter_radius, rng)))
    return [np.array(f).reshape(-1, fmaps.shape[-1]) for f in per_kp], groups


def init_state(train_scenes, config: TrainConfig) -> TrainState:
    model = FeatureExtractor(config.extractor_config()).to(config.torch_dtype)
    num_keypoints = len(train_scenes[0].annotations)
    if config.prototype_init == "mean":
        per_kp, groups = collect_features(model, train_scenes, config)
        kp_bank = init_keypoint_bank(per_kp, num_keypoints, config.dim, config.alpha, config.seed, random_fallback=True)
    else:
        groups = []
        kp_bank = init_keypoint_bank(None, num_keypoints, config.dim, config.alpha, config.seed)
    capacity = config.num_groups if config.clutter_mode == "bank" else 0
    clutter_bank = init_clutter_bank(capacity, config.group_size, config.dim, groups, seed=config.seed)
    return TrainState(model, kp_bank, clutter_bank)


def split_validation(scenes, config: TrainConfig):
    """Deterministic held-out split of ``val_fraction`` of the scenes."""
    n_val = int(round(len(scenes) * config.val_fraction))
    if n_val == 0:
        return list(scenes), []
    perm = np.random.default_rng([config.seed, 20_000]).permutation(len(scenes))
    val_idx = set(perm[:n_val].tolist())
    train = [s for i, s in enumerate(scenes) if i not in val_idx]
    val = [s for i, s in enumerate(scenes) if i in val_idx]
    return train, val


def evaluate_model(state: TrainState, scenes):
    preds = predict_batch([s.image for s in scenes], state.model, state.kp_bank)
    return evaluate(records_from_predictions(scenes, preds))


def run_epoch(state: TrainState, train_scenes, config: TrainConfig) -> float:
    epoch = state.epoch
    rng = np.random.default_rng([config.seed, epoch])
    if config.prototype_update == "average" and epoch > 0 and epoch % config.average_interval == 0:
        per_kp, _ = collect_features(state.model, train_scenes, config, rng=np.random.default_rng([config.seed, epoch, 1]))
        state.kp_bank.set_prototypes(epoch_average_prototypes(per_kp))
    order = rng.permutation(len(train_scenes))
    losses = []
    for b, start in enumerate(range(0, len(order), config.batch_size)):
        batch = [train_scenes[i] for i in order[start:start + config.batch_size]]
        out = train_step(state, batch, config, rng, batch_id=f"epoch {epoch} batch {b}")
        losses.append(float(out.total))
    state.epoch += 1
    return float(np.mean(losses)) if losses else 0.0


def fit(scenes, config: TrainConfig, run_dir=None, val_scenes=None, resume_from=None,
        state: TrainState | None = None):
    """Train on ``scenes``; returns ``(state, metrics)``.

    Without ``val_scenes`` a fraction of ``scenes`` is held out. With
    ``run_dir`` the config snapshot, per-epoch metrics and checkpoints are
    written there.
    """
    scenes = list(scenes)
    if not scenes:
        raise ContractError("training set is empty")
    if val_scenes is None:
        train_scenes, val_scenes = split_validation(scenes, config)
    else:
        train_scenes = scenes
    if resume_from is not None:
        state = load_checkpoint(resume_from)
    elif state is None:
        state = init_state(train_scenes, config)

    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        try:
            run_dir.mkdir(parents=True, exist_ok=True)
            (run_dir / "train_config.json").write_text(json.dumps(asdict(config), indent=2))
        except OSError as exc:
            raise DataIOError(f"cannot write run directory {run_dir}: {exc}") from exc
        if state.epoch == 0:
            save_checkpoint(state, config, run_dir / "checkpoint_epoch0000.pt")

    metrics = []
    while state.epoch < config.epochs:
        t0 = time.perf_counter()
        mean_loss = run_epoch(state, train_scenes, config)
        rec = {"epoch": state.epoch, "mean_loss": mean_loss, "seconds": time.perf_counter() - t0}
        if val_scenes:
            rec["val_pck"] = evaluate_model(state, val_scenes).pck
        metrics.append(rec)
        log.info("epoch %d loss %.4f val_pck %s", state.epoch, mean_loss, rec.get("val_pck"))
        if run_dir is not None:
            try:
                with open(run_dir / "metrics.jsonl", "a") as fh:
                    fh.write(json.dumps(rec) + "\n")
            except OSError as exc:
                raise DataIOError(f"cannot append metrics in {run_dir}: {exc}") from exc
            if state.epoch % config.checkpoint_interval == 0 or state.epoch == config.epochs:
                save_checkpoint(state, config, run_dir / f"checkpoint_epoch{state.epoch:04d}.pt")
    if run_dir is not None:
        save_checkpoint(state, config, run_dir / "checkpoint_final.pt")
    return state, metrics


# -- checkpoints -------------------------------------------------------------

def save_checkpoint(state: TrainState, config: TrainConfig | None, path) -> Path:
    path = Path(path)
    cfg = state.model.config
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "extractor": {"layers": [list(l) for l in cfg.layers], "dim": cfg.dim,
                      "in_channels": cfg.in_channels, "seed": cfg.seed, "stride": cfg.stride},
        "dtype": str(next(state.model.parameters()).dtype).replace("torch.", ""),
        "state_dict": {k: v.detach().clone() for k, v in state.model.state_dict().items()},
        "keypoint_bank": {"prototypes": torch.from_numpy(state.kp_bank.prototypes.copy()),
                          "alpha": state.kp_bank.alpha},
        "clutter_bank": {"capacity": state.clutter_bank.capacity, "group_size": state.clutter_bank.group_size,
                         "dim": state.clutter_bank.dim,
                         "groups": torch.from_numpy(state.clutter_bank.groups.copy()),
                         "tags": torch.from_numpy(state.clutter_bank.tags.copy()),
                         "next_tag": state.clutter_bank.next_tag},
        "buffers": {k: v.detach().clone() for k, v in state.buffers.items()},
        "epoch": state.epoch,
        "step": state.step,
        "train_config": json.dumps(asdict(config)) if config is not None else None,
    }
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(payload, path)
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint {path}: {exc}") from exc
    return path


def load_checkpoint(path, expected_stride: int | None = None) -> TrainState:
    path = Path(path)
    try:
        payload = torch.load(path, weights_only=True)
    except (OSError, RuntimeError, EOFError, pickle.UnpicklingError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT or payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: not a version {CHECKPOINT_VERSION} checkpoint")
    ext = payload["extractor"]
    cfg = ExtractorConfig(tuple(tuple(l) for l in ext["layers"]), ext["dim"], ext["in_channels"], ext["seed"])
    if cfg.stride != ext["stride"] or (expected_stride is not None and cfg.stride != expected_stride):
        raise CheckpointError(f"{path}: stride mismatch")
    model = FeatureExtractor(cfg).to(getattr(torch, payload["dtype"]))
    try:
        model.load_state_dict(payload["state_dict"])
    except RuntimeError as exc:
        raise CheckpointError(f"{path}: parameters do not match architecture: {exc}") from exc
    kb = payload["keypoint_bank"]
    kp_bank = KeypointBank(kb["prototypes"].numpy().copy(), kb["alpha"])
    if kp_bank.dim != cfg.dim:
        raise CheckpointError(f"{path}: prototype dim {kp_bank.dim} != extractor dim {cfg.dim}")
    cb = payload["clutter_bank"]
    clutter = ClutterBank(cb["capacity"], cb["group_size"], cb["dim"], cb["groups"].numpy().copy(),
                          cb["tags"].numpy().copy(), cb["next_tag"])
    return TrainState(model, kp_bank, clutter, dict(payload["buffers"]), payload["epoch"], payload["step"])


def checkpoint_config(path) -> TrainConfig | None:
    try:
        payload = torch.load(Path(path), weights_only=True)
    except (OSError, RuntimeError, EOFError, pickle.UnpicklingError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    raw = payload.get("train_config")
    return TrainConfig(**json.loads(raw)) if raw else None
